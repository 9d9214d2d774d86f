#!/usr/bin/env python
"""
Benchmark experiment script, the hydra counterpart of `pfo-fdir reproduce`.

To run the experiment named in base.yaml (experiment.name),

> python run_experiment.py

To run every experiment on the 2D toy,

> python run_experiment.py --config-name toy experiment.name=all

See https://hydra.cc/docs/advanced/hydra-command-line-flags/ for more options.
"""

import logging
import sys

import hydra
from omegaconf import DictConfig

from pfo_fdir.bench.experiments import reproduce
from pfo_fdir.util import seed_everything, set_threads_from_env


@hydra.main(version_base=None, config_path="../config", config_name="base")
def main(conf: DictConfig) -> int:
    log = logging.getLogger(__name__)
    set_threads_from_env()
    seed_everything(conf.seed)
    reports = reproduce(conf.experiment.name, conf)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        log.warning(f"Acceptance checks failed for {failed}")
        sys.exit(2)
    log.info("All acceptance checks passed")
    return 0


if __name__ == "__main__":
    main()
