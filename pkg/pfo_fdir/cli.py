"""Command-line entry point: pfo-fdir simulate|train|infer|recover|certify|reproduce.

Defaults come from the YAML files under config/ (composed with hydra), a
`--config` file is merged on top, then trailing key=value overrides.
Exit codes: 0 pass, 2 acceptance failure, 1 error.
"""
import argparse
import logging
import os
import pathlib
import sys

import numpy as np
from hydra import compose, initialize_config_dir
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from pfo_fdir.bench.experiments import (EXPERIMENTS, Report, certify_operator, checkpoint_path, make_dataset,
                                        recover_episode, reproduce, run_inference, simulate_measurements,
                                        train_operator)
from pfo_fdir.bench.systems import SYSTEMS, build_benchmark
from pfo_fdir.errors import ConfigurationError, FDIRError
from pfo_fdir.learning.training import load_checkpoint
from pfo_fdir.serialization import read_dataset, read_measurements, write_dataset, write_json, write_measurements
from pfo_fdir.util import config_hash, seed_everything, set_threads_from_env

log = logging.getLogger(__name__)

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "config"

PARSER = argparse.ArgumentParser(prog="pfo-fdir", description="Density-space fault detection, isolation and recovery")
common = argparse.ArgumentParser(add_help=False)
common.add_argument("--config", type=pathlib.Path, default=None, help="YAML or JSON file merged over the defaults")
common.add_argument("--system", choices=SYSTEMS, default=None, help="Benchmark system (default from the config)")
common.add_argument("--seed", type=int, default=None, help="Root seed")
common.add_argument("--out", type=pathlib.Path, default=None, help="Output directory")

commands = PARSER.add_subparsers(dest="command", required=True)
commands.add_parser("simulate", parents=[common], help="Generate a training dataset and a measurement log")
train_parser = commands.add_parser("train", parents=[common], help="Train the flow map and contraction metric")
train_parser.add_argument("--dataset", type=pathlib.Path, default=None, help="Dataset file from `simulate`")
infer_parser = commands.add_parser("infer", parents=[common], help="Fault posterior and continuous estimate")
infer_parser.add_argument("--measurements", type=pathlib.Path, default=None,
                          help="Measurement log from `simulate` (default: simulate the OOD fault)")
recover_parser = commands.add_parser("recover", parents=[common], help="Matched-noise recovery episode")
recover_parser.add_argument("--w-hat", type=float, nargs="+", default=None, help="Fixed fault estimate")
certify_parser = commands.add_parser("certify", parents=[common], help="Certificate of a trained checkpoint")
certify_parser.add_argument("--dataset", type=pathlib.Path, default=None, help="Dataset file from `simulate`")
reproduce_parser = commands.add_parser("reproduce", parents=[common], help="Run a named benchmark experiment")
reproduce_parser.add_argument("name", choices=EXPERIMENTS + ("all",))
for sub in commands.choices.values():
    sub.add_argument("overrides", nargs="*", default=[], help="key=value config overrides")


def _merge(conf, other, source):
    try:
        return OmegaConf.merge(conf, other)
    except OmegaConfBaseException as e:
        raise ConfigurationError(f"{source}: {e}") from e


def load_config(args):
    """Hydra-composed defaults, then the --config file, then key=value overrides and flags."""
    config_dir = pathlib.Path(os.environ.get("PFO_FDIR_CONFIG_DIR", CONFIG_DIR)).resolve()
    if not config_dir.is_dir():
        raise ConfigurationError(f"config directory {config_dir} does not exist")
    with initialize_config_dir(version_base=None, config_dir=str(config_dir)):
        conf = compose(config_name=args.system or "base")
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigurationError(f"config file {args.config} does not exist")
        text = args.config.read_text()
        if text.strip():
            conf = _merge(conf, OmegaConf.create(text), args.config)
    if args.overrides:
        conf = _merge(conf, OmegaConf.from_dotlist(list(args.overrides)), "overrides")
    if args.seed is not None:
        conf.seed = args.seed
    if args.out is not None:
        conf.output.dir = str(args.out)
    return conf


def cmd_simulate(args, conf, bench, out):
    dataset = make_dataset(bench, conf)
    write_dataset(out / "dataset.jsonl", dataset)
    steps = conf.inference.steps or bench.horizon_steps
    times, _, ys = simulate_measurements(bench, bench.ood_fault, steps, conf.inference.measurement_std, conf.seed)
    write_measurements(out / "measurements.jsonl", times, ys, system=bench.name, w_true=bench.ood_fault.w,
                       seed=conf.seed, config_hash=config_hash(conf))
    log.info(f"Wrote {len(dataset)} pairs and {len(ys)} measurements to {out}")
    return EXIT_PASS


def _dataset(args, bench, conf):
    return read_dataset(args.dataset) if args.dataset else make_dataset(bench, conf)


def cmd_train(args, conf, bench, out):
    train_operator(bench, _dataset(args, bench, conf), conf, out)
    log.info(f"Checkpoint written to {checkpoint_path(conf)}")
    return EXIT_PASS


def cmd_infer(args, conf, bench, out):
    if args.measurements:
        head, times, ys = read_measurements(args.measurements)
        w_true = head.get("w_true")
    else:
        steps = conf.inference.steps or bench.horizon_steps
        times, _, ys = simulate_measurements(bench, bench.ood_fault, steps, conf.inference.measurement_std,
                                             conf.seed)
        w_true = bench.ood_fault.w
    model = None
    if conf.inference.prediction == "learned-operator":
        model = load_checkpoint(checkpoint_path(conf))[0]
    fault = None if w_true is None else bench.fault(np.asarray(w_true, dtype=float))
    frame, summary = run_inference(bench, times, ys, conf, model, fault)
    checks = {}
    if "fault_error" in summary:
        checks["fault_error"] = summary["fault_error"] <= conf.experiment.thresholds.fault_error
    report = Report("infer", summary, checks, {"posterior": frame})
    report.write(out, config_hash(conf), conf.seed)
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_recover(args, conf, bench, out):
    model = None
    if conf.recovery.episode.prediction == "learned-operator":
        model = load_checkpoint(checkpoint_path(conf))[0]
    w_hat = args.w_hat if args.w_hat is not None else conf.recovery.w_hat
    episode = recover_episode(bench, conf, model, fault=bench.ood_fault, w_hat=w_hat)
    thr = conf.experiment.thresholds
    checks = {"terminal_improvement": episode.summary["terminal_improvement"] >= thr.terminal_improvement,
              "mean_improvement": episode.summary["mean_improvement"] >= thr.mean_improvement}
    report = Report("recover", episode.summary, checks, {"trajectory": episode.to_frame()})
    report.write(out, config_hash(conf), conf.seed)
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_certify(args, conf, bench, out):
    model, metric, schedule, ckpt = load_checkpoint(checkpoint_path(conf))
    _, table = certify_operator(bench, conf, model, metric, schedule, _dataset(args, bench, conf))
    write_json(out / "certificate.json", {**table, "config_hash": config_hash(conf),
                                          "checkpoint_config_hash": ckpt.get("config_hash"), "seed": conf.seed})
    return EXIT_PASS


def cmd_reproduce(args, conf, bench, out):
    reports = reproduce(args.name, conf, out)
    return EXIT_PASS if all(r.passed for r in reports) else EXIT_FAIL


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer, "recover": cmd_recover,
            "certify": cmd_certify, "reproduce": cmd_reproduce}


def main(argv=None):
    args = PARSER.parse_args(argv)
    try:
        conf = load_config(args)
        logging.basicConfig(level=conf.logging.level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
        set_threads_from_env()
        seed_everything(conf.seed)
        out = pathlib.Path(conf.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, conf, build_benchmark(conf.system), out)
    except FDIRError as e:
        log.error(f"{type(e).__name__}: {e}")
    except Exception:
        log.exception(f"pfo-fdir {args.command} failed")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
