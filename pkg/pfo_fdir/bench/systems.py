"""Benchmark assembly from the `system` config section."""
import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from omegaconf import DictConfig, OmegaConf

from pfo_fdir.bench.toy import ToyParams, build_toy, toy_library
from pfo_fdir.dynamics import ClosedLoopField, DatasetConfig, FaultProfile, SystemModel, simulate
from pfo_fdir.errors import ConfigurationError
from pfo_fdir.spacecraft import (SpacecraftParams, build_spacecraft, loss_of_effectiveness, nominal_initial_state,
                                 nominal_trajectory)

log = logging.getLogger(__name__)

SYSTEMS = ("toy", "spacecraft")


@dataclass
class Benchmark:
    name: str
    system: SystemModel
    dt: float
    horizon_steps: int
    library: List[FaultProfile]
    ood_fault: FaultProfile
    x0: np.ndarray
    initial_cov_scale: float
    params: object = None

    @property
    def box(self):
        return np.zeros(self.system.fault_dim), np.ones(self.system.fault_dim)

    def reference(self, steps=None, t0=0.0):
        """Noise-free nominal closed-loop trajectory, (steps + 1, n)."""
        steps = self.horizon_steps if steps is None else steps
        if self.name == "spacecraft":
            return nominal_trajectory(self.system, self.params, steps, t0, self.x0)
        nominal = ClosedLoopField(self.system, FaultProfile.nominal(self.system.fault_dim))
        return simulate(nominal, self.x0, t0, self.dt, steps, deterministic=True)[:, 0]

    def initial_cov(self):
        return self.initial_cov_scale * np.eye(self.system.state_dim)

    def sample_initial(self, rng, n):
        return rng.multivariate_normal(self.x0, self.initial_cov(), size=n, method="cholesky")

    def fault(self, w):
        if self.name == "spacecraft":
            return loss_of_effectiveness(w)
        return FaultProfile(w)

    def dataset_config(self, conf, seed=0):
        """DatasetConfig from the `dataset` section; the step size and initial law come from the benchmark."""
        steps = conf.get("horizon_steps") or self.horizon_steps
        return DatasetConfig(n_trajectories=conf.get("n_trajectories", 64), horizon_steps=steps, dt=self.dt,
                             substeps=conf.get("substeps", 1), pair_gaps=tuple(conf.get("pair_gaps", (1,))),
                             stride=conf.get("stride", 1), seed=seed, initial_mean=self.x0,
                             initial_cov=self.initial_cov())


def build_benchmark(conf):
    """Benchmark named by conf.name, parameters from conf[conf.name]."""
    name = conf.name
    if name not in SYSTEMS:
        raise ConfigurationError(f"unknown system {name!r}, expected one of {SYSTEMS}")
    section = conf[name]
    if isinstance(section, DictConfig):
        section = OmegaConf.to_container(section, resolve=True)
    if name == "spacecraft":
        params = SpacecraftParams.from_config(section)
        system = build_spacecraft(params)
        library = [loss_of_effectiveness(w, label=j) for j, w in enumerate(section["library"])]
        ood = loss_of_effectiveness(section["ood_fault"])
        x0 = nominal_initial_state(0.0)
        scale = float(section["initial_cov_scale"])
        bench = Benchmark(name, system, params.dt, params.horizon_steps, library, ood, x0, scale, params)
    else:
        params = ToyParams.from_config(section)
        system = build_toy(params)
        library = toy_library([tuple(w) for w in section["library"]])
        bench = Benchmark(name, system, params.dt, params.horizon_steps, library, FaultProfile(section["ood_fault"]),
                          params.initial_mean, params.initial_cov_scale, params)
    if any(f.w.shape != (system.fault_dim,) for f in library + [bench.ood_fault]):
        raise ConfigurationError(f"{name}: every fault needs {system.fault_dim} parameters")
    log.info(f"Built {name} benchmark: n={system.state_dim}, m={system.control_dim}, p={system.fault_dim}, "
             f"{len(library)} library faults")
    return bench
