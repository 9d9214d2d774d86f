import pathlib

import numpy as np
import pytest
import torch
from omegaconf import OmegaConf

from pfo_fdir.bench.toy import AffineTestbed, ToyParams, build_toy, toy_library
from pfo_fdir.dynamics import DatasetConfig, generate_dataset, linear_system
from pfo_fdir.learning.interpolants import InterpolantSchedule
from pfo_fdir.learning.networks import FlowMapModel, MetricModel
from pfo_fdir.learning.training import TrainConfig, train

CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "config"

STABLE_A = [[-1.0, 0.5], [0.0, -2.0]]


@pytest.fixture
def linear_sys():
    return linear_system(STABLE_A, noise=0.1)


@pytest.fixture
def affine():
    return AffineTestbed(a=1.0, n=2, noise=0.1)


@pytest.fixture
def toy():
    return build_toy(ToyParams())


@pytest.fixture
def base_conf():
    return OmegaConf.load(CONFIG_DIR / "base.yaml")


def toy_conf(**overrides):
    """base.yaml switched to the toy with small budgets; overrides as dotted keys."""
    conf = OmegaConf.merge(OmegaConf.load(CONFIG_DIR / "base.yaml"), OmegaConf.load(CONFIG_DIR / "toy.yaml"))
    conf.pop("defaults", None)
    return OmegaConf.merge(conf, OmegaConf.from_dotlist([f"{k}={v}" for k, v in overrides.items()]))


@pytest.fixture(scope="session")
def toy_dataset():
    params = ToyParams()
    config = DatasetConfig(n_trajectories=16, horizon_steps=20, dt=params.dt, seed=0,
                           initial_mean=params.initial_mean, initial_cov=params.initial_cov_scale * np.eye(2))
    return generate_dataset(build_toy(params), toy_library(), config)


@pytest.fixture(scope="session")
def toy_checkpoint(tmp_path_factory, toy_dataset):
    """Tiny flow map and metric trained briefly on the toy, saved once per session."""
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("toy") / "checkpoint.pt"
    model = FlowMapModel(2, 1, d_hidden=16, n_layers=2)
    metric = MetricModel(2, 1, d_hidden=8, n_layers=1)
    config = TrainConfig(steps=20, batch_size=32, log_interval=10, silent=True)
    train(model, metric, toy_dataset, InterpolantSchedule(), config, checkpoint_path=path, config_hash="test")
    return path
