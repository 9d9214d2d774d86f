"""Joint training of the flow map and contraction metric, checkpoints and gradient checks."""
import copy
import logging
import os
import pathlib
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
import torch
from tqdm import tqdm

from pfo_fdir.density_transport import pushforward
from pfo_fdir.errors import ArgumentError, CheckpointError, NumericError
from pfo_fdir.learning.callbacks import BaseCallback
from pfo_fdir.learning.interpolants import InterpolantSchedule
from pfo_fdir.learning.loggers import Logger
from pfo_fdir.learning.losses import LossSample, PairBatch, loss_endpoint, total_loss
from pfo_fdir.learning.networks import DTYPE, build_model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lambda_ep: float = 1.0
    lambda_sg: float = 0.1
    lambda_ctr: float = 0.1
    lambda_cert: float = 0.01
    c_alpha: float = 1.0
    c_kappa: float = 0.1
    omega0_lower: float = 1.0
    batch_size: int = 256
    steps: int = 20000
    learning_rate: float = 1e-3
    gradient_clip: Optional[float] = 10.0
    log_interval: int = 100
    seed: int = 0
    silent: bool = False

    def __post_init__(self):
        for k in ("lambda_ep", "lambda_sg", "lambda_ctr", "lambda_cert", "c_alpha", "c_kappa"):
            if getattr(self, k) < 0:
                raise ArgumentError(f"{k} must be >= 0, got {getattr(self, k)}")
        if not 0.0 < self.omega0_lower <= 1.0:
            raise ArgumentError(f"omega0_lower must lie in (0, 1], got {self.omega0_lower}")
        if self.batch_size < 1 or self.steps < 0 or self.log_interval < 1:
            raise ArgumentError("batch_size and log_interval must be >= 1, steps >= 0")

    @classmethod
    def from_config(cls, conf, seed=None):
        kw = {k: conf[k] for k in cls.__dataclass_fields__ if k in conf}
        if seed is not None:
            kw["seed"] = seed
        return cls(**kw)

    def omega0(self):
        """Terminal-path density omega_0(r) = lo + 2 (1 - lo) r, which integrates to 1 and is >= lo."""
        if self.omega0_lower == 1.0:
            return None
        lo = self.omega0_lower
        return lambda r: lo + 2.0 * (1.0 - lo) * r


def make_pair_batch(model, dataset):
    x_s = torch.as_tensor(dataset.x_s, dtype=DTYPE)
    x_t = torch.as_tensor(dataset.x_t, dtype=DTYPE)
    cond = model.condition(dataset.s, dataset.t, dataset.w, batch=len(dataset))
    return PairBatch(x_s, x_t, cond)


def fit_normalizer(model, metric, dataset):
    """State/displacement statistics and time scales from the dataset, written into the model buffers."""
    states = np.concatenate([dataset.x_s, dataset.x_t])
    x_mean, x_std = states.mean(0), states.std(0)
    disp_std = (dataset.x_t - dataset.x_s).std(0)
    time_scale = float(np.max(np.abs(dataset.s))) or 1.0
    gap_scale = float(np.max(dataset.t - dataset.s))
    model.set_normalizer(x_mean, x_std, disp_std, time_scale, gap_scale)
    if hasattr(metric, "set_normalizer"):
        metric.set_normalizer(x_mean, x_std)
    return {"x_mean": x_mean, "x_std": x_std, "disp_std": disp_std, "time_scale": time_scale,
            "gap_scale": gap_scale}


def _parameters(model, metric):
    return [p for p in list(model.parameters()) + list(metric.parameters()) if p.requires_grad]


def train(model, metric, dataset, schedule, config: TrainConfig, logger: Optional[Logger] = None,
          callbacks: List[BaseCallback] = (), checkpoint_path=None, config_hash=None):
    """Adam on L_FMM + lambda_ep L_ep + lambda_sg L_sg + lambda_ctr L_ctr + lambda_cert L_cert.

    Returns (model, metric, history) with one history entry per logging
    interval holding the interval mean of every term. A non-finite loss
    restores the last good parameters, writes them to `checkpoint_path` if
    given and raises NumericError.
    """
    if len(dataset) == 0:
        raise ArgumentError("training dataset is empty")
    if not model.fault_dim == dataset.fault_dim:
        raise ArgumentError(f"model expects {model.fault_dim} fault parameters, dataset has {dataset.fault_dim}")
    stats = fit_normalizer(model, metric, dataset)
    pairs = make_pair_batch(model, dataset)
    generator = torch.Generator().manual_seed(int(config.seed))
    optimizer = torch.optim.Adam(_parameters(model, metric), lr=config.learning_rate)
    omega0 = config.omega0()
    if logger is not None:
        logger.log_hyperparams({"train": asdict(config), "model": model.descriptor(), "metric": metric.descriptor(),
                                "parameters": {"model": count_parameters(model), "metric": count_parameters(metric)},
                                "normalizer": stats, "n_pairs": len(dataset)})
    for callback in callbacks:
        callback.on_fit_start(optimizer, config)

    history, window = [], []
    last_good = (copy.deepcopy(model.state_dict()), copy.deepcopy(metric.state_dict()))
    model.train()
    metric.train()
    for step in tqdm(range(config.steps), unit="step", desc="train", disable=config.silent):
        idx = torch.randint(len(pairs), (min(config.batch_size, len(pairs)),), generator=generator)
        sample = LossSample.draw(len(idx), model.state_dim, generator)
        loss, parts = total_loss(model, metric, pairs[idx], schedule, sample, config, omega0=omega0)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good[0])
            metric.load_state_dict(last_good[1])
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, metric, schedule, history, config_hash, callbacks)
            bad = [k for k, v in parts.items() if not torch.isfinite(v)]
            raise NumericError(f"non-finite training loss at step {step} in {bad}", term=",".join(bad), index=step)
        optimizer.zero_grad()
        loss.backward()
        if config.gradient_clip:
            torch.nn.utils.clip_grad_norm_(_parameters(model, metric), config.gradient_clip)
        optimizer.step()

        values = {k: float(v) for k, v in parts.items()}
        values["total"] = float(loss)
        window.append(values)
        for callback in callbacks:
            callback.on_step_end(step, values)
        if (step + 1) % config.log_interval == 0 or step + 1 == config.steps:
            entry = {k: float(np.mean([v[k] for v in window])) for k in window[0]}
            entry["step"] = step + 1
            history.append(entry)
            window = []
            last_good = (copy.deepcopy(model.state_dict()), copy.deepcopy(metric.state_dict()))
            if logger is not None:
                logger.log_metrics({k: v for k, v in entry.items() if k != "step"}, step + 1)

    model.eval()
    metric.eval()
    for callback in callbacks:
        callback.on_fit_end(history)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, metric, schedule, history, config_hash, callbacks)
    return model, metric, history


@torch.no_grad()
def apply_operator(model, ensemble, s, t, w):
    """Push every particle through Phi_{0,1} conditioned on (s, t, w); weights are kept."""
    cond = model.condition(s, t, np.asarray(w, dtype=float).reshape(1, -1), batch=ensemble.size)
    zeros = torch.zeros(ensemble.size, 1, dtype=DTYPE)

    def terminal_map(x):
        x = torch.as_tensor(x, dtype=DTYPE)
        return model(x, zeros, zeros + 1.0, cond).numpy()

    return pushforward(ensemble, terminal_map, timestamp=t)


def gradient_check(closure, parameters, n_coords=20, eps=1e-6, seed=0, floor=1e-6):
    """Compare autograd against central differences on randomly chosen parameter coordinates.

    Args:
        closure: zero-argument callable returning a scalar loss tensor
        parameters: tensors the gradient is taken with respect to
    Returns:
        list of (analytic, finite_difference, relative_error)
    """
    parameters = [p for p in parameters if p.requires_grad]
    grads = torch.autograd.grad(closure(), parameters, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(parameters, grads)]
    sizes = np.array([p.numel() for p in parameters])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for f in flat:
        j = int(np.searchsorted(offsets, f, side="right") - 1)
        k = int(f - offsets[j])
        p = parameters[j].view(-1)
        with torch.no_grad():
            orig = p[k].item()
            p[k] = orig + eps
            up = closure().item()
            p[k] = orig - eps
            down = closure().item()
            p[k] = orig
        fd = (up - down) / (2 * eps)
        analytic = grads[j].view(-1)[k].item()
        out.append((analytic, fd, abs(analytic - fd) / max(abs(analytic), abs(fd), floor)))
    return out


def save_checkpoint(path, model, metric, schedule, history, config_hash=None, callbacks=()):
    checkpoint = {
        "schema_version": CHECKPOINT_VERSION,
        "architecture": {"model": model.descriptor(), "metric": metric.descriptor()},
        "model_state_dict": model.state_dict(),
        "metric_state_dict": metric.state_dict(),
        "schedule": {"gamma0": float(schedule.gamma0), "kind": schedule.kind},
        "history": list(history),
        "config_hash": config_hash,
    }
    for callback in callbacks:
        callback.on_checkpoint_save(checkpoint)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(checkpoint, str(path))
    log.info(f"Saved checkpoint to {str(path)}")


def load_checkpoint(path, callbacks=()):
    """Returns (model, metric, schedule, checkpoint dict)."""
    if not pathlib.Path(path).is_file():
        raise CheckpointError(f"checkpoint {path} not found; run `pfo-fdir train` first")
    checkpoint = torch.load(str(path), map_location="cpu")
    if checkpoint.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {checkpoint.get('schema_version')}")
    model = build_model(checkpoint["architecture"]["model"])
    metric = build_model(checkpoint["architecture"]["metric"])
    model.load_state_dict(checkpoint["model_state_dict"])
    metric.load_state_dict(checkpoint["metric_state_dict"])
    model.eval()
    metric.eval()
    for callback in callbacks:
        callback.on_checkpoint_load(checkpoint)
    log.info(f"Loaded checkpoint from {str(path)}")
    return model, metric, InterpolantSchedule(**checkpoint["schedule"]), checkpoint


def endpoint_residual(model, dataset, schedule, n_samples=4096, seed=0):
    """Unweighted Monte-Carlo estimate of the terminal-path residual integral on `dataset`."""
    pairs = make_pair_batch(model, dataset)
    g = torch.Generator().manual_seed(int(seed))
    idx = torch.randint(len(pairs), (n_samples,), generator=g)
    sample = LossSample.draw(n_samples, model.state_dim, g)
    _, raw = loss_endpoint(model, pairs[idx], schedule, sample)
    return float(raw.detach())


def count_parameters(module):
    n = sum(p.numel() for p in module.parameters() if p.requires_grad)
    log.info(f"Number of trainable parameters: {n}")
    return n

