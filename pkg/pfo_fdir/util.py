import hashlib
import logging
import os
import random

import numpy as np
import torch
from omegaconf import DictConfig, OmegaConf

from pfo_fdir.errors import NumericError

log = logging.getLogger(__name__)


def seed_everything(seed=0):
    torch.manual_seed(seed)
    np.random.seed(seed)
    random.seed(seed)


def set_threads_from_env(var="PFO_FDIR_THREADS"):
    n = os.environ.get(var)
    if n:
        torch.set_num_threads(int(n))
        log.info(f"Using {n} torch threads ({var})")


def spawn_rngs(root_seed, n):
    """Independent generators, stream i derived from (root_seed, i)."""
    children = np.random.SeedSequence(int(root_seed)).spawn(int(n))
    return [np.random.default_rng(c) for c in children]


def check_finite(value, term, index=None):
    """Raise NumericError naming `term` if `value` has NaN/Inf entries."""
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        where = "" if index is None else f" at index {index}"
        raise NumericError(f"non-finite value in {term}{where}", term=term, index=index)
    return value


def config_hash(conf):
    if isinstance(conf, DictConfig):
        conf = OmegaConf.to_container(conf, resolve=True)
    text = OmegaConf.to_yaml(OmegaConf.create(conf), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def psd_sqrt(S):
    """Symmetric square root with eigenvalues clipped at zero."""
    vals, vecs = np.linalg.eigh(sym(S))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def project_psd(S):
    vals, vecs = np.linalg.eigh(sym(S))
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def as_batch(x):
    """Promote a single point (n,) to a batch (1, n); return (batch, was_single)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False
