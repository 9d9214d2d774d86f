"""JSON-lines container for datasets, ensembles, mixtures and measurement logs.

The first record is a header {"kind", "schema_version", ...}; every following
line is one item.
"""
import json
import logging
import os

import numpy as np

from pfo_fdir.errors import ConfigurationError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_jsonl(path, kind, records, **header):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    head = {"kind": kind, "schema_version": SCHEMA_VERSION, **{k: _jsonable(v) for k, v in header.items()}}
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps({k: _jsonable(v) for k, v in rec.items()}, sort_keys=True) + "\n")
    log.info(f"Wrote {kind} to {path}")


def read_jsonl(path, kind=None):
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise ConfigurationError(f"{path} is empty")
    head, records = lines[0], lines[1:]
    if kind is not None and head.get("kind") != kind:
        raise ConfigurationError(f"{path} holds {head.get('kind')!r}, expected {kind!r}")
    if head.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: unsupported schema version {head.get('schema_version')}")
    return head, records


def write_dataset(path, dataset):
    recs = ({"x_s": dataset.x_s[i], "x_t": dataset.x_t[i], "s": dataset.s[i], "t": dataset.t[i],
             "w": dataset.w[i], "seed": dataset.seed[i]} for i in range(len(dataset)))
    write_jsonl(path, "dataset", recs, n=dataset.state_dim, m=dataset.control_dim, p=dataset.fault_dim,
                root_seed=dataset.root_seed)


def read_dataset(path):
    from pfo_fdir.dynamics import PairDataset

    head, recs = read_jsonl(path, "dataset")
    n, p = head["n"], head["p"]

    def col(k, shape, dtype=float):
        return np.asarray([r[k] for r in recs], dtype=dtype).reshape(shape)

    N = len(recs)
    return PairDataset(col("x_s", (N, n)), col("x_t", (N, n)), col("s", (N,)), col("t", (N,)), col("w", (N, p)),
                       col("seed", (N,), int), head["root_seed"], head["m"])


def write_ensemble(path, ensemble):
    recs = ({"x": x, "weight": w} for x, w in zip(ensemble.points, ensemble.weights))
    write_jsonl(path, "ensemble", recs, n=ensemble.dim, timestamp=ensemble.timestamp)


def read_ensemble(path):
    from pfo_fdir.density_transport import ParticleEnsemble

    head, recs = read_jsonl(path, "ensemble")
    return ParticleEnsemble(np.asarray([r["x"] for r in recs]), np.asarray([r["weight"] for r in recs]),
                            head["timestamp"])


def write_mixture(path, mixture):
    recs = ({"weight": b, "mean": m, "cov": S} for b, m, S in zip(mixture.weights, mixture.means, mixture.covs))
    write_jsonl(path, "mixture", recs, n=mixture.dim)


def read_mixture(path):
    from pfo_fdir.density_transport import GaussianMixture

    _, recs = read_jsonl(path, "mixture")
    return GaussianMixture(np.asarray([r["weight"] for r in recs]), np.asarray([r["mean"] for r in recs]),
                           np.asarray([r["cov"] for r in recs]))


def write_measurements(path, times, ys, **header):
    write_jsonl(path, "measurements", ({"t": t, "y": y} for t, y in zip(times, ys)), **header)


def read_measurements(path):
    head, recs = read_jsonl(path, "measurements")
    return head, np.asarray([r["t"] for r in recs]), np.asarray([r["y"] for r in recs])


def write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_deep_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _deep_jsonable(v):
    if isinstance(v, dict):
        return {str(k): _deep_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_deep_jsonable(x) for x in v]
    return _jsonable(v)
