import json

import numpy as np
import pytest

from pfo_fdir.density_transport import GaussianMixture, ParticleEnsemble
from pfo_fdir.errors import ConfigurationError
from pfo_fdir.serialization import (read_dataset, read_ensemble, read_measurements, read_mixture, write_dataset,
                                    write_ensemble, write_json, write_measurements, write_mixture)


def test_dataset_file_roundtrip(tmp_path, toy_dataset):
    path = tmp_path / "dataset.jsonl"
    write_dataset(path, toy_dataset)
    head = json.loads(path.read_text().splitlines()[0])
    assert head["kind"] == "dataset" and head["n"] == 2 and head["p"] == 1
    ds = read_dataset(path)
    assert len(ds) == len(toy_dataset)
    assert np.array_equal(ds.x_t, toy_dataset.x_t) and np.array_equal(ds.seed, toy_dataset.seed)


def test_weighted_ensemble_and_mixture_files(tmp_path):
    ens = ParticleEnsemble(np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([0.25, 0.75]), timestamp=0.5)
    write_ensemble(tmp_path / "ens.jsonl", ens)
    back = read_ensemble(tmp_path / "ens.jsonl")
    assert np.array_equal(back.weights, ens.weights) and back.timestamp == 0.5
    mix = GaussianMixture([0.4, 0.6], [[0.0], [1.0]], [[[1.0]], [[2.0]]])
    write_mixture(tmp_path / "mix.jsonl", mix)
    assert np.array_equal(read_mixture(tmp_path / "mix.jsonl").covs, mix.covs)


def test_measurement_header_and_kind_check(tmp_path):
    path = tmp_path / "meas.jsonl"
    write_measurements(path, [0.0, 0.1], np.zeros((2, 3)), system="toy", w_true=np.array([0.6]), seed=4)
    head, times, ys = read_measurements(path)
    assert head["w_true"] == [0.6] and head["seed"] == 4 and ys.shape == (2, 3)
    with pytest.raises(ConfigurationError):
        read_dataset(path)
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(ConfigurationError):
        read_measurements(tmp_path / "empty.jsonl")


def test_json_is_sorted_and_plain(tmp_path):
    write_json(tmp_path / "out.json", {"b": np.arange(2), "a": {"c": np.float64(1.0)}})
    text = (tmp_path / "out.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": {"c": 1.0}, "b": [0, 1]}
