import json

import numpy as np
import pytest

from pfo_fdir.bench.experiments import (Report, certify_operator, make_dataset, operator_gap, ood_single, ood_sweep,
                                        reproduce, run_inference, separation, simulate_measurements,
                                        train_operator)
from pfo_fdir.bench.metrics import distance_series, fault_error, improvement, state_errors, summarize
from pfo_fdir.bench.systems import build_benchmark
from pfo_fdir.density_transport import ParticleEnsemble
from pfo_fdir.errors import ArgumentError, ConfigurationError
from tests.conftest import toy_conf

TOL = 1e-12


def test_improvement_factor():
    assert abs(improvement(10.58, 0.9909) - 10.58 / 0.9909) < TOL
    assert round(improvement(10.58, 0.9909), 2) == 10.68
    assert improvement(0.0, 0.0) == 1.0 and improvement(1.0, 0.0) == float("inf")
    with pytest.raises(ArgumentError):
        improvement(-1.0, 1.0)


def test_state_errors_and_summary():
    ref = np.zeros((4, 2))
    base = np.tile([3.0, 4.0], (4, 1))
    rec = np.tile([0.6, 0.8], (4, 1))
    assert np.allclose(state_errors(base, ref), 5.0)
    summary = summarize(base, rec, ref, [0.5], [0.4])
    assert abs(summary["terminal_improvement"] - 5.0) < TOL and abs(summary["mean_improvement"] - 5.0) < TOL
    assert abs(summary["fault_error"] - 0.1) < TOL
    assert abs(fault_error([1.0, 1.0], [1.0, 0.0]) - 1.0) < TOL
    with pytest.raises(ArgumentError):
        state_errors(base, ref[:3])


def test_distance_series():
    rng = np.random.default_rng(0)
    seq = [ParticleEnsemble(rng.standard_normal((10, 2))) for _ in range(3)]
    assert np.allclose(distance_series(seq, seq), 0.0)
    assert np.allclose(distance_series(seq, seq, "mmd2"), 0.0, atol=TOL)
    with pytest.raises(ArgumentError):
        distance_series(seq, seq, "kl")
    with pytest.raises(ArgumentError):
        distance_series(seq, seq[:2])


def test_build_toy_benchmark():
    bench = build_benchmark(toy_conf().system)
    assert bench.name == "toy" and bench.system.state_dim == 2 and bench.system.fault_dim == 1
    assert len(bench.library) == 2 and np.allclose(bench.ood_fault.w, [0.6])
    ref = bench.reference()
    assert ref.shape == (bench.horizon_steps + 1, 2) and np.allclose(ref[0], bench.x0)
    lo, hi = bench.box
    assert np.array_equal(lo, [0.0]) and np.array_equal(hi, [1.0])


def test_build_spacecraft_benchmark(base_conf):
    bench = build_benchmark(base_conf.system)
    assert bench.system.state_dim == 10 and bench.system.fault_dim == 4 and len(bench.library) == 6
    assert bench.reference(steps=5).shape == (6, 10)


def test_build_benchmark_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        build_benchmark(toy_conf(**{"system.name": "pendulum"}).system)
    with pytest.raises(ConfigurationError):
        build_benchmark(toy_conf(**{"system.toy.ood_fault": "[0.1,0.2]"}).system)


def test_report_writes_summary_and_frames(tmp_path):
    import pandas as pd

    report = Report("demo", {"value": np.float64(1.5)}, {"ok": True, "bad": False},
                    {"series": pd.DataFrame({"t": [0.0, 1.0]})})
    assert not report.passed
    report.write(tmp_path, "hash", 7)
    payload = json.loads((tmp_path / "demo.json").read_text())
    assert payload["summary"]["value"] == 1.5 and payload["seed"] == 7 and payload["config_hash"] == "hash"
    assert payload["passed"] is False and "version" in payload
    assert (tmp_path / "demo_series.csv").read_text().splitlines()[0] == "t"


def test_reproduce_rejects_unknown_experiment(tmp_path):
    with pytest.raises(ConfigurationError):
        reproduce("nonexistent", toy_conf(), tmp_path)


def test_operator_gap_needs_checkpoint():
    conf = toy_conf()
    with pytest.raises(ConfigurationError):
        operator_gap(build_benchmark(conf.system), conf)


def test_inference_identifies_library_fault():
    conf = toy_conf(**{"inference.n_particles": 64, "inference.steps": 30, "inference.mle_every": 15,
                       "mle.n_starts": 2})
    bench = build_benchmark(conf.system)
    fault = bench.library[1]
    times, states, ys = simulate_measurements(bench, fault, conf.inference.steps, conf.inference.measurement_std, 0)
    assert ys.shape == (31, 2) and states.shape == (31, 2)
    frame, summary = run_inference(bench, times, ys, conf, true_fault=fault)
    assert summary["map_index"] == 1 and summary["posterior_max"] > 0.95, f"summary {summary}"
    assert len(frame) == 31 and {"posterior0", "posterior1", "loglik0", "w_hat0"} <= set(frame.columns)
    assert summary["fault_error"] < 0.5


def test_separation_experiment_is_reproducible(tmp_path):
    conf = toy_conf(**{"experiment.separation_rollouts": 3, "experiment.separation_particles": 32})
    report = separation(build_benchmark(conf.system), conf)
    frame = report.frames["rollouts"]
    assert len(frame) == 3 and np.all(frame.bound > 0) and np.all(frame.separation > 0)
    assert "within_bound" in report.checks
    first = reproduce("separation", conf, tmp_path / "a")[0]
    second = reproduce("separation", conf, tmp_path / "b")[0]
    assert first.summary == second.summary
    for name in ("separation.json", "separation_rollouts.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ood_sweep_structure():
    conf = toy_conf(**{"experiment.sweep_faults": 2, "experiment.sweep_steps": 15, "mle.n_starts": 1})
    report = ood_sweep(build_benchmark(conf.system), conf)
    frame = report.frames["faults"]
    assert len(frame) == 2 and {"w_true0", "w_hat0", "error", "objective"} <= set(frame.columns)
    assert np.all((frame.w_hat0 >= 0.0) & (frame.w_hat0 <= 1.0))
    assert report.summary["n_faults"] == 2


def test_train_certify_and_operator_gap(tmp_path):
    conf = toy_conf(**{"train.steps": 5, "train.batch_size": 16, "train.log_interval": 5, "train.silent": True,
                       "dataset.n_trajectories": 8, "dataset.horizon_steps": 10, "model.d_hidden": 8,
                       "metric.d_hidden": 8, "certify.n_samples": 32, "certify.k": 4,
                       "experiment.gap_steps": 3, "experiment.gap_particles": 16, "output.dir": str(tmp_path)})
    bench = build_benchmark(conf.system)
    dataset = make_dataset(bench, conf)
    model, metric, schedule, history = train_operator(bench, dataset, conf, tmp_path)
    assert (tmp_path / "checkpoint.pt").is_file() and (tmp_path / "train_log.jsonl").is_file()
    assert history[-1]["step"] == 5
    cert, table = certify_operator(bench, conf, model, metric, schedule, dataset)
    assert {"certificate", "endpoint_residual", "fmm_residual_bound", "certificate_physical"} <= set(table)
    assert cert.m_upper >= cert.m_lower > 0 and cert.n_samples > 0
    report = operator_gap(bench, conf, model, cert)
    frame = report.frames["series"]
    assert len(frame) == 3 and np.all(np.diff(frame.bound) >= 0)


@pytest.mark.slow
def test_toy_ood_single_recovers():
    conf = toy_conf(**{"recovery.episode.prediction": "true-flow"})
    report = ood_single(build_benchmark(conf.system), conf)
    assert report.summary["inference_error"] < 0.2, f"summary {report.summary}"
    assert report.summary["episode"]["terminal_improvement"] > 1.0
