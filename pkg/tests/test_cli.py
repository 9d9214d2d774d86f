import json

import pytest

from pfo_fdir.cli import EXIT_ERROR, EXIT_FAIL, EXIT_PASS, PARSER, main

SMALL = ["dataset.n_trajectories=4", "dataset.horizon_steps=10", "inference.steps=10"]


def test_parser_accepts_overrides_and_fault_estimate():
    args = PARSER.parse_args(["recover", "--system", "toy", "a.b=1", "--w-hat", "0.5"])
    assert args.command == "recover" and args.overrides == ["a.b=1"] and args.w_hat == [0.5]
    args = PARSER.parse_args(["reproduce", "separation", "seed=3"])
    assert args.name == "separation" and args.overrides == ["seed=3"]


def test_unknown_experiment_is_a_usage_error():
    with pytest.raises(SystemExit):
        main(["reproduce", "everything"])


def test_simulate_writes_identical_files_on_rerun(tmp_path):
    argv = ["simulate", "--system", "toy", "--seed", "5", "--out", str(tmp_path)] + SMALL
    assert main(argv) == EXIT_PASS
    first = {p: (tmp_path / p).read_bytes() for p in ("dataset.jsonl", "measurements.jsonl")}
    assert main(argv) == EXIT_PASS
    for name, content in first.items():
        assert (tmp_path / name).read_bytes() == content, f"{name} changed between identical runs"
    head = json.loads(first["measurements.jsonl"].splitlines()[0])
    assert head["system"] == "toy" and head["seed"] == 5 and head["w_true"] == [0.6]


def test_infer_from_measurement_log(tmp_path):
    assert main(["simulate", "--system", "toy", "--out", str(tmp_path)] + SMALL) == EXIT_PASS
    code = main(["infer", "--system", "toy", "--out", str(tmp_path), "--measurements",
                 str(tmp_path / "measurements.jsonl"), "inference.n_particles=32", "inference.mle_every=5",
                 "mle.n_starts=1"])
    assert code in (EXIT_PASS, EXIT_FAIL)
    payload = json.loads((tmp_path / "infer.json").read_text())
    assert "fault_error" in payload["checks"] and payload["passed"] == (code == EXIT_PASS)
    assert (tmp_path / "infer_posterior.csv").is_file()


def test_recover_with_fixed_estimate(tmp_path):
    code = main(["recover", "--system", "toy", "--out", str(tmp_path), "recovery.episode.prediction=true-flow",
                 "recovery.episode.steps=10", "recovery.episode.n_particles=32", "recovery.horizon=5",
                 "--w-hat", "0.6"])
    assert code in (EXIT_PASS, EXIT_FAIL)
    payload = json.loads((tmp_path / "recover.json").read_text())
    assert payload["summary"]["w_hat"] == [0.6] and payload["summary"]["replans"] == 2
    assert (tmp_path / "recover_trajectory.csv").is_file()


def test_certify_without_checkpoint_fails(tmp_path):
    assert main(["certify", "--system", "toy", "--out", str(tmp_path)]) == EXIT_ERROR


def test_unknown_override_key_fails(tmp_path):
    assert main(["simulate", "--system", "toy", "--out", str(tmp_path), "no_such_section.value=1"]) == EXIT_ERROR


def test_config_files_merge_over_defaults(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert main(["simulate", "--system", "toy", "--config", str(empty), "--out", str(tmp_path / "a")] + SMALL) == 0
    as_json = tmp_path / "conf.json"
    as_json.write_text(json.dumps({"seed": 9}))
    assert main(["simulate", "--system", "toy", "--config", str(as_json), "--out", str(tmp_path / "b")] + SMALL) == 0
    head = json.loads((tmp_path / "b" / "measurements.jsonl").read_text().splitlines()[0])
    assert head["seed"] == 9
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == EXIT_ERROR


def test_train_then_certify(tmp_path):
    tiny = SMALL + ["train.steps=5", "train.batch_size=16", "train.log_interval=5", "train.silent=true",
                    "model.d_hidden=8", "metric.d_hidden=8"]
    assert main(["train", "--system", "toy", "--out", str(tmp_path)] + tiny) == EXIT_PASS
    assert (tmp_path / "checkpoint.pt").is_file()
    assert main(["certify", "--system", "toy", "--out", str(tmp_path), "certify.n_samples=32",
                 "certify.k=4"] + tiny) == EXIT_PASS
    table = json.loads((tmp_path / "certificate.json").read_text())
    assert {"certificate", "fmm_residual_bound", "checkpoint_config_hash"} <= set(table)
    assert table["certificate"]["m_upper"] >= table["certificate"]["m_lower"]


def test_recover_with_learned_operator_needs_checkpoint(tmp_path):
    code = main(["recover", "--system", "toy", "--out", str(tmp_path), "recovery.episode.prediction=learned-operator",
                 "--w-hat", "0.6"])
    assert code == EXIT_ERROR and not (tmp_path / "recover.json").exists()
