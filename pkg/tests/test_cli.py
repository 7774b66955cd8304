import json
import subprocess
import sys

import numpy as np
import pytest

from blockdraft.core import Vocab
from blockdraft.harness.cli import main
from blockdraft.harness.io import read_csv, read_json, read_traces
from blockdraft.harness.metrics import MetricsReport, compute_metrics
from blockdraft.models import deserialize_model, random_drafter, random_target, serialize_model


def _config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture
def model_files(tmp_path):
    g = np.random.default_rng(0)
    v = Vocab(4)
    t = tmp_path / "target.json"
    d = tmp_path / "drafter.json"
    t.write_bytes(serialize_model(random_target(v, 1, g, eos_logit=-2.0)))
    d.write_bytes(serialize_model(random_drafter(v, 1, 4, g)))
    return str(t), str(d)


def test_unknown_subcommand_exits_nonzero_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "blockdraft", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "verify-lossless" in r.stdout


def test_missing_model_file_gives_error_record(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _config(tmp_path, {"target": str(tmp_path / "nope.json")})
    assert main(["decode", "--config", cfg, "--out", str(out)]) == 1
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"] == "FileNotFoundError" and rec["command"] == "decode"
    assert read_json(out / "error.json")["error"] == "FileNotFoundError"


def test_bad_config_keys_rejected(tmp_path, capsys):
    cfg = _config(tmp_path, {"k": 4, "blocksize": 3})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_missing_config_file(tmp_path, capsys):
    assert main(["bench", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_non_object_config(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    assert main(["decode", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_oracle_budget_exceeded_is_reported(tmp_path, capsys):
    cfg = _config(tmp_path, {"max_len": 12, "n": 10})
    assert main(["verify-lossless", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "OracleBudgetError"


def test_failed_lossless_check_exits_nonzero_but_keeps_report(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = _config(tmp_path, {"n": 200, "max_len": 2, "ks": [1]})
    assert main(["verify-lossless", "--config", cfg, "--out", str(out)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "CheckFailed"
    rep = read_json(out / "lossless_report.json")
    assert rep["pass"] is False and rep["per_k"][0]["n_samples"] == 200


def test_decode_with_model_files(tmp_path, model_files):
    t, d = model_files
    out = tmp_path / "o"
    cfg = _config(tmp_path, {"target": t, "drafter": d, "k": 4, "max_new": 12, "prompt": [1]})
    assert main(["decode", "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
    (tr,) = read_traces(out / "trace.jsonl")
    dec = read_json(out / "decoded.json")
    assert list(tr.output) == dec["output"] and dec["seed"] == 7
    header = json.loads((out / "trace.jsonl").read_text().splitlines()[0])
    assert header["type"] == "header" and header["k"] == 4 and header["T"] == 1.0
    assert header["target_hash"] and header["drafter_hash"]


def test_decode_rejects_drafter_as_target(tmp_path, model_files):
    _, d = model_files
    cfg = _config(tmp_path, {"target": d, "drafter": d})
    assert main(["decode", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_bench_metrics_recomputable_from_traces(tmp_path, model_files):
    t, d = model_files
    out = tmp_path / "o"
    cfg = _config(tmp_path, {"target": t, "drafter": d, "k": 4, "n_runs": 15, "prompts": [[0], [2]]})
    assert main(["bench", "--config", cfg, "--out", str(out)]) == 0
    again = compute_metrics(read_traces(out / "traces.jsonl"))
    assert again == MetricsReport.from_dict(read_json(out / "metrics.json"))
    hist = {int(r["length"]): int(r["count"]) for r in read_csv(out / "accept_hist.csv")}
    assert hist == again.accept_len_hist


def test_train_with_target_file(tmp_path, model_files):
    t, _ = model_files
    out = tmp_path / "o"
    cfg = _config(tmp_path, {"target": t, "stage": 1, "epochs": 3, "lr": 1.0, "max_offset": 4,
                             "corpus": {"n": 100, "max_len": 10}})
    assert main(["train", "--config", cfg, "--seed", "2", "--out", str(out)]) == 0
    dr = deserialize_model((out / "drafter.json").read_bytes())
    assert dr.max_offset == 4
    curve = read_csv(out / "loss_curve.csv")
    assert [int(r["epoch"]) for r in curve] == [0, 1, 2]
    rep = read_json(out / "train_report.json")
    assert rep["config"]["seed"] == 2 and rep["verdict"] in ("stable", "unstable", "diverged")

    # continue with Stage II from the saved drafter
    out2 = tmp_path / "o2"
    cfg2 = _config(tmp_path, {"target": t, "init_drafter": str(out / "drafter.json"), "stage": 2,
                              "epochs": 2, "r_max": 4, "corpus": {"n": 100, "max_len": 10}}, "c2.json")
    assert main(["train", "--config", cfg2, "--out", str(out2)]) == 0


def test_sweep_k_needs_block_drafter(tmp_path, model_files):
    t, _ = model_files
    cfg = _config(tmp_path, {"target": t, "drafter": t})
    assert main(["sweep-k", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_sweep_k_with_model_files(tmp_path, model_files):
    t, d = model_files
    out = tmp_path / "o"
    cfg = _config(tmp_path, {"target": t, "drafter": d, "ks": [4, 1, 2], "n_runs": 10})
    assert main(["sweep-k", "--config", cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "sweep_k.csv")
    assert [int(r["k"]) for r in rows] == [1, 2, 4]
    assert float(rows[0]["tau"]) <= 1.0
