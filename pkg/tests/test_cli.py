"""CLI contracts: exit codes, resolved-config snapshots, artifact formats."""
import json

import numpy as np
import pytest

from grace.cli import main
from grace import config as cf
from grace.errors import ConfigError

FAST = [
    "--set", "epochs=2",
    "--set", "batch_size=16",
    "--set", "data_classes=3",
    "--set", "data_input_dim=6",
    "--set", "data_per_class=24",
    "--set", "model_hidden=8",
    "--set", "model_feature_dim=4",
    "--set", "model_lora_rank=2",
    "--set", "attack_iters=3",
    "--set", "awp_period=4",
    "--set", "awp_val_batch=16",
    "--set", "diag_probes=20",
    "--set", "diag_power_iters=10",
    "--set", "diag_lid_k=5",
]


def train_run(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["train", "--mode", "grace", "--seed", "7", "--out", str(out), *FAST, *extra])
    assert code == 0
    return out


def test_train_writes_artifacts_and_snapshot(tmp_path, capsys):
    out = train_run(tmp_path, "run")
    for fname in ("config.txt", "metrics.jsonl", "summary.json", "checkpoint.grk"):
        assert (out / fname).exists(), fname
    resolved = cf.read_config_file(out / "config.txt")
    assert resolved["seed"] == 7
    assert resolved["epochs"] == 2


def test_train_deterministic_same_seed(tmp_path, capsys):
    a = train_run(tmp_path, "a")
    b = train_run(tmp_path, "b")
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_train_warns_on_ignored_lambdas(tmp_path, capsys):
    out = tmp_path / "warn"
    code = main(["train", "--mode", "vanilla_ft", "--out", str(out), *FAST,
                 "--set", "lambda_lar=0.5"])
    assert code == 0
    assert "lambda_lar is ignored" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_unknown_config_key_exits_2_with_key_name(tmp_path, capsys):
    out = tmp_path / "bad"
    code = main(["train", "--out", str(out), "--set", "warp_factor=9"])
    assert code == 2
    assert "warp_factor" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    assert main(["train", "--warp", "9"]) == 2


def test_config_file_roundtrip(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nmode = at\nseed = 3\nattack_eps = 0.07\n")
    settings = cf.resolve(cf.read_config_file(cfg))
    assert settings["mode"] == "at"
    assert settings["attack_eps"] == 0.07
    out = tmp_path / "resolved.cfg"
    cf.write_resolved(settings, out)
    again = cf.resolve(cf.read_config_file(out))
    assert again.values == settings.values


def test_eval_table_and_consistency(tmp_path, capsys):
    out = train_run(tmp_path, "run")
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(out / "checkpoint.grk"),
                 "--config", str(out / "config.txt"), "--out", str(tmp_path / "ev")])
    assert code == 0
    printed = capsys.readouterr().out
    assert "id" in printed and "harmonic mean" in printed
    ev = json.loads((tmp_path / "ev" / "eval.json").read_text())
    summary = json.loads((out / "summary.json").read_text())
    for dom in ("id", "ood", "nat_shift"):
        assert ev["accuracies"][dom]["clean"] == summary["accuracies"][dom]["clean"]
        assert ev["accuracies"][dom]["adv"] == summary["accuracies"][dom]["adv"]
    assert (tmp_path / "ev" / "config.txt").exists()


def test_eval_zero_eps_equals_clean(tmp_path, capsys):
    out = train_run(tmp_path, "run0")
    code = main(["eval", "--checkpoint", str(out / "checkpoint.grk"),
                 "--config", str(out / "config.txt"), "--eps", "0.0",
                 "--out", str(tmp_path / "ev0")])
    assert code == 0
    ev = json.loads((tmp_path / "ev0" / "eval.json").read_text())
    for dom in ("id", "ood", "nat_shift"):
        assert ev["accuracies"][dom]["adv"] == ev["accuracies"][dom]["clean"]


def test_eval_clean_only(tmp_path, capsys):
    out = train_run(tmp_path, "run_clean")
    code = main(["eval", "--checkpoint", str(out / "checkpoint.grk"),
                 "--config", str(out / "config.txt"), "--no-attack",
                 "--out", str(tmp_path / "evc")])
    assert code == 0
    ev = json.loads((tmp_path / "evc" / "eval.json").read_text())
    assert ev["attack"] is None
    assert all(row["adv"] is None for row in ev["accuracies"].values())


def test_eval_shape_mismatch_exits_2(tmp_path, capsys):
    out = train_run(tmp_path, "run_shape")
    code = main(["eval", "--checkpoint", str(out / "checkpoint.grk"),
                 "--config", str(out / "config.txt"), "--set", "data_input_dim=9",
                 "--out", str(tmp_path / "evs")])
    assert code == 2


def test_diagnose_report_roundtrip_and_determinism(tmp_path, capsys):
    out = train_run(tmp_path, "run_diag")
    for name in ("d1", "d2"):
        code = main(["diagnose", "--checkpoint", str(out / "checkpoint.grk"),
                     "--config", str(out / "config.txt"), "--out", str(tmp_path / name)])
        assert code == 0
    r1 = (tmp_path / "d1" / "report.json").read_bytes()
    r2 = (tmp_path / "d2" / "report.json").read_bytes()
    assert r1 == r2
    report = json.loads(r1)
    for key in ("curvature", "cosine_alignment", "delta_lid", "displacement", "bound_terms"):
        assert key in report
    assert "lambda_max" in report["curvature"]
    assert "proximity_kl" in report["bound_terms"]


def test_landscape_center_cell_and_grid(tmp_path, capsys):
    out = train_run(tmp_path, "run_land")
    code = main(["landscape", "--checkpoint", str(out / "checkpoint.grk"),
                 "--config", str(out / "config.txt"), "--grid", "5", "--extent", "0.3",
                 "--out", str(tmp_path / "land")])
    assert code == 0
    payload = json.loads((tmp_path / "land" / "slice.json").read_text())
    assert len(payload["values"]) == 5
    assert all(len(row) == 5 for row in payload["values"])
    assert payload["values"][2][2] == payload["center_loss"]
    d1, d2 = np.array(payload["direction_1"]), np.array(payload["direction_2"])
    assert abs(d1 @ d2) <= 1e-12
    assert abs(np.linalg.norm(d1) - 1) <= 1e-12


def test_landscape_even_grid_exits_2(tmp_path, capsys):
    out = train_run(tmp_path, "run_land2")
    code = main(["landscape", "--checkpoint", str(out / "checkpoint.grk"),
                 "--config", str(out / "config.txt"), "--grid", "4",
                 "--out", str(tmp_path / "land2")])
    assert code == 2


def test_report_prints_summary(tmp_path, capsys):
    out = train_run(tmp_path, "run_rep")
    capsys.readouterr()
    code = main(["report", "--run", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "relative parameter distance" in printed
    assert "metrics records" in printed


def test_report_missing_run_exits_2(tmp_path, capsys):
    assert main(["report", "--run", str(tmp_path / "ghost")]) == 2
