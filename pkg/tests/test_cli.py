import csv
import json

import numpy as np
import pytest

from cpdl import config as C
from cpdl.cli import cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, main
from cpdl.datagen import read_jsonl
from cpdl.encoder import load_checkpoint, make_encoder
from cpdl.trainer import initial_params

TINY = [
    "grid.rows=3",
    "grid.cols=3",
    "n=3",
    "dgp.I=6",
    "dgp.I_test=2",
    "dgp.S=20",
    "train.K=10",
    "train.epochs=2",
    "train.batch_size=4",
    "decision.num_drivers=2",
    "decision.K=10",
    "decision.N_eval=50",
]


def tiny(tmp_path, *extra, **kw):
    return C.load_config(overrides=TINY + list(extra), out=str(tmp_path), **kw)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_generate_single_instance(tmp_path):
    cfg = tiny(tmp_path, "dgp.I=1")
    cmd_generate(cfg)
    assert len(read_jsonl(tmp_path / "train.jsonl")) == 1
    header = json.loads((tmp_path / "dataset.header.json").read_text())
    assert header["config_hash"] == C.config_hash(cfg)


def test_generate_full_scale(tmp_path):
    cfg = C.load_config(overrides=["dgp.I_test=1"], out=str(tmp_path))
    cmd_generate(cfg)
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    assert len(lines) == 100
    first = json.loads(lines[0])
    assert np.array(first["X"]).shape == (40, 5)
    assert sum(first["p_bar"]) >= 8 - 1e-9  # every path on a 5x5 grid has 8 edges


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        cmd_generate(tiny(tmp_path / d))
    for name in ("train.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_zero_epochs_returns_init(tmp_path):
    cfg = tiny(tmp_path, "train.epochs=0")
    cmd_generate(cfg)
    cmd_train(cfg)
    model, theta, data = load_checkpoint(tmp_path / "checkpoint.json")
    expected = initial_params(make_encoder("mlp", 3), C.train_config(cfg))
    assert theta.tobytes() == expected.tobytes()
    assert data["config_hash"] == C.config_hash(cfg) and data["best_epoch"] == 0
    assert len(read_csv(tmp_path / "train_log.csv")) == 1


def test_reinforce_dispatch(tmp_path):
    cfg = tiny(tmp_path, method="reinforce")
    assert cfg["train"]["lr0"] == 3e-4 and cfg["train"]["plateau_patience"] == 7
    cmd_generate(cfg)
    cmd_train(cfg)
    assert json.loads((tmp_path / "checkpoint.json").read_text())["method"] == "reinforce"


def test_full_epoch_log(tmp_path):
    cfg = tiny(tmp_path, "train.epochs=200", "train.K=5")
    cmd_generate(cfg)
    cmd_train(cfg)
    rows = read_csv(tmp_path / "train_log.csv")
    assert len(rows) == 201
    assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "lr", "wall_time_ms", "config_hash"}
    assert all(np.isfinite(float(r["val_loss"])) for r in rows)


def test_evaluate_rows(tmp_path):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    cmd_train(cfg)
    summaries = cmd_evaluate(cfg)
    assert [s["method"] for s in summaries] == ["cpdl", "gtd-rn", "gtd-ra"]
    inst = read_csv(tmp_path / "eval_instances.csv")
    assert len(inst) == 2 * 3
    assert all(float(r["disappointment"]) <= float(r["surprise"]) for r in inst)
    metrics = read_csv(tmp_path / "metrics.csv")
    assert len(metrics) == 3 and metrics[0]["r2_location"] != ""


def test_evaluate_without_checkpoint_fails(tmp_path):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    with pytest.raises(FileNotFoundError):
        cmd_evaluate(cfg)
    assert main(["evaluate", "--out", str(tmp_path)] + [a for s in TINY for a in ("--set", s)]) == 1


def test_gtd_ra_reduces_to_gtd_rn_when_risk_neutral_and_degenerate(tmp_path):
    cfg = tiny(tmp_path, "decision.alpha=0.0", 'decision.methods=["gtd-rn","gtd-ra"]')
    cmd_generate(cfg)
    # collapse the ground truth to (near) point masses
    insts = read_jsonl(tmp_path / "test.jsonl")
    with open(tmp_path / "test.jsonl", "w") as f:
        for inst in insts:
            d = inst.to_dict()
            d["gt_sigma"] = [1e-9] * len(d["gt_sigma"])
            f.write(json.dumps(d) + "\n")
    cmd_evaluate(cfg)
    rows = read_csv(tmp_path / "eval_instances.csv")
    # both pick a minimum-cost assignment; ties may resolve differently, so compare costs
    cost = {m: [float(r["e_gt"]) for r in rows if r["method"] == m] for m in ("gtd-rn", "gtd-ra")}
    np.testing.assert_allclose(cost["gtd-rn"], cost["gtd-ra"], rtol=1e-6)


def test_sweep_and_resume(tmp_path, capsys):
    cfg = tiny(tmp_path, "train.epochs=1", "sweep.I=[2,3]", "sweep.S=[5,10]", "sweep.seeds=[0,1,2]", "decision.N_eval=10")
    path = cmd_sweep(cfg)
    rows = read_csv(path)
    cells = {(r["I"], r["S"], r["seed"]) for r in rows}
    assert len(cells) == 12 and len(rows) == 12 * 3
    assert {r["sweep_hash"] for r in rows} == {C.config_hash(cfg)}
    assert all(r["config_hash"] for r in rows)
    capsys.readouterr()
    cmd_sweep(cfg)
    assert "0 of 12 cells" in capsys.readouterr().out
    assert len(read_csv(path)) == len(rows)


def test_config_overrides():
    cfg = C.load_config(overrides=["dgp.I=7", "train.lr0=0.01", "sweep.seeds=[4,5]"], seed=3)
    assert cfg["dgp"]["I"] == 7 and cfg["train"]["lr0"] == 0.01 and cfg["sweep"]["seeds"] == [4, 5]
    assert cfg["dgp"]["seed"] == cfg["train"]["seed"] == cfg["decision"]["seed"] == 3
    assert C.load_config(overrides=["train.moment_order=2"])["dgp"]["second_order"] is True
    assert C.config_hash(cfg) == C.config_hash(dict(cfg, out="elsewhere"))
    assert C.config_hash(cfg) != C.config_hash(C.load_config(seed=4))
    with pytest.raises(ValueError):
        C.load_config(overrides=["train.bogus=1"])
    with pytest.raises(ValueError):
        C.load_config(overrides=["dgp.I"])


def test_main_generate(tmp_path):
    argv = ["generate", "--out", str(tmp_path), "--seed", "2"] + [a for s in TINY for a in ("--set", s)]
    assert main(argv) == 0
    assert json.loads((tmp_path / "dataset.header.json").read_text())["seed"] == 2


def test_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"dgp": {"I": 3}, "train": {"method": "reinforce"}}))
    cfg = C.load_config(path)
    assert cfg["dgp"]["I"] == 3 and cfg["train"]["K"] == 500
    assert cfg["decision"]["methods"] == ["reinforce", "gtd-rn", "gtd-ra"]
