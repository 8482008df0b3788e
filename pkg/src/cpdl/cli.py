"""Command-line entry point: generate, train, evaluate, sweep.

Every subcommand reads one resolved JSON config (``--config`` plus
``--set key=value`` overrides) and writes into ``--out``::

    cpdl generate --out runs/a --set dgp.I=100 --set dgp.S=1000
    cpdl train    --out runs/a
    cpdl evaluate --out runs/a
    cpdl sweep    --out runs/grid --set sweep.seeds=[0,1,2]
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .datagen import generate_dataset, read_jsonl, write_jsonl
from .encoder import load_checkpoint, make_encoder, save_checkpoint
from .graph import build_grid, count_paths
from .metrics import EvalReport, evaluate_decisions, r2_recovery, signed_correlations, test_loss
from .trainer import MomentSpec, cpdl_loss, estimate_from_dist, train, write_history

log = logging.getLogger("cpdl")

METRIC_COLUMNS = (
    "config_hash",
    "seed",
    "method",
    "I",
    "S",
    "surprise_mean",
    "surprise_sem",
    "disappointment_mean",
    "disappointment_sem",
    "test_loss",
    "r2_location",
    "r2_scale",
    "corr_location",
    "corr_scale",
)
INSTANCE_COLUMNS = ("config_hash", "instance", "method", "assignment", "e_gt", "e_pred", "surprise", "disappointment")

TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
HEADER_FILE = "dataset.header.json"
CHECKPOINT_FILE = "checkpoint.json"
TRAIN_LOG_FILE = "train_log.csv"
METRICS_FILE = "metrics.csv"
INSTANCE_METRICS_FILE = "eval_instances.csv"


def _grid(cfg):
    return build_grid(cfg["grid"]["rows"], cfg["grid"]["cols"])


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path, data) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=1, sort_keys=True)
        f.write("\n")


def _append_csv(path, columns, rows) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, quoting=csv.QUOTE_MINIMAL)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def cmd_generate(cfg: dict) -> Path:
    out = _out(cfg)
    grid = _grid(cfg)
    od = grid.default_od()
    dgp = cfg["dgp"]
    chash = C.config_hash(cfg)
    gt, train_set = generate_dataset(grid, od, cfg["n"], dgp["I"], dgp["S"], dgp["seed"], dgp["second_order"])
    _, test_set = generate_dataset(
        grid, od, cfg["n"], dgp["I_test"], dgp["S"], dgp["seed"], dgp["second_order"], split=1, gt=gt
    )
    write_jsonl(out / TRAIN_FILE, train_set)
    write_jsonl(out / TEST_FILE, test_set)
    header = {
        "rows": grid.rows,
        "cols": grid.cols,
        "n": cfg["n"],
        "I": dgp["I"],
        "I_test": dgp["I_test"],
        "S": dgp["S"],
        "seed": dgp["seed"],
        "beta_mu": gt.beta_mu.tolist(),
        "beta_sigma": gt.beta_sigma.tolist(),
        "config_hash": chash,
        "config": cfg,
    }
    _dump_json(out / HEADER_FILE, header)
    print(
        f"generated I={dgp['I']} (+{dgp['I_test']} test) S={dgp['S']} |E|={grid.n_edges} "
        f"paths={count_paths(grid, od)} -> {out / TRAIN_FILE}"
    )
    return out / TRAIN_FILE


def _observations(instances, spec):
    return [inst.observed(spec) for inst in instances]


def cmd_train(cfg: dict, dataset: str | None = None) -> Path:
    out = _out(cfg)
    path = Path(dataset) if dataset else out / TRAIN_FILE
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found; run `cpdl generate` first")
    instances = read_jsonl(path)
    grid = _grid(cfg)
    spec = MomentSpec(cfg["train"]["moment_order"])
    tc = C.train_config(cfg)
    model = make_encoder(cfg["train"]["encoder"], cfg["n"])
    result = train(model, _observations(instances, spec), grid, grid.default_od(), tc, cfg["train"]["method"], spec)
    chash = C.config_hash(cfg)
    save_checkpoint(
        out / CHECKPOINT_FILE,
        model,
        result.theta,
        seed=tc.seed,
        config_hash=chash,
        method=cfg["train"]["method"],
        moment_order=spec.order,
        best_epoch=result.best_epoch,
    )
    history = [dict(row, config_hash=chash) for row in result.history]
    write_history(out / TRAIN_LOG_FILE, history)
    final = result.history[-1]
    print(
        f"trained {cfg['train']['method']} for {tc.epochs} epochs: "
        f"val loss {result.history[0]['val_loss']:.4f} -> best {result.best_val_loss:.4f} (epoch {result.best_epoch})"
    )
    if not np.isfinite(final["val_loss"]):
        raise FloatingPointError("final validation loss is not finite")
    return out / CHECKPOINT_FILE


def _gt_test_loss(instances, grid, od, tc, spec, seed) -> float:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5,)))
    losses = []
    for inst in instances:
        est = estimate_from_dist(inst.gt_dist, grid, od, tc.K, tc.L, spec, rng)
        losses.append(float(cpdl_loss(inst.phi_bar(spec), est.phi_hat)))
    return float(np.mean(losses))


def cmd_evaluate(cfg: dict, checkpoint: str | None = None, dataset: str | None = None) -> list[dict]:
    out = _out(cfg)
    test_path = Path(dataset) if dataset else out / TEST_FILE
    if not test_path.exists():
        raise FileNotFoundError(f"test dataset {test_path} not found")
    instances = read_jsonl(test_path)
    grid = _grid(cfg)
    od = grid.default_od()
    dec = cfg["decision"]
    spec = MomentSpec(cfg["train"]["moment_order"])
    tc = C.train_config(cfg)
    chash = C.config_hash(cfg)

    model = theta = None
    if any(m in ("cpdl", "reinforce") for m in dec["methods"]):
        ckpt = Path(checkpoint) if checkpoint else out / CHECKPOINT_FILE
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint {ckpt} not found; run `cpdl train` first")
        model, theta, _ = load_checkpoint(ckpt)

    summaries, instance_rows = [], []
    for method in dec["methods"]:
        rows = evaluate_decisions(
            method, instances, grid, dec["num_drivers"], dec["K"], dec["N_eval"], dec["alpha"], dec["seed"], model, theta
        )
        surprise = [r["surprise"] for r in rows]
        disappointment = [r["disappointment"] for r in rows]
        summary = dict(
            config_hash=chash,
            seed=dec["seed"],
            method=method,
            I=cfg["dgp"]["I"],
            S=cfg["dgp"]["S"],
            surprise_mean=float(np.mean(surprise)),
            surprise_sem=EvalReport.sem(surprise),
            disappointment_mean=float(np.mean(disappointment)),
            disappointment_sem=EvalReport.sem(disappointment),
        )
        if method in ("cpdl", "reinforce"):
            loss_rng = np.random.default_rng(np.random.SeedSequence(dec["seed"], spawn_key=(4,)))
            summary["test_loss"] = test_loss(model, theta, _observations(instances, spec), grid, od, tc, spec, loss_rng)
            summary["r2_location"], summary["r2_scale"] = r2_recovery(model, theta, instances)
            summary["corr_location"], summary["corr_scale"] = signed_correlations(model, theta, instances)
        else:
            summary["test_loss"] = _gt_test_loss(instances, grid, od, tc, spec, dec["seed"])
        summaries.append(summary)
        instance_rows += [dict(r, config_hash=chash) for r in rows]
        print(
            f"{method:>9}: surprise {summary['surprise_mean']:.4g} +- {summary['surprise_sem']:.2g}  "
            f"disappointment {summary['disappointment_mean']:.4g}  test loss {summary['test_loss']:.4g}"
        )
    _append_csv(out / INSTANCE_METRICS_FILE, INSTANCE_COLUMNS, instance_rows)
    _append_csv(out / METRICS_FILE, METRIC_COLUMNS, summaries)
    return summaries


def _cell_config(cfg: dict, I: int, S: int, seed: int) -> dict:
    cell = json.loads(json.dumps(cfg))
    cell["dgp"].update(I=I, S=S, seed=seed)
    cell["train"]["seed"] = seed
    cell["decision"]["seed"] = seed
    cell["out"] = str(Path(cfg["out"]) / "cells" / f"I{I}_S{S}_seed{seed}")
    return cell


def _run_cell(cell: dict) -> list[dict]:
    cmd_generate(cell)
    if any(m in ("cpdl", "reinforce") for m in cell["decision"]["methods"]):
        cmd_train(cell)
    return cmd_evaluate(cell)


def sweep_cells(cfg: dict) -> list[tuple[int, int, int]]:
    sw = cfg["sweep"]
    return [(I, S, seed) for I in sw["I"] for S in sw["S"] for seed in sw["seeds"]]


def cmd_sweep(cfg: dict) -> Path:
    """Run every (I, S, seed) cell; cells with rows already in the CSV are skipped."""
    out = _out(cfg)
    sweep_csv = out / "sweep_metrics.csv"
    chash = C.config_hash(cfg)
    done = set()
    if sweep_csv.exists():
        with open(sweep_csv, newline="") as f:
            for row in csv.DictReader(f):
                if row["sweep_hash"] == chash:
                    done.add((int(row["I"]), int(row["S"]), int(row["seed"])))
    todo = [c for c in sweep_cells(cfg) if c not in done]
    print(f"sweep: {len(todo)} of {len(sweep_cells(cfg))} cells to run")
    workers = max(1, int(os.environ.get("CPDL_THREADS", "1")))
    cells = [_cell_config(cfg, *c) for c in todo]
    columns = ("sweep_hash",) + METRIC_COLUMNS
    if workers == 1:
        for key, cell in zip(todo, cells):
            _append_csv(sweep_csv, columns, [dict(r, sweep_hash=chash) for r in _run_cell(cell)])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(_run_cell, cells):
                _append_csv(sweep_csv, columns, [dict(r, sweep_hash=chash) for r in rows])
    return sweep_csv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpdl", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "evaluate", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed for data, training and decisions")
        p.add_argument("--method", choices=C.METHOD_CHOICES)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "evaluate"):
            p.add_argument("--dataset", help="dataset JSONL (default: <out>/train.jsonl or test.jsonl)")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint JSON (default: <out>/checkpoint.json)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.overrides, args.seed, args.method, args.out)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.dataset)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.dataset)
        else:
            cmd_sweep(cfg)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
