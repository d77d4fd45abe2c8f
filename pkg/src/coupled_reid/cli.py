"""Command line: gradcheck, train, ablate, gaps.

Exit codes: 0 success, 1 failed check, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, camera, gradcheck, labels
from .config import RunConfig, load_config
from .errors import ConfigError, InvalidSpec
from .models import save_checkpoint
from .synthetic import make_benchmark
from .training import MODES, fit, init_state

METRIC_COLUMNS = [
    "epoch", "lr", "loss_ce", "loss_dnet", "loss_dim", "loss_go", "loss_lo",
    "n_clusters", "n_pos_pairs", "base_weight", "pair_precision", "pair_recall",
    "rank1", "rank5", "rank10", "mAP",
]
ABLATE_METRICS = ["rank1", "rank5", "rank10", "mAP"]

logger = logging.getLogger("coupled_reid")


def _benchmark(cfg: RunConfig, seed: int):
    return make_benchmark(cfg.source, cfg.target, seed, cfg.eval_fraction, cfg.source_heldout_per_id)


def run_training(cfg: RunConfig, seed: int, out_dir: Path | None = None) -> dict:
    """Train on the seeded benchmark; returns the final metrics row.

    With ``out_dir`` set, writes the manifest first, then the metrics CSV
    (appended per epoch), periodic checkpoints and ``result.json``.
    """
    train_cfg = replace(cfg.train, seed=seed)
    run_cfg = replace(cfg, train=train_cfg)
    try:
        bench = _benchmark(cfg, seed)
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from None
    callback = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir / "checkpoints"
        paths = {"metrics": "metrics.csv", "result": "result.json", "checkpoints": "checkpoints"}
        manifest = {
            "config": run_cfg.to_dict(), "seed": seed, "code_version": __version__,
            "outputs": paths, "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        metrics_path = out_dir / "metrics.csv"
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)

        def callback(state, row):
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
            every = cfg.checkpoint_every
            if every and (row["epoch"] % every == 0 or row["epoch"] == train_cfg.epochs):
                ckpt_dir.mkdir(exist_ok=True)
                models = {"encoder": state.encoder, "dnet": state.dnet}
                if state.classifier is not None:
                    models["classifier"] = state.classifier
                save_checkpoint(ckpt_dir / f"epoch_{row['epoch']:03d}.ckpt", models)

    t0 = time.perf_counter()
    state = fit(bench, train_cfg, callback)
    final = dict(state.history[-1])
    if out_dir is not None:
        result = {"eval": {k: final.get(k) for k in ABLATE_METRICS + ["n_queries", "n_skipped"]},
                  "final_epoch": final, "seconds": time.perf_counter() - t0}
        (out_dir / "result.json").write_text(json.dumps(result, indent=2))
    return final


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return v


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(args.instances, args.tolerance, args.seed)
    text = json.dumps(report, indent=2)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "gradcheck.json").write_text(text)
    print(text)
    return 0 if report["passed"] else 1


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg.train = replace(cfg.train, mode=args.mode)
    seed = cfg.train.seed if args.seed is None else args.seed
    final = run_training(cfg, seed, Path(args.out_dir))
    print(json.dumps({k: final.get(k) for k in ABLATE_METRICS + ["n_queries", "n_skipped"]}, indent=2))
    return 0


def ablation_cells(cfg: RunConfig) -> list[tuple[str, object]]:
    """One-factor-at-a-time cells: each grid value with every other option at its default."""
    return [(name, v) for name, values in cfg.grid.items() for v in values]


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg.train = replace(cfg.train, mode=args.mode)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.seeds
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, value in ablation_cells(cfg):
        cell = replace(cfg, train=replace(cfg.train, **{name: value}))
        finals = [run_training(cell, s) for s in seeds]
        row = {"parameter": name, "value": value, "n_seeds": len(seeds)}
        for m in ABLATE_METRICS:
            row[f"{m}_median"] = float(np.median([f[m] for f in finals]))
        rows.append(row)
        logger.info("cell %s=%s rank1 %.4f", name, value, row["rank1_median"])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} cells to {out / 'ablation.csv'}")
    return 0


def cmd_gaps(args) -> int:
    """Camera gaps of the initial target bank and the base weight under its first annotation."""
    cfg = load_config(args.config)
    seed = cfg.train.seed if args.seed is None else args.seed
    try:
        bench = _benchmark(cfg, seed)
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from None
    state = init_state(bench, replace(cfg.train, seed=seed))
    t = cfg.train
    pred = labels.predict_labels(state.bank.rows, t.alpha, t.k1, t.k2, t.lambda_rr, t.min_cluster_size)
    table = camera.refresh_base_weight(state.gaps, pred.positive, state.bank.camera_ids)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "camera_gaps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cam_a", "cam_b", "gap", "base_weight", "pair_weight"])
        for a in range(table.n_cameras):
            for b in range(table.n_cameras):
                w.writerow([a, b, repr(float(table.gap[a, b])), repr(table.base_weight),
                            repr(float(table.gap[a, b] + table.base_weight))])
    print(f"base weight {table.base_weight:.6f}; wrote {out / 'camera_gaps.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coupled-reid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="certify analytic gradients against finite differences")
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="accepted for symmetry; the suite uses fixed instance sizes")
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train one run and write its artifacts")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--out-dir", default="runs/train")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="one-factor sweeps, median over seeds per cell")
    a.add_argument("--config")
    a.add_argument("--seeds", help="comma-separated; overrides the config's list")
    a.add_argument("--mode", choices=MODES)
    a.add_argument("--out-dir", default="runs/ablate")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gaps", help="dump the camera gap table and base weight as CSV")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--out-dir", default="runs/gaps")
    c.set_defaults(func=cmd_gaps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
