"""Command-line entry point and experiment orchestration.

Subcommands: ``pretrain``, ``age-gen``, ``doft``, ``eval``, ``sweep``,
``security``, ``emit-config``. Failures exit nonzero and print
``error: category=<kind> ...`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import aging, config as config_mod
from .data import Dataset, load_idx, split, subsample
from .doft import evaluate, pretrain, train_doft
from .errors import AgelockError, ConfigError
from .network import load_checkpoint, save_checkpoint

log = logging.getLogger("agelock")

BRANCHES = ("authorized", "unauthorized")
MODES = ("functional", "bitexact")
# component ids for hierarchical seeding: root -> component -> trial
SEED_MASK, SEED_PV, SEED_LAYERS = 1, 2, 3

SWEEP_FIELDS = ["sigma", "alpha", "aged_layers", "lam", "branch", "mode", "accuracy",
                "seed", "trial", "mask_seed", "error"]
SUMMARY_FIELDS = ["sigma", "alpha", "aged_layers", "lam", "branch", "mode", "mean", "std",
                  "trials", "failures"]


def security_complexity(sram_cells: int, degree_levels: int) -> float:
    """Base-2 exponent of the brute-force cost ``2**sram_cells * degree_levels``."""
    if int(sram_cells) != sram_cells or int(degree_levels) != degree_levels:
        raise ValueError("cell and level counts must be integers")
    if sram_cells < 1 or degree_levels < 1:
        raise ValueError("cell and level counts must be >= 1")
    return int(sram_cells) + math.log2(int(degree_levels))


def derive_seed(root: int, component: int, trial: int) -> int:
    """Independent 63-bit seed for ``(component, trial)`` under ``root``."""
    state = np.random.SeedSequence([int(root), int(component), int(trial)]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


# ----------------------------------------------------------------------------
# data and artifact helpers


def load_train(cfg) -> tuple[Dataset, Dataset]:
    d = cfg.data
    cfg.require_files("data.train_images", "data.train_labels")
    train = load_idx(d.train_images, d.train_labels, "train")
    if d.train_subset:
        train = subsample(train, d.train_subset, cfg.seed, stratified=True)
    holdout = min(d.val_holdout, len(train) // 5)
    return split(train, holdout, cfg.seed)


def load_test(cfg) -> Dataset:
    d = cfg.data
    cfg.require_files("data.test_images", "data.test_labels")
    test = load_idx(d.test_images, d.test_labels, "test")
    if d.test_subset:
        test = subsample(test, d.test_subset, cfg.seed, stratified=True)
    return test


def make_mask(cfg, shapes, seed: int, sigma=None, alpha=None, aged_layers="config"):
    a = cfg.aging
    sigma = a.sigma if sigma is None else sigma
    alpha = a.alpha if alpha is None else alpha
    layers = a.aged_layers if aged_layers == "config" else aged_layers
    if a.shared:
        mask = aging.shared_mask(shapes, cfg.model.q, sigma, alpha, seed)
    else:
        mask = aging.generate_mask(shapes, cfg.model.q, sigma, alpha, seed, layers)
    if a.pv_std:
        mask = aging.apply_process_variation(mask, a.pv_std, derive_seed(seed, SEED_PV, 0))
    if a.natural_shrink:
        mask = aging.natural_drift(mask, a.natural_shrink)
    return mask


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_history(path: Path, history: list[dict]) -> None:
    if not history:
        path.write_text("epoch\n", encoding="utf-8")
        return
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def _checkpoint(cfg):
    cfg.require_files("paths.checkpoint")
    net = load_checkpoint(cfg.paths.checkpoint)
    if net.q != cfg.model.q or net.n != cfg.model.n:
        raise ConfigError(f"paths.checkpoint: network has q={net.q}, n={net.n}; "
                          f"model section says q={cfg.model.q}, n={cfg.model.n}")
    return net


def _mask(cfg, net):
    if cfg.paths.mask is None:
        return make_mask(cfg, net.shapes, derive_seed(cfg.seed, SEED_MASK, 0))
    cfg.require_files("paths.mask")
    return aging.load_mask(cfg.paths.mask)


# ----------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg, out: Path) -> dict:
    train, val = load_train(cfg)
    test = load_test(cfg)
    t0 = time.perf_counter()
    net, history = pretrain(cfg.model.widths, train, cfg.train_config("pretrain"),
                            cfg.model.q, cfg.model.n, val, cfg.pim_config())
    seconds = time.perf_counter() - t0
    save_checkpoint(net, out / "model.ckpt")
    write_history(out / "history.csv", history)
    acc = evaluate(net, test, None, cfg.pim_config(), cfg.mode, cfg.threads)
    return {"checkpoint": str(out / "model.ckpt"), "test_accuracy": acc, "seconds": seconds}


def cmd_agegen(cfg, out: Path) -> dict:
    shapes = list(zip(cfg.model.widths[:-1], cfg.model.widths[1:]))
    seed = derive_seed(cfg.seed, SEED_MASK, 0)
    mask = make_mask(cfg, shapes, seed)
    aging.save_mask(mask, out / "chip.mask")
    return {"mask": str(out / "chip.mask"), "mask_seed": seed,
            "aged_cells": int(mask.aged_counts().sum()) if mask.n_layers else 0}


def cmd_doft(cfg, out: Path) -> dict:
    net = _checkpoint(cfg)
    mask = _mask(cfg, net)
    train, val = load_train(cfg)
    t0 = time.perf_counter()
    tuned, history = train_doft(net, train, mask, cfg.train_config("doft"), cfg.pim_config(), val)
    seconds = time.perf_counter() - t0
    save_checkpoint(tuned, out / "doft.ckpt")
    if cfg.paths.mask is None:
        aging.save_mask(mask, out / "chip.mask")
    write_history(out / "history.csv", history)
    return {"checkpoint": str(out / "doft.ckpt"), "epochs": len(history), "seconds": seconds}


def cmd_eval(cfg, out: Path, modes=MODES) -> dict:
    net = _checkpoint(cfg)
    mask = _mask(cfg, net)
    test = load_test(cfg)
    pim = cfg.pim_config()
    report = {}
    for mode in modes:
        for branch in BRANCHES:
            chip = mask if branch == "authorized" else None
            report[f"{branch}/{mode}"] = evaluate(net, test, chip, pim, mode, cfg.threads)
    (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def _aged_layer_choice(count, n_layers: int, root: int, trial: int):
    if count is None:
        return None
    if not 0 <= count <= n_layers:
        raise ValueError(f"cannot age {count} of {n_layers} layers")
    rng = np.random.default_rng(derive_seed(root, SEED_LAYERS, trial))
    return sorted(int(i) for i in rng.choice(n_layers, size=count, replace=False))


def sweep_points(cfg):
    s = cfg.sweep
    lams = s.lam if s.retrain else [None]
    return list(itertools.product(s.sigma, s.alpha, s.aged_layers, lams))


def run_sweep(cfg, net, test: Dataset, train=None, val=None, modes=None, on_row=None) -> list[dict]:
    """Evaluate every grid point x trial; returns the rows in grid order."""
    modes = modes or (cfg.mode,)
    pim = cfg.pim_config()
    rows = []
    for sigma, alpha, aged_count, lam in sweep_points(cfg):
        for trial in range(cfg.sweep.trials):
            mask_seed = derive_seed(cfg.seed, SEED_MASK, trial)
            base = {"sigma": sigma, "alpha": alpha,
                    "aged_layers": "" if aged_count is None else aged_count,
                    "lam": "" if lam is None else lam, "seed": cfg.seed, "trial": trial,
                    "mask_seed": mask_seed}
            try:
                layers = _aged_layer_choice(aged_count, len(net.layers), cfg.seed, trial)
                mask = make_mask(cfg, net.shapes, mask_seed, sigma, alpha, layers)
                model = net
                if cfg.sweep.retrain:
                    tc = cfg.train_config("doft", lam=lam, seed=derive_seed(cfg.seed, SEED_MASK + 10, trial))
                    model, _ = train_doft(net, train, mask, tc, pim, val)
                results = [(m, b, evaluate(model, test, mask if b == "authorized" else None, pim, m, cfg.threads))
                           for m in modes for b in BRANCHES]
                new = [dict(base, branch=b, mode=m, accuracy=acc, error="") for m, b, acc in results]
            except (AgelockError, ValueError, ArithmeticError) as exc:
                new = [dict(base, branch="", mode="", accuracy="", error=f"{type(exc).__name__}: {exc}")]
            for row in new:
                rows.append(row)
                if on_row:
                    on_row(row)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    groups: dict = {}
    failures: dict = {}
    order = []
    for row in rows:
        point = (row["sigma"], row["alpha"], row["aged_layers"], row["lam"])
        if row["error"]:
            failures[point] = failures.get(point, 0) + 1
            continue
        key = point + (row["branch"], row["mode"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(float(row["accuracy"]))
    out = []
    for key in order:
        acc = np.array(groups[key])
        out.append(dict(zip(SUMMARY_FIELDS[:6], key), mean=float(acc.mean()), std=float(acc.std()),
                        trials=len(acc), failures=failures.get(key[:4], 0)))
    return out


def cmd_sweep(cfg, out: Path, modes=None) -> dict:
    net = _checkpoint(cfg)
    test = load_test(cfg)
    train = val = None
    if cfg.sweep.retrain:
        train, val = load_train(cfg)
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()

        def emit(row):
            writer.writerow(row)
            fh.flush()

        rows = run_sweep(cfg, net, test, train, val, modes, emit)
    summary = summarize(rows)
    with (out / "sweep_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(summary)
    return {"rows": len(rows), "points": len(summary), "sweep": str(out / "sweep.csv")}


# ----------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agelock", description="Aging-keyed model protection on a simulated SRAM PIM chip.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_help="simulator mode for evaluation"):
        p.add_argument("--config", help="YAML experiment config (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads for evaluation")
        p.add_argument("--mode", choices=MODES, help=mode_help)
        p.add_argument("--checkpoint", help="network checkpoint (overrides paths.checkpoint)")
        p.add_argument("--mask", help="aging mask file (overrides paths.mask)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        return p

    common(sub.add_parser("pretrain", help="train the unprotected baseline"))
    common(sub.add_parser("age-gen", help="generate an aging mask"))
    common(sub.add_parser("doft", help="fine-tune a checkpoint for one aged chip"))
    common(sub.add_parser("eval", help="accuracy on authorized and unauthorized chips"),
           "evaluate only this mode (default: both)")
    common(sub.add_parser("sweep", help="accuracy over a grid of aging settings"))
    sec = sub.add_parser("security", help="brute-force search cost as a power of two")
    sec.add_argument("--cells", type=int, required=True, help="number of SRAM cells")
    sec.add_argument("--levels", type=int, default=1, help="number of distinguishable aging degrees")
    emit = sub.add_parser("emit-config", help="print the default config")
    emit.add_argument("--config", help="print this config with defaults filled in")
    emit.add_argument("--out", help="write to this file instead of stdout")
    return parser


def _resolve(args):
    cfg = config_mod.load_config(args.config) if args.config else config_mod.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    if getattr(args, "checkpoint", None):
        cfg.paths.checkpoint = args.checkpoint
    if getattr(args, "mask", None):
        cfg.paths.mask = args.mask
    return cfg.validate()


def run(args) -> dict | str:
    if args.command == "security":
        return {"exponent": security_complexity(args.cells, args.levels)}
    if args.command == "emit-config":
        cfg = config_mod.load_config(args.config) if args.config else None
        text = config_mod.emit_config(cfg)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
            return {"config": args.out}
        return text
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    if args.command == "pretrain":
        return cmd_pretrain(cfg, out)
    if args.command == "age-gen":
        return cmd_agegen(cfg, out)
    if args.command == "doft":
        return cmd_doft(cfg, out)
    if args.command == "eval":
        return cmd_eval(cfg, out, (args.mode,) if args.mode else MODES)
    if args.command == "sweep":
        return cmd_sweep(cfg, out)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        result = run(args)
    except AgelockError as exc:
        print(f"error: category={exc.category} {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: category=invalid-argument {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: category=io {exc}", file=sys.stderr)
        return 3
    if isinstance(result, str):
        sys.stdout.write(result)
    else:
        print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
