"""``titan`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import harness, plots
from .cfcsa import DatasetManifest, generate_dataset
from .errors import ConfigError, TitanError
from .predictor import Hyper, train

log = logging.getLogger("titan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

FULL_LN = {"L_list": list(range(5, 11)), "N_list": list(range(5, 16))}


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return d


def _out_dir(args) -> Path:
    root = args.out_dir or os.environ.get("TITAN_OUT_DIR") or "titan_out"
    p = Path(root) / args.command
    p.mkdir(parents=True, exist_ok=True)
    return p


def _with_seed(d: dict, args) -> dict:
    return d if args.seed is None else {**d, "seed": args.seed}


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, default=float))
    return path


def _full_warning(args, what: str):
    if args.full:
        warnings.warn(f"--full selects large {what}; expect many hours of runtime", RuntimeWarning,
                      stacklevel=2)


def cmd_gen_data(args) -> int:
    d = _with_seed(_load_config(args.config), args)
    if args.full:
        _full_warning(args, "dataset grids")
        d = {**d, **FULL_LN}
    manifest = DatasetManifest.from_dict(d)
    out = Path(args.out) if args.out else _out_dir(args) / "dataset.jsonl"
    stats = generate_dataset(manifest, out, workers=args.threads)
    print(f"wrote {stats['records']} records to {out}; mean frozen fraction {stats['mean_frozen_fraction']:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    d = _load_config(args.config)
    allowed = {"dataset", "epochs", "lr", "batch_size", "hyper", "seed"}
    if set(d) - allowed:
        raise ConfigError(f"train config: unknown keys {sorted(set(d) - allowed)}")
    dataset = args.dataset or d.get("dataset")
    if not dataset:
        raise ConfigError("dataset: no dataset path given")
    if not Path(dataset).exists():
        raise ConfigError(f"dataset: file not found: {dataset}")
    seed = args.seed if args.seed is not None else d.get("seed", 0)
    hyper = None
    if "hyper" in d:
        hyper = Hyper.from_dict(d["hyper"])
    out_dir = _out_dir(args)
    ck = Path(args.out) if args.out else out_dir / "checkpoint.json"
    report, _ = train(dataset, hyper, seed, d.get("epochs", 100), d.get("lr", 1e-3),
                      d.get("batch_size", 16), checkpoint=ck, resume=args.resume)
    _write_json(ck.with_suffix(".report.json"), {"config": {**d, "seed": seed}, "report": report.to_dict()})
    last = report.val_loss[-1] if report.val_loss else float("nan")
    print(f"checkpoint {ck}; validation loss {report.initial_val_loss} -> {last}")
    return EXIT_OK


def cmd_run(args) -> int:
    d = _with_seed(_load_config(args.config), args)
    if args.checkpoint:
        d["checkpoint"] = args.checkpoint
    if args.tau is not None:
        d["tau"] = args.tau
    problem = harness.ProblemConfig.from_dict(d)
    rec = harness.run_problem(problem, harness.derive_seed(problem.seed, 0, 0))
    path = _write_json(_out_dir(args) / "run_record.json", rec.to_dict(curves=True))
    for s, r in rec.results.items():
        print(f"{s:9s} E={r.final_energy:+.6f} dE={r.delta_e:+.6f} frozen={r.frozen_label} "
              f"shift_evals={r.shift_evals}")
    print(f"record: {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    d = _with_seed(_load_config(args.config), args)
    if args.full:
        _full_warning(args, "(L, N) grids")
        d = {**d, **FULL_LN}
    config = harness.SweepConfig.from_dict(d)
    out = _out_dir(args)
    rows = harness.run_sweep(config, workers=args.threads)
    harness.write_rows_csv(rows, harness.SWEEP_COLUMNS, out / "sweep.csv", config.to_dict())
    summary = harness.cell_summary(rows)
    _write_json(out / "sweep_summary.json", {"config": config.to_dict(), "cells": summary})
    paths = harness.sweep_heatmaps(config, rows, out)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} rows ({failed} failed); csv {out / 'sweep.csv'}; heatmaps {', '.join(map(str, paths))}")
    return EXIT_OK


def cmd_bench_bp(args) -> int:
    d = _with_seed(_load_config(args.config), args)
    config = harness.BenchConfig.from_dict(d)
    res = harness.run_bench(config, _out_dir(args))
    for s, rows in res["scans"].items():
        from .initializer import loglog_slope
        print(f"{s}: log-log slope {loglog_slope(rows):+.3f}")
    for r in res["ratios"]:
        print(f"N={r['N']} L={r['L']} enhanced/uniform variance ratio {r['ratio']:.3f}")
    return EXIT_OK


def cmd_convergence(args) -> int:
    d = _with_seed(_load_config(args.config), args)
    seeds = d.pop("seeds", 5)
    problem = harness.ProblemConfig.from_dict(d)
    res = harness.run_convergence(problem, seeds, problem.seed)
    out = _out_dir(args)
    cfg = {**problem.to_dict(), "seeds": seeds}
    paths = harness.write_convergence(res, out, cfg)
    summary = {"config": cfg, "final_energy_mean": {s: float(e[:, -1].mean()) for s, e in res.energies.items()}}
    if "titan" in res.grad_norms and "baseline" in res.grad_norms:
        summary["titan_crossing_iterations"] = res.crossing_iterations("titan")
    _write_json(out / "convergence_summary.json", summary)
    print(json.dumps(summary["final_energy_mean"]), "->", ", ".join(map(str, paths)))
    return EXIT_OK


def cmd_intensity_map(args) -> int:
    d = _with_seed(_load_config(args.config), args)
    if args.full:
        _full_warning(args, "(L, N) grids")
        d = {**d, **FULL_LN}
    config = harness.IntensityConfig.from_dict(d)
    out = _out_dir(args)
    maps = harness.run_intensity_maps(config)
    for m in maps:
        plots.intensity_image(m["grid"], f"freeze intensity L={m['L']} N={m['N']}",
                              out / f"intensity_L{m['L']}_N{m['N']}.svg", config.to_dict())
    _write_json(out / "intensity_maps.json",
                {"config": config.to_dict(), "layer_contrast": harness.layer_contrast(maps),
                 "cells": [{**m, "grid": np.asarray(m["grid"]).tolist()} for m in maps]})
    print(f"{len(maps)} maps in {out}; mean first-minus-last layer intensity {harness.layer_contrast(maps):+.3f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "bench-bp": cmd_bench_bp,
    "convergence": cmd_convergence,
    "intensity-map": cmd_intensity_map,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", help="output root (default: $TITAN_OUT_DIR or ./titan_out)")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--full", action="store_true", help="large grids: L 5..10, N 5..15 (slow)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="titan", description="VQE parameter-freezing workbench")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("gen-data", "train"):
            sp.add_argument("--out", help="output file path")
        if name == "train":
            sp.add_argument("--dataset", help="dataset JSONL (overrides the config)")
            sp.add_argument("--resume", help="checkpoint to continue training from")
        if name == "run":
            sp.add_argument("--checkpoint", help="predictor checkpoint")
            sp.add_argument("--tau", type=float, help="freeze threshold in percent")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TitanError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
