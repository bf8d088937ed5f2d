"""Command line: generate, train, evaluate, ablate, search, export-attention.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import load_run_config
from .errors import ConfigError, DataError, StmoeError
from .io import write_stflow
from .synthgen import PRESETS, PatternSpec, SynthConfig, builtin_city, generate
from .flow_core import GridSpec


def _threads():
    n = os.environ.get("STMOE_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ConfigError(f"STMOE_THREADS must be an integer, got {n!r}") from None
    torch.use_deterministic_algorithms(True, warn_only=True)


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------

PROFILE_BUILDERS = ("commuting", "residential", "commercial", "expressway")


def synth_config_from_json(path, seed: int | None) -> SynthConfig:
    """Either ``{"preset": name, ...overrides}`` or a full grid/patterns spec."""
    from . import synthgen

    d = json.loads(Path(path).read_text())
    allowed = {"version", "name", "preset", "grid", "patterns", "weeks", "seed", "weekend_shift", "noise"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {path}; allowed: {sorted(allowed)}")
    over = {k: d[k] for k in ("weeks", "weekend_shift", "noise") if k in d}
    s = seed if seed is not None else int(d.get("seed", 0))
    if "preset" in d:
        return replace(builtin_city(d["preset"]), seed=s, **over)
    grid = GridSpec.from_dict(d["grid"])
    patterns = []
    for p in d.get("patterns", []):
        prof = p["profile"]
        if isinstance(prof, str):
            if prof not in PROFILE_BUILDERS:
                raise ConfigError(f"unknown profile {prof!r}; choose one of {PROFILE_BUILDERS} or give an array")
            prof = getattr(synthgen, f"{prof}_profile")(grid.steps_per_day, float(p.get("scale", 1.0)))
        patterns.append(PatternSpec(p["name"], np.asarray(p["mask"]), np.asarray(prof), float(p.get("noise_scale", 1.0))))
    return SynthConfig(grid, patterns, seed=s, name=d.get("name", "custom"), **over)


def cmd_generate(args):
    if bool(args.preset) == bool(args.config):
        raise ConfigError("give exactly one of --preset or --config")
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; available presets: {', '.join(PRESETS)}")
        cfg = builtin_city(args.preset, seed=args.seed or 0)
    else:
        cfg = synth_config_from_json(args.config, args.seed)
    data = generate(cfg)
    digest = write_stflow(args.out, data.series, data.externals, data.schema, data.truth_masks,
                          [{**p, "preset": cfg.name, "seed": cfg.seed, "weeks": cfg.weeks,
                            "weekend_shift": cfg.weekend_shift} for p in data.patterns])
    print(f"wrote {args.out} ({len(data.series)} intervals, {data.series.grid.height}x{data.series.grid.width})")
    print(f"manifest sha256 {digest}")


def _run_config(args):
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "er_variant", None):
        cfg.loss = replace(cfg.loss, er_variant=args.er_variant)
    if getattr(args, "ntop", None) is not None:
        cfg.loss = replace(cfg.loss, n_top=args.ntop)
        if args.ntop > cfg.model.K:
            raise ConfigError(f"--ntop {args.ntop} exceeds K={cfg.model.K}")
    return cfg


def cmd_train(args):
    from .pipeline import run_training

    cfg = _run_config(args)
    res = run_training(cfg, resume=args.resume, log=None if args.quiet else print)
    print(f"best epoch {res.best_epoch}  val_mse {res.best_val_mse:.6f}  -> {res.out}")


def cmd_evaluate(args):
    from .pipeline import evaluate_checkpoint

    if args.ablate_gs and args.ablate_gt:
        raise ConfigError("--ablate-gs and --ablate-gt are mutually exclusive")
    variant = "no_gs" if args.ablate_gs else "no_gt" if args.ablate_gt else None
    report = evaluate_checkpoint(args.checkpoint, args.data, variant=variant, split=args.split,
                                 quade_n=args.quade_n)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        with open(out / "metrics.csv", "w") as fh:
            m = report["metrics"]
            fh.write("split,variant,mse,rmse,mae,mape,n\n")
            fh.write(f"{report['split']},{report['variant']},{m['mse']!r},{m['rmse']!r},{m['mae']!r},"
                     f"{'' if m['mape'] is None else repr(m['mape'])},{m['n']}\n")
        if "quade" in report:
            np.savetxt(out / "quade.csv", np.asarray(report["quade"]), delimiter=",", fmt="%.6g")
        if "match" in report:
            np.savetxt(out / "match_correlation.csv", np.asarray(report["match"]["correlation"]),
                       delimiter=",", fmt="%.6f")
    _print_json(report)


def cmd_ablate(args):
    from .pipeline import evaluate_checkpoint, run_training

    base = _run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for variant in ("full", "no_gs", "no_gt"):
        for s in seeds:
            cfg = replace(base, seed=s, model=replace(base.model, variant=variant),
                          out=str(Path(base.out) / f"{variant}_seed{s}"))
            run_training(cfg, log=None)
            rep = evaluate_checkpoint(Path(cfg.out) / "best.ckpt", cfg.data)
            rows.append({"variant": variant, "seed": s, **rep["metrics"]})
            print(f"{variant:6s} seed {s}: test mse {rep['metrics']['mse']:.4f}")
    Path(base.out).mkdir(parents=True, exist_ok=True)
    summary = {v: float(np.mean([r["mse"] for r in rows if r["variant"] == v])) for v in ("full", "no_gs", "no_gt")}
    (Path(base.out) / "ablation.json").write_text(json.dumps({"rows": rows, "mean_test_mse": summary}, indent=2) + "\n")
    _print_json(summary)


def cmd_search(args):
    from .pipeline import load_data
    from .training import grid_search

    cfg = _run_config(args)

    def parse(s, typ):
        return tuple(typ(v) for v in s.split(",")) if s else None

    windows = None
    if args.windows:
        windows = [tuple(int(x) for x in w.split(":")) for w in args.windows.split(",")]

    def dataset_for(win):
        fusion = cfg.fusion if win is None else replace(cfg.fusion, n_c=win[0], n_p=win[1], n_q=win[2])
        return load_data(cfg.data, fusion, cfg.target_range)[1]

    report = grid_search(dataset_for, cfg.model, cfg.train_config(),
                         Ks=parse(args.ks, int) or (cfg.model.K,),
                         lambda_er=parse(args.lambda_er, float) or (cfg.loss.lambda_er,),
                         lambda_eid=parse(args.lambda_eid, float) or (cfg.loss.lambda_eid,),
                         windows=windows, seeds=parse(args.seeds, int),
                         log=lambda r: print(json.dumps(r)))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    from .pipeline import write_csv
    write_csv(out / "search_rows.csv", report.rows,
              ["stage", "K", "lambda_er", "lambda_eid", "windows", "seed", "best_epoch", "val_mse"])
    write_csv(out / "search_table.csv", report.table,
              ["stage", "K", "lambda_er", "lambda_eid", "windows", "mean_val_mse", "var_val_mse", "n"])
    _print_json(report.best)


def _anchors(spec: str | None):
    if spec is None:
        return None
    if ":" in spec:
        a, b = spec.split(":")
        return list(range(int(a), int(b)))
    return [int(spec)]


def cmd_export_attention(args):
    from .pipeline import export_attention

    coords = []
    for c in args.coords or []:
        i, j = c.split(",")
        coords.append((int(i), int(j)))
    res = export_attention(args.checkpoint, args.data, args.out, _anchors(args.t), coords, args.render)
    _print_json(res)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic stflow dataset")
    g.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    g.add_argument("--config", help="JSON synthetic-city description")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def run_args(sp):
        sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--data", help="override the dataset path in the config")
        sp.add_argument("--er-variant", choices=["general", "logmix", "log_mixture"])
        sp.add_argument("--ntop", type=int)

    t = sub.add_parser("train", help="train a model from a run configuration")
    run_args(t)
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics, Quade matrix and pattern matching for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--ablate-gs", action="store_true")
    e.add_argument("--ablate-gt", action="store_true")
    e.add_argument("--quade-n", type=int, default=32, help="samples per Quade block set")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train full, no-G_s and no-G_t variants and compare test MSE")
    run_args(a)
    a.add_argument("--seeds", default="0,1,2")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("search", help="staged hyperparameter search")
    run_args(s)
    s.add_argument("--ks", help="comma list of expert counts")
    s.add_argument("--lambda-er")
    s.add_argument("--lambda-eid")
    s.add_argument("--windows", help="comma list of n_c:n_p:n_q")
    s.add_argument("--seeds", default="0,1,2")
    s.set_defaults(func=cmd_search)

    x = sub.add_parser("export-attention", help="per-expert attention grids and cell time series")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--t", help="anchor interval or range a:b (default: test anchors)")
    x.add_argument("--coords", nargs="*", help="cells as i,j")
    x.add_argument("--render", action="store_true", help="also write PNG heatmaps (needs matplotlib)")
    x.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads()
        args.func(args)
    except StmoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
