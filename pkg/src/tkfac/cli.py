"""Command line entry point: ``tkfac {train,grid,analyze,verify}``.

Configuration precedence (lowest to highest): built-in defaults, the
``--config`` file, explicit command-line flags.  ``$TKFAC_DATA_DIR`` points at a
directory with MNIST IDX files; without it the bundled 5000-image subset is used.
"""
import argparse
import csv
from dataclasses import asdict, replace
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .experiment import ExperimentConfig, config_fields, config_from_dict, read_config


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="flat key/value YAML config file")
    for name, kind in config_fields().items():
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=kind if kind in (int, float) else str,
                       default=None, help=f"override {name}")


def resolve_config(args):
    base = asdict(read_config(args.config)) if args.config else {}
    overrides = {k: getattr(args, k) for k in config_fields() if getattr(args, k, None) is not None}
    merged = {**base, **overrides}
    if "seed" not in merged:
        raise experiment.ConfigError("seed is mandatory (--seed or config file)")
    return config_from_dict(merged)


def cmd_train(args):
    return experiment.run_experiment(resolve_config(args))


def _floats(text):
    return tuple(float(v) for v in text.split(",")) if text else None


def cmd_grid(args):
    base = resolve_config(args)
    alphas = _floats(args.alphas) or experiment.ALPHA_GRID
    lams = _floats(args.lams) or experiment.LAMBDA_GRID
    nus = _floats(args.nus)
    configs = list(experiment.grid_configs(base, alphas, lams, nus))
    if args.dry_run:
        for c in configs:
            print(f"alpha={c.alpha:g} lam={c.lam:g} nu={c.nu:g} -> {c.output_dir}")
        return 0
    rows = []
    for c in configs:
        status = experiment.run_experiment(c)
        with open(Path(c.output_dir) / "summary.json") as fh:
            s = json.load(fh)
        rows.append([c.alpha, c.lam, c.nu, status, s["final_train_error"]])
    out = Path(base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "lam", "nu", "status", "final_train_error"])
        w.writerows(rows)
    ok = [r for r in rows if r[3] == 0 and r[4] is not None]
    if ok:
        best = min(ok, key=lambda r: r[4])
        print(f"best: alpha={best[0]:g} lam={best[1]:g} nu={best[2]:g}"
              f" final_train_error={best[4]:.6g}")
    return 0


def cmd_analyze(args):
    config = resolve_config(args)
    if not config.analysis_every:
        config = replace(config, analysis_every=100)
    status = experiment.run_experiment(config)
    with open(Path(config.output_dir) / "summary.json") as fh:
        s = json.load(fh)
    if "error_points" in s:
        print(f"{s['error_points']} error reports; TKFAC error <= KFAC error at"
              f" {100 * s['tkfac_le_kfac_fraction']:.0f}% of them")
    if args.correlation is not None:
        from .analysis import location_correlation
        from .net import backward, forward

        x, y = experiment.load_task_data(config)
        net, _ = experiment.build_from_config(config)
        xb, yb = x[:config.batch_size], y[:config.batch_size]
        _, cache = forward(net, xb)
        trace = backward(net, cache, label_mode="model-sample",
                         rng=np.random.default_rng(config.seed))
        corr, _ = location_correlation(trace, args.correlation)
        path = Path(config.output_dir) / f"correlation_layer{args.correlation}.csv"
        np.savetxt(path, corr, delimiter=",")
        print(f"wrote {path}")
    return status


def cmd_verify(args):
    from .verify import run_checks

    results = run_checks(seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="tkfac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in [("train", cmd_train, "train one configuration"),
                            ("grid", cmd_grid, "grid search over alpha/lambda(/nu)"),
                            ("analyze", cmd_analyze, "train with exact-Fisher error tracking")]:
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.set_defaults(func=fn)
    g = sub.choices["grid"]
    g.add_argument("--alphas", help="comma-separated learning rates")
    g.add_argument("--lams", help="comma-separated damping values")
    g.add_argument("--nus", help="comma-separated nu values (tkfac_new)")
    g.add_argument("--dry-run", action="store_true", help="only list grid points")
    sub.choices["analyze"].add_argument("--correlation", type=int, metavar="LAYER",
                                        help="also write the location correlation of a conv layer")
    v = sub.add_parser("verify", help="run the built-in invariant checks")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except experiment.ConfigError as exc:
        parser.error(str(exc))


if __name__ == "__main__":
    sys.exit(main())
