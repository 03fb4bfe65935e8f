"""Experiment configuration, orchestration and persistence.

A run directory contains::

    config.yaml    snapshot of the effective configuration
    metrics.csv    one row per logged iteration (deterministic for a fixed config)
    timing.csv     wall-clock seconds spent in optimizer steps (not reproducible)
    errors.csv     per-layer approximation errors, when analysis is enabled
    summary.json   final/best metrics and total time
"""
from dataclasses import dataclass, asdict, fields, replace
import csv
import itertools
import json
import logging
import math
from pathlib import Path
import time

import numpy as np
import yaml

from . import analysis, data
from .net import build_network
from .optim import NonFiniteLoss, make_optimizer, run_training

log = logging.getLogger(__name__)

TASKS = ("autoencoder", "classify", "synthetic")
OPTIMIZERS = ("tkfac_nor", "tkfac_new", "kfac", "sgdm", "adam")
DEFAULT_ARCH = {
    "autoencoder": "784-1000-500-250-30-250-500-1000-784",
    "classify": "196-20-20-20-20-10",
    "synthetic": "196-20-20-20-20-10",
}
ALPHA_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0)
LAMBDA_GRID = (1e-8, 1e-6, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1)
NU_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)

METRICS_VERSION = "# tkfac metrics v1"
EXIT_NONFINITE = 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    task: str = "classify"
    arch: str = ""
    activation: str = "relu"
    optimizer: str = "tkfac_nor"
    alpha: float = 0.03
    lam: float = 0.03
    nu: float = 1.0
    eps: float = 0.95
    tau: float = 0.9
    t_fim: int = 100
    t_inv: int = 100
    batch_size: int = 500
    epochs: int = 10
    iterations: int = 0
    lr_schedule: str = "constant"
    lr_decay_epochs: int = 40
    label_mode: str = "model-sample"
    ema: str = "damped"
    fc_damping: str = "trace"
    analysis_every: int = 0
    analysis_cap: int = analysis.DEFAULT_CAP
    log_every: int = 0
    subset: int = 0
    n_synthetic: int = 1000
    classes: int = 10
    data_dir: str = ""
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not self.arch:
            self.arch = DEFAULT_ARCH.get(self.task, "")
        self.validate()

    def validate(self):
        checks = [
            (isinstance(self.seed, int) and not isinstance(self.seed, bool), "seed must be an int"),
            (self.task in TASKS, f"task must be one of {TASKS}"),
            (self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}"),
            (self.activation in ("relu", "sigmoid"), "activation must be relu or sigmoid"),
            (self.alpha > 0, "alpha must be > 0"),
            (self.lam >= 0, "lam must be >= 0"),
            (self.nu > 0, "nu must be > 0"),
            (0 <= self.eps < 1, "eps must be in [0, 1)"),
            (0 <= self.tau < 1, "tau must be in [0, 1)"),
            (self.t_fim >= 1 and self.t_inv >= 1, "t_fim and t_inv must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0 and self.iterations >= 0, "epochs/iterations must be >= 0"),
            (self.epochs > 0 or self.iterations > 0, "one of epochs/iterations must be > 0"),
            (self.lr_schedule in ("constant", "step"), "lr_schedule must be constant or step"),
            (self.lr_decay_epochs >= 1, "lr_decay_epochs must be >= 1"),
            (self.label_mode in ("model-sample", "data"), "label_mode must be model-sample or data"),
            (self.ema in ("damped", "raw"), "ema must be damped or raw"),
            (self.fc_damping in ("trace", "lambda"), "fc_damping must be trace or lambda"),
            (self.analysis_every >= 0 and self.log_every >= 0, "intervals must be >= 0"),
            (self.analysis_cap >= 1, "analysis_cap must be >= 1"),
            (self.subset >= 0 and self.n_synthetic >= 1 and self.classes >= 2, "bad data sizes"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def config_fields():
    return {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name, value):
    kind = config_fields()[name]
    if kind is int:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, str):
            value = int(value)
        return value
    if kind is float:
        return float(value)
    return str(value)


def config_from_dict(d):
    known = config_fields()
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in d or d["seed"] is None:
        raise ConfigError("seed is mandatory")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in d.items()})


def write_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(asdict(config), fh, sort_keys=False, default_flow_style=False)


def read_config(path):
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    return config_from_dict(d)


def load_task_data(config):
    """Return ``(x, y)`` for the configured task, shaped for the architecture."""
    head = [int(t) for t in config.arch.split("-")[0].split("x")]
    size = int(np.prod(head))
    if config.task == "synthetic":
        x, y = data.synthetic_dataset(config.n_synthetic, size, config.classes, config.seed,
                                      teacher=32)
    else:
        directory = config.data_dir or None
        x, y = data.load_mnist(directory, downsample=(size == 196),
                               subset=config.subset or None, seed=config.seed)
        if x.shape[1] != size:
            raise ConfigError(f"architecture input {size} does not match MNIST ({x.shape[1]})")
        if config.task == "autoencoder":
            y = x
    if len(head) == 3:
        x = x.reshape((x.shape[0],) + tuple(head))
        if config.task == "autoencoder":
            y = x.reshape(x.shape[0], -1)
    return x, y


def build_from_config(config):
    loss = "binary-cross-entropy" if config.task == "autoencoder" else "softmax-cross-entropy"
    net = build_network(config.arch, hidden_activation=config.activation, loss=loss,
                        rng=np.random.default_rng([config.seed, 1]))
    opt = make_optimizer(config.optimizer, config.alpha, lam=config.lam, nu=config.nu,
                         tau=config.tau, eps=config.eps, t_fim=config.t_fim,
                         t_inv=config.t_inv, ema=config.ema, fc_damping=config.fc_damping)
    return net, opt


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


BASE_COLUMNS = ["iteration", "epoch", "lr", "batch_loss", "train_loss", "train_error",
                "test_loss", "test_error"]


def write_metrics_csv(records, path):
    extra = sorted({k for r in records for k in r.extra})
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BASE_COLUMNS + extra)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in BASE_COLUMNS] +
                       [_fmt(r.extra.get(k, math.nan)) for k in extra])


def read_metrics_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [{k: float(v) for k, v in row.items()} for row in rows]


def run_experiment(config):
    """Train according to ``config`` and persist all artifacts.  Returns an exit status."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "config.yaml")
    x, y = load_task_data(config)
    net, opt = build_from_config(config)
    hooks = []
    if config.analysis_every:
        hooks.append(analysis.ErrorCurve(config.analysis_every, config.analysis_cap,
                                         path=out / "errors.csv"))
    status = 0
    records = []
    tic = time.perf_counter()
    try:
        res = run_training(net, opt, x, y,
                           epochs=None if config.iterations else config.epochs,
                           iterations=config.iterations or None,
                           batch_size=config.batch_size, seed=config.seed,
                           label_mode=config.label_mode, log_every=config.log_every or None,
                           lr_decay_every=config.lr_decay_epochs if config.lr_schedule == "step" else None,
                           hooks=hooks, on_record=records.append)
    except NonFiniteLoss as exc:
        log.error("aborting: %s", exc)
        status = EXIT_NONFINITE
        res = None
    total = time.perf_counter() - tic
    write_metrics_csv(records, out / "metrics.csv")
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "step_seconds"])
        for r in records:
            w.writerow([r.iteration, f"{r.wall_time:.6f}"])
    summary = {
        "optimizer": config.optimizer,
        "task": config.task,
        "status": "ok" if status == 0 else "non-finite-loss",
        "iterations": records[-1].iteration if records else 0,
        "final_train_loss": records[-1].train_loss if records else None,
        "final_train_error": records[-1].train_error if records else None,
        "best_train_error": min((r.train_error for r in records), default=None),
        "total_seconds": total,
    }
    if hooks and hooks[0].reports:
        reps = hooks[0].reports
        summary["error_points"] = len(reps)
        summary["tkfac_le_kfac_fraction"] = float(np.mean(
            [r.tkfac_total <= r.kfac_total for r in reps]))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=float)
    if res is not None:
        log.info("%s: final train error %.6g", config.optimizer, summary["final_train_error"])
    return status


def grid_configs(base, alphas=ALPHA_GRID, lams=LAMBDA_GRID, nus=None):
    """Enumerate the hyperparameter grid; each point writes to its own subdirectory."""
    lam_axis = lams if base.optimizer != "sgdm" else (base.lam,)
    nu_axis = nus if (nus and base.optimizer == "tkfac_new") else (base.nu,)
    for a, l, n in itertools.product(alphas, lam_axis, nu_axis):
        name = f"alpha={a:g}"
        if base.optimizer != "sgdm":
            name += f"_lam={l:g}"
        if base.optimizer == "tkfac_new" and nus:
            name += f"_nu={n:g}"
        yield replace(base, alpha=a, lam=l, nu=n,
                      output_dir=str(Path(base.output_dir) / name))
