"""Run configuration and experiment drivers shared by the command line and the demos."""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis as an
from . import features as ft
from .data import Dataset, SyntheticConfig, gen_synthetic, load_idx, split
from .dictconv import CompressionConfig, count_params
from .distill import KDConfig, SpsaConfig, evaluate, pqkd_train, train_teacher
from .errors import ConfigurationError, UsageError
from .models import ConvNet

WORKERS_ENV = "PQKD_WORKERS"
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _strs(text) -> tuple[str, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(str(v) for v in text)
    return tuple(v for v in str(text).replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise ConfigurationError(f"expected on/off, got {text!r}")


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _bool,
    "tuple[int, ...]": _ints,
    "tuple[float, ...]": _floats,
    "tuple[str, ...]": _strs,
}


@dataclass
class RunConfig:
    """Every knob of a run; each field is a valid ``key = value`` config-file entry."""

    dataset: str = "synthetic"  # synthetic | idx
    data_dir: str = ""
    data_seed: int = 0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    widths: tuple[int, ...] = (16, 32, 64)
    scope: str = "all"
    ranks: tuple[int, ...] = (8,)
    dim_theta: int = 30
    shots: int = 200
    sampler: str = "distinguishable"
    seeds: tuple[int, ...] = (0,)
    ema: bool = False
    beta: float = 0.9
    gamma: float = 1.0
    baseline: str = "none"
    sigma_z: float = 0.0
    sigma_theta: float = 0.0
    epochs_teacher: int = 15
    epochs_student: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    tau: float = 3.0
    lam: float = 0.5
    theta_updates: int = 10
    spsa_a: float = 0.1
    spsa_c: float = 0.1
    val_batches: int = 4
    stats_evals: int = 32
    shots_grid: tuple[int, ...] = an.DEFAULT_SHOTS
    noise_reps: int = 20
    fit_s_min: int = 75
    sweep_scopes: tuple[str, ...] = ("conv1", "all")
    sweep_ranks: tuple[int, ...] = (4, 8, 12)
    sweep_dim_theta: tuple[int, ...] = (15, 30, 45)
    sigma_z_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    sigma_theta_grid: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    out: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            parse = _PARSERS[f.type]  # annotations are strings under postponed evaluation
            try:
                setattr(self, f.name, parse(getattr(self, f.name)))
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"config key {f.name!r}: cannot parse {getattr(self, f.name)!r}") from exc
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigurationError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(self.widths) != 3:
            raise ConfigurationError(f"widths needs three values, got {self.widths}")

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def compression(self) -> CompressionConfig:
        return CompressionConfig(self.scope, self.ranks, self.dim_theta, self.widths)

    def kd(self) -> KDConfig:
        return KDConfig(
            self.tau, self.lam, self.epochs_teacher, self.epochs_student, self.batch_size,
            self.theta_updates, self.ema, self.beta, self.lr,
        )

    def spsa(self) -> SpsaConfig:
        return SpsaConfig(self.spsa_a, self.spsa_c, val_batches=self.val_batches)

    def pipeline(self, shots: int | None = None) -> ft.FeaturePipeline:
        return ft.FeaturePipeline(shots=shots or self.shots, model=self.sampler)

    def noise(self) -> ft.NoiseConfig:
        return ft.NoiseConfig(self.sigma_z, self.sigma_theta)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    known = {f.name for f in fields(RunConfig)}
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def load_config(path, overrides: dict | None = None) -> tuple[RunConfig, str]:
    """Returns the parsed config and the raw file text (for hashing)."""
    text = Path(path).read_text() if path else ""
    values = parse_config_text(text, str(path)) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values), text


# -- data ------------------------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        total = cfg.n_train + cfg.n_val + cfg.n_test
        full = gen_synthetic(SyntheticConfig(n_per_class=math.ceil(total / 10), seed=cfg.data_seed))
        return split(full, cfg.data_seed, (cfg.n_train, cfg.n_val, cfg.n_test))
    root = Path(cfg.data_dir)
    if not root.is_dir():
        raise UsageError(f"data_dir {str(root)!r} is not a directory")
    train_full = load_idx(*(root / f for f in IDX_FILES["train"]), tag="train")
    train, val = split(train_full, cfg.data_seed, (cfg.n_train, cfg.n_val))
    test = load_idx(*(root / f for f in IDX_FILES["test"]), tag="test")
    if cfg.n_test and cfg.n_test < len(test):
        test = test.subset(np.arange(cfg.n_test), "test")
    return train, val, test


def input_files(cfg: RunConfig) -> list[Path]:
    if cfg.dataset != "idx":
        return []
    return [Path(cfg.data_dir) / f for pair in IDX_FILES.values() for f in pair]


# -- drivers ---------------------------------------------------------------------


def run_teacher(cfg: RunConfig, data=None, seed: int | None = None):
    train, val, _ = data or load_data(cfg)
    return train_teacher(train, val, cfg.widths, cfg.kd(), cfg.seed if seed is None else seed)


def run_student(cfg: RunConfig, teacher: ConvNet, data, seed: int | None = None, **overrides):
    train, val, _ = data
    pipeline = cfg.pipeline()
    return pqkd_train(
        train, val, teacher, cfg.compression(), cfg.kd(), cfg.spsa(), pipeline,
        cfg.seed if seed is None else seed,
        baseline=overrides.get("baseline", cfg.baseline),
        gamma=overrides.get("gamma", cfg.gamma),
        noise=overrides.get("noise", cfg.noise()),
        stats_evals=cfg.stats_evals,
    ), pipeline


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def _map(fn, jobs: list) -> list:
    n = workers()
    if n == 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _teacher_for(cfg: RunConfig, seed: int, data):
    return run_teacher(cfg, data, seed).model


def _frontier_cell(cfg: RunConfig, scope: str, rank: int, dim_theta: int, seed: int) -> an.SweepRow:
    data = load_data(cfg)
    teacher = _teacher_for(cfg, seed, data)
    t_acc, _ = evaluate(teacher, data[1])
    cell = cfg.replace(scope=scope, ranks=(rank,), dim_theta=dim_theta)
    res, _ = run_student(cell, teacher, data, seed)
    report = count_params(cell.compression())
    return an.SweepRow(
        scope, cell.compression().ranks, dim_theta, cfg.widths, seed, t_acc, res.best_val_acc,
        100.0 * (t_acc - res.best_val_acc), report.cr_overall, report.cr_conv,
    )


def frontier_sweep(cfg: RunConfig) -> list[an.SweepRow]:
    """Accuracy drop vs compression over scope x rank x dim(theta) x seed."""
    jobs = [
        (cfg, scope, r, d, s)
        for scope in cfg.sweep_scopes for r in cfg.sweep_ranks for d in cfg.sweep_dim_theta for s in cfg.seeds
    ]
    return _map(_frontier_cell, jobs)


def _noise_cell(cfg: RunConfig, sigma_z: float, sigma_theta: float, seed: int) -> an.NoiseRow:
    data = load_data(cfg)
    teacher = _teacher_for(cfg, seed, data)
    res, _ = run_student(cfg, teacher, data, seed, noise=ft.NoiseConfig(sigma_z, sigma_theta))
    return an.NoiseRow(sigma_z, sigma_theta, seed, res.best_val_acc, res.photonic_delta)


def noise_study(cfg: RunConfig) -> list[an.NoiseRow]:
    """Feature corruption sweep (sigma_theta = 0) followed by parameter drift sweep (sigma_z = 0)."""
    grid = [(z, 0.0) for z in cfg.sigma_z_grid] + [(0.0, t) for t in cfg.sigma_theta_grid if t > 0]
    return _map(_noise_cell, [(cfg, z, t, s) for z, t in grid for s in cfg.seeds])


def _shot_cell(cfg: RunConfig, shots: int, ema: bool, seed: int) -> an.ShotRow:
    data = load_data(cfg)
    teacher = _teacher_for(cfg, seed, data)
    cell = cfg.replace(shots=shots, ema=ema)
    photonic, _ = run_student(cell, teacher, data, seed)
    ablation, _ = run_student(cell, teacher, data, seed, gamma=0.0)
    acc_p, _ = evaluate(photonic.model, data[2], photonic.z)
    acc_a, _ = evaluate(ablation.model, data[2], ablation.z)
    return an.ShotRow(shots, ema, seed, acc_p, acc_a)


def shot_study(cfg: RunConfig) -> tuple[an.NoiseCurve, list[an.ShotRow]]:
    """Feature concentration curve plus matched photonic / z=0 trainings per shot budget."""
    pipe = cfg.pipeline()
    theta = np.random.default_rng(cfg.seed).uniform(-np.pi, np.pi, cfg.dim_theta)
    curve = an.feature_noise_curve(pipe, theta, cfg.shots_grid, cfg.noise_reps, cfg.seed)
    jobs = [(cfg, s, ema, seed) for s in cfg.shots_grid for ema in (False, True) for seed in cfg.seeds]
    return curve, _map(_shot_cell, jobs)


def delta_table(rows: list[an.ShotRow], curve: an.NoiseCurve | None = None) -> list[dict]:
    """Mean and sd of the accuracy gain per (S, EMA) over seeds, with the feature error when known."""
    err = {} if curve is None else dict(zip(curve.shots.tolist(), curve.mean_error.tolist()))
    out = []
    keys = sorted({(r.S, r.ema) for r in rows})
    for s, ema in keys:
        deltas = [r.delta for r in rows if r.S == s and r.ema == ema]
        mean, sd = an.summarize(deltas)
        out.append({
            "S": s, "ema": "on" if ema else "off", "mean_feature_err": err.get(s, float("nan")),
            "delta_mean": mean, "delta_sd": sd, "n": len(deltas),
        })
    return out


def fit_delta(table: list[dict], ema: str, s_min: float) -> an.FitResult:
    rows = [r for r in table if r["ema"] == ema]
    var = [max(r["delta_sd"] ** 2, 1e-12) for r in rows]
    return an.fit_shot_model([r["S"] for r in rows], [r["delta_mean"] for r in rows], var, s_min)
