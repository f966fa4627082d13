"""Knowledge-distillation loss, SPSA, teacher training and the alternating PQKD loop.

Each student epoch has a photonic phase (SPSA on theta with the network frozen),
one feature evaluation that is then frozen, and a classical phase (one Adam
epoch on the distillation loss with theta frozen).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import features as ft
from .data import Dataset
from .dictconv import CompressionConfig, count_params
from .errors import ConfigurationError, DivergenceError, FormatError
from .models import ConvNet, accuracy, build_student, build_teacher
from .nn import AdamState, Tensor, adam_step, cross_entropy, log_softmax, softmax, zero_grad
from .photonic import THETA_MAX
from .rng import stream

log = logging.getLogger(__name__)

BASELINES = ("none", "dict", "randz", "fixedtheta")


@dataclass(frozen=True)
class KDConfig:
    tau: float = 3.0
    lam: float = 0.5
    epochs_teacher: int = 100
    epochs_student: int = 100
    batch_size: int = 64
    theta_updates_per_epoch: int = 10
    ema_enabled: bool = False
    beta: float = 0.9
    lr: float = 1e-3

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.batch_size < 1 or self.epochs_teacher < 0 or self.epochs_student < 0:
            raise ConfigurationError("batch size must be positive and epoch counts non-negative")
        if self.theta_updates_per_epoch < 0:
            raise ConfigurationError("theta_updates_per_epoch must be >= 0")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"EMA beta must lie in [0, 1), got {self.beta}")


@dataclass(frozen=True)
class SpsaConfig:
    a: float = 0.1
    c: float = 0.1
    theta_max: float = THETA_MAX
    val_batches: int = 4

    def __post_init__(self):
        if self.a <= 0 or self.c <= 0 or self.theta_max <= 0:
            raise ConfigurationError(f"SPSA needs a, c, theta_max > 0, got {self.a}, {self.c}, {self.theta_max}")
        if self.val_batches < 1:
            raise ConfigurationError("val_batches must be >= 1")


# -- losses -----------------------------------------------------------------------


def soften(logits, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return softmax(np.asarray(logits, dtype=np.float64) / tau)


def kd_loss(student_logits, teacher_logits, labels, cfg: KDConfig = KDConfig()) -> Tensor:
    """lam * CE(y, s) + (1 - lam) * tau^2 * KL(p_T || p_S), both softened at tau; batch mean."""
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape or s.data.ndim != 2:
        raise ConfigurationError(f"student {s.shape} and teacher {t.shape} logits must both be [B, C]")
    ce = cross_entropy(s, labels)
    log_pt = log_softmax(t / cfg.tau).data
    pt = np.exp(log_pt)
    log_ps = log_softmax(s * (1.0 / cfg.tau))
    # KL = sum p_T log p_T - sum p_T log p_S
    kl = ((log_ps * Tensor(-pt)).sum() + float(np.sum(pt * log_pt))) * (1.0 / t.shape[0])
    return ce * cfg.lam + kl * ((1.0 - cfg.lam) * cfg.tau**2)


def kl_divergence(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def cross_entropy_dist(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(q[mask])))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


# -- SPSA --------------------------------------------------------------------------


@dataclass
class SpsaStep:
    theta: np.ndarray
    j_plus: float
    j_minus: float
    skipped: bool = False

    @property
    def j_mid(self) -> float:
        return 0.5 * (self.j_plus + self.j_minus)


def spsa_update(
    theta,
    objective: Callable[[np.ndarray], float],
    cfg: SpsaConfig,
    rng: np.random.Generator,
    delta=None,
) -> SpsaStep:
    """One two-sided SPSA step with Rademacher perturbation; every evaluated point is clipped."""
    theta = np.clip(np.asarray(theta, dtype=np.float64), -cfg.theta_max, cfg.theta_max)
    if delta is None:
        delta = rng.choice(np.array([-1.0, 1.0]), size=theta.shape)
    delta = np.asarray(delta, dtype=np.float64)
    j_plus = float(objective(np.clip(theta + cfg.c * delta, -cfg.theta_max, cfg.theta_max)))
    j_minus = float(objective(np.clip(theta - cfg.c * delta, -cfg.theta_max, cfg.theta_max)))
    if not (math.isfinite(j_plus) and math.isfinite(j_minus)):
        log.warning("SPSA objective returned a non-finite value (J+=%r, J-=%r); update skipped", j_plus, j_minus)
        return SpsaStep(theta.copy(), j_plus, j_minus, skipped=True)
    g_hat = (j_plus - j_minus) / (2.0 * cfg.c) * delta
    return SpsaStep(np.clip(theta - cfg.a * g_hat, -cfg.theta_max, cfg.theta_max), j_plus, j_minus)


# -- training helpers ----------------------------------------------------------------


@dataclass
class MetricRecord:
    epoch: int
    split: str
    accuracy: float
    ce_loss: float
    J: float = float("nan")
    delta_theta_norm: float = float("nan")


METRIC_COLUMNS = ("epoch", "split", "accuracy", "ce_loss", "J", "delta_theta_norm")


def write_metrics(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, r.split] + [repr(float(getattr(r, c))) for c in METRIC_COLUMNS[2:]])


def read_metrics(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise FormatError(f"{path}: expected metric columns {METRIC_COLUMNS}, got {header}")
        return [MetricRecord(int(e), s, *map(float, rest)) for e, s, *rest in reader]


def _ce_np(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(log_softmax(logits).data[np.arange(len(labels)), labels]))


def _check_finite(value: float, what: str, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value}) at epoch {epoch}, batch {batch}")


@dataclass
class TrainResult:
    model: ConvNet
    history: list[MetricRecord]
    best_epoch: int
    best_val_acc: float


def train_teacher(train: Dataset, val: Dataset, widths, cfg: KDConfig, seed: int, epochs: int | None = None) -> TrainResult:
    """Cross-entropy training with Adam; returns the checkpoint with the highest validation accuracy."""
    epochs = cfg.epochs_teacher if epochs is None else epochs
    model = build_teacher(widths, seed, train.images.shape[1])
    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    best_state = model.state_dict()
    val_logits = model.logits(val.images)
    best_acc, best_epoch = accuracy(val_logits, val.labels), 0
    history = [MetricRecord(0, "val", best_acc, _ce_np(val_logits, val.labels))]
    for epoch in range(1, epochs + 1):
        order = stream(seed, "teacher-shuffle", epoch).permutation(len(train))
        drop_rng = stream(seed, "teacher-dropout", epoch)
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            zero_grad(params)
            loss = cross_entropy(model(train.images[idx], train=True, rng=drop_rng), train.labels[idx])
            _check_finite(loss.item(), "teacher loss", epoch, b)
            loss.backward()
            adam_step(params, state)
            losses.append(loss.item())
        val_logits = model.logits(val.images)
        acc = accuracy(val_logits, val.labels)
        history.append(MetricRecord(epoch, "train", float("nan"), float(np.mean(losses))))
        history.append(MetricRecord(epoch, "val", acc, _ce_np(val_logits, val.labels)))
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, model.state_dict()
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_acc)


def validation_batches(n_val: int, seed: int, epoch: int, n_batches: int, batch_size: int) -> list[np.ndarray]:
    """Fixed-for-the-epoch validation mini-batches from an epoch-seeded shuffle."""
    perm = stream(seed, "val-batches", epoch).permutation(n_val)
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_batches) if i * batch_size < n_val]


def validation_proxy(
    theta,
    student: ConvNet,
    teacher_val_logits: np.ndarray,
    pipeline: ft.FeaturePipeline,
    val: Dataset,
    batches: list[np.ndarray],
    cfg: KDConfig,
    rng: np.random.Generator,
    noise: ft.NoiseConfig = ft.NoiseConfig(),
    ema: ft.EmaState | None = None,
) -> float:
    """Mean KD loss of the frozen student over ``batches`` with a fresh feature evaluated at theta.

    With an initialised ``ema`` the candidate is scored on the smoothed feature it would
    produce, ``beta * zbar + (1 - beta) * z(theta)``; the state itself is not modified.
    """
    th = ft.drift_theta(theta, noise.sigma_theta, rng)
    z, _ = pipeline(th, rng)
    z = ft.corrupt_feature(z, noise.sigma_z, rng)
    if ema is not None and ema.initialized:
        z = ema.beta * ema.zbar + (1.0 - ema.beta) * z
    losses = [kd_loss(student(val.images[idx], z).data, teacher_val_logits[idx], val.labels[idx], cfg).item() for idx in batches]
    return float(np.mean(losses))


# -- PQKD loop -----------------------------------------------------------------------


@dataclass
class PQKDResult:
    model: ConvNet
    theta: np.ndarray
    z: np.ndarray | None
    history: list[MetricRecord]
    best_epoch: int
    best_val_acc: float
    photonic_delta: float
    spsa_evaluations: int
    epoch_j: list[float]
    trace_raw: list[np.ndarray] = field(default_factory=list)
    trace_used: list[np.ndarray] = field(default_factory=list)


def pqkd_train(
    train: Dataset,
    val: Dataset,
    teacher: ConvNet,
    compression: CompressionConfig,
    kd: KDConfig,
    spsa: SpsaConfig,
    pipeline: ft.FeaturePipeline,
    seed: int,
    baseline: str = "none",
    gamma: float = 1.0,
    noise: ft.NoiseConfig = ft.NoiseConfig(),
    epochs: int | None = None,
    stats_evals: int = 32,
) -> PQKDResult:
    if baseline not in BASELINES:
        raise ConfigurationError(f"unknown baseline {baseline!r}; choose from {BASELINES}")
    epochs = kd.epochs_student if epochs is None else epochs
    if baseline == "dict":
        compression = CompressionConfig(
            compression.scope, compression.ranks, compression.dim_theta, compression.widths,
            compression.in_channels, mixing_trainable=True,
        )
    student = build_student(compression, seed)
    params = student.parameters()
    adam = AdamState.for_params(params, lr=kd.lr)
    dim_theta = compression.dim_theta

    photonic = baseline in ("none", "fixedtheta")
    run_spsa = baseline == "none" and dim_theta > 0 and kd.theta_updates_per_epoch > 0
    if photonic:
        pipeline.fit(dim_theta, seed, n_evals=stats_evals, gamma=gamma)
    fixed_z = None
    if baseline == "randz":
        fixed_z = stream(seed, "random-feature").normal(size=ft.FEATURE_DIM)
    elif baseline == "dict":
        fixed_z = np.zeros(ft.FEATURE_DIM)  # unused by trainable-mixing layers

    t_train = teacher.logits(train.images)
    t_val = teacher.logits(val.images)

    theta = np.zeros(dim_theta)
    ema = ft.EmaState(kd.beta)
    history: list[MetricRecord] = []
    epoch_j: list[float] = []
    trace_raw, trace_used = [], []
    n_evals = 0
    best = (-1.0, 0, student.state_dict(), theta.copy(), None)

    for epoch in range(1, epochs + 1):
        theta_prev = theta.copy()
        j_epoch = float("nan")
        if run_spsa:
            batches = validation_batches(len(val), seed, epoch, spsa.val_batches, kd.batch_size)
            counter = [0]

            def objective(th):
                counter[0] += 1
                rng = stream(seed, "spsa-shots", epoch, counter[0])
                return validation_proxy(th, student, t_val, pipeline, val, batches, kd, rng, noise,
                                        ema if kd.ema_enabled else None)

            mids = []
            for k in range(kd.theta_updates_per_epoch):
                step = spsa_update(theta, objective, spsa, stream(seed, "spsa-delta", epoch, k))
                theta = step.theta
                if not step.skipped:
                    mids.append(step.j_mid)
            n_evals += counter[0]
            j_epoch = float(np.mean(mids)) if mids else float("nan")
        epoch_j.append(j_epoch)

        # one feature evaluation, frozen for the classical phase
        if photonic:
            rng = stream(seed, "epoch-feature", epoch)
            z_raw, _ = pipeline(ft.drift_theta(theta, noise.sigma_theta, rng), rng)
            z_raw = ft.corrupt_feature(z_raw, noise.sigma_z, rng)
            z = ft.ema_update(ema, z_raw) if kd.ema_enabled else z_raw
            trace_raw.append(z_raw)
            trace_used.append(z)
        else:
            z = fixed_z

        order = stream(seed, "student-shuffle", epoch).permutation(len(train))
        drop_rng = stream(seed, "student-dropout", epoch)
        for b, start in enumerate(range(0, len(order), kd.batch_size)):
            idx = order[start : start + kd.batch_size]
            zero_grad(params)
            loss = kd_loss(student(train.images[idx], z, train=True, rng=drop_rng), t_train[idx], train.labels[idx], kd)
            _check_finite(loss.item(), "student loss", epoch, b)
            loss.backward()
            adam_step(params, adam)

        tr_logits = student.logits(train.images, z)
        va_logits = student.logits(val.images, z)
        dnorm = float(np.linalg.norm(theta - theta_prev))
        tr_acc, va_acc = accuracy(tr_logits, train.labels), accuracy(va_logits, val.labels)
        history.append(MetricRecord(epoch, "train", tr_acc, _ce_np(tr_logits, train.labels), j_epoch, dnorm))
        history.append(MetricRecord(epoch, "val", va_acc, _ce_np(va_logits, val.labels), j_epoch, dnorm))
        if va_acc > best[0]:
            best = (va_acc, epoch, student.state_dict(), theta.copy(), None if z is None else np.array(z))

    best_acc, best_epoch, best_state, best_theta, best_z = best
    student.load_state_dict(best_state)
    delta = epoch_j[0] - epoch_j[-1] if run_spsa and epoch_j else float("nan")
    return PQKDResult(
        student, best_theta, best_z, history, best_epoch, best_acc, delta, n_evals, epoch_j, trace_raw, trace_used
    )


def evaluate(model: ConvNet, data: Dataset, z=None) -> tuple[float, float]:
    logits = model.logits(data.images, z)
    return accuracy(logits, data.labels), _ce_np(logits, data.labels)


# -- checkpoints -----------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: ConvNet, meta: dict, **arrays) -> None:
    """``.npz`` container: every trainable tensor, extra arrays (theta, z, mu, sigma), JSON metadata."""
    payload = {f"param/{k}": v for k, v in model.state_dict().items()}
    payload.update({f"extra/{k}": np.asarray(v) for k, v in arrays.items() if v is not None})
    meta = dict(meta, version=CHECKPOINT_VERSION, widths=list(model.widths))
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    try:
        with np.load(Path(path)) as npz:
            meta = json.loads(npz["meta"].tobytes().decode())
            params = {k[6:]: npz[k] for k in npz.files if k.startswith("param/")}
            extras = {k[6:]: npz[k] for k in npz.files if k.startswith("extra/")}
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return params, extras, meta


def student_report(compression: CompressionConfig, baseline: str = "none") -> dict:
    """Parameter report for a run; theta is only counted when SPSA actually trains it."""
    cfg = compression
    if baseline != "none":
        cfg = CompressionConfig(cfg.scope, cfg.ranks, 0, cfg.widths, cfg.in_channels, baseline == "dict")
    return asdict(count_params(cfg))
