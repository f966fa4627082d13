"""Shot-noise scaling, concentration and Lipschitz bounds, EMA diagnostics, fits and sweeps."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import dictconv as dc
from . import features as ft
from .errors import FitError, UsageError
from .rng import stream

DEFAULT_SHOTS = (50, 100, 200, 400, 800, 1600, 3200, 6400)


# -- feature concentration -------------------------------------------------------


@dataclass
class NoiseCurve:
    shots: np.ndarray
    mean_error: np.ndarray
    sd_error: np.ndarray
    slope: float
    intercept: float

    def rows(self) -> list[dict]:
        return [
            {"S": int(s), "mean_err": float(m), "sd_err": float(sd)}
            for s, m, sd in zip(self.shots, self.mean_error, self.sd_error)
        ]


def loglog_slope(x, y) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope), float(intercept)


def feature_noise_curve(
    pipeline: ft.FeaturePipeline,
    theta,
    shots: Sequence[int] = DEFAULT_SHOTS,
    reps: int = 20,
    seed: int = 0,
) -> NoiseCurve:
    """Mean ||z_hat - z_inf||_2 of the raw histogram feature against shot budget."""
    z_inf = pipeline.exact_raw(theta)
    means, sds = [], []
    for s in shots:
        errs = [np.linalg.norm(pipeline.raw(theta, stream(seed, "noise-curve", s, r), s) - z_inf) for r in range(reps)]
        means.append(np.mean(errs))
        sds.append(np.std(errs, ddof=1) if reps > 1 else 0.0)
    slope, intercept = loglog_slope(shots, means)
    return NoiseCurve(np.asarray(shots), np.asarray(means), np.asarray(sds), slope, intercept)


# -- delta(S) fit ----------------------------------------------------------------


@dataclass
class FitResult:
    delta_inf: float
    k_fit: float
    r2_w: float
    se_delta_inf: float
    se_k: float
    s_min: float
    s_max: float
    n_points: int


def weighted_r2(y, y_hat, w) -> float:
    y, y_hat, w = (np.asarray(a, dtype=np.float64) for a in (y, y_hat, w))
    y_bar = np.sum(w * y) / np.sum(w)
    ss_res = np.sum(w * (y - y_hat) ** 2)
    ss_tot = np.sum(w * (y - y_bar) ** 2)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("nan")
    return float(1.0 - ss_res / ss_tot)


def fit_shot_model(shots, delta, variance=None, s_min: float = 0.0) -> FitResult:
    """Weighted least squares of delta(S) = delta_inf - k / sqrt(S), weights 1/variance.

    Standard errors use the residual-scaled covariance (relative weights).
    """
    shots = np.asarray(shots, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    variance = np.ones_like(delta) if variance is None else np.asarray(variance, dtype=np.float64)
    if not (shots.shape == delta.shape == variance.shape):
        raise FitError("shots, delta and variance must have equal length")
    keep = (shots >= s_min) & np.isfinite(delta) & np.isfinite(variance) & (variance > 0)
    if keep.sum() < 3:
        raise FitError(f"need at least 3 usable points with S >= {s_min} and positive variance, got {int(keep.sum())}")
    s, y, w = shots[keep], delta[keep], 1.0 / variance[keep]
    x = np.column_stack([np.ones_like(s), -1.0 / np.sqrt(s)])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
    y_hat = x @ coef
    dof = len(y) - 2
    scale = np.sum(w * (y - y_hat) ** 2) / dof if dof > 0 else 0.0
    cov = np.linalg.inv(x.T @ (x * w[:, None])) * scale
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return FitResult(
        float(coef[0]), float(coef[1]), weighted_r2(y, y_hat, w), float(se[0]), float(se[1]),
        float(s.min()), float(s.max()), int(len(y)),
    )


# -- bounds ------------------------------------------------------------------------


def hoeffding_bound(shots: int, eps: float) -> float:
    return 2.0 * math.exp(-2.0 * shots * eps * eps)


@dataclass
class HoeffdingReport:
    shots: int
    eps: float
    trials: int
    bound: float
    max_rate: float
    slack: float
    violations: int  # bins whose empirical rate exceeds bound + slack

    @property
    def ok(self) -> bool:
        return self.violations == 0


def hoeffding_check(p, shots: int, eps: float, trials: int, seed: int = 0) -> HoeffdingReport:
    """Per-bin rate of |p_hat - p| >= eps over ``trials`` multinomial histograms of ``shots`` draws."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0:
        p = np.array([p, 1.0 - p])
    rng = stream(seed, "hoeffding", shots)
    counts = rng.multinomial(shots, p / p.sum(), size=trials)
    rate = np.mean(np.abs(counts / shots - p) >= eps, axis=0)
    bound = hoeffding_bound(shots, eps)
    q = min(bound, 1.0)
    slack = 3.0 * math.sqrt(q * (1.0 - q) / trials)
    return HoeffdingReport(shots, eps, trials, bound, float(rate.max()), slack, int(np.sum(rate > bound + slack)))


@dataclass
class LipschitzReport:
    trials: int
    max_kernel_ratio: float
    max_mixing_ratio: float
    kernel_violations: int
    mixing_violations: int
    l_phi: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.kernel_violations == 0 and self.mixing_violations == 0


def lipschitz_trials(trials: int = 1000, seed: int = 0, slack: float = 1e-9, d: int = 64) -> LipschitzReport:
    """Random (A, B, z, z_hat) draws checked against the mixing and kernel perturbation bounds."""
    max_k = max_m = 0.0
    viol_k = viol_m = 0
    for t in range(trials):
        rng = stream(seed, "lipschitz", t)
        c_out, c_in, rank = (int(v) for v in rng.integers(1, 5, size=3))
        k = int(rng.choice([1, 3, 5]))
        a = dc.make_projection(int(rng.integers(2**31)), c_out * c_in * rank, d)
        b = rng.normal(size=(rank, k, k))
        z = rng.normal(size=d)
        z_hat = z + rng.normal(scale=10.0 ** rng.uniform(-3, 1), size=d)
        a_norm = dc.spectral_norm(a, tol=1e-14)
        dz = np.linalg.norm(z_hat - z)
        m, m_hat = dc.generate_mixing(a, z, c_out, c_in, rank), dc.generate_mixing(a, z_hat, c_out, c_in, rank)
        lhs_m = np.linalg.norm(m_hat - m)
        lhs_k = np.linalg.norm(dc.reconstruct_kernel(m_hat, b) - dc.reconstruct_kernel(m, b))
        rhs_m = a_norm * dz
        rhs_k = a_norm * np.linalg.norm(b) * dz
        viol_m += lhs_m > rhs_m + slack
        viol_k += lhs_k > rhs_k + slack
        max_m = max(max_m, lhs_m / rhs_m)
        max_k = max(max_k, lhs_k / rhs_k)
    return LipschitzReport(trials, float(max_k), float(max_m), int(viol_k), int(viol_m))


def feature_lipschitz_surrogate(pipeline: ft.FeaturePipeline, theta, pairs: int = 50, seed: int = 0) -> float:
    """Largest observed ||dz||_2 / ||d z_tilde||_1 between independent shot-limited evaluations."""
    if pipeline.standardizer is None:
        raise UsageError("pipeline needs a fitted standardizer")
    best = 0.0
    for i in range(pairs):
        z1, p1 = pipeline(theta, stream(seed, "lphi", i, 0))
        z2, p2 = pipeline(theta, stream(seed, "lphi", i, 1))
        dp = np.abs(p1 - p2).sum()
        if dp > 0:
            best = max(best, float(np.linalg.norm(z1 - z2) / dp))
    return best


@dataclass
class BoundSuite:
    hoeffding: list[HoeffdingReport]
    lipschitz: LipschitzReport

    @property
    def ok(self) -> bool:
        return self.lipschitz.ok and all(h.ok for h in self.hoeffding)


def bound_suite(
    trials: int = 1000,
    hoeffding_cases=((1000, 0.1, 0.5), (200, 0.05, 0.3), (50, 0.1, 0.1), (100, 1.0, 0.5)),
    hoeffding_trials: int = 100_000,
    seed: int = 0,
) -> BoundSuite:
    reports = [hoeffding_check(p, s, e, hoeffding_trials, seed) for s, e, p in hoeffding_cases]
    return BoundSuite(reports, lipschitz_trials(trials, seed))


# -- EMA diagnostics -----------------------------------------------------------------


@dataclass
class EmaReport:
    ratios: np.ndarray  # finite per-dimension variance ratios, sorted
    median: float
    q1: float
    q3: float
    n_undefined: int

    def cdf_rows(self) -> list[tuple[float, float]]:
        n = len(self.ratios)
        return [(float(r), (i + 1) / n) for i, r in enumerate(self.ratios)]


def ema_report(z_raw, z_used, burn_in: int = 0) -> EmaReport:
    """Per-dimension Var(z_used) / Var(z_raw) after ``burn_in`` steps; zero-variance dims are excluded."""
    raw = np.asarray(z_raw, dtype=np.float64)[burn_in:]
    used = np.asarray(z_used, dtype=np.float64)[burn_in:]
    if raw.size == 0 or raw.shape[0] < 2:
        raise UsageError("trace needs at least two epochs after burn-in")
    var_raw = raw.var(axis=0)
    var_used = used.var(axis=0)
    defined = var_raw > 0
    ratios = np.sort(var_used[defined] / var_raw[defined])
    if ratios.size == 0:
        return EmaReport(ratios, float("nan"), float("nan"), float("nan"), int((~defined).sum()))
    q1, med, q3 = np.percentile(ratios, [25, 50, 75])
    return EmaReport(ratios, float(med), float(q1), float(q3), int((~defined).sum()))


def iid_ema_trace(beta: float, steps: int = 2000, dims: int = 512, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Raw i.i.d. Gaussian features and their EMA-smoothed counterparts."""
    raw = stream(seed, "ema-surrogate").normal(size=(steps, dims))
    state = ft.EmaState(beta)
    used = np.array([ft.ema_update(state, z) for z in raw])
    return raw, used


def ema_variance_ratio(beta: float) -> float:
    return (1.0 - beta) / (1.0 + beta)


# -- sweeps ------------------------------------------------------------------------


@dataclass
class SweepRow:
    scope: str
    ranks: tuple[int, ...]
    dim_theta: int
    widths: tuple[int, int, int]
    seed: int
    teacher_acc: float
    student_acc: float
    acc_drop: float
    cr_overall: float
    cr_conv: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["ranks"] = "/".join(map(str, self.ranks))
        d["widths"] = "/".join(map(str, self.widths))
        return d


def summarize(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class ShotRow:
    S: int
    ema: bool
    seed: int
    acc_photonic: float
    acc_ablation: float

    @property
    def delta(self) -> float:
        """Accuracy gain over the z = 0 ablation, in percentage points."""
        return 100.0 * (self.acc_photonic - self.acc_ablation)


@dataclass
class NoiseRow:
    sigma_z: float
    sigma_theta: float
    seed: int
    accuracy: float
    photonic_delta: float = field(default=float("nan"))
