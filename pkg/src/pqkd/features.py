"""Shot-limited photonic feature: two 8-bit marginal histograms, standardised.

A 16-bit detection pattern is split into two bytes; each byte indexes one of
256 bins, and the two normalised histograms are concatenated into a
512-vector. Standardisation statistics are fitted once and frozen.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import photonic
from .errors import ConfigurationError, UsageError
from .rng import stream

N_MODES = 16
HALF = 8
BINS = 256
FEATURE_DIM = 2 * BINS
_BYTE_WEIGHTS = 1 << np.arange(HALF - 1, -1, -1)


def index8(half) -> int:
    """MSB-first integer value of an 8-bit half pattern."""
    half = np.asarray(half)
    if half.shape != (HALF,):
        raise UsageError(f"index8 expects exactly {HALF} bits, got shape {half.shape}")
    return int(half.astype(np.int64) @ _BYTE_WEIGHTS)


def marginal_histograms(batch: photonic.SampleBatch) -> np.ndarray:
    bits = np.asarray(batch.bits)
    if bits.ndim != 2 or bits.shape[1] != N_MODES:
        raise ConfigurationError(f"feature map is fixed to {N_MODES} modes, got samples of shape {bits.shape}")
    if bits.shape[0] < 1:
        raise ConfigurationError("need at least one shot")
    idx = bits.astype(np.int64).reshape(-1, 2, HALF) @ _BYTE_WEIGHTS  # [S, 2]
    s = bits.shape[0]
    return np.concatenate([np.bincount(idx[:, 0], minlength=BINS), np.bincount(idx[:, 1], minlength=BINS)]) / s


def marginals_from_table(table: np.ndarray) -> np.ndarray:
    """Infinite-shot counterpart of :func:`marginal_histograms` from a 2**16 outcome table."""
    table = np.asarray(table)
    if table.shape != (2**N_MODES,):
        raise ConfigurationError(f"expected a table over 2**{N_MODES} patterns, got {table.shape}")
    grid = table.reshape(BINS, BINS)  # [first byte, second byte]
    return np.concatenate([grid.sum(axis=1), grid.sum(axis=0)])


def fit_stats(samples) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise mean and population standard deviation of feature evaluations."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise UsageError(f"fit_stats needs at least 2 feature vectors, got array of shape {x.shape}")
    mu = x.mean(axis=0)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=0))
    return mu, sigma


@dataclass(frozen=True)
class FeatureStandardizer:
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = 1e-6
    gamma: float = 1.0
    # bins that never fluctuated while fitting would otherwise be divided by eps alone
    sigma_floor: float = 0.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if np.any(np.asarray(self.sigma) < 0):
            raise ConfigurationError("sigma must be non-negative")
        for name in ("mu", "sigma"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(self.sigma, self.sigma_floor) + self.eps

    def with_gamma(self, gamma: float) -> "FeatureStandardizer":
        return FeatureStandardizer(self.mu, self.sigma, self.eps, gamma, self.sigma_floor)


def standardize(z_tilde, st: FeatureStandardizer) -> np.ndarray:
    return st.gamma * (np.asarray(z_tilde, dtype=np.float64) - st.mu) / st.scale


@dataclass
class EmaState:
    beta: float = 0.9
    zbar: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"EMA beta must lie in [0, 1), got {self.beta}")

    @property
    def initialized(self) -> bool:
        return self.zbar is not None


def ema_update(state: EmaState, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if state.zbar is None:
        state.zbar = z.copy()
    else:
        state.zbar = state.beta * state.zbar + (1.0 - state.beta) * z
    return state.zbar.copy()


@dataclass(frozen=True)
class NoiseConfig:
    sigma_z: float = 0.0
    sigma_theta: float = 0.0

    def __post_init__(self):
        if self.sigma_z < 0 or self.sigma_theta < 0:
            raise ConfigurationError("noise standard deviations must be >= 0")


def corrupt_feature(z, sigma_z: float, rng: np.random.Generator) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if sigma_z < 0:
        raise ConfigurationError(f"sigma_z must be >= 0, got {sigma_z}")
    if sigma_z == 0:
        return z.copy()
    return z + rng.normal(0.0, sigma_z, size=z.shape)


def drift_theta(theta, sigma_theta: float, rng: np.random.Generator, theta_max: float = photonic.THETA_MAX):
    theta = np.asarray(theta, dtype=np.float64)
    if sigma_theta < 0:
        raise ConfigurationError(f"sigma_theta must be >= 0, got {sigma_theta}")
    if sigma_theta == 0:
        return theta.copy()
    return np.clip(theta + rng.normal(0.0, sigma_theta, size=theta.shape), -theta_max, theta_max)


@dataclass
class FeaturePipeline:
    """Sampler settings plus frozen standardisation: theta -> 512-dim conditioning vector."""

    shots: int = 200
    model: str = "distinguishable"
    input_pattern: tuple[int, ...] = field(default_factory=lambda: photonic.default_input_pattern(N_MODES))
    bs_phase: float = 0.0
    standardizer: FeatureStandardizer | None = None

    def sampler_config(self, shots: int | None = None) -> photonic.SamplerConfig:
        return photonic.SamplerConfig(self.input_pattern, self.model, shots or self.shots)

    def unitary(self, theta) -> np.ndarray:
        return photonic.unitary_from_theta(theta, len(self.input_pattern), self.bs_phase)

    def raw(self, theta, rng: np.random.Generator, shots: int | None = None) -> np.ndarray:
        batch = photonic.sample(self.unitary(theta), self.sampler_config(shots), rng)
        return marginal_histograms(batch)

    def exact_raw(self, theta) -> np.ndarray:
        """Infinite-shot histogram feature (requires a tractable outcome table)."""
        return marginals_from_table(photonic.exact_distribution(self.unitary(theta), self.sampler_config()))

    def fit(
        self,
        dim_theta: int,
        seed: int,
        n_evals: int = 32,
        gamma: float = 1.0,
        eps: float = 1e-6,
    ) -> FeatureStandardizer:
        """Fit and freeze (mu, sigma) from ``n_evals`` label-free evaluations at random theta draws.

        Bins are floored at the largest binomial shot-noise std, 0.5/sqrt(S), so
        a bin that barely fluctuated while fitting cannot dominate ``z``.
        """
        draws = stream(seed, "feature-stats").uniform(-np.pi, np.pi, size=(n_evals, dim_theta))
        raws = [self.raw(th, stream(seed, "feature-stats-shots", i)) for i, th in enumerate(draws)]
        mu, sigma = fit_stats(raws)
        floor = 0.5 / np.sqrt(self.shots)
        self.standardizer = FeatureStandardizer(mu, sigma, eps=eps, gamma=gamma, sigma_floor=floor)
        return self.standardizer

    def __call__(self, theta, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(z, z_tilde)`` for one shot-limited evaluation at ``theta``."""
        if self.standardizer is None:
            raise UsageError("feature pipeline has no fitted standardizer; call fit() first")
        z_tilde = self.raw(theta, rng)
        return standardize(z_tilde, self.standardizer), z_tilde


# -- feature traces ------------------------------------------------------------

TRACE_COLUMNS = ("epoch", "dim", "z_raw", "z_used")


def write_trace(path, epochs, z_raw, z_used) -> None:
    """Long-format CSV: one row per (epoch, dim)."""
    z_raw = np.asarray(z_raw)
    z_used = np.asarray(z_used)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for e, raw_row, used_row in zip(epochs, z_raw, z_used):
            for d, (r, u) in enumerate(zip(raw_row, used_row)):
                writer.writerow([int(e), d, repr(float(r)), repr(float(u))])


def read_trace(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(epochs, z_raw, z_used)`` with arrays shaped [epochs, dims]."""
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise UsageError(f"{path}: expected trace columns {TRACE_COLUMNS}, got {header}")
        rows = [(int(e), int(d), float(r), float(u)) for e, d, r, u in reader]
    if not rows:
        raise UsageError(f"{path}: trace is empty")
    epochs = sorted({r[0] for r in rows})
    dims = max(r[1] for r in rows) + 1
    e_index = {e: i for i, e in enumerate(epochs)}
    raw = np.full((len(epochs), dims), np.nan)
    used = np.full((len(epochs), dims), np.nan)
    for e, d, r, u in rows:
        raw[e_index[e], d] = r
        used[e_index[e], d] = u
    return np.array(epochs), raw, used
