"""Linear-optical sampler: tiled beam-splitter interferometers, threshold detection.

Two photon models are provided. ``distinguishable`` routes every photon
independently through the interferometer (|U_kj|^2 transition probabilities);
``exact_boson`` draws from the indistinguishable-photon distribution with the
Clifford & Clifford sequential algorithm. ``exact_distribution`` enumerates the
threshold-outcome table by an independent route (Fock-pattern permanents, or a
subset recursion for distinguishable photons) and serves as the test oracle.

Bit patterns are indexed MSB-first: mode 0 is the most significant bit.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapabilityError, ConfigurationError, FormatError
from .rng import stream

THETA_MAX = math.pi
MAX_BOSON_PHOTONS = 10
ORACLE_MAX_PHOTONS = 6
ORACLE_MAX_MODES = 8
DISTINGUISHABLE_ORACLE_MAX_MODES = 16
MODELS = ("distinguishable", "exact_boson")


def wrap_angles(theta) -> np.ndarray:
    """Map angles to the principal interval [-pi, pi)."""
    theta = np.asarray(theta, dtype=np.float64)
    return np.mod(theta + math.pi, 2 * math.pi) - math.pi


def fit_theta(theta, n_modes: int) -> tuple[np.ndarray, int]:
    """Zero-pad or truncate ``theta`` to a whole number of (N-1)-angle tiles."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if n_modes < 2:
        raise ConfigurationError(f"need at least 2 modes, got {n_modes}")
    if theta.size == 0:
        raise ConfigurationError("theta must contain at least one angle")
    per_tile = n_modes - 1
    n_tiling = max(1, math.ceil(theta.size / per_tile))
    length = per_tile * n_tiling
    if theta.size < length:
        fitted = np.concatenate([theta, np.zeros(length - theta.size)])
    else:
        fitted = theta[:length].copy()
    return fitted, n_tiling


@dataclass
class InterferometerSpec:
    n_modes: int
    theta: np.ndarray
    theta_fit: np.ndarray = field(init=False)
    n_tiling: int = field(init=False)
    bs_phase: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        fitted, self.n_tiling = fit_theta(self.theta, self.n_modes)
        self.theta_fit = wrap_angles(fitted)


def beam_splitter(angle: float, phase: float = 0.0) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -np.exp(-1j * phase) * s], [np.exp(1j * phase) * s, c]], dtype=np.complex128)


def build_unitary(spec: InterferometerSpec) -> np.ndarray:
    """Product of tiles; each tile applies BS on (0,1), (1,2), ..., (N-2,N-1) in that order."""
    n = spec.n_modes
    u = np.eye(n, dtype=np.complex128)
    angles = spec.theta_fit.reshape(spec.n_tiling, n - 1)
    for tile in angles:
        for j, angle in enumerate(tile):
            if angle == 0.0:
                continue
            bs = beam_splitter(angle, spec.bs_phase)
            u[j : j + 2, :] = bs @ u[j : j + 2, :]
    return u


def unitary_from_theta(theta, n_modes: int, bs_phase: float = 0.0) -> np.ndarray:
    return build_unitary(InterferometerSpec(n_modes, theta, bs_phase=bs_phase))


# -- permanents ----------------------------------------------------------------

_SUBSET_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _subsets(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _SUBSET_CACHE:
        masks = np.arange(1, 2**n)
        members = ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)
        signs = (-1.0) ** members.sum(axis=1)
        _SUBSET_CACHE[n] = (members, signs)
    return _SUBSET_CACHE[n]


def permanent(matrix) -> complex:
    """Ryser's inclusion-exclusion formula."""
    a = np.asarray(matrix, dtype=np.complex128)
    return complex(permanents(a[None])[0])


def permanents(matrices: np.ndarray) -> np.ndarray:
    """Ryser permanents of a stack of square matrices [..., n, n]."""
    a = np.asarray(matrices, dtype=np.complex128)
    n = a.shape[-1]
    if a.shape[-2] != n:
        raise ConfigurationError(f"permanent needs square matrices, got {a.shape[-2:]}")
    if n == 0:
        return np.ones(a.shape[:-2], dtype=np.complex128)
    members, signs = _subsets(n)
    # row sums over the chosen column subset: [..., subsets, rows]
    rowsums = np.einsum("tj,...ij->...ti", members, a)
    return (-1) ** n * np.einsum("t,...t->...", signs, rowsums.prod(axis=-1))


def permanent_bruteforce(matrix) -> complex:
    """Sum over all permutations; only for tiny matrices (test oracle)."""
    a = np.asarray(matrix, dtype=np.complex128)
    n = a.shape[0]
    return complex(sum(np.prod(a[np.arange(n), list(p)]) for p in itertools.permutations(range(n))))


# -- sampling ------------------------------------------------------------------


def default_input_pattern(n_modes: int = 16) -> tuple[int, ...]:
    """One photon in every other mode starting with the first (modes 1, 3, 5, ... counted from 1)."""
    return tuple(1 if j % 2 == 0 else 0 for j in range(n_modes))


@dataclass(frozen=True)
class SamplerConfig:
    input_pattern: tuple[int, ...]
    model: str = "distinguishable"
    shots: int = 200
    seed: int = 0

    def __post_init__(self):
        pattern = tuple(int(b) for b in self.input_pattern)
        object.__setattr__(self, "input_pattern", pattern)
        if any(b not in (0, 1) for b in pattern):
            raise ConfigurationError("input pattern must be binary (at most one photon per mode)")
        if sum(pattern) < 1:
            raise ConfigurationError("input pattern must carry at least one photon")
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown photon model {self.model!r}; choose from {MODELS}")
        if self.shots < 1:
            raise ConfigurationError(f"shots must be positive, got {self.shots}")

    @property
    def n_modes(self) -> int:
        return len(self.input_pattern)

    @property
    def n_photons(self) -> int:
        return sum(self.input_pattern)

    @property
    def input_modes(self) -> np.ndarray:
        return np.flatnonzero(self.input_pattern)


@dataclass
class SampleBatch:
    bits: np.ndarray  # [S, N] uint8 in {0, 1}

    @property
    def shots(self) -> int:
        return self.bits.shape[0]

    @property
    def n_modes(self) -> int:
        return self.bits.shape[1]


def _check_unitary_size(u: np.ndarray, config: SamplerConfig) -> None:
    if u.shape != (config.n_modes, config.n_modes):
        raise ConfigurationError(f"unitary is {u.shape} but input pattern has {config.n_modes} modes")


def _categorical(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a non-negative [rows, k] weight matrix."""
    cum = np.cumsum(weights, axis=1)
    u = rng.random(weights.shape[0]) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(idx, weights.shape[1] - 1)


def _sample_distinguishable(u, config, rng) -> np.ndarray:
    probs = np.abs(u[:, config.input_modes]) ** 2  # [N, n_ph]
    bits = np.zeros((config.shots, config.n_modes), dtype=np.uint8)
    rows = np.arange(config.shots)
    for col in range(probs.shape[1]):
        w = np.broadcast_to(probs[:, col], (config.shots, config.n_modes))
        bits[rows, _categorical(w, rng)] = 1
    return bits


def _sample_boson(u, config, rng) -> np.ndarray:
    a = u[:, config.input_modes]  # [m, n]
    m, n = a.shape
    # bounds the Ryser intermediate [chunk, n, 2^(n-1), n-1]
    chunk = max(1, min(4096, (1 << 21) // (n * n * 2**n)))
    bits = np.zeros((config.shots, m), dtype=np.uint8)
    for start in range(0, config.shots, chunk):
        c = min(chunk, config.shots - start)
        order = np.argsort(rng.random((c, n)), axis=1)
        ap = np.transpose(a[:, order], (1, 0, 2))  # [c, m, n], columns randomly permuted per sample
        picks = np.zeros((c, n), dtype=np.int64)
        rows = np.arange(c)
        picks[:, 0] = _categorical(np.abs(ap[:, :, 0]) ** 2, rng)
        for k in range(2, n + 1):
            sub = ap[rows[:, None], picks[:, : k - 1], :k]  # [c, k-1, k]
            minors = np.stack([np.delete(sub, col, axis=2) for col in range(k)], axis=1)  # [c, k, k-1, k-1]
            amp = np.einsum("sml,sl->sm", ap[:, :, :k], permanents(minors))
            picks[:, k - 1] = _categorical(np.abs(amp) ** 2, rng)
        bits[start + rows[:, None], picks] = 1
    return bits


def sample(u: np.ndarray, config: SamplerConfig, rng: np.random.Generator | None = None) -> SampleBatch:
    """Draw ``config.shots`` thresholded detection patterns."""
    u = np.asarray(u, dtype=np.complex128)
    _check_unitary_size(u, config)
    if rng is None:
        rng = stream(config.seed, "sampling")
    if config.model == "exact_boson":
        if config.n_photons > MAX_BOSON_PHOTONS:
            raise CapabilityError(
                f"exact_boson sampling is limited to {MAX_BOSON_PHOTONS} photons, got {config.n_photons}"
            )
        return SampleBatch(_sample_boson(u, config, rng))
    return SampleBatch(_sample_distinguishable(u, config, rng))


# -- exact outcome tables ------------------------------------------------------


def pattern_index(bits) -> np.ndarray:
    """Integer index of binary patterns (last axis), mode 0 most significant."""
    bits = np.asarray(bits, dtype=np.int64)
    n = bits.shape[-1]
    return bits @ (1 << np.arange(n - 1, -1, -1))


def _fock_patterns(n_modes: int, n_photons: int):
    for combo in itertools.combinations_with_replacement(range(n_modes), n_photons):
        yield np.bincount(combo, minlength=n_modes), list(combo)


def exact_distribution(u: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Probability of every thresholded pattern, as a vector of length 2**N."""
    u = np.asarray(u, dtype=np.complex128)
    _check_unitary_size(u, config)
    n, n_ph = config.n_modes, config.n_photons
    weights = 1 << np.arange(n - 1, -1, -1)
    if config.model == "exact_boson":
        if n_ph > ORACLE_MAX_PHOTONS or n > ORACLE_MAX_MODES:
            raise CapabilityError(
                f"exact enumeration limited to {ORACLE_MAX_PHOTONS} photons and {ORACLE_MAX_MODES} modes "
                f"(got {n_ph} photons, {n} modes)"
            )
        table = np.zeros(2**n)
        cols = config.input_modes
        for counts, rows in _fock_patterns(n, n_ph):
            amp = permanent(u[np.ix_(rows, cols)])
            prob = abs(amp) ** 2 / np.prod([math.factorial(c) for c in counts])
            table[int((counts > 0) @ weights)] += prob
        return table
    if n > DISTINGUISHABLE_ORACLE_MAX_MODES:
        raise CapabilityError(f"distinguishable table limited to {DISTINGUISHABLE_ORACLE_MAX_MODES} modes, got {n}")
    probs = np.abs(u[:, config.input_modes]) ** 2
    table = np.zeros(2**n)
    table[0] = 1.0
    states = np.arange(2**n)
    for col in range(n_ph):
        nxt = np.zeros_like(table)
        for mode in range(n):
            nxt += np.bincount(states | weights[mode], weights=table * probs[mode, col], minlength=2**n)
        table = nxt
    return table


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def empirical_distribution(batch: SampleBatch) -> np.ndarray:
    idx = pattern_index(batch.bits)
    return np.bincount(idx, minlength=2**batch.n_modes) / batch.shots


# -- binary dump ---------------------------------------------------------------

SAMPLE_MAGIC = b"PQKDBITS"


def write_samples(path, batch: SampleBatch) -> None:
    """8-byte magic, big-endian u32 S, u32 N, then S*N bits packed MSB-first, row-major."""
    bits = np.asarray(batch.bits, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack(">II", *bits.shape))
        fh.write(np.packbits(bits.ravel()).tobytes())


def read_samples(path) -> SampleBatch:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    shots, modes = struct.unpack(">II", raw[8:16])
    nbytes = (shots * modes + 7) // 8
    if len(raw) - 16 < nbytes:
        raise FormatError(f"{path}: truncated payload at offset {len(raw)}, need {16 + nbytes} bytes")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=16))[: shots * modes]
    return SampleBatch(bits.reshape(shots, modes))
