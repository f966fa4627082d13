"""Photonic-conditioned dictionary convolutions and trainable-parameter accounting.

A compressed layer stores R spatial basis filters ``B`` [R, k, k] and a bias.
Its channel-mixing tensor is generated from the shared feature ``z`` through a
fixed Gaussian projection, ``vec(M) = A z``, with ``vec`` ordering output
channel slowest and rank fastest, and the kernel is ``W[o,i] = sum_r M[o,i,r] B[r]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError
from .nn import Tensor, conv2d, kernel_contract
from .rng import derive_seed, stream

SCOPES = {"conv1": 1, "conv12": 2, "all": 3}
SCOPE_LABELS = {"conv1": "Conv1", "conv12": "Conv1+2", "all": "AllConvs"}
KERNELS = (5, 3, 3)
PADDINGS = (2, 1, 1)
N_CLASSES = 10


def make_projection(seed: int, rows: int, d: int) -> np.ndarray:
    """Fixed projection with i.i.d. N(0, 1/d) entries, reproducible from ``seed``."""
    if rows < 1 or d < 1:
        raise ConfigurationError(f"projection needs positive size, got {rows}x{d}")
    return stream(seed, "projection").normal(0.0, 1.0 / math.sqrt(d), size=(rows, d))


def layer_projection_seed(run_seed: int, layer: int) -> int:
    return derive_seed(run_seed, "projection-seed", layer)


def generate_mixing(a: np.ndarray, z, c_out: int, c_in: int, rank: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if a.shape != (c_out * c_in * rank, z.shape[0]):
        raise ConfigurationError(
            f"projection shape {a.shape} incompatible with (C_out*C_in*R, d) = ({c_out * c_in * rank}, {z.shape[0]})"
        )
    return (a @ z).reshape(c_out, c_in, rank)


def reconstruct_kernel(mixing, basis) -> np.ndarray:
    m = np.asarray(mixing, dtype=np.float64)
    b = np.asarray(basis, dtype=np.float64)
    if m.ndim != 3 or b.ndim != 3 or m.shape[2] != b.shape[0]:
        raise ConfigurationError(f"rank mismatch between mixing {m.shape} and basis {b.shape}")
    return np.einsum("oir,rxy->oixy", m, b)


@dataclass
class DictConvLayer:
    c_in: int
    c_out: int
    k: int
    rank: int
    padding: int
    projection_seed: int
    d: int = 512
    mixing_trainable: bool = False
    basis: Tensor = field(init=False)
    bias: Tensor = field(init=False)
    projection: np.ndarray | None = field(init=False, default=None)
    mixing: Tensor | None = field(init=False, default=None)

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.rank) < 1:
            raise ConfigurationError("layer sizes must be positive")
        init = stream(self.projection_seed, "basis-init")
        std = math.sqrt(2.0 / (self.c_in * self.k * self.k * self.rank))
        self.basis = Tensor(init.normal(0.0, std, size=(self.rank, self.k, self.k)), requires_grad=True, name="basis")
        self.bias = Tensor(np.zeros(self.c_out), requires_grad=True, name="bias")
        if self.mixing_trainable:
            m0 = init.normal(0.0, 1.0, size=(self.c_out, self.c_in, self.rank))
            self.mixing = Tensor(m0, requires_grad=True, name="mixing")
        else:
            self.projection = make_projection(self.projection_seed, self.c_out * self.c_in * self.rank, self.d)

    def parameters(self) -> list[Tensor]:
        params = [self.basis, self.bias]
        if self.mixing is not None:
            params.insert(0, self.mixing)
        return params

    @property
    def trainable_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def mixing_for(self, z) -> Tensor:
        if self.mixing is not None:
            return self.mixing
        return Tensor(generate_mixing(self.projection, z, self.c_out, self.c_in, self.rank))

    def kernel(self, z) -> Tensor:
        return kernel_contract(self.mixing_for(z), self.basis)

    def __call__(self, x, z) -> Tensor:
        return dictconv_forward(x, self, z)


def dictconv_forward(x, layer: DictConvLayer, z) -> Tensor:
    """conv2d with the kernel rebuilt from ``z``; only B and bias (or M, if trainable) receive gradients."""
    return conv2d(x, layer.kernel(z), layer.bias, layer.padding)


# -- parameter accounting ------------------------------------------------------


def dense_conv_params(c_out: int, c_in: int, k: int) -> int:
    return c_out * c_in * k * k + c_out


def dict_conv_params(c_out: int, rank: int, k: int) -> int:
    return rank * k * k + c_out


def layer_compression_ratio(c_out: int, c_in: int, k: int, rank: int) -> float:
    return c_out * (c_in * k * k + 1) / (rank * k * k + c_out)


def conv_geometry(widths: Sequence[int], in_channels: int = 1) -> list[tuple[int, int, int]]:
    """(C_out, C_in, k) for conv1..conv3."""
    c1, c2, c3 = widths
    return [(c1, in_channels, KERNELS[0]), (c2, c1, KERNELS[1]), (c3, c2, KERNELS[2])]


def teacher_param_count(widths: Sequence[int], in_channels: int = 1, n_classes: int = N_CLASSES) -> int:
    conv = sum(dense_conv_params(*g) for g in conv_geometry(widths, in_channels))
    return conv + widths[2] * n_classes + n_classes


@dataclass
class CompressionConfig:
    scope: str
    ranks: tuple[int, ...]
    dim_theta: int
    widths: tuple[int, int, int]
    in_channels: int = 1
    mixing_trainable: bool = False

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ConfigurationError(f"unknown scope {self.scope!r}; choose from {tuple(SCOPES)}")
        self.ranks = tuple(int(r) for r in self.ranks)
        self.widths = tuple(int(w) for w in self.widths)
        n = SCOPES[self.scope]
        if len(self.ranks) == 1 and n > 1:
            self.ranks = self.ranks * n
        if len(self.ranks) != n:
            raise ConfigurationError(f"scope {self.scope} compresses {n} layers but {len(self.ranks)} ranks were given")
        if any(r < 1 for r in self.ranks):
            raise ConfigurationError(f"ranks must be positive, got {self.ranks}")
        if self.dim_theta < 0:
            raise ConfigurationError(f"dim_theta must be >= 0, got {self.dim_theta}")

    @property
    def n_compressed(self) -> int:
        return SCOPES[self.scope]


@dataclass
class ParamReport:
    scope: str
    ranks: tuple[int, ...]
    dim_theta: int
    teacher_total: int
    student_total: int
    teacher_conv: int
    student_conv: int
    cr_overall: float = 0.0
    cr_conv: float = 0.0

    def to_json(self) -> str:
        payload = asdict(self)
        payload["ranks"] = list(self.ranks)
        return json.dumps(payload, indent=2)


def count_params(config: CompressionConfig) -> ParamReport:
    """Trainable counts for teacher and student; theta counted once, projections never."""
    geometry = conv_geometry(config.widths, config.in_channels)
    teacher_conv = sum(dense_conv_params(*g) for g in geometry)
    student_conv = 0
    for layer, (c_out, c_in, k) in enumerate(geometry):
        if layer < config.n_compressed:
            rank = config.ranks[layer]
            student_conv += dict_conv_params(c_out, rank, k)
            if config.mixing_trainable:
                student_conv += c_out * c_in * rank
        else:
            student_conv += dense_conv_params(c_out, c_in, k)
    head = config.widths[2] * N_CLASSES + N_CLASSES
    report = ParamReport(
        scope=config.scope,
        ranks=config.ranks,
        dim_theta=config.dim_theta,
        teacher_total=teacher_conv + head,
        student_total=student_conv + head + config.dim_theta,
        teacher_conv=teacher_conv,
        student_conv=student_conv,
    )
    report.cr_overall, report.cr_conv = compression_ratios(report)
    return report


def compression_ratios(report: ParamReport) -> tuple[float, float]:
    return report.teacher_total / report.student_total, report.teacher_conv / report.student_conv


# -- mixing-subspace projection ------------------------------------------------


def project_mixing(a: np.ndarray, m_star, max_cond: float = 1e10) -> tuple[np.ndarray, float]:
    """Least-squares ``z*`` with ``A z*`` the orthogonal projection of ``m*`` onto range(A)."""
    a = np.asarray(a, dtype=np.float64)
    m_star = np.asarray(m_star, dtype=np.float64).ravel()
    if a.shape[0] != m_star.shape[0]:
        raise ConfigurationError(f"target has {m_star.shape[0]} entries but projection has {a.shape[0]} rows")
    q, r = np.linalg.qr(a)
    diag = np.abs(np.diag(r))
    cond = np.inf if diag.min() == 0 else float(np.linalg.cond(r))
    if a.shape[0] < a.shape[1] or not np.isfinite(cond) or cond > max_cond:
        raise NumericalError(f"projection is not of full column rank (condition estimate {cond:.3e})")
    z_star = np.linalg.solve(r, q.T @ m_star)
    residual = m_star - a @ z_star
    return z_star, float(np.linalg.norm(residual))


def spectral_norm(a: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on A^T A."""
    a = np.asarray(a, dtype=np.float64)
    v = stream(seed, "power-iteration").normal(size=a.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = a.T @ (a @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = math.sqrt(norm)
        if abs(new - sigma) <= tol * new:
            return new
        sigma = new
    return sigma
