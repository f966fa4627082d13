"""Teacher and student CNNs: three convolutions, two poolings, dropout, GAP and a linear head.

The student shares the teacher's topology; layers inside the compression scope
are :class:`~pqkd.dictconv.DictConvLayer` instances conditioned on a feature
vector ``z`` that is passed to every forward call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dictconv import KERNELS, N_CLASSES, PADDINGS, CompressionConfig, DictConvLayer, layer_projection_seed
from .errors import ConfigurationError
from .nn import Tensor, conv2d, dropout, global_avg_pool, linear, maxpool2x2, relu, softmax
from .rng import derive_seed, stream

DROPOUT = 0.25


@dataclass
class DenseConv:
    c_in: int
    c_out: int
    k: int
    padding: int
    seed: int
    weight: Tensor = field(init=False)
    bias: Tensor = field(init=False)

    def __post_init__(self):
        std = math.sqrt(2.0 / (self.c_in * self.k * self.k))  # He-normal
        w = stream(self.seed, "conv-init").normal(0.0, std, size=(self.c_out, self.c_in, self.k, self.k))
        self.weight = Tensor(w, requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(self.c_out), requires_grad=True, name="bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x, z=None) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.padding)


def _check_widths(widths) -> tuple[int, int, int]:
    widths = tuple(int(w) for w in widths)
    if len(widths) != 3 or min(widths) < 1:
        raise ConfigurationError(f"widths must be three positive integers, got {widths}")
    return widths


class ConvNet:
    """conv-ReLU-pool, conv-ReLU-pool, conv-ReLU-dropout, GAP, linear."""

    def __init__(self, convs: Sequence, widths, seed: int, in_channels: int = 1, n_classes: int = N_CLASSES):
        self.widths = _check_widths(widths)
        self.in_channels = in_channels
        self.convs = list(convs)
        for layer, expected in zip(self.convs, self.widths):
            if layer.c_out != expected:
                raise ConfigurationError(f"layer has {layer.c_out} output channels, widths say {expected}")
        c3 = self.widths[2]
        head = stream(seed, "head-init").normal(0.0, 1.0 / math.sqrt(c3), size=(n_classes, c3))
        self.head_w = Tensor(head, requires_grad=True, name="head_w")
        self.head_b = Tensor(np.zeros(n_classes), requires_grad=True, name="head_b")

    @property
    def conditioned(self) -> bool:
        return any(isinstance(layer, DictConvLayer) and layer.mixing is None for layer in self.convs)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.convs, start=1):
            out += [(f"conv{i}.{p.name}", p) for p in layer.parameters()]
        return out + [("head.weight", self.head_w), ("head.bias", self.head_b)]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_trainable(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def forward(self, x, z=None, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if self.conditioned and z is None:
            raise ConfigurationError("this network is feature-conditioned; pass z")
        h = x
        for i, layer in enumerate(self.convs):
            h = relu(layer(h, z))
            if i < 2:
                h = maxpool2x2(h)
        h = dropout(h, DROPOUT, rng, train)
        return linear(global_avg_pool(h), self.head_w, self.head_b)

    __call__ = forward

    def logits(self, x: np.ndarray, z=None, batch_size: int = 256) -> np.ndarray:
        """Evaluation-mode logits for a whole array, computed in chunks."""
        parts = [self.forward(x[i : i + batch_size], z).data for i in range(0, len(x), batch_size)]
        return np.concatenate(parts) if parts else np.zeros((0, self.head_b.shape[0]))

    def predict_proba(self, x: np.ndarray, z=None) -> np.ndarray:
        return softmax(self.logits(x, z))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ConfigurationError(f"state is missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ConfigurationError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def build_teacher(widths, seed: int, in_channels: int = 1) -> ConvNet:
    c1, c2, c3 = _check_widths(widths)
    chans = [(in_channels, c1), (c1, c2), (c2, c3)]
    convs = [
        DenseConv(ci, co, k, pad, seed=derive_seed(seed, "teacher-layer", i))
        for i, ((ci, co), k, pad) in enumerate(zip(chans, KERNELS, PADDINGS))
    ]
    return ConvNet(convs, (c1, c2, c3), seed, in_channels)


def build_student(config: CompressionConfig, seed: int, d: int = 512) -> ConvNet:
    c1, c2, c3 = config.widths
    chans = [(config.in_channels, c1), (c1, c2), (c2, c3)]
    convs = []
    for i, ((ci, co), k, pad) in enumerate(zip(chans, KERNELS, PADDINGS)):
        if i < config.n_compressed:
            convs.append(
                DictConvLayer(ci, co, k, config.ranks[i], pad, layer_projection_seed(seed, i), d, config.mixing_trainable)
            )
        else:
            convs.append(DenseConv(ci, co, k, pad, seed=derive_seed(seed, "student-layer", i)))
    return ConvNet(convs, config.widths, seed, config.in_channels)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else float("nan")
