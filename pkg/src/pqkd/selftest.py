"""Fast invariant checks runnable from the command line (``pqkd selftest``)."""
from __future__ import annotations

import math

import numpy as np

from . import analysis as an
from . import photonic as ph
from .dictconv import CompressionConfig, DictConvLayer, count_params, teacher_param_count
from .distill import KDConfig, SpsaConfig, cross_entropy_dist, entropy, kd_loss, kl_divergence, soften, spsa_update
from .nn import Tensor, check_gradients, conv2d


def _teacher_counts():
    got = [teacher_param_count(w) for w in ((32, 64, 128), (48, 96, 128), (64, 128, 128))]
    return got == [94_474, 154_826, 224_394], f"{got}"


def _conv1_ratio():
    r = count_params(CompressionConfig("conv1", (4,), 30, (32, 64, 128)))
    return (r.teacher_total, r.student_total) == (94_474, 93_804), f"{r.teacher_total}/{r.student_total}"


def _gradients():
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        worst = max(worst, check_gradients(lambda: (conv2d(x, w, b, 1) ** 2).sum(), [x, w, b]))
        layer = DictConvLayer(2, 3, 3, 2, 1, projection_seed=seed, d=16)
        z = rng.normal(size=16)
        worst = max(worst, check_gradients(lambda: (layer(x, z) ** 2).sum(), [layer.basis, layer.bias]))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def _hom():
    u = ph.beam_splitter(math.pi / 4)
    p = ph.exact_distribution(u, ph.SamplerConfig((1, 1), "exact_boson", 1))
    return abs(p[ph.pattern_index([1, 1])[()]]) <= 1e-12, f"P(1,1) = {p[3]:.1e}"


def _unitarity():
    rng = np.random.default_rng(0)
    worst = max(
        np.abs(u.conj().T @ u - np.eye(16)).max()
        for u in (ph.unitary_from_theta(rng.uniform(-5, 5, 30), 16) for _ in range(20))
    )
    return worst <= 1e-10, f"max |U^H U - I| = {worst:.1e}"


def _kd_identities():
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    y = rng.integers(0, 5, size=4)
    ce_only = kd_loss(s, t, y, KDConfig(lam=1.0)).item()
    ce_ref = -np.mean(np.log(soften(s, 1.0))[np.arange(4), y])
    pt, ps = soften(t[0], 3.0), soften(s[0], 3.0)
    gap = abs(kl_divergence(pt, ps) - (cross_entropy_dist(pt, ps) - entropy(pt)))
    two = kl_divergence(soften([1.0, 0.0], 1.0), soften([0.0, 1.0], 1.0))
    ok = abs(ce_only - ce_ref) <= 1e-12 and gap <= 1e-12 and abs(two - math.tanh(0.5)) <= 1e-6
    return ok, f"KL two-class {two:.6f}, identity gap {gap:.1e}"


def _spsa():
    step = spsa_update(np.array([1.0]), lambda th: float(th[0] ** 2), SpsaConfig(), None, delta=np.array([1.0]))
    return abs(step.theta[0] - 0.8) <= 1e-12, f"theta' = {step.theta[0]!r}"


def _ema():
    raw, used = an.iid_ema_trace(0.9, steps=1000, dims=128)
    rep = an.ema_report(raw, used, burn_in=100)
    target = an.ema_variance_ratio(0.9)
    return abs(rep.median - target) <= 0.2 * target, f"median ratio {rep.median:.4f} vs {target:.4f}"


def _delta_fit():
    s = np.array([50, 100, 200, 400, 800.0])
    fit = an.fit_shot_model(s, 90 - 300 / np.sqrt(s))
    return abs(fit.delta_inf - 90) <= 1e-9 and abs(fit.k_fit - 300) <= 1e-9, f"({fit.delta_inf:.6f}, {fit.k_fit:.6f})"


CHECKS = [
    ("teacher parameter counts", _teacher_counts),
    ("conv1 compression accounting", _conv1_ratio),
    ("finite-difference gradients", _gradients),
    ("Hong-Ou-Mandel suppression", _hom),
    ("interferometer unitarity", _unitarity),
    ("distillation identities", _kd_identities),
    ("SPSA closed-form step", _spsa),
    ("EMA variance attenuation", _ema),
    ("shot-model identifiability", _delta_fit),
]


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is reported as a failure, not raised
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
