"""Walk through the photonic feature map: circuit, sampler, histogram feature, shot noise.

    python3 demos/photonic_features.py
"""
import math

import numpy as np

from pqkd import analysis as an
from pqkd import features as ft
from pqkd import photonic as ph


def main():
    # Two photons on a balanced beam splitter never leave through different ports.
    bs = ph.beam_splitter(math.pi / 4)
    boson = ph.exact_distribution(bs, ph.SamplerConfig((1, 1), "exact_boson"))
    classical = ph.exact_distribution(bs, ph.SamplerConfig((1, 1), "distinguishable"))
    print(f"P(both detectors click): bosons {boson[0b11]:.2e}, distinguishable {classical[0b11]:.3f}")

    # A 30-angle parameter vector is padded to two tiles of the 16-mode mesh.
    theta = np.random.default_rng(0).uniform(-np.pi, np.pi, 30)
    u = ph.unitary_from_theta(theta, 16)
    print(f"unitarity error {np.abs(u.conj().T @ u - np.eye(16)).max():.1e}")

    # 200 shots become two 256-bin byte histograms, then a standardised 512-vector.
    pipe = ft.FeaturePipeline(shots=200)
    pipe.fit(dim_theta=30, seed=0)
    z, z_tilde = pipe(theta, np.random.default_rng(1))
    print(f"histogram halves sum to {z_tilde[:256].sum():.3f} and {z_tilde[256:].sum():.3f}; "
          f"|z| = {np.linalg.norm(z):.1f}")

    # Finite-shot error against the exact marginals shrinks like S^(-1/2).
    curve = an.feature_noise_curve(pipe, theta, reps=10)
    for row in curve.rows():
        print(f"  S={row['S']:5d}  mean |z_hat - z_inf| = {row['mean_err']:.4f}")
    print(f"log-log slope {curve.slope:.3f} (expected about -0.5)")

    # An EMA over per-epoch features divides their variance by roughly (1+beta)/(1-beta).
    raw, used = an.iid_ema_trace(beta=0.9, steps=1000, dims=128)
    rep = an.ema_report(raw, used, burn_in=100)
    print(f"EMA variance ratio median {rep.median:.4f}, predicted {an.ema_variance_ratio(0.9):.4f}")


if __name__ == "__main__":
    main()
