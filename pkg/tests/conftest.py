import numpy as np
import pytest

from spectral_distill import SpikedModel


@pytest.fixture(scope="session")
def fig1_model():
    # two-spike benchmark: c=3, delta=(2,3), alpha=(3,2.5), r=5, sigma_eps=2
    return SpikedModel(1.0, 3.0, ((2.0, 3.0), (3.0, 2.5)), 5.0, 4.0)


@pytest.fixture(scope="session")
def fig3_factory():
    def make(delta):
        return SpikedModel(1.0, 3.0, ((float(delta), 6.0),), 8.0, 16.0)

    return make


@pytest.fixture(scope="session")
def fig4_model():
    # one-spike benchmark: c=2, delta=7, alpha=1.7, r=2, sigma_eps=2
    return SpikedModel(1.0, 2.0, ((7.0, 1.7),), 2.0, 4.0)


def random_model(rng, s=None, c_range=(0.3, 4.0), force_above_bbp=False):
    """Valid random model away from the excluded degeneracies."""
    if s is None:
        s = int(rng.integers(0, 4))
    while True:
        sigma0_sq = float(rng.uniform(0.5, 2.0))
        c = float(rng.uniform(*c_range))
        if abs(c - 1.0) < 5e-2:
            continue
        thr = np.sqrt(c) * sigma0_sq
        deltas = []
        tries = 0
        while len(deltas) < s and tries < 200:
            tries += 1
            lo = 1.2 * thr if force_above_bbp else 0.3
            d = float(rng.uniform(lo, max(8.0, 2.5 * thr)))
            ok = abs(d - thr) > 0.05 * max(1.0, thr)
            for d2 in deltas:
                if abs(d - d2) < 0.15 or abs(d * d2 - c * sigma0_sq**2) < 0.05:
                    ok = False
            if abs(d * d - c * sigma0_sq**2) < 0.05:
                ok = False
            if ok:
                deltas.append(d)
        if len(deltas) < s:
            continue
        r = float(rng.uniform(1.0, 5.0))
        alphas = rng.uniform(0.2, 1.0, size=s)
        alphas *= np.sqrt(0.7) * r / max(np.linalg.norm(alphas), 1e-9)
        signs = rng.choice([-1.0, 1.0], size=s)
        spikes = tuple(
            (deltas[j], float(alphas[j] * signs[j])) for j in range(s)
        )
        sigma_eps_sq = float(rng.uniform(0.25, 4.0))
        try:
            return SpikedModel(sigma0_sq, c, spikes, r, sigma_eps_sq)
        except Exception:
            continue
