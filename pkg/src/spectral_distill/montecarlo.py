"""Finite-sample simulator and convergence harness.

Generates spiked-model data, fits every estimator with a limiting-risk
formula, computes exact Sigma-norm risks through the spike decomposition
(no p x p covariance is ever materialized), and compares replicate
averages against asymptotic targets.

Randomness uses counter-based Philox streams keyed by
(seed, replicate, role[, client]) so replicates and clients are
independent and bit-reproducible under any parallel schedule.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .shrinkage import SDParams, ShrinkageFn
from .spectra import SpikedModel

_ROLE_IDS = {"signal": 0, "design": 1, "noise": 2}

#: eigendirections with |d_i + lambda_t| below this times the largest
#: eigenvalue contribute nothing, matching the pseudoinverse convention.
PINV_RTOL = 1e-10

_ENTRY_DISTS = ("gaussian", "rademacher", "student_t")


@dataclass(frozen=True)
class SimConfig:
    model: SpikedModel
    n: int
    p: int
    seed: int
    entry_dist: str = "gaussian"
    n_replicates: int = 1
    spike_directions: object = "random_orthonormal"  # or a p x s matrix
    student_df: float = 10.0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be positive")
        if self.entry_dist not in _ENTRY_DISTS:
            raise ValueError(f"entry_dist must be one of {_ENTRY_DISTS}")
        if self.entry_dist == "student_t" and not self.student_df > 8:
            raise ValueError(
                "student_t entries need df > 8 to satisfy the 8+eta moment condition"
            )
        if self.p < self.model.s:
            raise ValueError("p must be at least the number of spikes")
        if isinstance(self.spike_directions, str):
            if self.spike_directions != "random_orthonormal":
                raise ValueError(
                    "spike_directions must be 'random_orthonormal' or a matrix"
                )
        else:
            V = np.asarray(self.spike_directions, dtype=float)
            if V.shape != (self.p, self.model.s):
                raise ValueError("provided spike directions must be p x s")
            if not np.allclose(V.T @ V, np.eye(self.model.s), atol=1e-10):
                raise ValueError("provided spike directions must be orthonormal")
            object.__setattr__(self, "spike_directions", V)
        if abs(self.p / self.n - self.model.c) > 0.01:
            warnings.warn(
                f"p/n = {self.p / self.n} is more than 0.01 away from c = {self.model.c}",
                stacklevel=2,
            )


def _rng(seed: int, replicate: int, role: str, client: int | None = None):
    key = (replicate, _ROLE_IDS[role])
    if client is not None:
        key = key + (client,)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _draw_entries(rng, shape, dist, df):
    if dist == "gaussian":
        return rng.standard_normal(shape)
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
    # unit-variance student t
    return rng.standard_t(df, size=shape) / math.sqrt(df / (df - 2.0))


def _signal(cfg: SimConfig, replicate: int):
    """Spike directions V (p x s) and beta0 with exact norm and alignments."""
    model, p, s = cfg.model, cfg.p, cfg.model.s
    rng = _rng(cfg.seed, replicate, "signal")
    if isinstance(cfg.spike_directions, str):
        if s > 0:
            G = rng.standard_normal((p, s))
            Q, R = np.linalg.qr(G)
            V = Q * np.sign(np.diag(R))  # deterministic sign convention
        else:
            V = np.zeros((p, 0))
    else:
        V = np.asarray(cfg.spike_directions, dtype=float)
    g = rng.standard_normal(p)
    if s > 0:
        g = g - V @ (V.T @ g)
    norm = np.linalg.norm(g)
    if norm == 0:  # pragma: no cover - probability zero
        raise RuntimeError("degenerate residual direction draw")
    resid = math.sqrt(model.r**2 - float(np.sum(model.alphas**2)))
    beta0 = (resid / norm) * g
    if s > 0:
        beta0 = beta0 + V @ model.alphas
    return beta0, V


def gen_data(cfg: SimConfig, replicate: int = 0, client: int | None = None):
    """One dataset (X, y, beta0, V).

    X = Z Sigma^{1/2} applied through the spike identity
    Sigma^{1/2} = sigma0 I + sum_j (sqrt(delta_j + sigma0^2) - sigma0) v_j v_j';
    beta0 satisfies ||beta0|| = r and beta0'v_j = alpha_j exactly, with the
    remainder drawn uniformly in the orthocomplement of span(v_j).
    """
    model = cfg.model
    beta0, V = _signal(cfg, replicate)
    rng_x = _rng(cfg.seed, replicate, "design", client)
    Z = _draw_entries(rng_x, (cfg.n, cfg.p), cfg.entry_dist, cfg.student_df)
    sigma0 = math.sqrt(model.sigma0_sq)
    X = sigma0 * Z
    for j in range(model.s):
        coef = math.sqrt(model.deltas[j] + model.sigma0_sq) - sigma0
        X += coef * np.outer(Z @ V[:, j], V[:, j])
    rng_e = _rng(cfg.seed, replicate, "noise", client)
    eps = rng_e.standard_normal(cfg.n) * math.sqrt(model.sigma_eps_sq)
    y = X @ beta0 + eps
    return X, y, beta0, V


@dataclass
class SampleSpectrum:
    """Thin eigendecomposition of Sigma_hat = X'X/n.

    Only the min(n, p) possibly-nonzero eigenpairs are kept; for p > n the
    remaining p - n eigenvalues are exactly zero and their directions are
    annihilated by X'y, so they never enter a fit.
    """

    d: np.ndarray
    W: np.ndarray
    z: np.ndarray  # W' X'y / n
    n: int
    p: int


def decompose(X: np.ndarray, y: np.ndarray | None = None) -> SampleSpectrum:
    n, p = X.shape
    if p <= n:
        d, W = np.linalg.eigh(X.T @ X / n)
    else:
        # Gram trick: eigendecompose the n x n matrix and lift.
        dg, U = np.linalg.eigh(X @ X.T / n)
        keep = dg > max(dg[-1], 0.0) * 1e-14
        dg, U = dg[keep], U[:, keep]
        W = (X.T @ U) / np.sqrt(n * dg)
        d = dg
    d = np.clip(d, 0.0, None)
    z = W.T @ (X.T @ y) / n if y is not None else np.zeros_like(d)
    return SampleSpectrum(d, W, z, n, p)


def apply_rule_to_vector(spectrum: SampleSpectrum, f: ShrinkageFn,
                         v: np.ndarray) -> np.ndarray:
    """f(Sigma_hat) v, including the implicit zero-eigenvalue directions."""
    vals = _apply_rule_values(f, spectrum.d)
    coords = spectrum.W.T @ v
    out = spectrum.W @ (vals * coords)
    if spectrum.W.shape[1] < spectrum.p:
        f0 = float(np.asarray(f(np.zeros(1)))[0])
        if f0 != 0.0:
            out = out + f0 * (v - spectrum.W @ coords)
    return out


def _apply_rule_values(f: ShrinkageFn, d: np.ndarray) -> np.ndarray:
    vals = np.asarray(f(d), dtype=float)
    vals = np.where(np.isfinite(vals), vals, 0.0)
    dmax = float(d.max()) if d.size else 1.0
    for pole in f.poles():
        vals = np.where(np.abs(d - pole) < PINV_RTOL * max(dmax, 1.0), 0.0, vals)
    return vals


@dataclass(frozen=True)
class FittedEstimator:
    coefficients: np.ndarray
    tag: str
    hyperparams: tuple = ()


def fit_shrinkage(X, y, f: ShrinkageFn, spectrum: SampleSpectrum | None = None
                  ) -> FittedEstimator:
    """beta_f = f(Sigma_hat) X'y/n via the sample eigenbasis."""
    sp = decompose(X, y) if spectrum is None else spectrum
    beta = sp.W @ (_apply_rule_values(f, sp.d) * sp.z)
    return FittedEstimator(beta, "shrinkage", (f,))


def fit_sd(X, y, params: SDParams, spectrum: SampleSpectrum | None = None
           ) -> FittedEstimator:
    """Self-distillation recursion in the sample eigenbasis.

    Stage t solves (Sigma_hat + lambda_t I)^+ applied to the blend of the
    data term and the previous stage's predictions; directions with
    |d_i + lambda_t| inside the pseudoinverse band contribute nothing.
    """
    sp = decompose(X, y) if spectrum is None else spectrum
    d, z = sp.d, sp.z
    band = PINV_RTOL * max(float(d.max()) if d.size else 1.0, 1.0)
    lam = params.lambdas

    def pinv_scale(t):
        denom = d + lam[t]
        with np.errstate(divide="ignore"):
            inv = np.where(np.abs(denom) < band, 0.0, 1.0 / denom)
        return inv

    coords = pinv_scale(0) * z
    for t in range(1, len(lam)):
        xi = params.xis[t - 1]
        coords = pinv_scale(t) * ((1.0 - xi) * z + xi * d * coords)
    return FittedEstimator(sp.W @ coords, "sd", (params,))


def fit_pcr(X, y, m: int, spectrum: SampleSpectrum | None = None) -> FittedEstimator:
    """Least squares on the top m sample principal components."""
    sp = decompose(X, y) if spectrum is None else spectrum
    if not 1 <= m <= min(sp.n, sp.p):
        raise ValueError(f"m must be in 1..min(n, p) = {min(sp.n, sp.p)}")
    order = np.argsort(sp.d)[::-1][:m]
    with np.errstate(divide="ignore"):
        coords = np.where(sp.d[order] > 0, sp.z[order] / sp.d[order], 0.0)
    return FittedEstimator(sp.W[:, order] @ coords, "pcr", (m,))


def fit_minnorm(X, y, spectrum: SampleSpectrum | None = None) -> FittedEstimator:
    """Minimum l2-norm interpolator (OLS when n > p)."""
    sp = decompose(X, y) if spectrum is None else spectrum
    keep = sp.d > (sp.d.max() if sp.d.size else 1.0) * 1e-12
    coords = np.zeros_like(sp.d)
    coords[keep] = sp.z[keep] / sp.d[keep]
    return FittedEstimator(sp.W @ coords, "minnorm")


def fit_gd(X, y, eta: float, steps: int, spectrum: SampleSpectrum | None = None
           ) -> FittedEstimator:
    """Gradient descent from zero for `steps` iterations with step size eta."""
    from .shrinkage import GDPoly

    sp = decompose(X, y) if spectrum is None else spectrum
    vals = GDPoly(eta, steps)(sp.d)
    return FittedEstimator(sp.W @ (vals * sp.z), "gd", (eta, steps))


def sigma_risk(beta_hat, beta0, model: SpikedModel, V) -> float:
    """Exact ||beta_hat - beta0||_Sigma^2 through the spike decomposition."""
    d = np.asarray(beta_hat, dtype=float) - np.asarray(beta0, dtype=float)
    if d.shape != np.asarray(beta0).shape:
        raise ValueError("beta_hat and beta0 must have matching shapes")
    total = model.sigma0_sq * float(d @ d)
    for j in range(model.s):
        total += model.deltas[j] * float(V[:, j] @ d) ** 2
    return total


def fit_aggregated(cfgs, rules, rhos) -> FittedEstimator:
    """Weighted sum of per-client shrinkage fits on shared-signal data.

    All configs must share the model and p; the signal (beta0 and the
    spike directions) comes from the first config's signal stream, while
    each client's design and noise use its own seed.
    """
    cfgs = list(cfgs)
    K = len(cfgs)
    if len(rules) != K or len(rhos) != K:
        raise ValueError("need one rule and one weight per client")
    base = cfgs[0]
    for cfg in cfgs[1:]:
        if cfg.model != base.model or cfg.p != base.p:
            raise ValueError("clients must share the model and dimension p")
    beta = np.zeros(base.p)
    for l, (cfg, f, rho) in enumerate(zip(cfgs, rules, rhos)):
        X, y, _, _ = _client_data(base, cfg, l)
        beta += rho * fit_shrinkage(X, y, f).coefficients
    return FittedEstimator(beta, "aggregated", (tuple(rhos),))


def _client_data(base: SimConfig, cfg: SimConfig, client: int, replicate: int = 0):
    """Client dataset with the signal drawn from the base config's stream."""
    beta0, V = _signal(base, replicate)
    model = cfg.model
    rng_x = _rng(cfg.seed, replicate, "design", client)
    Z = _draw_entries(rng_x, (cfg.n, cfg.p), cfg.entry_dist, cfg.student_df)
    sigma0 = math.sqrt(model.sigma0_sq)
    X = sigma0 * Z
    for j in range(model.s):
        coef = math.sqrt(model.deltas[j] + model.sigma0_sq) - sigma0
        X += coef * np.outer(Z @ V[:, j], V[:, j])
    eps = _rng(cfg.seed, replicate, "noise", client).standard_normal(cfg.n)
    y = X @ beta0 + eps * math.sqrt(model.sigma_eps_sq)
    return X, y, beta0, V


def make_fitter(est):
    """Normalize an estimator spec to a fit(X, y, spectrum) callable.

    Accepts a ShrinkageFn, SDParams, or tuples ("pcr", m), ("minnorm",),
    ("gd", eta, steps).
    """
    if isinstance(est, ShrinkageFn):
        return lambda X, y, sp: fit_shrinkage(X, y, est, sp)
    if isinstance(est, SDParams):
        return lambda X, y, sp: fit_sd(X, y, est, sp)
    if isinstance(est, tuple) and est:
        kind = est[0]
        if kind == "pcr":
            return lambda X, y, sp: fit_pcr(X, y, est[1], sp)
        if kind == "minnorm":
            return lambda X, y, sp: fit_minnorm(X, y, sp)
        if kind == "gd":
            return lambda X, y, sp: fit_gd(X, y, est[1], est[2], sp)
    raise ValueError(f"unrecognized estimator spec: {est!r}")


@dataclass(frozen=True)
class HarnessReport:
    empirical_mean: float
    std_error: float
    target: float
    relative_gap: float
    n_replicates: int
    values: tuple[float, ...]


def _replicate_risks(cfg: SimConfig, fitters: dict, replicate: int) -> dict:
    X, y, beta0, V = gen_data(cfg, replicate)
    sp = decompose(X, y)
    return {
        name: sigma_risk(fit(X, y, sp).coefficients, beta0, cfg.model, V)
        for name, fit in fitters.items()
    }


def harness_suite(cfg: SimConfig, estimators: dict, targets: dict,
                  threads: int = 1) -> dict[str, HarnessReport]:
    """Run all replicates once, fitting every estimator on shared data.

    Results are reduced in replicate order, so reports are identical for
    any thread count.
    """
    fitters = {name: make_fitter(est) for name, est in estimators.items()}
    reps = range(cfg.n_replicates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(lambda r: _replicate_risks(cfg, fitters, r), reps))
    else:
        rows = [_replicate_risks(cfg, fitters, r) for r in reps]
    out = {}
    for name in estimators:
        vals = np.array([row[name] for row in rows])
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        target = float(targets[name])
        gap = abs(mean - target) / abs(target) if target != 0 else math.inf
        out[name] = HarnessReport(mean, se, target, gap, len(vals), tuple(vals))
    return out


def converge_harness(cfg: SimConfig, estimator, target: float,
                     threads: int = 1) -> HarnessReport:
    """Replicate-averaged empirical risk against an asymptotic target."""
    return harness_suite(cfg, {"est": estimator}, {"est": target}, threads)["est"]
