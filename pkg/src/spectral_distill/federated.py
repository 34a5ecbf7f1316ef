"""Optimal local shrinkage and aggregation for K clients.

With K independent clients sharing the same population, the optimal
aggregation weights are all equal to rho* = b0^(K) / (sigma0^2 r^2 omega0),
every client uses the same local rule, and the product rho* * (local rule)
solves the K-client system (I + D_K H) b = gamma with

    D_K = diag(sigma0^2 r^2 omega0 (K-1),
               ((K-1) sigma0^2 + K delta_j) alpha_j^2, ...).

The limiting aggregated risk of arbitrary (rule, weight) choices expands
in the same weighted inner products, with cross-client product terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import measures, optimal
from .errors import AssumptionError, NumericalError
from .shrinkage import SDParams, ShrinkageFn, _grid_for_rule, validate_rule
from .spectra import SpikedModel, get_grid


@dataclass(frozen=True)
class FederatedOptimum:
    K: int
    b: tuple[float, ...]
    rho_star: float
    fK: optimal.RationalRule
    local_rule: optimal.RationalRule
    sd_params: SDParams


def _dk_diag(model: SpikedModel, K: int) -> np.ndarray:
    w = measures.mixture_weights(model)
    s0sq = model.sigma0_sq
    head = s0sq * model.r**2 * w.omega0 * (K - 1)
    tail = [
        ((K - 1) * s0sq + K * d) * a * a for d, a in model.spikes
    ]
    return np.array([head, *tail])


def federated_b(model: SpikedModel, K: int) -> np.ndarray:
    """Coefficient vector b^(K) of the K-client optimality system."""
    if K < 1 or int(K) != K:
        raise ValueError("K must be a positive integer")
    gs = measures.gram_system(model)
    lhs = np.eye(model.s + 1) + _dk_diag(model, int(K))[:, None] * gs.H
    try:
        return np.linalg.solve(lhs, gs.gamma)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise NumericalError(f"federated system became singular: {exc}") from exc


def federated_optimum(model: SpikedModel, K: int) -> FederatedOptimum:
    """Solve the K-client system and synthesize the local rule's chain."""
    K = int(K)
    optimal._require_noise(model)
    gs = measures.gram_system(model)
    b = federated_b(model, K)
    if abs(b[0]) < 1e-10 * float(np.linalg.norm(gs.gamma)):
        raise AssumptionError(
            "aggregate leading coefficient b0^(K) must be nonzero; this model "
            "and K sit on the degenerate set where the weight/rule split fails"
        )
    p0 = optimal._denominator_coeffs(model)
    q0 = optimal._numerator_coeffs(model, b)
    lead = p0[-1]
    p = p0 / lead
    s0sq_r2_om0 = model.sigma0_sq * model.r**2 * measures.mixture_weights(model).omega0
    rho = float(b[0] / s0sq_r2_om0)
    if model.s == 0:
        lam = model.c * model.sigma_eps_sq / model.r**2
        roots = (-lam,)
    else:
        roots = optimal.denominator_roots(model, p)
    fK = optimal.RationalRule(tuple(p), tuple(q0 / lead), roots)
    q_local = tuple(q0 / (lead * rho))
    local = optimal.RationalRule(tuple(p), q_local, roots)
    params = optimal.synthesize_sd_params(local)
    return FederatedOptimum(K, tuple(b), rho, fK, local, params)


def b0_noise_limit(model: SpikedModel, K: int) -> float:
    """High-noise limit of b0^(K): sigma0^2 r^2 omega0.

    Also verifies that b0^(K)(sigma_eps^2 = 1e6) is closer to the limit
    than b0^(K)(sigma_eps^2 = 1e3).
    """
    w = measures.mixture_weights(model)
    limit = model.sigma0_sq * model.r**2 * w.omega0
    near = federated_b(model.replace(sigma_eps_sq=1e6), K)[0]
    far = federated_b(model.replace(sigma_eps_sq=1e3), K)[0]
    if abs(near - limit) > abs(far - limit) + 1e-12 * abs(limit):
        raise NumericalError(
            "b0^(K) did not approach its high-noise limit monotonically "
            f"(|{near} - {limit}| vs |{far} - {limit}|)"
        )
    return limit


def product_form_limit(model: SpikedModel, phi: ShrinkageFn, psi: ShrinkageFn,
                       c_l: float, c_k: float) -> float:
    """Deterministic limit of beta0' phi(S_l) psi(S_k) beta0 / ||beta0||^2
    for independent sample covariances with aspect ratios c_l and c_k.

        omega0 (int phi dF_MP,cl)(int psi dF_MP,ck)
        + sum_j omega_j (int phi dF_dj,cl)(int psi dF_dj,ck).
    """
    w = measures.mixture_weights(model)
    grid_l = get_grid(model.replace(c=float(c_l)))
    grid_k = get_grid(model.replace(c=float(c_k)))
    total = w.omega0 * grid_l.int_mp(phi) * grid_k.int_mp(psi)
    for j, _ in enumerate(model.spikes):
        total += w.omegas[j] * grid_l.int_delta(j, phi) * grid_k.int_delta(j, psi)
    if not math.isfinite(total):
        raise NumericalError("product form limit did not evaluate finitely")
    return float(total)


def _rule_integrals(model: SpikedModel, f: ShrinkageFn):
    """(||f||_w^2, <g,f>_w, [<h_0,f>_w, ..., <h_s,f>_w]) for one rule."""
    validate_rule(model, f)
    grid = _grid_for_rule(model, f)
    x, fx = grid.x, f(grid.x)
    fa = f(grid.atom_locs) if grid.atom_locs.size else np.zeros(0)
    s0sq = model.sigma0_sq
    # ||f||_w^2 = sigma0^2 r^2 int x^2 f^2 dF_alpha + c sigma0^2 se^2 int x f^2 dF_MP
    norm2 = s0sq * model.r**2 * (
        grid.alpha_bulk @ (x**2 * fx**2) + grid.atom_alpha @ (grid.atom_locs**2 * fa**2)
    ) + model.c * s0sq * model.sigma_eps_sq * (grid.mp_bulk @ (x * fx**2))
    t = np.empty(model.s + 1)
    t[0] = grid.mp_bulk @ (x * fx)  # MP outliers carry no mass; zero atom killed by x
    for j in range(model.s):
        t[j + 1] = grid.delta_bulk[j] @ (x * fx) + grid.atom_delta[j] @ (
            grid.atom_locs * fa
        )
    gdot = s0sq * model.r**2 * measures.mixture_weights(model).omega0 * t[0]
    for j, (d, a) in enumerate(model.spikes):
        gdot += (d + s0sq) * a * a * t[j + 1]
    return float(norm2), float(gdot), t


def federated_risk(model: SpikedModel, K: int, rules, rhos) -> float:
    """Limiting prediction risk of the aggregate sum_l rho_l beta_l.

    Evaluated through the inner-product expansion of the rescaled rules
    ftilde_l = K rho_l f_l; with identical rules the mean/centered split
    makes the cross terms collapse to the single-client form.
    """
    K = int(K)
    rules = list(rules)
    rhos = [float(v) for v in rhos]
    if len(rules) != K or len(rhos) != K:
        raise ValueError(f"need exactly K={K} rules and K weights")
    s0sq = model.sigma0_sq
    norm2 = np.empty(K)
    gdot = np.empty(K)
    t = np.empty((K, model.s + 1))
    for l, (f, rho) in enumerate(zip(rules, rhos)):
        n2, gd, tv = _rule_integrals(model, f)
        scale = K * rho
        norm2[l] = scale**2 * n2
        gdot[l] = scale * gd
        t[l] = scale * tv

    total = float(np.sum(norm2)) - 2.0 * K * float(np.sum(gdot))
    sums = t.sum(axis=0)
    cross = 0.5 * (sums**2 - (t**2).sum(axis=0))  # sum_{l<l'} t_l t_l'
    w = measures.mixture_weights(model)
    total += 2.0 * s0sq * model.r**2 * w.omega0 * cross[0]
    for j, (d, a) in enumerate(model.spikes):
        total += 2.0 * s0sq * a * a * cross[j + 1]
        total += d * a * a * sums[j + 1] ** 2
    spike_const = sum(d * a * a for d, a in model.spikes)
    total += K**2 * (s0sq * model.r**2 + spike_const)
    return total / K**2
