"""Risk-optimal shrinkage rules and their self-distillation synthesis.

The prediction-optimal rule solves (I + D H) b = gamma with
D = diag(0, delta_1 alpha_1^2, ...) and is the rational function

    f*(x) = (b_0 nu + sum_j b_j nu_{-j})
            / (sigma0^2 r^2 x (omega0 nu + sum_j omega_j nu_{-j})
               + c sigma0^2 sigma_eps^2 nu).

Its monic denominator P has s+1 distinct real roots, exactly one of
them negative and the positive ones interlacing the outliers; ordering
those roots and matching coefficients turns Q/P into an s-step
self-distillation chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import measures
from .errors import AssumptionError, NumericalError, StructuralError
from .shrinkage import Rational, Ridge, SDParams, sd_chain_fn
from .spectra import SpikedModel, get_grid, outlier_location

_polyval = np.polynomial.polynomial.polyval
_polymul = np.polynomial.polynomial.polymul
_polyder = np.polynomial.polynomial.polyder


@dataclass(frozen=True)
class OptimalCoefficients:
    """Solution b of the optimality system plus the diagnostic inner
    products A_j = <f*, h_j>_w."""

    b: tuple[float, ...]
    A: tuple[float, ...]


@dataclass(frozen=True)
class RationalRule:
    """Monic rational rule Q/P with deg P = deg Q + 1 and known P roots."""

    p_coeffs: tuple[float, ...]
    q_coeffs: tuple[float, ...]
    roots_of_p: tuple[float, ...]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        num = _polyval(x, np.array(self.q_coeffs))
        den = np.ones_like(x)
        for g in self.roots_of_p:
            den = den * (x - g)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = num / den
        return np.where(np.isfinite(out), out, 0.0)

    def as_shrinkage(self, model: SpikedModel | None = None) -> Rational:
        return Rational(self.q_coeffs, self.p_coeffs, model)


def _require_noise(model: SpikedModel):
    if model.sigma_eps_sq == 0.0:
        raise AssumptionError(
            "optimal-rule synthesis needs positive noise variance: at "
            "sigma_eps_sq = 0 the denominator gains a root at zero, the "
            "guaranteed negative root disappears, and the distillation "
            "parameterization degenerates"
        )


def _check_spacing(model: SpikedModel):
    xs = sorted(outlier_location(model, d) for d in model.deltas)
    for lo, hi in zip(xs[:-1], xs[1:]):
        if hi - lo < 1e-9 * hi:
            raise StructuralError(
                "two outlier locations nearly coincide; the model sits on an "
                "excluded degeneracy and root interlacing would be corrupted"
            )


def _shift_up(coeffs: np.ndarray) -> np.ndarray:
    # multiply polynomial by x
    return np.concatenate([[0.0], coeffs])


def _denominator_coeffs(model: SpikedModel) -> np.ndarray:
    """Unnormalized denominator P0 (ascending coefficients)."""
    rn = measures.rn_polynomials(model)
    w = measures.mixture_weights(model)
    mix = w.omega0 * np.array(rn.nu_coeffs)
    for om, nm in zip(w.omegas, rn.nu_minus_coeffs):
        mix = np.polynomial.polynomial.polyadd(mix, om * np.array(nm))
    s0sq = model.sigma0_sq
    p0 = s0sq * model.r**2 * _shift_up(mix)
    p0 = np.polynomial.polynomial.polyadd(
        p0, model.c * s0sq * model.sigma_eps_sq * np.array(rn.nu_coeffs)
    )
    return p0


def _numerator_coeffs(model: SpikedModel, b: np.ndarray) -> np.ndarray:
    rn = measures.rn_polynomials(model)
    q0 = b[0] * np.array(rn.nu_coeffs)
    for j in range(model.s):
        q0 = np.polynomial.polynomial.polyadd(
            q0, b[j + 1] * np.array(rn.nu_minus_coeffs[j])
        )
    # pad so deg Q0 slots align with deg P0 - 1 = s
    if q0.size < model.s + 1:
        q0 = np.concatenate([q0, np.zeros(model.s + 1 - q0.size)])
    return q0


def denominator_roots(model: SpikedModel, p_coeffs) -> tuple[float, ...]:
    """All s+1 real roots of the monic denominator.

    Brackets are the analytically guaranteed sign-change intervals
    between consecutive outliers, one interval to the right of the last
    outlier, and one on the negative axis; a Newton polish follows the
    bisection-style solve.
    """
    p = np.asarray(p_coeffs, dtype=float)
    s = model.s
    if p.size != s + 2:
        raise ValueError("denominator must have degree s+1")
    _check_spacing(model)
    xs = np.sort([outlier_location(model, d) for d in model.deltas])

    def pv(t):
        return _polyval(t, p)

    roots = []
    # interlaced roots between consecutive outliers
    for lo, hi in zip(xs[:-1], xs[1:]):
        flo, fhi = pv(lo), pv(hi)
        if flo == 0.0 or fhi == 0.0 or flo * fhi > 0:
            raise StructuralError(
                "no sign change between consecutive outliers; expected root "
                "interlacing fails (model near an excluded degeneracy)"
            )
        roots.append(brentq(pv, lo, hi, xtol=1e-300, rtol=8.9e-16))
    # root beyond the largest outlier
    lo = xs[-1]
    hi = max(2.0 * lo, lo + 1.0)
    for _ in range(200):
        if pv(lo) * pv(hi) < 0:
            break
        hi *= 2.0
    else:
        raise StructuralError("could not bracket the root beyond the last outlier")
    roots.append(brentq(pv, lo, hi, xtol=1e-300, rtol=8.9e-16))
    # the single negative root
    hi = 0.0
    lo = -max(1.0, xs[-1])
    for _ in range(200):
        if pv(lo) * pv(hi) < 0:
            break
        lo *= 2.0
    else:
        raise StructuralError("could not bracket the negative root")
    roots.append(brentq(pv, lo, hi, xtol=1e-300, rtol=8.9e-16))

    dp = _polyder(p)
    polished = []
    for g in roots:
        for _ in range(3):
            d = _polyval(g, dp)
            if d == 0.0:
                break
            g = g - _polyval(g, p) / d
        polished.append(float(g))
    for g in polished:
        # backward-error scale: the evaluation magnitude at the root
        scale = float(np.sum(np.abs(p) * np.abs(g) ** np.arange(p.size)))
        if abs(_polyval(g, p)) > 1e-12 * max(1.0, scale):
            raise StructuralError(f"root polish failed at {g}")
    polished.sort()
    if len(set(polished)) != s + 1 or sum(1 for g in polished if g < 0) != 1:
        raise StructuralError(
            "denominator roots do not show s+1 distinct values with exactly "
            "one negative"
        )
    return tuple(polished)


def _solve_system(model: SpikedModel, dmat_diag: np.ndarray) -> np.ndarray:
    gs = measures.gram_system(model)
    lhs = np.eye(model.s + 1) + dmat_diag[:, None] * gs.H
    try:
        b = np.linalg.solve(lhs, gs.gamma)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - theory forbids it
        raise NumericalError(f"optimality system became singular: {exc}") from exc
    return b


def _assemble(model: SpikedModel, b: np.ndarray) -> RationalRule:
    p0 = _denominator_coeffs(model)
    q0 = _numerator_coeffs(model, b)
    lead = p0[-1]
    if lead == 0.0:
        raise NumericalError("denominator lost its leading coefficient")
    p = p0 / lead
    q = q0 / lead
    roots = denominator_roots(model, p)
    return RationalRule(tuple(p), tuple(q), roots)


def fixed_point_residual(model: SpikedModel, rule: RationalRule) -> float:
    """max over the grid of |A f* - g| for A f = f + sum_j d_j a_j^2 <f,h_j> h_j."""
    grid = get_grid(model)
    pts = grid.support_points
    fvals = rule(pts)
    gvals = measures.target_g(model, pts)
    resid = fvals.copy()
    for j, (d, al) in enumerate(model.spikes):
        aj = grid.int_delta(j, lambda t: t * rule(t))  # <f, h_j>_w
        resid = resid + d * al * al * aj * measures.basis_h(model, j + 1, pts)
    return float(np.max(np.abs(resid - gvals)))


def inner_products_with_basis(model: SpikedModel, rule) -> np.ndarray:
    """A_j = <rule, h_j>_w = int x rule dF_{delta_j}, j = 1..s."""
    grid = get_grid(model)
    return np.array(
        [grid.int_delta(j, lambda t: t * rule(t)) for j in range(model.s)]
    )


def optimal_pred_rule(model: SpikedModel) -> tuple[RationalRule, OptimalCoefficients]:
    """Prediction-risk-optimal rule for a model with s >= 1 spikes."""
    if model.s == 0:
        raise ValueError("s = 0 is the isotropic case; use isotropic_optimal")
    _require_noise(model)
    dmat = np.concatenate([[0.0], model.deltas * model.alphas**2])
    b = _solve_system(model, dmat)
    rule = _assemble(model, b)
    A = inner_products_with_basis(model, rule)
    return rule, OptimalCoefficients(tuple(b), tuple(A))


def optimal_est_rule(model: SpikedModel) -> RationalRule:
    """Estimation-risk-optimal rule; same denominator roots as the
    prediction optimum up to the sigma0^2 factor."""
    _require_noise(model)
    rn = measures.rn_polynomials(model)
    w = measures.mixture_weights(model)
    mix = w.omega0 * np.array(rn.nu_coeffs)
    for om, nm in zip(w.omegas, rn.nu_minus_coeffs):
        mix = np.polynomial.polynomial.polyadd(mix, om * np.array(nm))
    p0 = model.r**2 * _shift_up(mix)
    p0 = np.polynomial.polynomial.polyadd(
        p0, model.c * model.sigma_eps_sq * np.array(rn.nu_coeffs)
    )
    q0 = model.r**2 * mix
    if q0.size < model.s + 1:
        q0 = np.concatenate([q0, np.zeros(model.s + 1 - q0.size)])
    lead = p0[-1]
    p = tuple(p0 / lead)
    q = tuple(q0 / lead)
    if model.s == 0:
        lam = model.c * model.sigma_eps_sq / model.r**2
        return RationalRule(p, q, (-lam,))
    roots = denominator_roots(model, p)
    return RationalRule(p, q, roots)


def isotropic_optimal(model: SpikedModel) -> Ridge:
    """Optimal rule under isotropy: ridge at lambda* = c sigma_eps^2 / r^2."""
    if model.s != 0:
        raise ValueError("isotropic_optimal requires s = 0; use optimal_pred_rule")
    return Ridge(model.c * model.sigma_eps_sq / model.r**2)


def synthesize_sd_params(rule: RationalRule) -> SDParams:
    """Self-distillation parameters realizing Q/P exactly in s steps.

    Orders the roots of P and builds coefficients t_0..t_s such that

        Q(x) = sum_j t_j x^{d-j} prod_{i<j} (x - gamma_i),

    then maps lambda_i = -gamma_i and xi_i = (t_0+..+t_{i-1})/(t_0+..+t_i).
    Roots are consumed in descending order, skipping any root where the
    residual polynomial vanishes (which would break the construction);
    the descending order puts the largest root at stage 0 so the initial
    ridge has the single large negative penalty.
    """
    gammas_all = list(rule.roots_of_p)
    d = len(gammas_all) - 1
    q = np.asarray(rule.q_coeffs, dtype=float)
    lead_q = float(q[d]) if q.size > d else 0.0

    def q_at(x):
        return float(_polyval(x, q))

    def basis_val(j, x, chosen):
        v = x ** (d - j)
        for i in range(j):
            v *= x - chosen[i]
        return v

    chosen: list[float] = []
    ts: list[float] = []
    remaining = sorted(gammas_all, reverse=True)
    for k in range(-1, d):
        partial = sum(ts)
        # residual polynomial value at a candidate root
        def r_k(x):
            val = q_at(x)
            for j, tj in enumerate(ts):
                val -= tj * basis_val(j, x, chosen)
            val += (partial - lead_q + 1.0) * x ** (d - k - 1) * math.prod(
                (x - g for g in chosen), start=1.0
            )
            return val

        rvals = [abs(r_k(g)) for g in remaining]
        scale = max(rvals) if rvals else 0.0
        pick = None
        for idx, g in enumerate(remaining):
            if g != 0.0 and rvals[idx] > 1e-10 * max(1.0, scale):
                pick = idx
                break
        if pick is None:
            raise StructuralError(
                "self-distillation synthesis failed: every remaining root makes "
                "the partial sums degenerate (numerical-precision failure)"
            )
        g = remaining.pop(pick)
        num = q_at(g) - sum(tj * basis_val(j, g, chosen) for j, tj in enumerate(ts))
        den = g ** (d - k - 1) * math.prod((g - gi for gi in chosen), start=1.0)
        chosen.append(g)
        ts.append(num / den)

    sums = np.cumsum(ts)
    if abs(sums[-1] - 1.0) > 1e-8:
        raise StructuralError(
            f"synthesized stage weights must sum to 1, got {sums[-1]}"
        )
    if np.any(np.abs(sums) < 1e-14):
        raise StructuralError("degenerate partial sum in stage weights")
    lambdas = tuple(-g for g in chosen)
    xis = tuple(float(sums[i - 1] / sums[i]) for i in range(1, d + 1))
    return SDParams(lambdas, xis)


def coprimality_check(rule: RationalRule) -> bool:
    """True iff P and Q share no root (tolerance relative to root spacing).

    True implies no shorter self-distillation chain can realize the rule.
    """
    q = np.asarray(rule.q_coeffs, dtype=float)
    nz = np.nonzero(np.abs(q) > 0)[0]
    if nz.size == 0:
        return True  # zero numerator shares nothing
    q = q[: nz[-1] + 1]
    if q.size == 1:
        return True
    q_roots = np.polynomial.polynomial.polyroots(q)
    p_roots = np.asarray(rule.roots_of_p)
    spacing = np.min(np.diff(np.sort(p_roots))) if p_roots.size > 1 else 1.0
    for qr in q_roots:
        if abs(qr.imag) > 1e-8 * max(1.0, abs(qr.real)):
            continue
        if np.min(np.abs(p_roots - qr.real)) < 1e-8 * max(spacing, 1e-30):
            return False
    return True


def sd_round_trip_error(model: SpikedModel, rule: RationalRule,
                        params: SDParams) -> float:
    """sup over grid and atoms of |sd_chain(params) - rule|."""
    grid = get_grid(model)
    pts = grid.support_points
    return float(np.max(np.abs(sd_chain_fn(params)(pts) - rule(pts))))
