"""Spectral shrinkage rules and their limiting prediction/estimation risks.

A rule f maps sample eigenvalues to shrinkage factors; the estimator is
f(Sigma_hat) X'y/n with the pseudoinverse convention that eigendirections
where |f| is infinite contribute nothing. Limiting risks are exact
quadratures of

    pred:  sigma0^2 r^2 int (1-xf)^2 dF_alpha
           + sum_j delta_j alpha_j^2 (int (1-xf) dF_{delta_j})^2
           + c sigma0^2 sigma_eps^2 int x f^2 dF_MP
    est:   r^2 int (1-xf)^2 dF_alpha + c sigma_eps^2 int x f^2 dF_MP
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionError, NumericalError
from .spectra import SpikedModel, get_grid, mp_support, mp_quantile_inverse


@dataclass(frozen=True)
class SDParams:
    """Self-distillation parameters (lambda_0..lambda_k, xi_1..xi_k)."""

    lambdas: tuple[float, ...]
    xis: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "xis", tuple(float(v) for v in self.xis))
        if len(self.lambdas) != len(self.xis) + 1:
            raise ValueError("need one more lambda than xi (lambda_0..k, xi_1..k)")

    @property
    def k(self) -> int:
        return len(self.xis)


class ShrinkageFn:
    """Base class: a callable rule with optional pole/breakpoint metadata."""

    #: bulk points where the rule is only piecewise smooth (ramp edges);
    #: risk quadrature splits panels there.
    breakpoints: tuple[float, ...] = ()

    def poles(self) -> tuple[float, ...]:
        return ()

    def __call__(self, x):  # pragma: no cover - abstract
        raise NotImplementedError


def _finite_or_zero(vals, flag_context: str | None = None):
    vals = np.asarray(vals, dtype=float)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        if flag_context:
            warnings.warn(
                f"{flag_context}: rule evaluated at a pole; "
                "mapped to 0 by the pseudoinverse convention",
                RuntimeWarning,
                stacklevel=3,
            )
        vals = np.where(bad, 0.0, vals)
    return vals


@dataclass(frozen=True)
class Ridge(ShrinkageFn):
    lam: float

    def poles(self):
        return (-self.lam,)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 1.0 / (x + self.lam)
        return _finite_or_zero(out)


@dataclass(frozen=True)
class Rational(ShrinkageFn):
    """Ratio of polynomials (ascending coefficients); poles must avoid the
    limiting support, which is checked whenever a model is supplied."""

    num_coeffs: tuple[float, ...]
    den_coeffs: tuple[float, ...]
    model: SpikedModel | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "num_coeffs", tuple(float(v) for v in self.num_coeffs))
        object.__setattr__(self, "den_coeffs", tuple(float(v) for v in self.den_coeffs))
        if self.model is not None:
            validate_rule(self.model, self)

    def poles(self):
        roots = np.polynomial.polynomial.polyroots(np.array(self.den_coeffs))
        real = roots[np.abs(roots.imag) < 1e-9 * (1.0 + np.abs(roots.real))]
        return tuple(float(v) for v in real.real)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        pv = np.polynomial.polynomial.polyval
        with np.errstate(divide="ignore", invalid="ignore"):
            out = pv(x, np.array(self.num_coeffs)) / pv(x, np.array(self.den_coeffs))
        return _finite_or_zero(out, flag_context="Rational")


@dataclass(frozen=True)
class SDChain(ShrinkageFn):
    params: SDParams

    def poles(self):
        return tuple(-l for l in self.params.lambdas)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lams = self.params.lambdas
        xis = (0.0,) + self.params.xis
        k = self.params.k
        with np.errstate(divide="ignore", invalid="ignore"):
            acc = np.zeros_like(x)
            coef = 1.0
            suffix = np.ones_like(x)
            for j in range(k, -1, -1):
                acc = acc + (1.0 - xis[j]) * coef * suffix / (x + lams[j])
                coef *= xis[j]
                suffix = suffix * x / (x + lams[j])
        return _finite_or_zero(acc)


@dataclass(frozen=True)
class GDPoly(ShrinkageFn):
    """Gradient-descent polynomial f_T(x) = eta sum_{k<T} (1 - eta x)^k."""

    eta: float
    steps: int

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.steps < 1:
            raise ValueError("steps must be a positive integer")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        eta, T = self.eta, self.steps
        u = eta * x
        out = np.empty_like(x)
        small = np.abs(u) < 1e-12
        out[small] = eta * T
        mid = (~small) & (u > 0) & (u < 0.5)
        # stable geometric sum: (1 - (1-u)^T)/x via expm1/log1p
        out[mid] = -np.expm1(T * np.log1p(-u[mid])) / x[mid]
        rest = ~(small | mid)
        with np.errstate(over="ignore", invalid="ignore"):
            out[rest] = (1.0 - (1.0 - u[rest]) ** T) / x[rest]
        out = _finite_or_zero(out)
        return out[0] if scalar else out


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class _RampedInverse(ShrinkageFn):
    """0 below the ramp, 1/x above it, C^1 cubic smoothstep in between."""

    threshold: float
    ramp_width: float

    def __post_init__(self):
        if self.ramp_width <= 0:
            raise ValueError("ramp_width must be positive")
        if self.threshold - 0.5 * self.ramp_width <= 0:
            raise ValueError("ramp must stay strictly above zero")
        object.__setattr__(
            self,
            "breakpoints",
            (self.threshold - 0.5 * self.ramp_width,
             self.threshold + 0.5 * self.ramp_width),
        )

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        lo, hi = self.breakpoints
        out = np.zeros_like(x)
        above = x >= hi
        out[above] = 1.0 / x[above]
        ramp = (x > lo) & (x < hi)
        out[ramp] = _smoothstep((x[ramp] - lo) / (hi - lo)) / x[ramp]
        return out[0] if scalar else out


@dataclass(frozen=True)
class PCRSurrogate(_RampedInverse):
    """Keep-above-threshold rule smoothed over a narrow ramp inside the bulk."""


@dataclass(frozen=True)
class MinNormSurrogate(_RampedInverse):
    """1/x with the pole gated off below a cut inside the spectral gap."""

    @property
    def cut(self) -> float:
        return self.threshold


@dataclass(frozen=True)
class Tabulated(ShrinkageFn):
    """Rule given by values on sorted sample points (e.g. the grid support)."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.shape != ys.shape or xs.ndim != 1:
            raise ValueError("xs and ys must be 1-d arrays of equal length")
        if np.any(np.diff(xs) < 0):
            raise ValueError("xs must be sorted ascending")
        object.__setattr__(self, "xs", tuple(float(v) for v in xs))
        object.__setattr__(self, "ys", tuple(float(v) for v in ys))

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.xs, self.ys)


@dataclass(frozen=True)
class RiskBreakdown:
    """Limiting risk split into bulk bias, per-spike bias, variance."""

    bias_bulk: float
    bias_spikes: tuple[float, ...]
    variance: float
    total: float


def _breakdown(bias_bulk: float, bias_spikes, variance: float) -> RiskBreakdown:
    spikes = tuple(float(v) for v in bias_spikes)
    total = float(bias_bulk) + sum(spikes) + float(variance)
    if not math.isfinite(total):
        raise NumericalError("risk integrals did not evaluate to finite values")
    return RiskBreakdown(float(bias_bulk), spikes, float(variance), total)


def eval_shrinkage(f: ShrinkageFn, x):
    """Evaluate a rule; nonnegative x expected, poles map to 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("shrinkage rules are defined on x >= 0")
    return f(x)


def sd_chain_fn(params: SDParams, model: SpikedModel | None = None) -> SDChain:
    """Closed-form rule of the k-step self-distillation chain.

    f_k(x) = sum_{j=0..k} (1-xi_j) (prod_{t>j} xi_t) (prod_{t>j} x/(x+lambda_t))
             / (x + lambda_j),  with xi_0 = 0.
    """
    fn = SDChain(params)
    if model is not None:
        validate_rule(model, fn)
    return fn


def validate_rule(model: SpikedModel, f: ShrinkageFn):
    """Reject rules with a pole on the limiting support."""
    grid = get_grid(model)
    for p in f.poles():
        if grid.on_support(np.array([p]))[0]:
            raise AssumptionError(
                f"rule has a pole at {p}, inside the limiting support; "
                "shrinkage rules must be finite near the bulk and atoms"
            )
    pts = grid.support_points
    vals = f(pts)
    if not np.all(np.isfinite(vals)):
        raise NumericalError("rule is not finite on the limiting support")


def _grid_for_rule(model: SpikedModel, f: ShrinkageFn):
    a, b = mp_support(model)
    breaks = tuple(v for v in getattr(f, "breakpoints", ()) if a < v < b)
    return get_grid(model, breaks=breaks)


def limiting_pred_risk(model: SpikedModel, f: ShrinkageFn) -> RiskBreakdown:
    """Limiting out-of-sample prediction risk of the rule's estimator."""
    validate_rule(model, f)
    grid = _grid_for_rule(model, f)
    x, fx = grid.x, f(grid.x)
    fa = f(grid.atom_locs) if grid.atom_locs.size else np.zeros(0)
    one_minus_b = 1.0 - x * fx
    one_minus_a = 1.0 - grid.atom_locs * fa

    s0sq, r2 = model.sigma0_sq, model.r**2
    bias_bulk = s0sq * r2 * (
        grid.alpha_bulk @ one_minus_b**2 + grid.atom_alpha @ one_minus_a**2
    )
    bias_spikes = []
    for j, (d, al) in enumerate(model.spikes):
        ib = grid.delta_bulk[j] @ one_minus_b + grid.atom_delta[j] @ one_minus_a
        bias_spikes.append(d * al * al * ib**2)
    variance = model.c * s0sq * model.sigma_eps_sq * (
        grid.mp_bulk @ (x * fx**2)
    )  # the MP zero atom contributes nothing through the x factor
    return _breakdown(bias_bulk, bias_spikes, variance)


def limiting_est_risk(model: SpikedModel, f: ShrinkageFn) -> RiskBreakdown:
    """Limiting estimation (l2) risk; no per-spike squared bias terms."""
    validate_rule(model, f)
    grid = _grid_for_rule(model, f)
    x, fx = grid.x, f(grid.x)
    fa = f(grid.atom_locs) if grid.atom_locs.size else np.zeros(0)
    one_minus_b = 1.0 - x * fx
    one_minus_a = 1.0 - grid.atom_locs * fa
    bias_bulk = model.r**2 * (
        grid.alpha_bulk @ one_minus_b**2 + grid.atom_alpha @ one_minus_a**2
    )
    variance = model.c * model.sigma_eps_sq * (grid.mp_bulk @ (x * fx**2))
    return _breakdown(bias_bulk, (0.0,) * model.s, variance)


def ridge_risk_curve(model: SpikedModel, lambdas, kind: str = "pred") -> np.ndarray:
    """Vectorized limiting risk totals over a ridge grid."""
    lam = np.asarray(lambdas, dtype=float)
    grid = get_grid(model)
    x = grid.x
    fx = 1.0 / (x[None, :] + lam[:, None])
    fa = (
        1.0 / (grid.atom_locs[None, :] + lam[:, None])
        if grid.atom_locs.size
        else np.zeros((lam.size, 0))
    )
    omb = 1.0 - x[None, :] * fx
    oma = 1.0 - grid.atom_locs[None, :] * fa
    bias_alpha = omb**2 @ grid.alpha_bulk + oma**2 @ grid.atom_alpha
    var_int = (x[None, :] * fx**2) @ grid.mp_bulk
    if kind == "pred":
        total = model.sigma0_sq * model.r**2 * bias_alpha
        for j, (d, al) in enumerate(model.spikes):
            ib = omb @ grid.delta_bulk[j] + oma @ grid.atom_delta[j]
            total = total + d * al * al * ib**2
        total = total + model.c * model.sigma0_sq * model.sigma_eps_sq * var_int
    elif kind == "est":
        total = model.r**2 * bias_alpha + model.c * model.sigma_eps_sq * var_int
    else:
        raise ValueError("kind must be 'pred' or 'est'")
    return total


def best_ridge(model: SpikedModel, lambdas=None, kind: str = "pred"):
    """(lambda, risk total) minimizing the limiting risk over a grid."""
    if lambdas is None:
        scale = model.c * model.sigma_eps_sq / model.r**2 + model.sigma0_sq
        lambdas = np.geomspace(1e-4 * scale, 1e3 * scale, 200)
    lam = np.asarray(lambdas, dtype=float)
    totals = ridge_risk_curve(model, lam, kind)
    i = int(np.argmin(totals))
    return float(lam[i]), float(totals[i])


def default_ramp_width(model: SpikedModel) -> float:
    a, b = mp_support(model)
    return 1e-3 * (b - a)


def pcr_surrogate(model: SpikedModel, tau: float,
                  ramp_width: float | None = None) -> PCRSurrogate:
    """Smoothed keep-top-tau-fraction rule with threshold inside the bulk."""
    if not 0.0 < tau < min(1.0, 1.0 / model.c):
        raise ValueError(
            f"tau must lie in (0, {min(1.0, 1.0 / model.c)}) for a bulk threshold"
        )
    t = mp_quantile_inverse(model, tau)
    w = default_ramp_width(model) if ramp_width is None else float(ramp_width)
    return PCRSurrogate(t, w)


def min_norm_surrogate(model: SpikedModel,
                       ramp_width: float | None = None) -> MinNormSurrogate:
    """Minimum-norm interpolator surrogate; the cut sits in the spectral gap.

    Unsupported at c = 1 where the gap closes and the limiting risk is
    infinite.
    """
    a, _ = mp_support(model)
    if a <= 0 or abs(model.c - 1.0) < 1e-12:
        raise AssumptionError(
            "min-norm surrogate needs c != 1: the spectral gap above zero closes "
            "and the limiting risk diverges at c = 1"
        )
    cut = 0.5 * a  # half the gap by default
    w = 0.5 * a if ramp_width is None else float(ramp_width)
    if cut + 0.5 * w >= a:
        raise ValueError("ramp must stay inside the spectral gap (0, a)")
    return MinNormSurrogate(cut, w)


def named_surrogates(model: SpikedModel) -> dict:
    """{'min_norm': ShrinkageFn, 'pcr': tau -> ShrinkageFn}."""
    out = {"pcr": lambda tau: pcr_surrogate(model, tau)}
    if abs(model.c - 1.0) >= 1e-12:
        out["min_norm"] = min_norm_surrogate(model)
    return out


def pcr_sharp_pred_risk(model: SpikedModel, tau: float) -> RiskBreakdown:
    """Zero-ramp-width limit of the PCR surrogate's prediction risk.

    Computed with the exact indicator rule by splitting the quadrature at
    the threshold; equals the risk of retaining the top tau fraction of
    components.
    """
    if not 0.0 < tau < min(1.0, 1.0 / model.c):
        raise ValueError("tau out of range")
    t = mp_quantile_inverse(model, tau)
    grid = get_grid(model, breaks=(t,))
    x = grid.x
    keep = x >= t
    fa = np.where(grid.atom_locs > 0, 1.0 / np.where(grid.atom_locs > 0, grid.atom_locs, 1.0), 0.0)
    omb = np.where(keep, 0.0, 1.0)
    oma = 1.0 - grid.atom_locs * fa
    s0sq, r2 = model.sigma0_sq, model.r**2
    bias_bulk = s0sq * r2 * (grid.alpha_bulk @ omb**2 + grid.atom_alpha @ oma**2)
    spikes = []
    for j, (d, al) in enumerate(model.spikes):
        ib = grid.delta_bulk[j] @ omb + grid.atom_delta[j] @ oma
        spikes.append(d * al * al * ib**2)
    variance = model.c * s0sq * model.sigma_eps_sq * (
        grid.mp_bulk @ np.where(keep, 1.0 / x, 0.0)
    )
    return _breakdown(bias_bulk, spikes, variance)


def pcr_component_limit_risk(model: SpikedModel, m: int | None = None
                             ) -> RiskBreakdown:
    """Limit risk of PCR retaining finitely many components.

    With m components and s+ detached outliers, PCR keeps the min(m, s+)
    largest outliers in the limit; the rule is 1/x on those atoms and 0
    elsewhere, so the bulk and the zero atom keep their full bias weight
    and the variance vanishes (the MP law carries no outlier mass).
    m defaults to s+ (keep every detached component).
    """
    grid = get_grid(model)
    detached = sorted(
        (loc for loc in grid.atom_locs if loc > 0), reverse=True
    )
    if m is None:
        m = len(detached)
    kept = set(detached[: max(0, m)])
    oma = np.array([0.0 if loc in kept else 1.0 for loc in grid.atom_locs])
    s0sq, r2 = model.sigma0_sq, model.r**2
    bias_bulk = s0sq * r2 * (np.sum(grid.alpha_bulk) + grid.atom_alpha @ oma)
    spikes = []
    for j, (d, al) in enumerate(model.spikes):
        ib = np.sum(grid.delta_bulk[j]) + grid.atom_delta[j] @ oma
        spikes.append(d * al * al * ib**2)
    return _breakdown(bias_bulk, spikes, 0.0)
