"""Marchenko-Pastur and one-spike limiting spectral measures.

Supports, densities, atoms, Stieltjes transforms, and quadrature against
the bulk. Everything here is deterministic and closed-form except the
quadrature, which is Gauss-Chebyshev (second kind) after the affine map
x = (a+b)/2 + ((b-a)/2) cos(theta); that map absorbs the square-root edge
factor of the bulk density analytically.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import AssumptionError

DEFAULT_NODES = 2048
NODES_ENV_VAR = "SPECTRAL_DISTILL_NODES"

# Relative tolerance used when deciding whether a point sits on the bulk
# or on an atom of the limiting support.
_SUPPORT_RTOL = 1e-9


def default_node_count() -> int:
    raw = os.environ.get(NODES_ENV_VAR)
    if raw is None:
        return DEFAULT_NODES
    n = int(raw)
    if n < 16:
        raise ValueError(f"{NODES_ENV_VAR} must be >= 16, got {n}")
    return n


@dataclass(frozen=True)
class SpikedModel:
    """Problem instance: Sigma = sigma0^2 I + sum_j delta_j v_j v_j'.

    Fields
    ------
    sigma0_sq : variance scale of the isotropic part (> 0)
    c         : limiting aspect ratio p/n (> 0)
    spikes    : ordered ((delta_j, alpha_j), ...); delta_j > 0 distinct,
                alpha_j != 0 is the limiting signal alignment beta0' v_j
    r         : limiting signal norm ||beta0||_2 (> 0)
    sigma_eps_sq : noise variance (>= 0)
    """

    sigma0_sq: float
    c: float
    spikes: tuple[tuple[float, float], ...]
    r: float
    sigma_eps_sq: float

    def __post_init__(self):
        object.__setattr__(self, "sigma0_sq", float(self.sigma0_sq))
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "sigma_eps_sq", float(self.sigma_eps_sq))
        object.__setattr__(
            self, "spikes", tuple((float(d), float(a)) for d, a in self.spikes)
        )
        if not (self.sigma0_sq > 0):
            raise ValueError("sigma0_sq must be positive")
        if not (self.c > 0):
            raise ValueError("c must be positive")
        if not (self.r > 0):
            raise ValueError("r must be positive")
        if self.sigma_eps_sq < 0:
            raise ValueError("sigma_eps_sq must be nonnegative")
        deltas = [d for d, _ in self.spikes]
        alphas = [a for _, a in self.spikes]
        if any(d <= 0 for d in deltas):
            raise AssumptionError("spike strengths delta_j must be positive")
        if len(set(deltas)) != len(deltas):
            raise AssumptionError("spike strengths delta_j must be distinct")
        if any(a == 0 for a in alphas):
            raise AssumptionError("signal alignments alpha_j must be nonzero")
        thr = self.c * self.sigma0_sq**2
        for i, di in enumerate(deltas):
            for dj in deltas[i:]:
                if abs(di * dj - thr) <= _SUPPORT_RTOL * thr:
                    raise AssumptionError(
                        "spike products must satisfy delta_i*delta_j != c*sigma0^4 "
                        f"(got {di}*{dj} ~= {thr})"
                    )
        if sum(a * a for a in alphas) >= self.r**2:
            raise AssumptionError(
                "signal must not lie in the spike span: sum alpha_j^2 < r^2 required"
            )

    @property
    def s(self) -> int:
        return len(self.spikes)

    @property
    def deltas(self) -> np.ndarray:
        return np.array([d for d, _ in self.spikes])

    @property
    def alphas(self) -> np.ndarray:
        return np.array([a for _, a in self.spikes])

    @property
    def bbp_threshold(self) -> float:
        """Spike strength above which an outlier eigenvalue detaches."""
        return self.sigma0_sq * math.sqrt(self.c)

    def replace(self, **kwargs) -> "SpikedModel":
        import dataclasses

        return dataclasses.replace(self, **kwargs)


@dataclass(frozen=True)
class SpectralMeasure:
    """A limiting measure: bulk density on [bulk_lo, bulk_hi] plus atoms."""

    bulk_lo: float
    bulk_hi: float
    bulk_density: Callable[[np.ndarray], np.ndarray]
    atoms: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and dx-weights on the open bulk (a, b).

    The weights are plain Lebesgue weights chosen so that
    sum_i weights_i * density(nodes_i) * g(nodes_i) integrates g against
    the bulk part of the measure; the sqrt((b-x)(x-a)) edge factor of the
    density is absorbed exactly by the sin(theta) factor in the weights.
    """

    n_nodes: int
    nodes: np.ndarray
    weights: np.ndarray


def mp_support(model: SpikedModel) -> tuple[float, float]:
    """Bulk support [a, b] = sigma0^2 (1 -+ sqrt(c))^2."""
    root_c = math.sqrt(model.c)
    a = model.sigma0_sq * (1.0 - root_c) ** 2
    b = model.sigma0_sq * (1.0 + root_c) ** 2
    return a, b


def mp_density(model: SpikedModel, x) -> np.ndarray:
    """Bulk density of the Marchenko-Pastur law; zero off (a, b)."""
    a, b = mp_support(model)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    inside = (x > a) & (x < b)
    out = np.zeros_like(x)
    xi = x[inside]
    out[inside] = np.sqrt((b - xi) * (xi - a)) / (
        2.0 * math.pi * model.sigma0_sq * model.c * xi
    )
    return out[0] if scalar else out


def mp_atom_at_zero(model: SpikedModel) -> float:
    return max(0.0, 1.0 - 1.0 / model.c)


def _check_off_positive_axis(z: complex):
    if z.imag == 0.0 and z.real >= 0.0:
        raise ValueError(f"z must lie off the nonnegative real axis, got {z}")


def mp_stieltjes(model: SpikedModel, z: complex) -> complex:
    """Stieltjes transform m(z) of the MP law, z off [0, inf).

    Branch of sqrt((z-a)(z-b)) chosen so that Im m > 0 when Im z > 0
    (conjugate-symmetric below the axis) and m > 0 for real z < 0.
    """
    z = complex(z)
    _check_off_positive_axis(z)
    a, b = mp_support(model)
    s0 = model.sigma0_sq
    sq = np.sqrt(complex((z - a) * (z - b)))
    denom = 2.0 * model.c * z * s0
    m = (s0 * (1.0 - model.c) - z + sq) / denom
    if z.imag > 0:
        ok = m.imag > 0
    elif z.imag < 0:
        ok = m.imag < 0
    else:
        ok = m.real > 0
    if not ok:
        m = (s0 * (1.0 - model.c) - z - sq) / denom
    return m


def mp_stieltjes_boundary(model: SpikedModel, x: float) -> complex:
    """Boundary value m(x + i0) for x in the open bulk."""
    a, b = mp_support(model)
    if not (a < x < b):
        raise ValueError(f"x={x} is not in the open bulk ({a}, {b})")
    s0 = model.sigma0_sq
    re = (s0 * (1.0 - model.c) - x) / (2.0 * model.c * x * s0)
    im = math.sqrt((b - x) * (x - a)) / (2.0 * model.c * x * s0)
    return complex(re, im)


def companion_stieltjes(model: SpikedModel, z: complex) -> complex:
    """Companion transform m_(z) = -(1-c)/z + c m(z)."""
    z = complex(z)
    _check_off_positive_axis(z)
    return -(1.0 - model.c) / z + model.c * mp_stieltjes(model, z)


def companion_stieltjes_boundary(model: SpikedModel, x: float) -> complex:
    return -(1.0 - model.c) / x + model.c * mp_stieltjes_boundary(model, x)


def spiked_stieltjes(model: SpikedModel, delta: float, z: complex) -> complex:
    """Stieltjes transform of the one-spike limit F_delta.

    m_delta(z) = sigma0^2 m(z) / (sigma0^2 + delta + delta z m(z)).
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    z = complex(z)
    _check_off_positive_axis(z)
    m = mp_stieltjes(model, z)
    s0 = model.sigma0_sq
    return s0 * m / (s0 + delta + delta * z * m)


def outlier_location(model: SpikedModel, delta: float) -> float:
    """Deterministic outlier position (delta+sigma0^2)(delta+c sigma0^2)/delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    s0 = model.sigma0_sq
    return (delta + s0) * (delta + model.c * s0) / delta


def outlier_atom_mass(model: SpikedModel, delta: float) -> float:
    """Mass of F_delta at the outlier; zero at or below the detachment point."""
    if delta <= model.bbp_threshold:
        return 0.0
    s0sq = model.sigma0_sq
    return (delta**2 - model.c * s0sq**2) / (delta * (delta + model.c * s0sq))


def spiked_atom_at_zero(model: SpikedModel, delta: float) -> float:
    if model.c <= 1:
        return 0.0
    s0sq = model.sigma0_sq
    return s0sq * (model.c - 1.0) / (model.c * s0sq + delta)


def nu_affine(model: SpikedModel, delta: float) -> tuple[float, float]:
    """Coefficients (p, q) of the density ratio dF_MP/dF_delta = p + q x.

    nu_delta(x) = delta (x_star - x) / (c sigma0^2 (delta + sigma0^2)); it
    is affine with negative slope and strictly positive on the bulk and
    at zero.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    s0sq = model.sigma0_sq
    denom = model.c * s0sq * (delta + s0sq)
    xstar = outlier_location(model, delta)
    return delta * xstar / denom, -delta / denom


def mp_measure(model: SpikedModel) -> SpectralMeasure:
    a, b = mp_support(model)
    atoms = ()
    m0 = mp_atom_at_zero(model)
    if m0 > 0:
        atoms = ((0.0, m0),)
    return SpectralMeasure(a, b, lambda x: mp_density(model, x), atoms)


def spiked_measure(model: SpikedModel, delta: float) -> SpectralMeasure:
    """Limiting measure F_delta of the one-spike alignment weights.

    delta = 0 returns the MP measure itself.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0.0:
        return mp_measure(model)
    a, b = mp_support(model)
    p, q = nu_affine(model, delta)

    def density(x, _p=p, _q=q):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        base = mp_density(model, x)
        out = np.zeros_like(base)
        nz = base > 0
        out[nz] = base[nz] / (_p + _q * x[nz])
        return out[0] if scalar else out

    atoms = []
    m0 = spiked_atom_at_zero(model, delta)
    if m0 > 0:
        atoms.append((0.0, m0))
    ms = outlier_atom_mass(model, delta)
    if ms > 0:
        atoms.append((outlier_location(model, delta), ms))
    return SpectralMeasure(a, b, density, tuple(atoms))


# ---------------------------------------------------------------------------
# Quadrature


def _gauss_chebyshev_theta(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Second-kind nodes/weights expressed in the theta variable:
    # integral_0^pi F(theta) sin^2(theta) dtheta ~= sum w_k F(theta_k).
    k = np.arange(1, n + 1)
    theta = np.pi * k / (n + 1)
    w = np.pi / (n + 1) * np.sin(theta) ** 2
    return theta, w


def make_quadrature(model: SpikedModel, n_nodes: int | None = None) -> QuadratureRule:
    """Bulk quadrature rule exact (to tolerance) for smooth integrands.

    Nodes never touch the endpoints, so the c = 1 case where the density
    has an integrable 1/sqrt(x) profile at zero needs no special casing.
    """
    n = default_node_count() if n_nodes is None else int(n_nodes)
    if n < 16:
        raise ValueError("n_nodes must be >= 16")
    a, b = mp_support(model)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    theta, w_theta = _gauss_chebyshev_theta(n)
    nodes = mid + half * np.cos(theta)
    # dx = -h sin(theta) dtheta; the extra sin from the GC2 weight is the
    # edge factor of the density: weights below are plain dx-weights.
    weights = half * w_theta / np.sin(theta)
    return QuadratureRule(n, nodes, weights)


def _composite_theta_panels(
    a: float, b: float, breaks: Sequence[float], n_total: int
) -> tuple[np.ndarray, np.ndarray]:
    # Gauss-Legendre panels in theta split at the given x-breakpoints;
    # used when the integrand is only piecewise smooth on the bulk.
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    ts = [0.0, math.pi]
    for xb in breaks:
        if a < xb < b:
            ts.append(math.acos(min(1.0, max(-1.0, (xb - mid) / half))))
    ts = sorted(set(ts))
    thetas, ws = [], []
    for lo, hi in zip(ts[:-1], ts[1:]):
        n_panel = max(48, int(round(n_total * (hi - lo) / math.pi)))
        u, wu = np.polynomial.legendre.leggauss(n_panel)
        thetas.append(0.5 * (hi + lo) + 0.5 * (hi - lo) * u)
        ws.append(0.5 * (hi - lo) * wu)
    return np.concatenate(thetas), np.concatenate(ws)


def mp_quantile_inverse(model: SpikedModel, tau: float) -> float:
    """Bulk point whose upper-tail MP mass equals tau.

    Valid for tau in [0, min(1, 1/c)); monotone decreasing in tau.
    """
    bulk_mass = min(1.0, 1.0 / model.c)
    if not (0.0 <= tau < bulk_mass):
        raise ValueError(f"tau must lie in [0, {bulk_mass}), got {tau}")
    a, b = mp_support(model)
    if tau == 0.0:
        return b
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    s0sq, c = model.sigma0_sq, model.c
    u, wu = np.polynomial.legendre.leggauss(96)

    def upper_mass(theta_hi: float) -> float:
        # mass of [x(theta_hi), b]; integrand smooth in theta.
        theta = 0.5 * theta_hi * (u + 1.0)
        w = 0.5 * theta_hi * wu
        x = mid + half * np.cos(theta)
        integrand = half**2 * np.sin(theta) ** 2 / (2.0 * math.pi * s0sq * c * x)
        return float(w @ integrand)

    lo, hi = 0.0, math.pi
    # bisection to 1e-10 in mass; masses are monotone in theta.
    for _ in range(200):
        mid_theta = 0.5 * (lo + hi)
        m = upper_mass(mid_theta)
        if abs(m - tau) < 1e-10:
            lo = hi = mid_theta
            break
        if m < tau:
            lo = mid_theta
        else:
            hi = mid_theta
    theta_star = 0.5 * (lo + hi)
    return float(mid + half * math.cos(theta_star))


# ---------------------------------------------------------------------------
# Shared integration workspace


class SpectralGrid:
    """Cached quadrature data for one model: nodes plus atom bookkeeping.

    All measure integrals reduce to weighted dots over the same bulk
    nodes (the spiked bulk densities are f_MP / nu_j) together with
    explicit atom terms. `atom_locs` lists the zero atom (when c > 1)
    followed by the outlier atoms of above-threshold spikes in spike
    order; per-measure atom masses are aligned with that list.
    """

    def __init__(self, model: SpikedModel, n_nodes: int | None = None,
                 breaks: tuple[float, ...] = ()):
        self.model = model
        n = default_node_count() if n_nodes is None else int(n_nodes)
        self.n_nodes = n
        a, b = mp_support(model)
        self.bulk_lo, self.bulk_hi = a, b
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        self._mid, self._half = mid, half
        if breaks:
            theta, w_theta = _composite_theta_panels(a, b, breaks, n)
        else:
            # Chebyshev (second kind) angles plus the endpoints with their
            # trapezoid half weights. The endpoints carry measure only in
            # boundary cases (bulk touching zero at c = 1; an outlier
            # sitting exactly on the edge), where the weight*density
            # product stays finite through the edge-factor reductions
            # below. Elsewhere they drop out with weight zero.
            k = np.arange(0, n + 2)
            theta = np.pi * k / (n + 1)
            w_theta = np.full(n + 2, np.pi / (n + 1))
            w_theta[0] *= 0.5
            w_theta[-1] *= 0.5
        order = np.argsort(-theta)  # ascending x
        theta, w_theta = theta[order], w_theta[order]
        self._u = np.cos(theta)
        self._w_theta = w_theta
        # Exact edge-factor forms in u = cos(theta):
        #   b - x = half (1 - u),  x - a = half (1 + u),
        #   sin^2(theta) = (1 - u)(1 + u).
        self.x = mid + half * self._u
        if a == 0.0:
            self.x = half * (1.0 + self._u)  # keeps x = 0 exact at the edge
        # sin^2(theta) / x, reduced when the bulk touches zero
        if a == 0.0:
            self._edge_ratio = (1.0 - self._u) / half
        else:
            self._edge_ratio = (1.0 - self._u) * (1.0 + self._u) / self.x
        self.mp_bulk = (
            w_theta * half**2 * self._edge_ratio
            / (2.0 * math.pi * model.sigma0_sq * model.c)
        )

        s = model.s
        self.nu_coeffs = [nu_affine(model, d) for d in model.deltas]
        if s:
            self.nu_vals = np.array([p + q * self.x for (p, q) in self.nu_coeffs])
        else:
            self.nu_vals = np.zeros((0, self.x.size))
        self.delta_bulk = [
            self._delta_bulk_weights(d) for d in model.deltas
        ]

        alphas = model.alphas
        self.omega0 = 1.0 - float(np.sum(alphas**2)) / model.r**2
        self.omegas = alphas**2 / model.r**2
        self.alpha_bulk = self.omega0 * self.mp_bulk
        for j in range(s):
            self.alpha_bulk = self.alpha_bulk + self.omegas[j] * self.delta_bulk[j]

        # Atom layout.
        locs, mp_m, d_m = [], [], []
        self.zero_atom = model.c > 1
        if self.zero_atom:
            locs.append(0.0)
            mp_m.append(mp_atom_at_zero(model))
            d_m.append([spiked_atom_at_zero(model, d) for d in model.deltas])
        self.xstars = np.array([outlier_location(model, d) for d in model.deltas])
        self.above = model.deltas > model.bbp_threshold
        self.outlier_slot = {}
        for j in range(s):
            if self.above[j]:
                self.outlier_slot[j] = len(locs)
                locs.append(self.xstars[j])
                mp_m.append(0.0)
                d_m.append([outlier_atom_mass(model, model.deltas[j]) if i == j else 0.0
                            for i in range(s)])
        self.atom_locs = np.array(locs)
        self.atom_mp = np.array(mp_m)
        self.atom_delta = np.array(d_m).reshape(len(locs), s).T if locs else np.zeros((s, 0))
        self.atom_alpha = self.omega0 * self.atom_mp
        for j in range(s):
            self.atom_alpha = self.atom_alpha + self.omegas[j] * self.atom_delta[j]

    # -- integral helpers ---------------------------------------------------

    def _delta_bulk_weights(self, delta: float) -> np.ndarray:
        """Bulk weights for F_delta: mp weights divided by nu_delta(x).

        nu(x) = (x_star - x)/g with g = c sigma0^2 (delta + sigma0^2)/delta.
        When the outlier sits exactly on the bulk edge (delta at the
        detachment threshold) the 1/(x_star - x) factor cancels against
        the edge factor in u = cos(theta), so the reduced form is used.
        """
        model = self.model
        g = model.c * model.sigma0_sq * (delta + model.sigma0_sq) / delta
        xstar = outlier_location(model, delta)
        pref = (
            self._w_theta * self._half**2 * g
            / (2.0 * math.pi * model.sigma0_sq * model.c)
        )
        if abs(xstar - self.bulk_hi) <= 1e-12 * self.bulk_hi:
            # x_star - x reduces to half (1 - u)
            if self.bulk_lo == 0.0:
                return pref / self._half**2
            return pref * (1.0 + self._u) / (self.x * self._half)
        return pref * self._edge_ratio / (xstar - self.x)

    def _values(self, fn, pts):
        # dtype preserved so complex integrands (resolvent tests) work
        return np.asarray(fn(pts)) if callable(fn) else np.asarray(fn)

    def int_mp(self, fn):
        v = self._values(fn, self.x)
        total = self.mp_bulk @ v
        if self.atom_locs.size:
            total = total + self.atom_mp @ self._values(fn, self.atom_locs)
        return total.item()

    def int_delta(self, j: int, fn):
        v = self._values(fn, self.x)
        total = self.delta_bulk[j] @ v
        if self.atom_locs.size:
            total = total + self.atom_delta[j] @ self._values(fn, self.atom_locs)
        return total.item()

    def int_alpha(self, fn):
        v = self._values(fn, self.x)
        total = self.alpha_bulk @ v
        if self.atom_locs.size:
            total = total + self.atom_alpha @ self._values(fn, self.atom_locs)
        return total.item()

    def int_for_delta(self, delta: float, fn):
        """Integral against F_delta for an arbitrary delta >= 0."""
        if delta == 0.0:
            return self.int_mp(fn)
        bulk_w = self._delta_bulk_weights(delta)
        total = (bulk_w @ self._values(fn, self.x)).item()
        m0 = spiked_atom_at_zero(self.model, delta)
        if m0 > 0:
            total += m0 * self._values(fn, np.array([0.0]))[0].item()
        ms = outlier_atom_mass(self.model, delta)
        if ms > 0:
            xs = outlier_location(self.model, delta)
            total += ms * self._values(fn, np.array([xs]))[0].item()
        return total

    def on_support(self, x) -> np.ndarray:
        """Mask of points lying on the bulk or on an atom of the support."""
        x = np.asarray(x, dtype=float)
        tol = _SUPPORT_RTOL * max(1.0, self.bulk_hi)
        ok = (x >= self.bulk_lo - tol) & (x <= self.bulk_hi + tol)
        for loc in self.atom_locs:
            ok = ok | (np.abs(x - loc) <= tol * max(1.0, abs(loc)))
        return ok

    @property
    def support_points(self) -> np.ndarray:
        """Bulk nodes followed by the atom locations."""
        return np.concatenate([self.x, self.atom_locs]) if self.atom_locs.size else self.x


@lru_cache(maxsize=128)
def _grid_cached(model: SpikedModel, n_nodes: int, breaks: tuple) -> SpectralGrid:
    return SpectralGrid(model, n_nodes, breaks)


def get_grid(model: SpikedModel, n_nodes: int | None = None,
             breaks: tuple[float, ...] = ()) -> SpectralGrid:
    n = default_node_count() if n_nodes is None else int(n_nodes)
    return _grid_cached(model, n, tuple(breaks))
