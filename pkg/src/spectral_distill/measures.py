"""Mixture measure, density-ratio polynomials, and the weighted Gram system.

The mixture F_alpha = omega0 F_MP + sum_j omega_j F_{delta_j} carries the
signal's alignment with the spike directions. The affine ratios nu_j and
their products nu, nu_{-j} turn every risk functional into polynomial
algebra; mu_j and mu_0 are the densities of F_{delta_j} and F_MP with
respect to F_alpha. On top of those sit the weight w, the target g, the
basis h_j, the x*w-weighted inner product, and the Gram matrix H.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import spectra
from .errors import NumericalError
from .spectra import SpikedModel, SpectralMeasure, get_grid


@dataclass(frozen=True)
class MixtureWeights:
    omega0: float
    omegas: tuple[float, ...]


@dataclass(frozen=True)
class RnPolynomials:
    """Affine ratios nu_j and their products as coefficient sequences.

    nu_j(x) = delta_j (x_star_j - x) / (c sigma0^2 (delta_j + sigma0^2)),
    nu = prod_j nu_j (degree s), nu_minus[i] = prod_{j != i} nu_j (degree
    s-1). Coefficients are ascending; evaluation goes through the
    factored form scale_j * (x_star_j - x) so nu_j vanishes exactly at
    its outlier.
    """

    affine: tuple[tuple[float, float], ...]
    xstars: tuple[float, ...]
    scales: tuple[float, ...]
    nu_coeffs: tuple[float, ...]
    nu_minus_coeffs: tuple[tuple[float, ...], ...]

    def nu_j(self, j: int, x):
        return self.scales[j] * (self.xstars[j] - np.asarray(x, dtype=float))

    def nu(self, x):
        x = np.asarray(x, dtype=float)
        out = np.ones_like(x)
        for sc, xs in zip(self.scales, self.xstars):
            out = out * (sc * (xs - x))
        return out

    def nu_minus(self, i: int, x):
        x = np.asarray(x, dtype=float)
        out = np.ones_like(x)
        for j, (sc, xs) in enumerate(zip(self.scales, self.xstars)):
            if j != i:
                out = out * (sc * (xs - x))
        return out


def mixture_weights(model: SpikedModel) -> MixtureWeights:
    """omega0 = 1 - sum_j alpha_j^2 / r^2, omega_j = alpha_j^2 / r^2."""
    omegas = tuple(float(a * a) / model.r**2 for a in model.alphas)
    return MixtureWeights(1.0 - sum(omegas), omegas)


def rn_polynomials(model: SpikedModel) -> RnPolynomials:
    affine = tuple(spectra.nu_affine(model, d) for d in model.deltas)
    xstars = tuple(spectra.outlier_location(model, d) for d in model.deltas)
    scales = tuple(-q for _, q in affine)
    nu = np.array([1.0])
    for p, q in affine:
        nu = np.polynomial.polynomial.polymul(nu, [p, q])
    minus = []
    for i in range(model.s):
        m = np.array([1.0])
        for j, (p, q) in enumerate(affine):
            if j != i:
                m = np.polynomial.polynomial.polymul(m, [p, q])
        minus.append(tuple(m))
    return RnPolynomials(affine, xstars, scales, tuple(nu), tuple(minus))


def mixture_measure(model: SpikedModel) -> SpectralMeasure:
    """F_alpha = omega0 F_MP + sum_j omega_j F_{delta_j}; total mass one."""
    w = mixture_weights(model)
    parts = [spectra.mp_measure(model)] + [
        spectra.spiked_measure(model, d) for d in model.deltas
    ]
    coefs = (w.omega0, *w.omegas)

    def density(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for cf, meas in zip(coefs, parts):
            out = out + cf * meas.bulk_density(x)
        return out

    atom_mass: dict[float, float] = {}
    for cf, meas in zip(coefs, parts):
        for loc, mass in meas.atoms:
            atom_mass[loc] = atom_mass.get(loc, 0.0) + cf * mass
    atoms = tuple(sorted(atom_mass.items()))
    a, b = spectra.mp_support(model)
    return SpectralMeasure(a, b, density, atoms)


def _mu_all(model: SpikedModel, x) -> np.ndarray:
    """Stacked (mu_0, mu_1, ..., mu_s) at x, without domain checks."""
    x = np.asarray(x, dtype=float)
    rn = rn_polynomials(model)
    w = mixture_weights(model)
    nu = rn.nu(x)
    minus = [rn.nu_minus(i, x) for i in range(model.s)]
    denom = w.omega0 * nu
    for om, nm in zip(w.omegas, minus):
        denom = denom + om * nm
    out = np.empty((model.s + 1,) + x.shape)
    out[0] = nu / denom
    for j in range(model.s):
        out[j + 1] = minus[j] / denom
    return out


def _check_support(model: SpikedModel, x):
    grid = get_grid(model)
    ok = grid.on_support(x)
    if not np.all(ok):
        bad = np.asarray(x, dtype=float)[~np.asarray(ok)]
        raise ValueError(
            f"point(s) {bad} lie outside the limiting support "
            f"(bulk [{grid.bulk_lo}, {grid.bulk_hi}] plus atoms {grid.atom_locs})"
        )


def mu_j(model: SpikedModel, j: int, x):
    """Density of F_{delta_j} (j >= 1) or F_MP (j = 0) w.r.t. F_alpha."""
    if not 0 <= j <= model.s:
        raise ValueError(f"j must be in 0..{model.s}")
    _check_support(model, x)
    scalar = np.isscalar(x)
    vals = _mu_all(model, np.atleast_1d(np.asarray(x, dtype=float)))[j]
    return float(vals[0]) if scalar else vals


def weight_w(model: SpikedModel, x):
    """w(x) = sigma0^2 r^2 x + c sigma0^2 sigma_eps^2 mu_0(x); positive."""
    _check_support(model, x)
    return _weight_w_unchecked(model, x)


def _weight_w_unchecked(model: SpikedModel, x):
    x = np.asarray(x, dtype=float)
    mu0 = _mu_all(model, x)[0]
    return model.sigma0_sq * (model.r**2 * x + model.c * model.sigma_eps_sq * mu0)


def target_g(model: SpikedModel, x):
    """g(x) = (sigma0^2 r^2 + sum_j delta_j alpha_j^2 mu_j(x)) / w(x)."""
    _check_support(model, x)
    x = np.asarray(x, dtype=float)
    mu = _mu_all(model, x)
    num = np.full_like(mu[0], model.sigma0_sq * model.r**2)
    for j, (d, a) in enumerate(model.spikes):
        num = num + d * a * a * mu[j + 1]
    return num / _weight_w_unchecked(model, x)


def basis_h(model: SpikedModel, j: int, x):
    """h_j(x) = mu_j(x) / w(x)."""
    if not 0 <= j <= model.s:
        raise ValueError(f"j must be in 0..{model.s}")
    _check_support(model, x)
    x = np.asarray(x, dtype=float)
    return _mu_all(model, x)[j] / _weight_w_unchecked(model, x)


def inner_w(model: SpikedModel, phi, psi) -> float:
    """<phi, psi>_w = int phi psi x w dF_alpha.

    phi/psi are callables or arrays tabulated on the shared grid's
    support points (bulk nodes then atoms). The explicit x factor kills
    any zero-atom contribution, so that atom is skipped outright.
    """
    grid = get_grid(model)
    pts_bulk, pts_atom = grid.x, grid.atom_locs

    def vals(f):
        if callable(f):
            vb = np.asarray(f(pts_bulk), dtype=float)
            va = np.asarray(f(pts_atom), dtype=float) if pts_atom.size else np.zeros(0)
        else:
            arr = np.asarray(f, dtype=float)
            if arr.shape != grid.support_points.shape:
                raise ValueError(
                    "tabulated values must match the grid support points "
                    f"(expected {grid.support_points.shape}, got {arr.shape})"
                )
            vb, va = arr[: pts_bulk.size], arr[pts_bulk.size:]
        return vb, va

    pb, pa = vals(phi)
    qb, qa = vals(psi)
    wb = _weight_w_unchecked(model, pts_bulk)
    total = float(grid.alpha_bulk @ ((pb * qb) * (pts_bulk * wb)))
    for k, loc in enumerate(pts_atom):
        if loc == 0.0:
            continue  # x factor annihilates the zero atom
        wa = float(_weight_w_unchecked(model, np.array([loc]))[0])
        total += (pa[k] * qa[k]) * (grid.atom_alpha[k] * loc * wa)
    if not math.isfinite(total):
        raise NumericalError("inner product did not evaluate to a finite value")
    return total


@dataclass(frozen=True)
class GramSystem:
    """H_ij = <h_i, h_j>_w (0-indexed, (s+1)x(s+1)) and the right side
    gamma = (sigma0^2 r^2 omega0, (delta_1+sigma0^2) alpha_1^2, ...)."""

    H: np.ndarray
    gamma: np.ndarray


def gram_system(model: SpikedModel) -> GramSystem:
    """Assemble H and gamma over the model's cached grid.

    Row i of H is computed as int x mu_j / w dF_{measure_i}, where
    measure_0 = F_MP and measure_i = F_{delta_i}; the bulk part reuses
    one set of integrand values for all rows.
    """
    grid = get_grid(model)
    s = model.s
    x = grid.x
    mu = _mu_all(model, x)
    wv = _weight_w_unchecked(model, x)
    integrand = mu * (x / wv)  # row j: x mu_j / w on the bulk

    H = np.empty((s + 1, s + 1))
    for i in range(s + 1):
        bulk_w = grid.mp_bulk if i == 0 else grid.delta_bulk[i - 1]
        H[i, :] = integrand @ bulk_w
    # Atom terms: only the outlier atoms contribute (x factor kills the
    # zero atom; F_MP has no outliers), and mu_j(x_i*) = 1[i=j]/omega_i.
    wmix = mixture_weights(model)
    for j in range(1, s + 1):
        slot = grid.outlier_slot.get(j - 1)
        if slot is None:
            continue
        xs = grid.atom_locs[slot]
        mass = grid.atom_delta[j - 1, slot]
        w_at = float(_weight_w_unchecked(model, np.array([xs]))[0])
        H[j, j] += mass * xs * (1.0 / wmix.omegas[j - 1]) / w_at
    H = 0.5 * (H + H.T)  # symmetrize away quadrature roundoff
    if not np.all(np.isfinite(H)):
        raise NumericalError("Gram matrix assembly produced non-finite entries")

    gamma = np.empty(s + 1)
    gamma[0] = model.sigma0_sq * model.r**2 * wmix.omega0
    for j, (d, a) in enumerate(model.spikes):
        gamma[j + 1] = (d + model.sigma0_sq) * a * a
    return GramSystem(H, gamma)
