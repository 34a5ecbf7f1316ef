import numpy as np
import pytest

import spectral_distill as sd
from spectral_distill import SpikedModel, StructuralError
from conftest import random_model


def test_b0_closed_form(fig1_model):
    rule, coef = sd.optimal_pred_rule(fig1_model)
    assert coef.b[0] == pytest.approx(25.0 * 0.39, abs=1e-12)


def test_degrees(fig1_model):
    rule, _ = sd.optimal_pred_rule(fig1_model)
    s = fig1_model.s
    assert len(rule.q_coeffs) == s + 1 and rule.q_coeffs[-1] == pytest.approx(1.0)
    assert len(rule.p_coeffs) == s + 2 and rule.p_coeffs[-1] == pytest.approx(1.0)


def test_fixed_point_residual(fig1_model):
    rule, _ = sd.optimal_pred_rule(fig1_model)
    assert sd.fixed_point_residual(fig1_model, rule) < 1e-8


def test_root_structure_one_spike(fig4_model):
    rule, _ = sd.optimal_pred_rule(fig4_model)
    roots = np.array(rule.roots_of_p)
    assert roots.size == 2
    assert np.sum(roots < 0) == 1
    xstar = sd.outlier_location(fig4_model, fig4_model.deltas[0])
    assert roots.max() > xstar


def test_root_structure_two_spikes(fig1_model):
    rule, _ = sd.optimal_pred_rule(fig1_model)
    roots = np.sort(np.array(rule.roots_of_p))
    xs = np.sort([sd.outlier_location(fig1_model, d) for d in fig1_model.deltas])
    assert roots[0] < 0
    assert xs[0] < roots[1] < xs[1] < roots[2]
    # Vieta: product of roots consistent with P(0) > 0
    p0 = np.polynomial.polynomial.polyval(0.0, np.array(rule.p_coeffs))
    assert p0 * (-1) ** len(roots) == pytest.approx(np.prod(roots), rel=1e-10)


def test_roots_polish_residual(fig1_model):
    rule, _ = sd.optimal_pred_rule(fig1_model)
    p = np.array(rule.p_coeffs)
    vals = np.polynomial.polynomial.polyval(np.array(rule.roots_of_p), p)
    scale = np.max(np.abs(np.polynomial.polynomial.polyval(
        np.array([0.0, *rule.roots_of_p]) + 0.5, p)))
    assert np.max(np.abs(vals)) < 1e-12 * max(1.0, scale)


def test_isotropic_optimal():
    m = SpikedModel(1.0, 2.0, (), 2.0, 1.0)
    ridge = sd.isotropic_optimal(m)
    assert ridge.lam == pytest.approx(0.5)
    # ridgeless limit as the signal grows
    big = SpikedModel(1.0, 2.0, (), 1e6, 1.0)
    assert sd.isotropic_optimal(big).lam < 1e-10
    with pytest.raises(ValueError):
        sd.isotropic_optimal(SpikedModel(1.0, 2.0, ((1.5, 0.5),), 2.0, 1.0))
    with pytest.raises(ValueError):
        sd.optimal_pred_rule(m)


def test_isotropic_grid_convexity():
    m = SpikedModel(1.0, 2.0, (), 2.0, 1.0)
    lam = sd.isotropic_optimal(m).lam
    mid = sd.limiting_pred_risk(m, sd.Ridge(lam)).total
    assert sd.limiting_pred_risk(m, sd.Ridge(lam * 1.1)).total >= mid
    assert sd.limiting_pred_risk(m, sd.Ridge(lam * 0.9)).total >= mid


def test_small_delta_converges_to_isotropic_ridge():
    spiked = SpikedModel(1.0, 2.0, ((1e-6, 0.5),), 2.0, 1.0)
    iso = sd.isotropic_optimal(SpikedModel(1.0, 2.0, (), 2.0, 1.0))
    rule, _ = sd.optimal_pred_rule(spiked)
    grid = sd.get_grid(spiked)
    assert np.max(np.abs(rule(grid.x) - iso(grid.x))) < 1e-6


def test_est_rule_examples(fig1_model):
    m0 = SpikedModel(1.0, 2.0, (), 2.0, 1.0)
    est0 = sd.optimal_est_rule(m0)
    assert est0.roots_of_p == (pytest.approx(-0.5),)
    xs = np.linspace(0.1, 6.0, 13)
    assert np.allclose(est0(xs), 1.0 / (xs + 0.5))
    # shared denominator with the prediction rule up to the sigma0^2 factor
    pred, _ = sd.optimal_pred_rule(fig1_model)
    est = sd.optimal_est_rule(fig1_model)
    assert np.allclose(est.roots_of_p, pred.roots_of_p)
    # estimation risk at the optimum beats the ridge grid
    best = sd.limiting_est_risk(fig1_model, est.as_shrinkage(fig1_model)).total
    assert best <= sd.best_ridge(fig1_model, kind="est")[1] + 1e-12
    # coprime: denominator roots exclude the outliers
    assert sd.coprimality_check(est)


def test_synthesis_round_trip(fig1_model, fig4_model):
    for model in (fig1_model, fig4_model):
        rule, _ = sd.optimal_pred_rule(model)
        params = sd.synthesize_sd_params(rule)
        assert sd.sd_round_trip_error(model, rule, params) < 1e-9
        lams = np.array(params.lambdas)
        assert np.sum(lams < 0) == model.s  # exactly s negative stages
        grid = sd.get_grid(model)
        assert not np.any(grid.on_support(-lams))
        # round-trip risk equality
        r1 = sd.limiting_pred_risk(model, rule.as_shrinkage(model)).total
        r2 = sd.limiting_pred_risk(model, sd.sd_chain_fn(params, model)).total
        assert abs(r1 - r2) < 1e-9


def test_synthesis_one_spike_closed_system(fig4_model):
    # s = 1: the expansion Q(x) = t0 x + t1 (x - gamma0) closes in two
    # unknowns; check it by hand.
    rule, _ = sd.optimal_pred_rule(fig4_model)
    params = sd.synthesize_sd_params(rule)
    g0 = -params.lambdas[0]
    q = np.array(rule.q_coeffs)
    t1 = -np.polynomial.polynomial.polyval(0.0, q) / g0
    t0 = 1.0 - t1
    assert params.xis[0] == pytest.approx(t0 / (t0 + t1))


def test_synthesis_est_rule(fig1_model):
    est = sd.optimal_est_rule(fig1_model)
    params = sd.synthesize_sd_params(est)
    assert sd.sd_round_trip_error(fig1_model, est, params) < 1e-9


def test_coprimality_examples(fig1_model):
    rule, _ = sd.optimal_pred_rule(fig1_model)
    assert sd.coprimality_check(rule)
    # a reducible representation: (x + lam) / (x + lam)^2
    lam = 0.7
    shared = sd.RationalRule(
        p_coeffs=(lam * lam, 2 * lam, 1.0),
        q_coeffs=(lam, 1.0),
        roots_of_p=(-lam, -lam),
    )
    assert not sd.coprimality_check(shared)


def test_coprimality_high_noise_one_spike():
    # one spike above both sqrt(c) and 2c, large noise
    model = SpikedModel(1.0, 0.5, ((3.0, 1.0),), 2.0, 25.0)
    rule, _ = sd.optimal_pred_rule(model)
    assert sd.coprimality_check(rule)


def test_optimality_over_random_rules(fig1_model):
    model = fig1_model
    rule, _ = sd.optimal_pred_rule(model)
    best = sd.limiting_pred_risk(model, rule.as_shrinkage(model)).total
    rng = np.random.default_rng(23)
    grid = sd.get_grid(model)
    b = grid.bulk_hi
    for _ in range(25):
        kind = rng.integers(0, 3)
        if kind == 0:
            f = sd.Ridge(float(rng.uniform(0.01, 10)))
        elif kind == 1:
            lams = np.concatenate([
                -rng.uniform(b * 1.5, b * 4, size=2), rng.uniform(0.05, 3, size=1)
            ])
            f = sd.sd_chain_fn(sd.SDParams(tuple(lams), tuple(rng.uniform(-1, 1, 2))))
        else:
            poles = np.concatenate([
                rng.uniform(b * 1.5, b * 3, size=1), -rng.uniform(0.2, 3, size=1)
            ])
            den = np.polynomial.polynomial.polyfromroots(poles)
            num = np.polynomial.polynomial.polyfromroots(
                rng.uniform(-2, b, size=1))
            f = sd.Rational(tuple(num), tuple(den.real))
        try:
            total = sd.limiting_pred_risk(model, f).total
        except (sd.AssumptionError, sd.NumericalError):
            continue
        assert total >= best - 1e-9


def test_fig3_phenomenology(fig3_factory):
    params = sd.synthesize_sd_params(sd.optimal_pred_rule(fig3_factory(0.01))[0])
    assert abs(params.xis[0]) < 0.05
    for delta in np.linspace(0.2, 19.8, 12):
        m = fig3_factory(float(delta))
        p = sd.synthesize_sd_params(sd.optimal_pred_rule(m)[0])
        assert p.lambdas[0] < 0
        assert -p.lambdas[0] > sd.outlier_location(m, float(delta))


def test_acceptance_style_random_structure():
    rng = np.random.default_rng(31)
    for _ in range(8):
        model = random_model(rng, s=int(rng.integers(1, 4)))
        rule, coef = sd.optimal_pred_rule(model)
        roots = np.sort(rule.roots_of_p)
        assert np.sum(roots < 0) == 1
        xs = np.sort([sd.outlier_location(model, d) for d in model.deltas])
        for i in range(model.s - 1):
            assert xs[i] < roots[1 + i] < xs[i + 1]
        assert roots[-1] > xs[-1]
        assert sd.fixed_point_residual(model, rule) < 1e-8
        gamma0 = model.sigma0_sq * model.r**2 * sd.mixture_weights(model).omega0
        assert abs(coef.b[0] - gamma0) < 1e-12 * max(1.0, gamma0)
        da2 = model.deltas * model.alphas**2
        assert np.sum(da2 * (1 - np.array(coef.A)) ** 2) <= np.sum(da2) + 1e-10


def test_degeneracy_guard():
    # two deltas whose outliers nearly coincide trip the structural guard
    m = SpikedModel(1.0, 1.0, ((2.0, 0.5), (2.0 + 1e-11, 0.5)), 2.0, 1.0)
    with pytest.raises(StructuralError):
        sd.optimal_pred_rule(m)


def test_noiseless_boundary_rejected():
    # at sigma_eps^2 = 0 the denominator picks up a root at zero and the
    # guaranteed negative stage disappears
    m = SpikedModel(1.0, 2.0, ((7.0, 1.7),), 2.0, 0.0)
    with pytest.raises(sd.AssumptionError):
        sd.optimal_pred_rule(m)
    with pytest.raises(sd.AssumptionError):
        sd.optimal_est_rule(m)
    # risks of explicit rules remain well defined without noise
    assert sd.limiting_pred_risk(m, sd.Ridge(1.0)).variance == 0.0


def variational_normal_equations(model, kind="pred"):
    """Normal equations of the discretized risk over tabulated values.

    Assembles the risk as an explicit quadratic form in the rule's values
    at the grid points (diagonal plus one rank-one term per spike), using
    only the raw measure weights and the risk definition, none of the
    density-ratio or Gram machinery. Returns (points, live mask, M, b)
    with the minimizer solving M f = b on the live points; points
    carrying no measure (the zero atom through the x factor, weightless
    edge nodes) do not constrain the minimizer.
    """
    grid = sd.get_grid(model)
    pts = grid.support_points
    x = pts
    a = np.concatenate([grid.alpha_bulk, grid.atom_alpha])
    m = np.concatenate([grid.mp_bulk, grid.atom_mp])
    live = (x > 0) & (a * x**2 + m * x > 0)
    xl, al, ml = x[live], a[live], m[live]
    s0sq, r2, c, se2 = model.sigma0_sq, model.r**2, model.c, model.sigma_eps_sq
    if kind == "pred":
        M = np.diag(s0sq * r2 * al * xl**2 + c * s0sq * se2 * ml * xl)
        b = s0sq * r2 * al * xl
        for j, (d, alj) in enumerate(model.spikes):
            dj = np.concatenate([grid.delta_bulk[j], grid.atom_delta[j]])[live]
            v = dj * xl
            M += d * alj * alj * np.outer(v, v)
            b += d * alj * alj * v
    else:
        M = np.diag(r2 * al * xl**2 + c * se2 * ml * xl)
        b = r2 * al * xl
    return pts, live, M, b


def test_optimal_rule_solves_variational_oracle(fig1_model, fig4_model):
    # the production rule must satisfy the raw-discretization normal
    # equations at machine precision and attain the dense solver's
    # minimum risk value (pointwise comparison would only measure the
    # dense solve's own conditioning in flat directions)
    for model in (fig1_model, fig4_model):
        for kind, build in (
            ("pred", lambda m: sd.optimal_pred_rule(m)[0]),
            ("est", sd.optimal_est_rule),
        ):
            rule = build(model)
            pts, live, M, b = variational_normal_equations(model, kind)
            fv = rule(pts)[live]
            resid = np.max(np.abs(M @ fv - b)) / np.max(np.abs(b))
            assert resid < 1e-12
            f_dense = np.linalg.solve(M, b)
            risk_dense = f_dense @ M @ f_dense - 2 * b @ f_dense
            risk_prod = fv @ M @ fv - 2 * b @ fv
            assert risk_prod <= risk_dense + 1e-12 * abs(risk_dense)


def test_federated_rule_solves_variational_oracle(fig1_model):
    # K-client variant: with equal weights and a common rule the
    # aggregated risk is a quadratic in the rescaled values
    # ftilde = K rho f, with one extra rank-one term per measure from the
    # cross-client products; K * f_K* must solve its normal equations.
    model = fig1_model
    K = 4
    grid = sd.get_grid(model)
    pts = grid.support_points
    x = pts
    a = np.concatenate([grid.alpha_bulk, grid.atom_alpha])
    m = np.concatenate([grid.mp_bulk, grid.atom_mp])
    live = (x > 0) & (a * x**2 + m * x > 0)
    xl, al, ml = x[live], a[live], m[live]
    s0sq, r2, c, se2 = model.sigma0_sq, model.r**2, model.c, model.sigma_eps_sq
    w = sd.mixture_weights(model)
    M = np.diag(s0sq * r2 * al * xl**2 + c * s0sq * se2 * ml * xl)
    v0 = ml * xl
    M += s0sq * r2 * w.omega0 * (K - 1) * np.outer(v0, v0)
    b = K * s0sq * r2 * w.omega0 * v0
    for j, (d, alj) in enumerate(model.spikes):
        dj = np.concatenate([grid.delta_bulk[j], grid.atom_delta[j]])[live]
        v = dj * xl
        M += (s0sq * (K - 1) + d * K) * alj * alj * np.outer(v, v)
        b += K * (d + s0sq) * alj * alj * v
    fed = sd.federated_optimum(model, K)
    fv = K * fed.fK(pts)[live]
    resid = np.max(np.abs(M @ fv - b)) / np.max(np.abs(b))
    assert resid < 1e-12


def test_high_noise_round_trip():
    # roots crowd the outliers as the noise grows; synthesis must stay exact
    for se2 in (1e2, 1e4):
        model = SpikedModel(1.0, 3.0, ((1.0, 1.0), (4.0, 1.0), (9.0, 1.0)),
                            6.0, se2)
        rule, _ = sd.optimal_pred_rule(model)
        params = sd.synthesize_sd_params(rule)
        assert sd.sd_round_trip_error(model, rule, params) < 1e-9
        assert sd.coprimality_check(rule)
