import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from fkmeasure.grid import SpaceTimeField, interval_grid, point_grid, spacetime_l1
from fkmeasure.linear import LinearProblem, solve_backward
from fkmeasure.measures import MeasureData
from fkmeasure.operators import divergence_form_generator, from_matrices, zero_generator
from fkmeasure.process import sample_path
from fkmeasure.semilinear import (Driver, IterationError, SemilinearError, SemilinearInputs,
                                  StepSizeError, check_comparison, check_continuity,
                                  check_driver_l1, check_monotone, cubic_driver, linear_driver,
                                  make_driver, martingale_residual, reconstruct_bsde,
                                  saturating_driver, solve_semilinear, terminal_martingale)


def heat(n=7, T=1.0, steps=10):
    g = interval_grid(0, 1, n, T, steps)
    return divergence_form_generator(g, 0.1)


def smooth_data(g):
    phi = np.sin(np.pi * g.nodes[:, 0])
    mu = MeasureData(g, SpaceTimeField(np.ones((g.n_steps + 1, g.n_nodes)), g),
                     atoms=[(g.n_steps // 2, g.n_nodes // 2, 0.3)])
    return phi, mu


def test_zero_driver_is_linear_solve():
    gen = heat()
    phi, mu = smooth_data(gen.grid)
    res = solve_semilinear(gen, phi, mu, linear_driver(0.0))
    assert res.info["iterations"] == 1
    np.testing.assert_allclose(res.u.values, solve_backward(LinearProblem(gen, phi, mu)).u.values,
                               atol=1e-14)


def test_linear_decay_oracle():
    g = point_grid(1, 1.0, 40)
    u = solve_semilinear(zero_generator(g), [1.0], None, linear_driver(-1.0)).u.values[:, 0]
    assert np.max(np.abs(u - np.exp(-(1 - g.times)))) < 1e-4


def test_cubic_against_reference_ode():
    g = point_grid(1, 1.0, 320)
    res = solve_semilinear(zero_generator(g), [2.0], None, cubic_driver(1.0))
    assert res.method == "implicit"
    # backward equation u' = u^3 in t, so forward in tau = T - t: y' = -y^3
    ref = solve_ivp(lambda s, y: -y ** 3, (0, 1), [2.0], rtol=1e-12, atol=1e-14,
                    dense_output=True)
    want = ref.sol(1.0 - g.times)[0]
    assert np.max(np.abs(res.u.values[:, 0] - want)) < 1e-4
    np.testing.assert_allclose(want, 2 / np.sqrt(1 + 8 * (1 - g.times)), rtol=1e-9)


def test_driver_catalog():
    assert make_driver("cubic", c=2.0).params["c"] == 2.0
    with pytest.raises(SemilinearError):
        make_driver("nope")
    with pytest.raises(SemilinearError):
        cubic_driver(-1.0)
    with pytest.raises(SemilinearError):
        saturating_driver(1.0, 0.0)


def test_monotone_and_continuity_checks():
    g = point_grid(3, 1.0, 2)
    for drv in (linear_driver(-1.0), cubic_driver(), saturating_driver(2.0, 0.5)):
        assert check_monotone(drv, g)["holds"]
        assert check_continuity(drv, g)["holds"]
    bad = Driver(lambda t, x, y: y ** 3, alpha=0.0, name="anti")
    assert not check_monotone(bad, g)["holds"]
    with pytest.raises(SemilinearError):
        solve_semilinear(zero_generator(g), np.ones(3), None, bad)
    # a spot check only finds jumps dense enough to be sampled
    step = Driver(lambda t, x, y: -np.floor(1e8 * y), alpha=0.0, lipschitz=None, name="stairs")
    assert not check_continuity(step, g)["holds"]


def test_iteration_and_step_errors():
    gen = heat()
    phi, mu = smooth_data(gen.grid)
    with pytest.raises(IterationError) as info:
        solve_semilinear(gen, phi, mu, linear_driver(-3.0), max_iter=1)
    assert info.value.residual > 0
    g = point_grid(1, 1.0, 2)
    with pytest.raises(StepSizeError):
        solve_semilinear(zero_generator(g), [1.0], None, linear_driver(2.0), method="implicit")
    with pytest.raises(SemilinearError):
        solve_semilinear(gen, phi, mu, linear_driver(-1.0), method="newton")


def test_picard_and_implicit_agree():
    gen = heat(steps=80)
    phi, mu = smooth_data(gen.grid)
    drv = saturating_driver(1.0, 0.5)
    a = solve_semilinear(gen, phi, mu, drv, method="picard").u.values
    b = solve_semilinear(gen, phi, mu, drv, method="implicit").u.values
    assert np.max(np.abs(a - b)) < 1e-4


def test_bsde_on_jumpless_path():
    g = point_grid(1, 2.0, 8)
    gen = from_matrices(g, [[[-0.7]]])
    prob = LinearProblem(gen, [1.5])
    drv = linear_driver(0.0)
    u = solve_semilinear(gen, prob.phi, None, drv).u
    for seed in range(5):
        p = sample_path(gen, (0.5, 0), seed)
        b = reconstruct_bsde(u, p, prob, drv)
        assert b.residual <= 1e-12
        if p.survived:
            assert b.M_final == pytest.approx(1.5 - u.values[2, 0], abs=1e-12)
        else:
            assert b.M_final == pytest.approx(-u.values[2, 0], abs=1e-12)


def test_bsde_reconstruction_matches_vectorised_sum():
    gen = heat(n=5, steps=10)
    g = gen.grid
    phi, mu = smooth_data(g)
    drv = cubic_driver(1.0)
    u = solve_semilinear(gen, phi, mu, drv).u
    out = terminal_martingale(u, LinearProblem(gen, phi, mu), drv, (0, 2), 20000, 3,
                              n_reconstruct=100)
    assert out["max_residual"] <= 1e-10
    assert abs(out["mean"]) <= 3 * out["stderr"] + 0.01


def test_martingale_residual_detects_perturbation():
    gen = heat(n=5, steps=6)
    g = gen.grid
    phi, mu = smooth_data(g)
    drv = linear_driver(-1.0)
    prob = LinearProblem(gen, phi, mu)
    u = solve_semilinear(gen, phi, mu, drv).u
    eps = 0.05
    bumped = u.values.copy()
    bumped[2, 2] += eps
    rep = martingale_residual(SpaceTimeField(bumped, g), prob, drv, 20000, 1, levels=[2])
    assert rep.residual.values[2, 2] >= eps / 2
    clean = martingale_residual(u, prob, drv, 20000, 1, levels=[2])
    assert np.all(clean.within(4.0, 1e-3)[2])


def test_comparison_cases():
    gen = heat()
    g = gen.grid
    phi, mu = smooth_data(g)
    drv = cubic_driver()
    u = solve_semilinear(gen, phi, mu, drv).u
    same = check_comparison(SemilinearInputs(phi, mu, drv), SemilinearInputs(phi, mu, drv), u, u)
    assert same["ordered"] and same["worst_violation"] == 0.0
    mu2 = mu + MeasureData(g, atoms=[(3, 1, 0.5)])
    u2 = solve_semilinear(gen, phi, mu2, drv).u
    c = check_comparison(SemilinearInputs(phi, mu, drv), SemilinearInputs(phi, mu2, drv), u, u2)
    assert c["ordered"]
    bad = check_comparison(SemilinearInputs(phi + 1, mu, drv), SemilinearInputs(phi, mu, drv), u, u)
    assert bad["skipped"] and "terminal" in bad["reason"]


def test_comparison_shift_is_survival_probability():
    gen = heat()
    phi, mu = smooth_data(gen.grid)
    zero = linear_driver(0.0)
    u1 = solve_semilinear(gen, phi, mu, zero).u
    u2 = solve_semilinear(gen, phi + 1, mu, zero).u
    surv = solve_backward(LinearProblem(gen, np.ones(gen.n_nodes))).u
    np.testing.assert_allclose(u2.values - u1.values, surv.values, atol=1e-12)
    assert surv.values.min() >= 0


def test_driver_l1_bound():
    gen = heat()
    phi, mu = smooth_data(gen.grid)
    prob = LinearProblem(gen, phi, mu)
    u = solve_semilinear(gen, phi, mu, linear_driver(0.0)).u
    out = check_driver_l1(u, prob, linear_driver(0.0), 0.0)
    assert out["lhs"] == 0.0 and out["holds"]
    drv = linear_driver(-1.0)
    u = solve_semilinear(gen, phi, mu, drv).u
    out = check_driver_l1(u, prob, drv, 0.0)
    assert out["lhs"] == pytest.approx(spacetime_l1(u))
    assert out["holds"]
    with pytest.raises(SemilinearError):
        check_driver_l1(u, prob, drv, None)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["cubic", "linear", "saturating"]))
def test_comparison_property(seed, name):
    rng = np.random.default_rng(seed)
    gen = heat(n=5, steps=12)
    g = gen.grid
    drv = {"cubic": cubic_driver(1.0), "linear": linear_driver(-1.0),
           "saturating": saturating_driver(1.0, 0.5)}[name]
    phi1 = rng.uniform(-1, 1, 5)
    phi2 = phi1 + rng.uniform(0, 0.5, 5)
    D1 = rng.uniform(-1, 1, (13, 5))
    D2 = D1 + rng.uniform(0, 1, (13, 5))
    Z = np.zeros((13, 5))
    W = np.zeros((12, 5))
    mu1 = MeasureData.from_arrays(g, D1, Z, W)
    mu2 = MeasureData.from_arrays(g, D2, Z, W)
    u1 = solve_semilinear(gen, phi1, mu1, drv).u
    u2 = solve_semilinear(gen, phi2, mu2, drv).u
    c = check_comparison(SemilinearInputs(phi1, mu1, drv), SemilinearInputs(phi2, mu2, drv), u1, u2)
    assert c["ordered"]
