import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import gamma as gamma_fn

from fkmeasure.grid import box_grid, interval_grid, m_inner, point_grid
from fkmeasure.operators import (OperatorError, adjoint, bilinear_form, divergence_form_generator,
                                 export_coo, fractional_generator, fractional_weight, from_matrices,
                                 structural_report, zero_generator)


def unit_lattice(n=3, T=1.0, steps=2):
    return interval_grid(0.0, n + 1.0, n, T, steps)


def test_discrete_laplacian_stencil():
    gen = divergence_form_generator(unit_lattice(), 1.0)
    Q = gen.stages[0].Q.toarray()
    np.testing.assert_allclose(Q, [[-2, 1, 0], [1, -2, 1], [0, 1, -2]])


def test_upwind_drift_stencil():
    c = 0.7
    gen = divergence_form_generator(unit_lattice(), 1.0, c)
    Q = gen.stages[0].Q.toarray()
    # positive b moves mass to the right
    assert Q[1, 0] == pytest.approx(1.0)
    assert Q[1, 2] == pytest.approx(1.0 + c)
    assert Q[1].sum() == pytest.approx(0.0)
    # killing at the right boundary includes the drift
    assert -Q[2].sum() == pytest.approx(1.0 + c)


def test_nonpositive_diffusion_rejected():
    with pytest.raises(OperatorError):
        divergence_form_generator(unit_lattice(), 0.0)
    with pytest.raises(OperatorError):
        divergence_form_generator(unit_lattice(), lambda t, x: x[0] - 2.0)


def test_symmetric_generator_is_self_adjoint(rng):
    g = interval_grid(0, 1, 12, 1.0, 2)
    gen = divergence_form_generator(g, lambda t, x: 0.1 + x[0] ** 2)
    Q = gen.stages[0].Q
    u, v = rng.normal(size=(2, g.n_nodes))
    assert m_inner(Q @ u, v, g) == pytest.approx(m_inner(u, Q @ v, g), rel=1e-12)
    np.testing.assert_allclose(adjoint(gen).stages[0].Q.toarray(), Q.toarray(), atol=1e-12)


def test_two_dimensional_operator_with_hole():
    g = box_grid([(-1, 1), (-1, 1)], (5, 5), 1.0, 2, omit=(0.0, 0.0))
    gen = divergence_form_generator(g, 1.0)
    Q = gen.stages[0].Q.toarray()
    kill = -Q.sum(axis=1)
    h = 2 / 6
    # neighbours of the hole lose one edge to killing
    near = np.isclose(np.linalg.norm(g.nodes, axis=1), h)
    assert near.sum() == 4
    np.testing.assert_allclose(kill[near], 1 / h ** 2)


def test_stages_follow_time_dependent_coefficients():
    g = interval_grid(0, 1, 5, 1.0, 4)
    gen = divergence_form_generator(g, lambda t, x: 1.0 + t, stage_times=[0.5])
    assert len(gen.stages) == 2
    assert gen.Q(0.7)[2, 2] / gen.Q(0.1)[2, 2] == pytest.approx(1.75 / 1.25)
    g_bad = interval_grid(0, 1, 5, 1.0, 3)
    gen_bad = divergence_form_generator(g_bad, 1.0, stage_times=[0.5])
    with pytest.raises(OperatorError):
        gen_bad.cell_stage(1)


def test_fractional_weight_oracle():
    assert fractional_weight(1.0, 1) == pytest.approx(1 / np.pi, rel=1e-14)
    for a in (0.3, 1.1, 1.7):
        for d in (1, 2):
            want = a * 2 ** (a - 1) * gamma_fn((a + d) / 2) / (np.pi ** (d / 2) * gamma_fn(1 - a / 2))
            assert fractional_weight(a, d) == pytest.approx(want, rel=1e-13)


def test_fractional_rates():
    g = interval_grid(0, 1, 7, 1.0, 2)
    gen = fractional_generator(g, 1.0)
    Q = gen.stages[0].Q.toarray()
    h = 1 / 8
    assert Q[3, 4] == pytest.approx(h / np.pi / h ** 2)
    np.testing.assert_allclose(Q, Q.T, atol=1e-12)
    assert np.all(Q.sum(axis=1) < 0)


def test_fractional_validation():
    g = interval_grid(0, 1, 5, 1.0, 2)
    with pytest.raises(OperatorError):
        fractional_generator(g, 2.0)
    with pytest.raises(OperatorError):
        fractional_generator(g, lambda x: 0.0)
    with pytest.raises(OperatorError):
        fractional_generator(box_grid([(-1, 1), (-1, 1)], (3, 3), 1.0, 2, omit=(0, 0)), 1.0)


def test_variable_exponent_kind():
    g = interval_grid(0, 1, 9, 1.0, 2)
    gen = fractional_generator(g, lambda x: 0.6 + 0.8 * x[0])
    assert gen.kind == "fractional_variable"
    assert structural_report(gen).markov


def test_fractional_cutoff_moves_rate_to_killing():
    g = interval_grid(0, 1, 9, 1.0, 2)
    full = fractional_generator(g, 1.0).stages[0].Q.toarray()
    cut = fractional_generator(g, 1.0, cutoff=0.25).stages[0].Q.toarray()
    np.testing.assert_allclose(np.diag(full), np.diag(cut))
    assert cut[0, -1] == 0.0 and full[0, -1] > 0


def test_bilinear_form_examples():
    gen = divergence_form_generator(unit_lattice(), 1.0)
    assert bilinear_form(gen, 0.0, [0, 1, 0], [0, 1, 0]) == pytest.approx(2.0)
    # a conservative chain annihilates constants
    g = point_grid(3, 1.0, 1)
    Q = np.array([[-1.0, 1.0, 0.0], [0.5, -1.0, 0.5], [0.0, 2.0, -2.0]])
    assert bilinear_form(from_matrices(g, [Q]), 0.0, np.ones(3), [0.3, -1, 2]) == 0.0


def test_structural_symmetric():
    rep = structural_report(divergence_form_generator(interval_grid(0, 1, 8, 1.0, 2), 0.2))
    assert rep.alpha0 == 0.0
    assert rep.K == pytest.approx(1.0)
    assert rep.lam == 1.0
    assert rep.markov
    assert rep.dual_markov_gamma == 0.0


def test_structural_upwind_gamma():
    g = interval_grid(0, 1, 10, 1.0, 2)
    c = 0.5
    gen = divergence_form_generator(g, 0.05, c)
    rep = structural_report(gen)
    Qh = adjoint(gen).stages[0].Q.toarray()
    off = Qh - np.diag(np.diag(Qh))
    assert off.min() >= 0
    assert rep.dual_markov_gamma == pytest.approx(Qh.sum(axis=1).max())
    # constant velocity transports m without compression
    assert rep.dual_markov_gamma == 0.0
    assert 1.0 < rep.K < np.inf
    # a compressive velocity 1 - x piles mass up at rate |b'| = 1
    comp = structural_report(divergence_form_generator(g, 0.05, lambda t, x: 1.0 - x[0]))
    assert comp.dual_markov_gamma == pytest.approx(1.0, rel=1e-9)


def test_structural_lambda_two_stages():
    g = interval_grid(0, 1, 6, 1.0, 4)
    gen = divergence_form_generator(g, lambda t, x: 1.0 if t < 0.5 else 3.0, stage_times=[0.5])
    rep = structural_report(gen)
    assert rep.lam == pytest.approx(3.0)


def test_sub_markov_validation():
    g = point_grid(2, 1.0, 1)
    with pytest.raises(OperatorError):
        from_matrices(g, [[[-1.0, 2.0], [0.0, 0.0]]])
    with pytest.raises(OperatorError):
        from_matrices(g, [[[-1.0, -0.5], [0.0, 0.0]]])
    with pytest.raises(OperatorError):
        from_matrices(g, [np.zeros((3, 3))])


def test_zero_generator_and_export():
    g = point_grid(2, 1.0, 2)
    z = zero_generator(g)
    assert z.max_rate() == 0.0
    text = export_coo(from_matrices(g, [[[-1.0, 1.0], [1.0, -1.0]]]))
    assert text.splitlines()[0] == "stage t0 t1 row col value"
    assert len(text.splitlines()) == 5


def test_shifted_adds_killing():
    gen = divergence_form_generator(unit_lattice(), 1.0)
    sh = gen.shifted(0.5)
    np.testing.assert_allclose(sh.killing(), gen.killing() + 0.5)
    with pytest.raises(OperatorError):
        gen.shifted(-1.0)


@given(st.integers(2, 12), st.floats(0.01, 2.0), st.floats(-2.0, 2.0), st.integers(0, 2**31 - 1))
def test_divergence_generator_is_sub_markov(n, a, b, seed):
    g = interval_grid(0, 1, n, 1.0, 2)
    Q = divergence_form_generator(g, a, b).stages[0].Q.toarray()
    off = Q - np.diag(np.diag(Q))
    assert off.min() >= 0
    assert Q.sum(axis=1).max() <= 1e-9 * np.abs(Q).max()
    rng = np.random.default_rng(seed)
    u = rng.normal(size=n)
    # B(u, u) >= 0 for the symmetric part of a sub-Markov generator on constant m
    assert -(u @ Q @ u) >= -1e-9 * np.abs(Q).max() * (u @ u) or b != 0


@given(st.floats(0.2, 1.9), st.integers(3, 12), st.integers(0, 2**31 - 1))
def test_adjoint_identity(alpha, n, seed):
    g = interval_grid(0, 1, n, 1.0, 2)
    gen = fractional_generator(g, lambda x: alpha * (0.6 + 0.4 * x[0]))
    Q = gen.stages[0].Q
    Qh = adjoint(gen).stages[0].Q
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2, n))
    lhs = m_inner(Q @ u, v, g)
    assert lhs == pytest.approx(m_inner(u, Qh @ v, g), abs=1e-10 * (1 + abs(lhs)))
    assert sp.issparse(Qh)
