import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fkmeasure.grid import (GridError, SpaceTimeField, box_grid, interval_grid, m_inner,
                            point_grid, spacetime_inner, spacetime_l1, trapezoid_weights)


def test_m_inner_examples():
    g = point_grid(2, 1.0, 1, measure=[0.5, 0.5])
    assert m_inner([1, 1], [1, 1], g) == 1.0
    assert m_inner([1, 0], [0, 1], g) == 0.0
    g2 = point_grid(2, 1.0, 1, measure=[1.0, 2.0])
    assert m_inner([2, -1], [1, 3], g2) == -4.0


def test_m_inner_shape_error():
    g = point_grid(2, 1.0, 1)
    with pytest.raises(GridError):
        m_inner([1, 2, 3], [1, 2], g)


def test_spacetime_inner_examples():
    g = point_grid(1, 1.0, 2)
    one = SpaceTimeField(np.ones((3, 1)), g)
    assert spacetime_inner(one, one) == pytest.approx(1.0)
    assert spacetime_inner(one, SpaceTimeField.zeros(g)) == 0.0
    t = SpaceTimeField(g.times[:, None], g)
    assert spacetime_inner(t, one) == pytest.approx(0.5)


def test_interval_grid_layout():
    g = interval_grid(0.0, 1.0, 4, 2.0, 8)
    np.testing.assert_allclose(g.nodes[:, 0], [0.2, 0.4, 0.6, 0.8])
    np.testing.assert_allclose(g.cell_measure, 0.2)
    assert g.boundary_mask.tolist() == [True, False, False, True]
    assert g.T == 2.0 and g.n_steps == 8
    np.testing.assert_allclose(g.boundary_distance(), [0.2, 0.4, 0.4, 0.2])


def test_box_grid_omit_and_order():
    g = box_grid([(-1, 1), (-1, 1)], (3, 3), 1.0, 2)
    assert g.n_nodes == 9
    # row-major: second node moves in x
    np.testing.assert_allclose(g.nodes[1], [0.0, -0.5])
    h = box_grid([(-1, 1), (-1, 1)], (3, 3), 1.0, 2, omit=(0.0, 0.0))
    assert h.n_nodes == 8
    assert not np.any(np.all(h.nodes == 0.0, axis=1))


def test_grid_validation():
    with pytest.raises(GridError):
        interval_grid(0, 1, 0, 1.0, 2)
    with pytest.raises(GridError):
        interval_grid(0, 1, 3, -1.0, 2)
    with pytest.raises(GridError):
        point_grid(2, 1.0, 1, measure=[1.0, 0.0])
    g = interval_grid(0, 1, 3, 1.0, 4)
    with pytest.raises(GridError):
        g.time_index(0.3)
    assert g.time_index(0.5) == 2


def test_field_rejects_bad_values():
    g = point_grid(2, 1.0, 2)
    with pytest.raises(GridError):
        SpaceTimeField(np.zeros((2, 2)), g)
    with pytest.raises(GridError):
        SpaceTimeField(np.full((3, 2), np.nan), g)


def test_cell_of_convention():
    g = point_grid(1, 1.0, 4)
    assert g.cell_of(0.25) == 1
    assert g.cell_of(0.2499) == 0
    assert g.cell_of(1.0) == 3


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=20))
def test_trapezoid_weights_sum_to_horizon(dts):
    times = np.concatenate([[0.0], np.cumsum(dts)])
    c = trapezoid_weights(times)
    assert c.sum() == pytest.approx(times[-1])
    assert np.all(c > 0)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_spacetime_inner_bilinear_symmetric(n, steps, seed):
    rng = np.random.default_rng(seed)
    g = interval_grid(0, 1, n, 1.0, steps)
    u, v, w = (SpaceTimeField(rng.normal(size=(steps + 1, n)), g) for _ in range(3))
    a, b = rng.normal(size=2)
    lhs = spacetime_inner(a * u + b * v, w)
    rhs = a * spacetime_inner(u, w) + b * spacetime_inner(v, w)
    assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(lhs)))
    assert spacetime_inner(u, v) == pytest.approx(spacetime_inner(v, u))
    assert spacetime_inner(u, u) >= 0
    assert spacetime_l1(u) >= abs(spacetime_inner(u, SpaceTimeField(np.ones_like(u.values), g))) - 1e-12
