import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fkmeasure.grid import SpaceTimeField, interval_grid, point_grid
from fkmeasure.linear import LinearProblem, solve_fk_mc
from fkmeasure.measures import MeasureData, to_revuz_rates
from fkmeasure.operators import divergence_form_generator, from_matrices, zero_generator
from fkmeasure.process import (ProcessError, accumulate, estimate_capacity, run_levels,
                               sample_path, sample_paths, simulate)


def test_frozen_path():
    g = point_grid(2, 3.0, 6)
    p = sample_path(zero_generator(g), (1.0, 1), 5)
    assert p.events == []
    assert p.survived and p.lifetime == np.inf
    assert p.horizon_clip == pytest.approx(2.0)
    assert p.final_node == 1


def test_exponential_lifetime():
    g = point_grid(1, 60.0, 1)
    gen = from_matrices(g, [[[-1.0]]])
    n = 100_000
    res = simulate(gen, np.zeros(n), np.zeros(n, dtype=int), np.random.default_rng(11))
    life = res["lifetime"]
    assert np.all(np.isfinite(life))
    assert abs(life.mean() - 1.0) <= 3 / np.sqrt(n)


def test_lifetime_through_path_objects():
    g = point_grid(1, 10.0, 1)
    paths = sample_paths(from_matrices(g, [[[-1.0]]]), (0.0, 0), 20000, 3)
    clip = np.array([p.horizon_clip for p in paths])
    sd = clip.std() / np.sqrt(clip.size)
    assert abs(clip.mean() - (1 - np.exp(-10.0))) <= 3 * sd


def test_symmetric_chain_occupation():
    g = point_grid(2, 100.0, 1)
    gen = from_matrices(g, [[[-1.0, 1.0], [1.0, -1.0]]])
    frac = []
    for p in sample_paths(gen, (0.0, 0), 1000, 8):
        a, b, seq = p.segments()
        frac.append(np.sum((b - a)[seq == 1]) / 100.0)
    frac = np.array(frac)
    assert abs(frac.mean() - 0.5) <= 3 * frac.std() / np.sqrt(frac.size)


def test_jump_chain_respects_rates():
    g = point_grid(3, 1.0, 1)
    Q = np.array([[-3.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    firsts = [p.events[0][1] for p in sample_paths(from_matrices(g, [Q]), (0.0, 0), 6000, 2)
              if p.events]
    share = np.mean(np.array(firsts) == 2)
    assert abs(share - 2 / 3) < 4 * np.sqrt(2 / 9 / len(firsts))


def test_accumulate_examples():
    g = point_grid(2, 4.0, 4)
    gen = from_matrices(g, [[[-1.0, 1.0], [1.0, -1.0]]])
    p = sample_path(gen, (1.0, 0), 1)
    assert accumulate(p, to_revuz_rates(MeasureData.zero(g))) == 0.0
    ones = to_revuz_rates(MeasureData(g, SpaceTimeField(np.ones((5, 2)), g)))
    assert accumulate(p, ones) == pytest.approx(3.0)
    killing = from_matrices(g, [[[-1.0, 0.0], [0.0, -1.0]]])
    term = to_revuz_rates(MeasureData.terminal(g, [1.0, 1.0]))
    for q in sample_paths(killing, (0.0, 0), 50, 4):
        assert accumulate(q, term) == (1.0 if q.survived else 0.0)


def test_slice_counts_strictly_after_start():
    g = point_grid(1, 2.0, 2)
    rates = to_revuz_rates(MeasureData(g, time_slices=[(1.0, np.ones(1))]))
    gen = zero_generator(g)
    assert accumulate(sample_path(gen, (0.0, 0), 0), rates) == 1.0
    assert accumulate(sample_path(gen, (1.0, 0), 0), rates) == 0.0


def test_path_text_and_shift_errors():
    g = point_grid(2, 1.0, 2)
    p = sample_path(from_matrices(g, [[[-5.0, 5.0], [5.0, -5.0]]]), (0.0, 0), 9)
    text = p.to_text().splitlines()
    assert text[0] == "start 0.0 0"
    assert text[-1].startswith("end 1.0")
    assert len(text) == len(p.events) + 2
    with pytest.raises(ProcessError):
        p.shift(2.0)


def _chain():
    g = interval_grid(0, 1, 5, 2.0, 8)
    return divergence_form_generator(g, 0.2, 0.3)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_additive_functional_is_additive_under_shifts(seed, frac):
    gen = _chain()
    g = gen.grid
    rng = np.random.default_rng(seed)
    D = rng.random((9, 5))
    J = np.zeros((9, 5))
    J[4] = rng.random(5)
    W = np.zeros((8, 5))
    W[2, 2] = 1.0
    rates = to_revuz_rates(MeasureData.from_arrays(g, D, J, W))
    p = sample_path(gen, (0.25, 2), seed)
    t = frac * p.horizon_clip
    total = accumulate(p, rates)
    split = accumulate(p, rates, upto=t) + accumulate(p.shift(t), rates)
    assert split == pytest.approx(total, abs=1e-12)


def test_levels_are_reproducible_and_worker_independent():
    gen = _chain()
    g = gen.grid
    rates = to_revuz_rates(MeasureData(g, atoms=[(3, 2, 0.5)]))
    phi = np.linspace(0, 1, 5)
    a = run_levels(gen, phi, rates, 200, 7)
    b = run_levels(gen, phi, rates, 200, 7, workers=2)
    c = run_levels(gen, phi, rates, 200, 8)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])
    sub = run_levels(gen, phi, rates, 200, 7, levels=[3])
    np.testing.assert_array_equal(sub[0][3], a[0][3])


def test_mc_matches_direct_on_small_chain():
    from fkmeasure.linear import solve_backward

    gen = _chain()
    g = gen.grid
    mu = MeasureData(g, SpaceTimeField(np.ones((9, 5)), g), [(1.0, np.ones(5))], [(5, 1, 0.3)])
    prob = LinearProblem(gen, np.linspace(1.0, 0.0, 5), mu)
    mc = solve_fk_mc(prob, 4000, 12)
    z = np.abs(mc.u.values - solve_backward(prob).u.values)[:-1] / mc.stderr.values[:-1]
    assert np.mean(z <= 3) >= 0.95
    assert np.mean(z ** 2) < 2.0


def test_capacity_extremes():
    gen = _chain()
    full = np.ones((8, 5), dtype=bool)
    out = estimate_capacity(gen, full, np.ones(5), 10, 1)
    assert out["estimate"] == pytest.approx(gen.grid.T * gen.grid.cell_measure.sum())
    assert out["stderr"] == 0.0
    empty = estimate_capacity(gen, ~full, np.ones(5), 10, 1)
    assert empty["estimate"] == 0.0 and empty["exact"] == 0.0
    with pytest.raises(ProcessError):
        estimate_capacity(gen, np.ones((3, 3), dtype=bool), np.ones(5), 10, 1)


def test_capacity_mc_against_exact():
    gen = _chain()
    cells = np.zeros((8, 5), dtype=bool)
    cells[4:, 2] = True
    out = estimate_capacity(gen, cells, np.ones(5), 3000, 5)
    assert abs(out["estimate"] - out["exact"]) <= 3 * out["stderr"]
    assert 0 < out["exact_h"] < out["exact"]
