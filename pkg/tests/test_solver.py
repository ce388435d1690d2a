"""Broyden solver and fixed-point iterator against closed forms and the
long fixed-point oracle."""

import numpy as np
import pytest

from ifr.blocks import DivergenceError
from ifr.rng import CounterRng
from ifr.solver import SolverConfig, broyden_solve, fixed_point_iterate

from conftest import rand


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_iters=0)
    with pytest.raises(ValueError):
        SolverConfig(rel_tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(damping=1.5)
    assert SolverConfig(max_iters=7).history_size == 7
    assert SolverConfig(max_iters=7, memory=3).history_size == 3


def test_negation_residual_roots_in_one_step():
    x0 = rand(1, (6,))
    res = broyden_solve(lambda v: -v, x0, SolverConfig())
    assert np.abs(res.root).max() == 0.0
    assert res.converged
    assert res.best_iteration == 1


def test_scalar_fixed_point_closed_form():
    res = broyden_solve(lambda v: 0.5 * v + 1.0 - v, np.zeros(1), SolverConfig())
    assert abs(res.root[0] - 2.0) < 1e-10
    assert res.converged


def test_contraction_root_matches_long_fixed_point_oracle():
    rng = CounterRng(9)
    a = rng.normal((16, 16)) / 4.0
    b = rng.normal((16,))

    def contraction(h):
        return 0.4 * np.tanh(a @ h) + b

    res = broyden_solve(
        lambda h: contraction(h) - h, np.zeros(16), SolverConfig(max_iters=40, rel_tol=1e-13)
    )
    oracle, _ = fixed_point_iterate(contraction, np.zeros(16), 10_000)
    assert np.abs(res.root - oracle).max() < 1e-8


@pytest.mark.parametrize("dim", [4, 16, 64])
def test_linear_residual_converges_within_two_dim_iterations(dim):
    rng = CounterRng(100 + dim)
    m = rng.normal((dim, dim)) * (0.4 / np.sqrt(dim))
    np.fill_diagonal(m, m.diagonal() - 1.0)  # g(x) = Mx + c with M ~ -(I - small)
    c = rng.normal((dim,))
    res = broyden_solve(
        lambda v: m @ v + c, np.zeros(dim), SolverConfig(max_iters=2 * dim, rel_tol=1e-8)
    )
    assert res.converged
    assert res.residual_trace[res.best_iteration] < 1e-8


def test_best_iteration_is_argmin_of_trace():
    rng = CounterRng(55)
    a = rng.normal((8, 8)) / 3.0

    def residual(v):
        return np.tanh(a @ v) + 0.5 - v

    res = broyden_solve(residual, rng.normal((8,)), SolverConfig(max_iters=10, rel_tol=1e-14))
    assert res.residual_trace[res.best_iteration] == min(res.residual_trace)
    assert res.iterations_used == len(res.residual_trace)


def test_solver_is_deterministic():
    rng = CounterRng(66)
    a = rng.normal((12, 12)) / 4.0
    x0 = rng.normal((12,))

    def residual(v):
        return 0.3 * np.tanh(a @ v) + 1.0 - v

    r1 = broyden_solve(residual, x0, SolverConfig())
    r2 = broyden_solve(residual, x0, SolverConfig())
    assert np.array_equal(r1.root, r2.root)
    assert r1.residual_trace == r2.residual_trace


def test_divergence_returns_best_iterate_with_note():
    # cubic residual: the first fixed-point-style step explodes the
    # relative residual past the divergence factor
    def residual(v):
        return v**3

    res = broyden_solve(
        residual, np.full(3, 10.0), SolverConfig(max_iters=10, divergence_factor=10.0)
    )
    assert not res.converged
    assert "diverged" in res.note
    assert res.residual_trace[res.best_iteration] == min(res.residual_trace)


def test_nonfinite_residual_annotated():
    def residual(v):
        return v * np.inf

    res = broyden_solve(residual, np.ones(2), SolverConfig())
    assert not res.converged
    assert "non-finite" in res.note


def test_fixed_point_zero_steps_returns_start():
    x0 = rand(70, (5,))
    out, trace = fixed_point_iterate(lambda v: v + 1, x0, 0)
    assert np.array_equal(out, x0)
    assert trace == []


def test_fixed_point_geometric_series():
    out, trace = fixed_point_iterate(lambda v: 0.5 * v + 1.0, np.zeros(1), 10)
    assert out[0] == 1.998046875
    assert trace[0] == 1.0 and trace[1] == 0.5


@pytest.mark.parametrize("lipschitz", [0.3, 0.7, 0.95])
def test_fixed_point_contraction_ratio_bound(lipschitz):
    rng = CounterRng(80)
    q, _ = np.linalg.qr(rng.normal((10, 10)))
    a = q @ np.diag(np.linspace(lipschitz, lipschitz * 0.2, 10)) @ q.T
    b = rng.normal((10,))
    _, trace = fixed_point_iterate(lambda v: a @ v + b, np.zeros(10), 60)
    ratios = [t1 / t0 for t0, t1 in zip(trace, trace[1:]) if t0 > 1e-13]
    assert max(ratios) <= lipschitz + 1e-9


def test_fixed_point_nonfinite_aborts_with_step():
    with pytest.raises(DivergenceError) as err:
        fixed_point_iterate(lambda v: v * 1e200, np.ones(2), 10)
    assert err.value.step == 1
