import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from carbonlace.lp import (
    Infeasible,
    LpProblem,
    MaxIterations,
    Unbounded,
    basis_sensitivity,
    check_optimality,
    solve_lp,
)

from conftest import random_lp


def highs(p: LpProblem):
    bounds = [(lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None) for lo, hi in zip(p.lower, p.upper)]
    return linprog(p.cost, A_eq=p.A, b_eq=p.b, bounds=bounds, method="highs")


class TestSolve:
    def test_small_known_optimum(self):
        # min -x1 - 2x2  s.t. x1 + x2 = 4, 0 <= x <= 3
        p = LpProblem([-1.0, -2.0], [[1.0, 1.0]], [4.0], [0.0, 0.0], [3.0, 3.0])
        sol = solve_lp(p)
        assert sol.x == pytest.approx([1.0, 3.0], abs=1e-12)
        assert sol.objective == pytest.approx(-7.0, abs=1e-12)
        assert sol.duals[0] == pytest.approx(-1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_highs(self, seed):
        rng = np.random.default_rng(seed)
        m, n = int(rng.integers(1, 6)), int(rng.integers(6, 14))
        p = random_lp(rng, m, n)
        ref = highs(p)
        assert ref.status == 0
        sol = solve_lp(p)
        assert sol.objective == pytest.approx(ref.fun, abs=1e-8 * (1 + abs(ref.fun)))
        assert np.allclose(p.A @ sol.x, p.b, atol=1e-9)
        assert np.all(sol.x >= p.lower - 1e-9) and np.all(sol.x <= p.upper + 1e-9)

    def test_free_variable_and_infinite_bounds(self):
        p = LpProblem([1.0, 1.0], [[1.0, -1.0]], [2.0], [-np.inf, 0.0], [np.inf, np.inf])
        sol = solve_lp(p)
        assert sol.x == pytest.approx([2.0, 0.0])

    def test_infeasible_raises_with_certificate(self):
        p = LpProblem([1.0, 1.0], [[1.0, 1.0]], [10.0], [0.0, 0.0], [2.0, 2.0])
        with pytest.raises(Infeasible) as exc:
            solve_lp(p)
        assert exc.value.certificate is not None

    def test_unbounded(self):
        p = LpProblem([-1.0, 0.0], [[1.0, -1.0]], [0.0], [0.0, 0.0], [np.inf, np.inf])
        with pytest.raises(Unbounded):
            solve_lp(p)

    def test_iteration_cap(self):
        p = random_lp(np.random.default_rng(3), 4, 10)
        with pytest.raises(MaxIterations):
            solve_lp(p, max_iter=0)

    def test_bad_dimensions(self):
        with pytest.raises(ValueError):
            LpProblem([1.0], [[1.0, 1.0]], [1.0], [0.0, 0.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            LpProblem([1.0], [[1.0]], [1.0], [2.0], [1.0])

    def test_deterministic(self):
        p = random_lp(np.random.default_rng(11), 5, 12)
        a, b = solve_lp(p), solve_lp(p)
        assert a.basis == b.basis and np.array_equal(a.x, b.x)


class TestDuality:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), m=st.integers(1, 6), extra=st.integers(1, 8))
    def test_strong_duality(self, seed, m, extra):
        p = random_lp(np.random.default_rng(seed), m, m + extra)
        sol = solve_lp(p)
        chk = check_optimality(sol, p)
        assert chk["gap"] <= 1e-8 * (1 + abs(sol.objective))
        assert chk["primal_residual"] <= 1e-8
        assert chk["bound_violation"] <= 1e-9
        assert chk["dual_infeasibility"] == 0.0

    def test_duals_match_highs_marginals(self):
        rng = np.random.default_rng(5)
        p = random_lp(rng, 3, 9)
        ref = highs(p)
        sol = solve_lp(p)
        assert np.allclose(sol.duals, ref.eqlin.marginals, atol=1e-7)


class TestSensitivity:
    @pytest.mark.parametrize("seed", range(15))
    def test_matches_resolve(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = random_lp(rng, 3, 9)
        sol = solve_lp(p)
        direction = rng.normal(size=p.m)
        dx = basis_sensitivity(sol, p, direction)
        h = 1e-6
        moved = solve_lp(LpProblem(p.cost, p.A, p.b + h * direction, p.lower, p.upper))
        if moved.basis != sol.basis:
            pytest.skip("active set changed under the perturbation")
        fd = (moved.x - sol.x) / h
        assert np.allclose(dx, fd, rtol=1e-6, atol=1e-6)

    def test_matrix_of_directions(self):
        p = random_lp(np.random.default_rng(8), 3, 8)
        sol = solve_lp(p)
        D = np.eye(3)
        cols = basis_sensitivity(sol, p, D)
        for k in range(3):
            assert np.allclose(cols[:, k], basis_sensitivity(sol, p, D[:, k]))
        assert np.allclose(p.A @ cols, D, atol=1e-10)

    def test_wrong_shape(self):
        p = random_lp(np.random.default_rng(8), 3, 8)
        sol = solve_lp(p)
        with pytest.raises(ValueError):
            basis_sensitivity(sol, p, np.ones(4))
