"""Bounded-variable revised simplex.

Solves ``min c'x  s.t.  A x = b,  l <= x <= u`` and reports the optimal
basis, duals and reduced costs so that callers can run right-hand-side
sensitivity analysis on the final factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-9

AT_LOWER = "lower"
AT_UPPER = "upper"
AT_FREE = "free"


class LpError(Exception):
    """Base class for solver failures."""


class Infeasible(LpError):
    def __init__(self, row: int, certificate: np.ndarray):
        super().__init__(f"LP infeasible (Farkas certificate peaks at row {row})")
        self.row = row
        self.certificate = certificate


class Unbounded(LpError):
    def __init__(self, variable: int):
        super().__init__(f"LP unbounded along variable {variable}")
        self.variable = variable


class MaxIterations(LpError):
    pass


class SingularBasis(LpError):
    pass


@dataclass(frozen=True)
class LpProblem:
    cost: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("cost", "A", "b", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        m, n = self.A.shape
        if self.cost.shape != (n,) or self.b.shape != (m,):
            raise ValueError("cost/rhs dimensions do not match constraint matrix")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bound vectors must have one entry per variable")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]


@dataclass
class LpSolution:
    x: np.ndarray
    objective: float
    basis: tuple[int, ...]
    nonbasic_at: dict[int, str]
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int = 0
    # scaled-space factorization state, reused by basis_sensitivity
    _row_scale: np.ndarray = field(default=None, repr=False)
    _col_scale: np.ndarray = field(default=None, repr=False)
    _lu: tuple = field(default=None, repr=False)
    _heads: np.ndarray = field(default=None, repr=False)

    @property
    def basis_signature(self) -> str:
        import hashlib

        return hashlib.sha1(np.asarray(sorted(self.basis), dtype=np.int64).tobytes()).hexdigest()[:16]


def _pow2(v: np.ndarray) -> np.ndarray:
    # powers of two keep scaling exact in floating point
    return np.exp2(np.round(np.log2(v)))


def _equilibrate(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    absA = np.abs(A)
    rmax = absA.max(axis=1) if A.shape[1] else np.ones(A.shape[0])
    rmax[rmax == 0] = 1.0
    r = _pow2(1.0 / rmax)
    cmax = (absA * r[:, None]).max(axis=0) if A.shape[0] else np.ones(A.shape[1])
    cmax[cmax == 0] = 1.0
    c = _pow2(1.0 / cmax)
    return r, c


class _Simplex:
    """Working state of one solve on the scaled problem (with artificials)."""

    def __init__(self, A, b, cost, lower, upper, max_iter):
        self.A = A
        self.b = b
        self.cost = cost
        self.lower = lower
        self.upper = upper
        self.m, self.n = A.shape
        self.max_iter = max_iter
        self.iterations = 0

    def start(self, heads: np.ndarray, x: np.ndarray):
        self.heads = heads
        self.x = x
        self.is_basic = np.zeros(self.n, dtype=bool)
        self.is_basic[heads] = True
        self._refactor()

    def _refactor(self):
        Bm = self.A[:, self.heads]
        try:
            self.lu = sla.lu_factor(Bm, check_finite=False)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SingularBasis(str(exc)) from exc
        if np.min(np.abs(np.diag(self.lu[0]))) < 1e-13:
            raise SingularBasis("basis matrix is numerically singular")
        nb = ~self.is_basic
        rhs = self.b - self.A[:, nb] @ self.x[nb]
        self.x[self.heads] = sla.lu_solve(self.lu, rhs, check_finite=False)

    def run(self, cost: np.ndarray, active: np.ndarray) -> None:
        """Primal simplex on ``cost``; ``active`` marks columns allowed to enter."""
        m, n = self.m, self.n
        bland_after = 3 * (m + n)
        local_iter = 0
        while True:
            if self.iterations >= self.max_iter:
                raise MaxIterations(f"no convergence after {self.iterations} iterations")
            y = sla.lu_solve(self.lu, cost[self.heads], trans=1, check_finite=False)
            d = cost - self.A.T @ y
            x, lo, up = self.x, self.lower, self.upper
            cand = active & ~self.is_basic
            at_lo = np.abs(x - lo) <= FEAS_TOL
            at_up = np.abs(x - up) <= FEAS_TOL
            free = ~at_lo & ~at_up
            can_inc = cand & (x < up - FEAS_TOL) & ((d < -OPT_TOL) & (at_lo | free))
            can_dec = cand & (x > lo + FEAS_TOL) & ((d > OPT_TOL) & (at_up | free))
            elig = np.flatnonzero(can_inc | can_dec)
            if elig.size == 0:
                self.y = y
                self.d = d
                return
            if local_iter < bland_after:
                j = int(elig[np.argmax(np.abs(d[elig]))])
            else:
                j = int(elig[0])
            sigma = 1.0 if can_inc[j] else -1.0
            alpha = sla.lu_solve(self.lu, self.A[:, j], check_finite=False)
            # basic values move by -sigma * theta * alpha
            rate = sigma * alpha
            xb = x[self.heads]
            lb = lo[self.heads]
            ub = up[self.heads]
            ratios = np.full(m, np.inf)
            dec = rate > PIVOT_TOL
            inc = rate < -PIVOT_TOL
            with np.errstate(invalid="ignore"):
                ratios[dec] = (xb[dec] - lb[dec]) / rate[dec]
                ratios[inc] = (ub[inc] - xb[inc]) / (-rate[inc])
            ratios = np.where(np.isnan(ratios), np.inf, np.maximum(ratios, 0.0))
            flip = up[j] - lo[j]
            theta_b = ratios.min() if m else np.inf
            if not np.isfinite(theta_b) and not np.isfinite(flip):
                raise Unbounded(j)
            if flip <= theta_b:
                x[j] = up[j] if sigma > 0 else lo[j]
                x[self.heads] = xb - flip * rate
            else:
                ties = np.flatnonzero(ratios <= theta_b + 1e-12)
                if local_iter < bland_after:
                    r = int(ties[np.argmax(np.abs(rate[ties]))])
                else:
                    r = int(ties[np.argmin(self.heads[ties])])
                leaving = int(self.heads[r])
                x[self.heads] = xb - theta_b * rate
                x[j] = x[j] + sigma * theta_b
                x[leaving] = lo[leaving] if rate[r] > 0 else up[leaving]
                self.is_basic[leaving] = False
                self.is_basic[j] = True
                self.heads[r] = j
                self._refactor()
            self.iterations += 1
            local_iter += 1


def _initial_values(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    x = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper, 0.0))
    return x.astype(float)


def solve_lp(p: LpProblem, max_iter: int | None = None) -> LpSolution:
    """Solve ``p`` to an optimal basic solution.

    Pricing is Dantzig's rule, switching to Bland's rule after ``3(m+n)``
    iterations of a phase; the result is a deterministic function of the
    problem data.

    Raises:
        Infeasible: no point satisfies the constraints.
        Unbounded: the objective decreases without bound.
        MaxIterations: the iteration cap was reached.
    """
    m, n = p.m, p.n
    if max_iter is None:
        max_iter = 50 * (m + n) + 100
    rs, cs = _equilibrate(p.A)
    A = p.A * rs[:, None] * cs[None, :]
    b = p.b * rs
    cost = p.cost * cs
    lower = p.lower / cs
    upper = p.upper / cs

    x = _initial_values(lower, upper)
    resid = b - A @ x

    # crash: singleton columns that can absorb their row's residual
    heads = np.full(m, -1, dtype=np.int64)
    nnz = np.count_nonzero(A, axis=0)
    for j in np.flatnonzero(nnz == 1):
        i = int(np.flatnonzero(A[:, j])[0])
        if heads[i] >= 0:
            continue
        val = x[j] + resid[i] / A[i, j]
        if lower[j] - FEAS_TOL <= val <= upper[j] + FEAS_TOL:
            heads[i] = j
            x[j] = val
            resid[i] = 0.0
    art_rows = np.flatnonzero(heads < 0)
    k = art_rows.size
    if k:
        sign = np.where(resid[art_rows] >= 0, 1.0, -1.0)
        Aart = np.zeros((m, k))
        Aart[art_rows, np.arange(k)] = sign
        A_ext = np.hstack([A, Aart])
        lo_ext = np.concatenate([lower, np.zeros(k)])
        up_ext = np.concatenate([upper, np.full(k, np.inf)])
        x_ext = np.concatenate([x, np.abs(resid[art_rows])])
        heads[art_rows] = n + np.arange(k)
    else:
        A_ext, lo_ext, up_ext, x_ext = A, lower, upper, x
    cost_ext = np.concatenate([cost, np.zeros(k)])

    sx = _Simplex(A_ext, b, cost_ext, lo_ext, up_ext, max_iter)
    sx.start(heads, x_ext)

    if k:
        phase1 = np.concatenate([np.zeros(n), np.ones(k)])
        sx.run(phase1, np.ones(n + k, dtype=bool))
        infeas = sx.x[n:].sum()
        if infeas > FEAS_TOL * (1.0 + np.abs(b).max(initial=0.0)):
            cert = sx.y * rs
            raise Infeasible(int(np.argmax(np.abs(cert))), cert)
        # pivot remaining basic artificials out where possible
        for r in range(m):
            if sx.heads[r] < n:
                continue
            e = np.zeros(m)
            e[r] = 1.0
            row = sla.lu_solve(sx.lu, e, trans=1, check_finite=False) @ A_ext[:, :n]
            row[sx.is_basic[:n]] = 0.0
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) > 1e-7:
                leaving = int(sx.heads[r])
                sx.is_basic[leaving] = False
                sx.is_basic[j] = True
                sx.heads[r] = j
                sx.x[leaving] = 0.0
                sx._refactor()
        sx.upper[n:] = 0.0
        sx.x[n:] = 0.0
        sx._refactor()

    active = np.concatenate([np.ones(n, dtype=bool), np.zeros(k, dtype=bool)])
    sx.run(cost_ext, active)
    xs = sx.x[:n].copy()
    x_out = xs * cs
    y_out = sx.y * rs
    d_out = sx.d[:n] / cs
    heads_out = np.asarray(sx.heads)
    basic = tuple(sorted(int(h) for h in heads_out if h < n))
    nonbasic_at = {}
    for j in range(n):
        if sx.is_basic[j]:
            continue
        if np.isfinite(p.lower[j]) and abs(xs[j] - lower[j]) <= FEAS_TOL:
            nonbasic_at[j] = AT_LOWER
        elif np.isfinite(p.upper[j]) and abs(xs[j] - upper[j]) <= FEAS_TOL:
            nonbasic_at[j] = AT_UPPER
        else:
            nonbasic_at[j] = AT_FREE
    return LpSolution(
        x=x_out,
        objective=float(p.cost @ x_out),
        basis=basic,
        nonbasic_at=nonbasic_at,
        duals=y_out,
        reduced_costs=d_out,
        iterations=sx.iterations,
        _row_scale=rs,
        _col_scale=cs,
        _lu=sx.lu,
        _heads=heads_out.copy(),
    )


def basis_sensitivity(sol: LpSolution, p: LpProblem, drhs: np.ndarray) -> np.ndarray:
    """Directional derivative of ``x`` for a right-hand-side change ``drhs``.

    Holds the optimal basis fixed: nonbasic entries do not move and the basic
    block solves ``B dx_B = drhs``. ``drhs`` may be a matrix with one column
    per direction.
    """
    drhs = np.asarray(drhs, dtype=float)
    if drhs.shape[0] != p.m:
        raise ValueError(f"drhs must have {p.m} rows, got {drhs.shape[0]}")
    if sol._lu is None:
        raise SingularBasis("solution carries no factorization")
    vec = drhs.ndim == 1
    D = drhs[:, None] if vec else drhs
    scaled = sla.lu_solve(sol._lu, D * sol._row_scale[:, None], check_finite=False)
    out = np.zeros((p.n, D.shape[1]))
    for r, h in enumerate(sol._heads):
        if h < p.n:
            out[h] = scaled[r] * sol._col_scale[h]
    return out[:, 0] if vec else out


def check_optimality(sol: LpSolution, p: LpProblem) -> dict[str, float]:
    """Primal/dual residuals and duality gap of a reported solution."""
    x, y, d = sol.x, sol.duals, sol.reduced_costs
    primal = float(np.abs(p.A @ x - p.b).max(initial=0.0))
    bound = float(max(np.max(p.lower - x, initial=0.0), np.max(x - p.upper, initial=0.0), 0.0))
    # dual objective of the bounded form: b'y + sum over bounds of reduced-cost terms
    dual_obj = float(p.b @ y)
    dual_infeas = 0.0
    for j in range(p.n):
        if d[j] > 0:
            if np.isfinite(p.lower[j]):
                dual_obj += d[j] * p.lower[j]
            else:
                dual_infeas = max(dual_infeas, d[j])
        elif d[j] < 0:
            if np.isfinite(p.upper[j]):
                dual_obj += d[j] * p.upper[j]
            else:
                dual_infeas = max(dual_infeas, -d[j])
    return {
        "primal_residual": primal,
        "bound_violation": bound,
        "dual_infeasibility": dual_infeas,
        "gap": abs(sol.objective - dual_obj),
    }
