"""DC-OPF market clearing, emissions, LMCE and dispatch Jacobians."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .case_io import GridCase
from .lp import LpError, LpProblem, LpSolution, basis_sensitivity, solve_lp

BIND_TOL = 1e-7
# Relative cost nudge that makes equal-cost generators dispatch in bus order.
TIE_BREAK = 1e-6


class DispatchError(RuntimeError):
    def __init__(self, msg: str, d: np.ndarray | None = None):
        super().__init__(msg if d is None else f"{msg} (d={np.array2string(np.asarray(d), precision=4)})")
        self.d = None if d is None else np.asarray(d)


class IslandedNetwork(DispatchError):
    pass


@dataclass(frozen=True)
class _Network:
    ptdf_gen: np.ndarray  # L x G
    ptdf_load: np.ndarray  # L x D
    limits: np.ndarray
    g_min: np.ndarray
    g_max: np.ndarray
    cost: np.ndarray


def ptdf_matrix(case: GridCase) -> np.ndarray:
    """Line x bus PTDF with the slack bus as the angle reference."""
    nb = len(case.buses)
    B = np.zeros((nb, nb))
    Bf = np.zeros((len(case.lines), nb))
    for k, ln in enumerate(case.lines):
        i, j = case.bus_index(ln.from_bus), case.bus_index(ln.to_bus)
        y = 1.0 / ln.reactance
        B[i, i] += y
        B[j, j] += y
        B[i, j] -= y
        B[j, i] -= y
        Bf[k, i] = y
        Bf[k, j] = -y
    ref = case.bus_index(case.slack_bus)
    keep = [i for i in range(nb) if i != ref]
    X = np.zeros((nb, nb))
    if keep:
        Bred = B[np.ix_(keep, keep)]
        if np.linalg.matrix_rank(Bred) < len(keep):
            raise IslandedNetwork("susceptance matrix is singular (islanded network)")
        X[np.ix_(keep, keep)] = np.linalg.inv(Bred)
    return Bf @ X


@lru_cache(maxsize=32)
def _network(case: GridCase) -> _Network:
    P = ptdf_matrix(case)
    gcols = [case.bus_index(g.bus) for g in case.generators]
    dcols = [case.bus_index(ld.bus) for ld in case.loads]
    cost = case.costs.copy()
    scale = max(1.0, float(np.abs(cost).max()))
    # rank by unit attributes rather than file position so that reordering
    # the generator list does not change which of two equal-cost units runs
    keys = [(g.bus, g.g_max, g.g_min, g.emission_factor, k) for k, g in enumerate(case.generators)]
    rank = np.empty(len(keys))
    rank[sorted(range(len(keys)), key=keys.__getitem__)] = np.arange(len(keys))
    cost = cost + TIE_BREAK * scale * rank / max(1, len(cost))
    return _Network(
        ptdf_gen=P[:, gcols],
        ptdf_load=P[:, dcols],
        limits=np.array([ln.flow_limit for ln in case.lines]),
        g_min=np.array([g.g_min for g in case.generators]),
        g_max=np.array([g.g_max for g in case.generators]),
        cost=cost,
    )


def _check_load(case: GridCase, d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.shape != (case.n_loads,):
        raise ValueError(f"load vector must have {case.n_loads} entries, got shape {d.shape}")
    if np.any(d < 0):
        raise ValueError("load vector must be nonnegative")
    return d


def build_dcopf(case: GridCase, d) -> LpProblem:
    """LP over ``x = [g, flows]``.

    Row 0 is the system balance ``1'g = 1'd``; row ``1 + l`` defines the flow
    of line ``l`` as ``f_l - PTDF_l,gen g = -PTDF_l,load d``. Flow limits and
    generator ranges are variable bounds.
    """
    d = _check_load(case, d)
    net = _network(case)
    G, L = case.n_gens, len(case.lines)
    A = np.zeros((1 + L, G + L))
    A[0, :G] = 1.0
    A[1:, :G] = -net.ptdf_gen
    A[1:, G:] = np.eye(L)
    b = np.concatenate([[d.sum()], -net.ptdf_load @ d])
    cost = np.concatenate([net.cost, np.zeros(L)])
    lower = np.concatenate([net.g_min, -net.limits])
    upper = np.concatenate([net.g_max, net.limits])
    return LpProblem(cost, A, b, lower, upper)


def rhs_jacobian(case: GridCase) -> np.ndarray:
    """d(rhs)/d(d): one column per load."""
    net = _network(case)
    return np.vstack([np.ones((1, case.n_loads)), -net.ptdf_load])


@dataclass
class DispatchResult:
    d: np.ndarray
    g_star: np.ndarray
    objective: float
    flows: np.ndarray
    total_emissions: float
    per_gen_emissions: np.ndarray
    active_set: tuple[str, ...]
    basis_signature: str
    lp: LpProblem
    solution: LpSolution

    @property
    def E(self) -> float:
        return self.total_emissions


def _active_set(case: GridCase, g: np.ndarray, flows: np.ndarray) -> tuple[str, ...]:
    net = _network(case)
    out = []
    for k in range(len(g)):
        if g[k] <= net.g_min[k] + BIND_TOL:
            out.append(f"g{k}:lo")
        elif g[k] >= net.g_max[k] - BIND_TOL:
            out.append(f"g{k}:hi")
    for k in range(len(flows)):
        lim = net.limits[k]
        if np.isfinite(lim):
            if flows[k] >= lim - BIND_TOL:
                out.append(f"l{k}:hi")
            elif flows[k] <= -lim + BIND_TOL:
                out.append(f"l{k}:lo")
    return tuple(sorted(out))


def solve_dispatch(case: GridCase, d) -> DispatchResult:
    d = _check_load(case, d)
    p = build_dcopf(case, d)
    try:
        sol = solve_lp(p)
    except LpError as exc:
        raise DispatchError(f"market clearing failed: {exc}", d) from exc
    G = case.n_gens
    g = sol.x[:G].copy()
    flows = sol.x[G:].copy()
    f = case.emission_factors
    e = f * g
    return DispatchResult(
        d=d,
        g_star=g,
        objective=float(case.costs @ g),
        flows=flows,
        total_emissions=float(e.sum()),
        per_gen_emissions=e,
        active_set=_active_set(case, g, flows),
        basis_signature=sol.basis_signature,
        lp=p,
        solution=sol,
    )


def total_emissions(case: GridCase, d) -> float:
    return solve_dispatch(case, d).total_emissions


@dataclass
class LmceVector:
    mu: np.ndarray
    degenerate_flags: np.ndarray


def _basis_directions(case: GridCase, res: DispatchResult) -> tuple[np.ndarray, np.ndarray]:
    """Basis derivative of all LP variables per load plus a validity mask.

    A column is valid when no basic variable sitting on a bound would be
    pushed through it by a perturbation of either sign.
    """
    p, sol = res.lp, res.solution
    dX = basis_sensitivity(sol, p, rhs_jacobian(case))  # n x D
    x = sol.x
    tol = 1e-9
    scale = 1.0 + np.abs(dX)
    at_lo = (x - p.lower) <= BIND_TOL
    at_hi = (p.upper - x) <= BIND_TOL
    moves_down = dX < -tol * scale
    moves_up = dX > tol * scale
    # a basic variable resting on a bound blocks one of the two directions as soon as it moves
    bad = (at_lo | at_hi)[:, None] & (moves_down | moves_up)
    valid = ~bad.any(axis=0)
    return dX, valid


def _one_sided(case: GridCase, d: np.ndarray, i: int, step: float, base: DispatchResult):
    """Left/right difference quotients of g* for load i (None where infeasible)."""
    out = {}
    for side, sgn in (("left", -1.0), ("right", 1.0)):
        dd = d.copy()
        dd[i] += sgn * step
        if dd[i] < 0:
            out[side] = None
            continue
        try:
            r = solve_dispatch(case, dd)
        except DispatchError:
            out[side] = None
            continue
        out[side] = (sgn * (r.g_star - base.g_star) / step, r.active_set)
    return out


def _sensitivity_columns(case: GridCase, d, step: float):
    """Columns of dg*/dd plus degeneracy flags.

    Where the optimal basis is valid for perturbations of both signs the
    basis derivative is exact. Otherwise one-sided re-solve quotients are
    used; if the two sides disagree the entry is a kink, it is flagged, and
    the left (decreasing-load) derivative is reported, falling back to the
    right one when the left side is infeasible.
    """
    d = _check_load(case, d)
    base = solve_dispatch(case, d)
    G = case.n_gens
    dX, valid = _basis_directions(case, base)
    jac = dX[:G].copy()
    flags = np.zeros(case.n_loads, dtype=bool)
    for i in np.flatnonzero(~valid):
        sides = _one_sided(case, d, i, step, base)
        left, right = sides["left"], sides["right"]
        if left is None and right is None:
            raise DispatchError(f"load {i}: both perturbations infeasible", d)
        if left is not None and right is not None:
            same = left[1] == right[1] and np.allclose(left[0], right[0], atol=1e-7)
            flags[i] = not same
            jac[:, i] = left[0]
        else:
            flags[i] = True
            jac[:, i] = (left or right)[0]
    return base, jac, flags


def dispatch_jacobian(case: GridCase, d, step: float = 1e-3) -> np.ndarray:
    """G x D matrix whose column i is dg*/dd_i."""
    return _sensitivity_columns(case, d, step)[1]


def compute_lmce(case: GridCase, d, method: str = "basis", step: float = 1e-3) -> LmceVector:
    """Locational marginal carbon emissions ``mu_i = f' dg*/dd_i``."""
    if step <= 0:
        raise ValueError("step must be positive")
    f = case.emission_factors
    if method == "basis":
        _, jac, flags = _sensitivity_columns(case, d, step)
        return LmceVector(f @ jac, flags)
    if method in ("finite-diff", "fd"):
        d = _check_load(case, d)
        base = solve_dispatch(case, d)
        mu = np.zeros(case.n_loads)
        flags = np.zeros(case.n_loads, dtype=bool)
        for i in range(case.n_loads):
            sides = _one_sided(case, d, i, step, base)
            left, right = sides["left"], sides["right"]
            if left is None and right is None:
                raise DispatchError(f"load {i}: both perturbations infeasible", d)
            if left is not None and right is not None:
                if left[1] == right[1]:
                    mu[i] = f @ (left[0] + right[0]) / 2.0
                else:
                    flags[i] = True
                    mu[i] = f @ left[0]
            else:
                flags[i] = True
                mu[i] = f @ (left or right)[0]
        return LmceVector(mu, flags)
    raise ValueError(f"unknown LMCE method {method!r}")


def lmp(res: DispatchResult, case: GridCase) -> np.ndarray:
    """Locational marginal prices ($/MWh) per load from the LP duals."""
    y = res.solution.duals
    return rhs_jacobian(case).T @ y
