"""Non-neural emission allocation metrics: ACE, LACE-R and CEF."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .case_io import GridCase
from .dispatch import DispatchError, DispatchResult, compute_lmce, solve_dispatch

KINDS = ("ACE_broadcast", "LMCE", "LACE_R", "CEF", "LACE_S", "ZACE_S_expanded")
BALANCED_KINDS = ("LACE_R", "CEF", "LACE_S")
BREAKPOINT_TOL = 1e-6


class MetricError(ValueError):
    pass


@dataclass
class MetricVector:
    """Per-load emission factors (tCO2e/MWh) with where they came from."""

    values: np.ndarray
    kind: str
    provenance: str
    marked: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        if self.marked is None:
            self.marked = np.zeros(len(self.values), dtype=bool)

    def balance_residual(self, d, E: float) -> float:
        return float(np.asarray(d) @ self.values - E)


def scenario_hash(case: GridCase, d) -> str:
    h = hashlib.sha1(case.digest().encode())
    h.update(np.ascontiguousarray(np.asarray(d, dtype=np.float64)).tobytes())
    return h.hexdigest()[:16]


def ace(case: GridCase, d, res: DispatchResult | None = None) -> float:
    """System average emission rate E / total load."""
    d = np.asarray(d, dtype=float)
    total = d.sum()
    if total <= 0:
        raise MetricError("ACE undefined for zero total load")
    res = res or solve_dispatch(case, d)
    return res.total_emissions / total


def ace_vector(case: GridCase, d) -> MetricVector:
    eta = ace(case, d)
    return MetricVector(np.full(case.n_loads, eta), "ACE_broadcast", scenario_hash(case, d))


def lmce_vector(case: GridCase, d) -> MetricVector:
    v = compute_lmce(case, d)
    return MetricVector(v.mu, "LMCE", scenario_hash(case, d), marked=v.degenerate_flags)


class _RayProbe:
    """Cached dispatch along the ray ``rho * d``."""

    def __init__(self, case: GridCase, d: np.ndarray):
        self.case = case
        self.d = d
        self._cache: dict[float, tuple] = {}

    def active(self, rho: float) -> tuple:
        if rho not in self._cache:
            try:
                self._cache[rho] = solve_dispatch(self.case, rho * self.d).active_set
            except DispatchError as exc:
                raise MetricError(f"dispatch infeasible on the loading path at rho={rho:.6g}") from exc
        return self._cache[rho]

    def slope(self, rho: float) -> np.ndarray:
        try:
            return compute_lmce(self.case, rho * self.d).mu
        except DispatchError as exc:
            raise MetricError(f"dispatch infeasible on the loading path at rho={rho:.6g}") from exc


def _integrate(probe: _RayProbe, a: float, b: float, out: np.ndarray, pieces: list) -> None:
    # the integrand is piecewise constant; split until both ends share an active set
    if probe.active(a) == probe.active(b):
        m = 0.5 * (a + b)
        out += (b - a) * probe.slope(m)
        pieces.append((a, b, None))
        return
    if b - a <= BREAKPOINT_TOL:
        m = 0.5 * (a + b)
        out += (b - a) * probe.slope(m)
        pieces.append((a, b, m))
        return
    m = 0.5 * (a + b)
    _integrate(probe, a, m, out, pieces)
    _integrate(probe, m, b, out, pieces)


def lace_r(case: GridCase, d, segments: int = 200) -> MetricVector:
    """Average marginal emissions along the loading ray from zero to ``d``.

    ``lambda_i`` is the mean of ``mu_i(rho d)`` over ``rho in [0, 1]``, so that
    ``d' lambda = E(d) - E(0)``. The interval is cut into ``segments`` equal
    pieces and any piece whose end points disagree on the active set is
    bisected to ``1e-6`` in ``rho``; each resulting piece is then integrated
    exactly with the LMCE at its midpoint. Any residual ``E(0)`` is spread in
    proportion to load. Loads with ``d_i = 0`` get their current LMCE and are
    marked.
    """
    if segments < 2:
        raise ValueError("segments must be at least 2")
    d = np.asarray(d, dtype=float)
    if d.shape != (case.n_loads,) or np.any(d < 0):
        raise ValueError("load vector must be nonnegative with one entry per load")
    probe = _RayProbe(case, d)
    lam = np.zeros(case.n_loads)
    pieces: list = []
    grid = np.linspace(0.0, 1.0, segments + 1)
    for a, b in zip(grid[:-1], grid[1:]):
        _integrate(probe, float(a), float(b), lam, pieces)
    e0 = solve_dispatch(case, np.zeros_like(d)).total_emissions
    total = d.sum()
    if e0 != 0.0 and total > 0:
        lam = lam + e0 / total
    zero = d == 0
    if zero.any():
        lam[zero] = compute_lmce(case, d).mu[zero]
    breaks = [p[2] for p in pieces if p[2] is not None]
    return MetricVector(
        lam,
        "LACE_R",
        scenario_hash(case, d),
        marked=zero,
        info={"E0": e0, "breakpoints": breaks, "pieces": len(pieces)},
    )


def cef(case: GridCase, d, res: DispatchResult | None = None) -> MetricVector:
    """Proportional-sharing carbon emission flow intensities per load.

    Each bus mixes the emissions of its local generation and of the power
    flowing into it; the mixture leaves with its outflows and serves the
    local load. With lossless DC flows the allocation is balanced.
    """
    d = np.asarray(d, dtype=float)
    res = res or solve_dispatch(case, d)
    nb = len(case.buses)
    gen_mw = np.zeros(nb)
    gen_em = np.zeros(nb)
    for k, g in enumerate(case.generators):
        j = case.bus_index(g.bus)
        gen_mw[j] += res.g_star[k]
        gen_em[j] += res.per_gen_emissions[k]
    inflow = np.zeros((nb, nb))  # inflow[n, m] = MW flowing m -> n
    for k, ln in enumerate(case.lines):
        i, j = case.bus_index(ln.from_bus), case.bus_index(ln.to_bus)
        fl = res.flows[k]
        if fl > 0:
            inflow[j, i] += fl
        elif fl < 0:
            inflow[i, j] -= fl
    through = np.maximum(gen_mw, 0.0) + inflow.sum(axis=1)
    load_bus = np.zeros(nb)
    for i, ld in enumerate(case.loads):
        load_bus[case.bus_index(ld.bus)] += d[i]
    A = np.diag(through) - inflow
    rhs = gen_em.copy()
    dead = through <= 1e-9
    if np.any(dead & (load_bus > 1e-9)):
        bad = [case.buses[j].id for j in np.flatnonzero(dead & (load_bus > 1e-9))]
        raise MetricError(f"isolated supply: buses {bad} carry load but receive no power")
    A[dead, :] = 0.0
    A[dead, dead] = 1.0
    rhs[dead] = 0.0
    try:
        rho = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise MetricError("singular sharing matrix") from exc
    vals = np.array([rho[case.bus_index(ld.bus)] for ld in case.loads])
    return MetricVector(vals, "CEF", scenario_hash(case, d), info={"bus_intensity": rho})
