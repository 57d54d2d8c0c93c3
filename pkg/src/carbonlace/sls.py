"""Spatial load shifting: signal-driven shifts, the bilevel benchmark, realized emissions."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .case_io import GridCase
from .dispatch import DispatchError, compute_lmce, solve_dispatch
from .lp import LpProblem, solve_lp

log = logging.getLogger(__name__)

SUM_TOL = 1e-6


class ShiftError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    """Flexible loads (indices into the load vector) and their shift bounds.

    ``mode="cap"`` allows ``|s_i - d_i| <= value`` MW, clamped at zero;
    ``mode="fraction"`` allows ``|s_i - d_i| <= value * d_i``.
    """

    loads: tuple[int, ...]
    d: tuple[float, ...]
    mode: str = "cap"
    value: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "loads", tuple(int(i) for i in self.loads))
        object.__setattr__(self, "d", tuple(float(x) for x in self.d))
        if not self.loads:
            raise ShiftError("flexible set is empty")
        if len(set(self.loads)) != len(self.loads):
            raise ShiftError("flexible set has duplicates")
        if self.mode not in ("cap", "fraction"):
            raise ShiftError(f"unknown bound mode {self.mode!r}")
        if self.value < 0:
            raise ShiftError("shift bound must be nonnegative")
        if max(self.loads) >= len(self.d) or min(self.loads) < 0:
            raise ShiftError("flexible load index out of range")

    @classmethod
    def for_buses(cls, case: GridCase, buses, d, mode: str = "cap", value: float = 5.0) -> "ShiftSpec":
        return cls(tuple(case.load_index(b) for b in buses), tuple(np.asarray(d, float)), mode, value)

    @property
    def base(self) -> np.ndarray:
        return np.asarray(self.d)[list(self.loads)]

    @property
    def lower(self) -> np.ndarray:
        b = self.base
        if self.mode == "cap":
            return np.maximum(b - self.value, 0.0)
        return np.maximum(b * (1.0 - self.value), 0.0)

    @property
    def upper(self) -> np.ndarray:
        b = self.base
        return b + self.value if self.mode == "cap" else b * (1.0 + self.value)

    @property
    def total(self) -> float:
        return float(self.base.sum())

    def full_load(self, s) -> np.ndarray:
        out = np.asarray(self.d, dtype=float).copy()
        out[list(self.loads)] = s
        return out

    def contains(self, s, tol: float = SUM_TOL) -> bool:
        s = np.asarray(s)
        return bool(np.all(s >= self.lower - tol) and np.all(s <= self.upper + tol) and abs(s.sum() - self.total) <= tol)


@dataclass
class ShiftPlan:
    s: np.ndarray
    signal: str
    estimated_objective: float = float("nan")
    E_pre: float = float("nan")
    E_post: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def delta_E(self) -> float:
        return self.E_post - self.E_pre


# -- signal-based shifting ----------------------------------------------------
def solve_signal_sls(spec: ShiftSpec, phi, signal: str = "custom") -> ShiftPlan:
    """Minimise ``phi' s`` over the shift polytope in closed form.

    Mass moves from the highest-signal load to the lowest while the signals
    differ strictly; equal signals (and ties in general) resolve towards the
    lower index, so a constant signal leaves the base point untouched.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape == (len(spec.d),):
        phi = phi[list(spec.loads)]
    if phi.shape != (len(spec.loads),):
        raise ShiftError("signal must cover the flexible loads")
    lo, hi = spec.lower, spec.upper
    s = spec.base.copy()
    if np.any(lo > s + SUM_TOL) or np.any(hi < s - SUM_TOL):
        raise ShiftError("empty shift polytope")
    n = len(s)
    fill = sorted(range(n), key=lambda i: (phi[i], i))
    drain = sorted(range(n), key=lambda i: (-phi[i], i))
    a = b = 0
    while a < n and b < n:
        i, j = fill[a], drain[b]
        if hi[i] - s[i] <= 0:
            a += 1
            continue
        if s[j] - lo[j] <= 0:
            b += 1
            continue
        if not phi[j] > phi[i]:
            break
        amt = min(hi[i] - s[i], s[j] - lo[j])
        s[i] += amt
        s[j] -= amt
    return ShiftPlan(s, signal, estimated_objective=float(phi @ s))


def shift_lp(spec: ShiftSpec, phi) -> LpProblem:
    phi = np.asarray(phi, dtype=float)
    if phi.shape == (len(spec.d),):
        phi = phi[list(spec.loads)]
    n = len(spec.loads)
    return LpProblem(phi, np.ones((1, n)), np.array([spec.total]), spec.lower, spec.upper)


def lp_signal_sls(spec: ShiftSpec, phi) -> ShiftPlan:
    """Same problem through the simplex solver (reference implementation)."""
    sol = solve_lp(shift_lp(spec, phi))
    return ShiftPlan(sol.x, "lp", estimated_objective=sol.objective)


def realize_shift(case: GridCase, spec: ShiftSpec, plan: ShiftPlan, E_pre: float | None = None) -> ShiftPlan:
    """Re-clear the market with the shifted loads and fill in the realized emissions."""
    if not spec.contains(plan.s):
        raise ShiftError("shift violates the polytope")
    if E_pre is None:
        E_pre = solve_dispatch(case, np.asarray(spec.d)).total_emissions
    plan.E_pre = float(E_pre)
    plan.E_post = solve_dispatch(case, spec.full_load(plan.s)).total_emissions
    return plan


# -- polytope helpers -----------------------------------------------------------
def project_sum(x, lo, hi, total: float) -> np.ndarray:
    """Euclidean projection onto ``{lo <= s <= hi, sum s = total}``."""
    x = np.asarray(x, dtype=float)
    if lo.sum() > total + SUM_TOL or hi.sum() < total - SUM_TOL:
        raise ShiftError("empty shift polytope")
    a = float(np.min(lo - x)) - 1.0
    b = float(np.max(hi - x)) + 1.0
    for _ in range(200):
        t = 0.5 * (a + b)
        if np.clip(x + t, lo, hi).sum() < total:
            a = t
        else:
            b = t
        if b - a < 1e-13:
            break
    s = np.clip(x + 0.5 * (a + b), lo, hi)
    # hand the rounding residue to a coordinate with room for it
    r = total - s.sum()
    if r != 0.0:
        room = (hi - s) if r > 0 else (s - lo)
        k = int(np.argmax(room))
        s[k] += np.sign(r) * min(abs(r), room[k])
    return s


def vertex_candidates(spec: ShiftSpec) -> tuple[int, list[np.ndarray]]:
    """Enumerate polytope vertices.

    Every vertex has all but at most one coordinate at a bound. Returns the
    number of candidate patterns (``n * 2**(n-1)``) and the distinct feasible
    vertices.
    """
    lo, hi, T = spec.lower, spec.upper, spec.total
    n = len(lo)
    count = 0
    seen: dict[tuple, np.ndarray] = {}
    for j in range(n):
        others = [i for i in range(n) if i != j]
        for pattern in itertools.product((0, 1), repeat=n - 1):
            count += 1
            s = np.empty(n)
            for i, p in zip(others, pattern):
                s[i] = hi[i] if p else lo[i]
            s[j] = T - s[others].sum()
            if lo[j] - 1e-9 <= s[j] <= hi[j] + 1e-9:
                s[j] = min(max(s[j], lo[j]), hi[j])
                seen.setdefault(tuple(np.round(s, 9)), s)
    return count, list(seen.values())


# -- Opt-shift --------------------------------------------------------------------
@dataclass
class SearchConfig:
    n_vertex_starts: int = 20
    n_interior_starts: int = 20
    vertex_sweep: bool = True
    max_iters: int = 30
    line_search_steps: int = 10
    improve_tol: float = 1e-6
    polish_top: int = 3
    seed: int = 0


class _Objective:
    """Realized emissions as a function of the flexible loads, with a cache."""

    def __init__(self, case: GridCase, spec: ShiftSpec):
        self.case = case
        self.spec = spec
        self.cache: dict[bytes, float] = {}
        self.evals = 0

    def __call__(self, s: np.ndarray) -> float:
        key = np.round(s, 10).tobytes()
        if key not in self.cache:
            self.evals += 1
            try:
                self.cache[key] = solve_dispatch(self.case, self.spec.full_load(s)).total_emissions
            except DispatchError:
                self.cache[key] = math.inf
        return self.cache[key]

    def grad(self, s: np.ndarray) -> np.ndarray | None:
        try:
            mu = compute_lmce(self.case, self.spec.full_load(s)).mu
        except DispatchError:
            return None
        return mu[list(self.spec.loads)]


def _projected_direction(g: np.ndarray, s, lo, hi) -> np.ndarray:
    """Steepest descent direction for ``g`` tangent to the polytope at ``s``."""
    free = np.ones(len(s), dtype=bool)
    p = np.zeros(len(s))
    for _ in range(len(s) + 1):
        if free.sum() < 2:
            return np.zeros(len(s))
        p = np.zeros(len(s))
        p[free] = -(g[free] - g[free].mean())
        blocked = free & (((p < 0) & (s <= lo + 1e-9)) | ((p > 0) & (s >= hi - 1e-9)))
        if not blocked.any():
            return p
        free &= ~blocked
    return p


def _descend(obj: _Objective, s0: np.ndarray, cfg: SearchConfig) -> tuple[np.ndarray, float]:
    spec = obj.spec
    lo, hi, T = spec.lower, spec.upper, spec.total
    s, e = s0, obj(s0)
    if not math.isfinite(e):
        return s, e
    width = float(np.max(hi - lo)) if len(lo) else 0.0
    for _ in range(cfg.max_iters):
        g = obj.grad(s)
        if g is None:
            break
        p = _projected_direction(g, s, lo, hi)
        norm = float(np.max(np.abs(p)))
        if norm < 1e-12:
            break
        t = width / norm
        moved = False
        for _ in range(cfg.line_search_steps):
            cand = project_sum(s + t * p, lo, hi, T)
            ec = obj(cand)
            if ec < e - cfg.improve_tol:
                s, e, moved = cand, ec, True
                break
            t *= 0.5
        if not moved:
            break
    return s, e


def _pair_polish(obj: _Objective, s: np.ndarray, e: float, cfg: SearchConfig) -> tuple[np.ndarray, float]:
    """Coordinate-pair transfers; escapes points where the LMCE direction stalls."""
    spec = obj.spec
    lo, hi = spec.lower, spec.upper
    n = len(s)
    improved = True
    while improved:
        improved = False
        best = (e, s)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                room = min(hi[i] - s[i], s[j] - lo[j])
                amt = room
                for _ in range(4):
                    if amt <= 1e-9:
                        break
                    cand = s.copy()
                    cand[i] += amt
                    cand[j] -= amt
                    ec = obj(cand)
                    if ec < best[0] - cfg.improve_tol:
                        best = (ec, cand)
                    amt *= 0.5
        if best[0] < e - cfg.improve_tol:
            e, s = best
            improved = True
    return s, e


def _starts(spec: ShiftSpec, cfg: SearchConfig) -> list[np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0x0B7])
    lo, hi, T = spec.lower, spec.upper, spec.total
    starts = [spec.base.copy()]
    for _ in range(cfg.n_vertex_starts):
        phi = rng.standard_normal(len(lo))
        starts.append(solve_signal_sls(spec, phi).s)
    for _ in range(cfg.n_interior_starts):
        starts.append(project_sum(rng.uniform(lo, hi), lo, hi, T))
    return starts


def solve_opt_shift(case: GridCase, spec: ShiftSpec, cfg: SearchConfig | None = None, E_pre: float | None = None) -> ShiftPlan:
    """Multi-start local search on realized emissions (bilevel benchmark).

    Starts are the base point, random vertices and random interior points;
    each descends along the projected negative LMCE with a halving line
    search on re-solved emissions. With ``vertex_sweep`` every polytope
    vertex is also evaluated. The best few points are finally polished with
    pairwise transfers. The base point is always a candidate, so the
    reported change is never positive.
    """
    cfg = cfg or SearchConfig()
    obj = _Objective(case, spec)
    e_base = obj(spec.base)
    if not math.isfinite(e_base):
        raise DispatchError("pre-shift dispatch infeasible", np.asarray(spec.d))
    results = []
    for s0 in _starts(spec, cfg):
        results.append(_descend(obj, s0, cfg)[::-1])
    if cfg.vertex_sweep:
        _, verts = vertex_candidates(spec)
        results.extend((obj(v), v) for v in verts)
    results.append((e_base, spec.base.copy()))
    results.sort(key=lambda r: r[0])
    polished = []
    for e, s in results[: max(1, cfg.polish_top)]:
        if math.isfinite(e):
            s2, e2 = _descend(obj, s, cfg)
            polished.append(_pair_polish(obj, s2, e2, cfg)[::-1])
    best_e, best_s = min(polished + results[:1], key=lambda r: r[0])
    plan = ShiftPlan(best_s, "OPT", estimated_objective=best_e)
    plan.E_pre = e_base if E_pre is None else float(E_pre)
    plan.E_post = best_e
    plan.info["evaluations"] = obj.evals
    return plan


def sampling_oracle(case: GridCase, spec: ShiftSpec, n: int = 10000, seed: int = 0) -> float:
    """Best realized emissions over uniform polytope samples plus every vertex."""
    rng = np.random.default_rng([seed, 0x0AC])
    lo, hi, T = spec.lower, spec.upper, spec.total
    obj = _Objective(case, spec)
    best = obj(spec.base)
    _, verts = vertex_candidates(spec)
    for v in verts:
        best = min(best, obj(v))
    # rejection sampling from the box keeps the distribution uniform on the slice
    accepted = 0
    n_free = len(lo) - 1
    while accepted < n:
        x = rng.uniform(lo[:n_free], hi[:n_free], size=(4096, n_free))
        last = T - x.sum(axis=1)
        ok = (last >= lo[-1]) & (last <= hi[-1])
        for row, l in zip(x[ok], last[ok]):
            best = min(best, obj(np.append(row, l)))
            accepted += 1
            if accepted >= n:
                break
    return best


# -- experiment -----------------------------------------------------------------
METHODS = ("OPT", "LACE-S", "LMCE", "LACE-R", "CEF")


def draw_profile(case: GridCase, seed: int, idx: int, scale_range=(1.1, 1.3), jitter: float = 0.05) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng([seed, idx, 0x515])
    scale = float(rng.uniform(*scale_range))
    d = case.nominal_loads * scale
    if jitter > 0:
        d = d * rng.uniform(1.0 - jitter, 1.0 + jitter, size=d.size)
    return d, scale


@dataclass
class ExperimentResult:
    rows: list[tuple[int, str, float, float, float]]
    skipped: list[tuple[int, str]]

    def deltas(self, method: str) -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[1] == method])


def run_profile(case: GridCase, d: np.ndarray, flexible, signals: dict, cap: float, search: SearchConfig | None, mode="cap"):
    """All methods on one load profile; returns ``{method: (E_pre, E_post)}``."""
    res = solve_dispatch(case, d)
    spec = ShiftSpec(tuple(flexible), tuple(d), mode, cap)
    out = {}
    if search is not None:
        opt = solve_opt_shift(case, spec, search, E_pre=res.total_emissions)
        out["OPT"] = (opt.E_pre, opt.E_post)
    for name, fn in signals.items():
        phi = fn(case, d, res)
        plan = solve_signal_sls(spec, phi, name)
        try:
            realize_shift(case, spec, plan, res.total_emissions)
        except DispatchError:
            plan.E_pre, plan.E_post = res.total_emissions, math.inf
        out[name] = (plan.E_pre, plan.E_post)
    return out


def _experiment_chunk(args):
    case, flexible, signals, cap, search, seed, idxs, scale_range, jitter, mode = args
    rows, skipped = [], []
    for i in idxs:
        d, _ = draw_profile(case, seed, i, scale_range, jitter)
        try:
            out = run_profile(case, d, flexible, signals, cap, search, mode)
        except (DispatchError, ShiftError, ValueError) as exc:
            skipped.append((i, str(exc)))
            continue
        for m in METHODS:
            if m in out:
                pre, post = out[m]
                rows.append((i, m, pre, post, post - pre))
    return rows, skipped


def sls_experiment(
    case: GridCase,
    flexible,
    signals: dict,
    n_profiles: int,
    seed: int = 0,
    cap: float = 5.0,
    search: SearchConfig | None = None,
    scale_range=(1.1, 1.3),
    jitter: float = 0.05,
    threads: int = 1,
    mode: str = "cap",
) -> ExperimentResult:
    """Signal-based and Opt-shift load shifting over random load profiles.

    ``signals`` maps a method name to ``fn(case, d, dispatch_result) -> phi``
    over all loads. Profiles whose pre-shift dispatch fails are skipped and
    reported. Signal shifts that make the market infeasible record
    ``E_post = inf``.
    """
    search = search or SearchConfig(seed=seed)
    idx = list(range(n_profiles))
    if threads <= 1:
        rows, skipped = _experiment_chunk((case, flexible, signals, cap, search, seed, idx, scale_range, jitter, mode))
    else:
        parts = [idx[k::threads] for k in range(threads)]
        jobs = [(case, flexible, signals, cap, search, seed, p, scale_range, jitter, mode) for p in parts]
        rows, skipped = [], []
        with ProcessPoolExecutor(threads) as ex:
            for r, s in ex.map(_experiment_chunk, jobs):
                rows.extend(r)
                skipped.extend(s)
        order = {m: k for k, m in enumerate(METHODS)}
        rows.sort(key=lambda r: (r[0], order.get(r[1], 99)))
        skipped.sort()
    if skipped:
        log.warning("%d of %d profiles skipped", len(skipped), n_profiles)
    return ExperimentResult(rows, skipped)


def histogram_rows(result: ExperimentResult, bins: int = 30) -> list[tuple[str, float, float, int]]:
    finite = np.array([r[4] for r in result.rows if math.isfinite(r[4])])
    if finite.size == 0:
        return []
    lo, hi = float(finite.min()), float(finite.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    out = []
    methods = [m for m in METHODS if any(r[1] == m for r in result.rows)]
    methods += sorted({r[1] for r in result.rows} - set(methods))
    for m in methods:
        x = result.deltas(m)
        counts, _ = np.histogram(x[np.isfinite(x)], bins=edges)
        out.extend((m, float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts))
    return out


# -- signals ------------------------------------------------------------------------
def lmce_signal(case: GridCase, d, res=None) -> np.ndarray:
    return compute_lmce(case, d).mu


def cef_signal(case: GridCase, d, res=None) -> np.ndarray:
    from .metrics import cef

    return cef(case, d, res).values


@dataclass
class LaceRSignal:
    segments: int = 200

    def __call__(self, case: GridCase, d, res=None) -> np.ndarray:
        from .metrics import lace_r

        return lace_r(case, d, self.segments).values


@dataclass
class NeuralSignal:
    """Projected network output at the pre-shift profile (zonal outputs are expanded to loads)."""

    model: object
    zone_assignment: tuple[int, ...] | None = None

    def __call__(self, case: GridCase, d, res=None) -> np.ndarray:
        from .nn import project_balance

        d = np.asarray(d, dtype=float)
        E = res.total_emissions if res is not None else solve_dispatch(case, d).total_emissions
        lam = self.model.forward(d)
        if self.zone_assignment is None:
            return project_balance(lam, d, E)
        a = np.asarray(self.zone_assignment)
        M = (np.arange(lam.size)[:, None] == a[None, :]).astype(float)
        return M.T @ project_balance(lam, M @ d, E)
