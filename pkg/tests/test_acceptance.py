"""Acceptance criteria 1-7; each test records one PASS/FAIL line for the run summary."""

import json
import time
from dataclasses import dataclass

import numpy as np
import pytest

from carbonlace import cli
from carbonlace.case_io import CASE14_PATTERNS, load_bundled
from carbonlace.dispatch import compute_lmce, dispatch_jacobian, solve_dispatch
from carbonlace.lp import LpProblem, basis_sensitivity, check_optimality, solve_lp
from carbonlace.metrics import cef, lace_r
from carbonlace.nn import ClusterPartition, LossSpec, predict, project_balance
from carbonlace.sls import (
    METHODS,
    NeuralSignal,
    LaceRSignal,
    SearchConfig,
    ShiftSpec,
    cef_signal,
    lmce_signal,
    run_profile,
    sls_experiment,
    solve_opt_shift,
)
from carbonlace.training import (
    TrainConfig,
    default_eps,
    evaluate,
    generate_dataset,
    jacobian_partition,
    make_model,
    offblock_ratio,
    resolve_threads,
    train,
    train_zonal,
)

from conftest import gradient_errors, random_lp, random_model

FLEX30 = (2, 7, 8, 12, 19, 21)
DESK_CAPS = (30, 120, 75, 75)
REFERENCE_120 = {"E_pre": 176.062, "OPT": -0.233, "LACE-S": -0.175, "LMCE": 0.224, "LACE-R": 0.094, "CEF": 0.224}


class Checks:
    """Named sub-checks of one criterion."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit = number, title, limit_s
        self.items: list[tuple[str, bool, str]] = []
        self.t0 = time.perf_counter()

    def add(self, name: str, ok, detail: str = "") -> None:
        self.items.append((name, bool(ok), detail))

    def finish(self, criteria: dict, elapsed: float | None = None) -> None:
        elapsed = time.perf_counter() - self.t0 if elapsed is None else elapsed
        self.add(f"runtime <= {self.limit:g} s", elapsed <= self.limit, f"{elapsed:.1f} s")
        failed = [n for n, ok, _ in self.items if not ok]
        status = "PASS" if not failed else "FAIL"
        parts = [f"{n} [{'ok' if ok else 'FAIL'}{': ' + d if d else ''}]" for n, ok, d in self.items]
        criteria[self.number] = f"CRITERION {self.number} {self.title}: {status} | " + "; ".join(parts)
        print(criteria[self.number])
        assert not failed, "failed sub-checks: " + ", ".join(failed)


# -- 1 ---------------------------------------------------------------------------
def test_criterion_1_two_bus(criteria):
    c = Checks(1, "two-bus exactness", 1.0)
    case = load_bundled("case2")
    r55, r46 = solve_dispatch(case, [5.0, 5.0]), solve_dispatch(case, [4.0, 6.0])
    c.add("dispatch (5,5)", np.allclose(r55.g_star, [10, 0], atol=1e-12) and abs(r55.E - 10) <= 1e-12, f"g={r55.g_star.tolist()} E={r55.E:g}")
    c.add("dispatch (4,6)", np.allclose(r46.g_star, [9, 1], atol=1e-12) and abs(r46.E - 9) <= 1e-12, f"g={r46.g_star.tolist()} E={r46.E:g}")
    mu = compute_lmce(case, [4.0, 6.0]).mu
    c.add("LMCE (4,6) = (1,0)", np.array_equal(mu, [1.0, 0.0]), f"{mu.tolist()}")
    lr46 = lace_r(case, [4.0, 6.0], 600).values
    lr55 = lace_r(case, [5.0, 5.0], 600).values
    c.add("LACE-R (4,6)", np.allclose(lr46, [1.0, 0.8333], atol=2e-3), f"{np.round(lr46, 6).tolist()}")
    c.add("LACE-R (5,5)", np.allclose(lr55, [1.0, 1.0], atol=2e-3), f"{np.round(lr55, 6).tolist()}")
    cf = cef(case, [4.0, 6.0]).values
    c.add("CEF (4,6)", np.allclose(cf, [1.0, 5.0 / 6.0], atol=1e-6), f"{np.round(cf, 6).tolist()}")
    plan = solve_opt_shift(case, ShiftSpec((0, 1), (5.0, 5.0), "cap", 1.0), SearchConfig(n_vertex_starts=2, n_interior_starts=2))
    c.add("Opt-shift 1 MW", plan.delta_E == -1.0, f"dE={plan.delta_E:g}")
    c.finish(criteria)


# -- 2 ---------------------------------------------------------------------------
def test_criterion_2_jacobian_clusters(criteria):
    c = Checks(2, "dispatch-Jacobian clustering", 30.0)
    case = load_bundled("case14-tight")
    expected = (0, 0, 1, 1, 2, 2)
    for name, pattern in sorted(CASE14_PATTERNS.items()):
        d = case.nominal_loads * np.array(pattern)
        J = dispatch_jacobian(case, d)
        part = jacobian_partition(J, 3, seed=0)
        cols = J / np.linalg.norm(J, axis=0)
        cos = cols.T @ cols
        intra = min(cos[i, j] for i in range(6) for j in range(6) if expected[i] == expected[j])
        c.add(f"{name} partition", part.assignment == expected, str(part.assignment))
        c.add(f"{name} intra cosine >= 0.99", intra >= 0.99, f"{intra:.4f}")
    c.finish(criteria)


# -- 3 ---------------------------------------------------------------------------
def test_criterion_3_numerical_core(criteria):
    c = Checks(3, "numerical core", 120.0)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 9))
        p = random_lp(rng, m, m + int(rng.integers(1, 11)))
        chk = check_optimality(solve_lp(p), p)
        worst = max(worst, chk["gap"])
    c.add("LP duality gap <= 1e-8 (1000 LPs)", worst <= 1e-8, f"max gap {worst:.2e}")

    # basis sensitivities against re-solve differences: random LPs and the 30-bus market
    rel, compared = 0.0, 0
    h = 1e-7
    for _ in range(200):
        p = random_lp(rng, 3, 9)
        sol = solve_lp(p)
        v = rng.normal(size=p.m)
        moved = solve_lp(LpProblem(p.cost, p.A, p.b + h * v, p.lower, p.upper))
        if moved.basis != sol.basis:
            continue
        a, b = basis_sensitivity(sol, p, v), (moved.x - sol.x) / h
        rel = max(rel, float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))))
        compared += 1
    case = load_bundled("case30")
    for k in range(20):
        d = case.nominal_loads * rng.uniform(1.1, 1.3) * rng.uniform(0.95, 1.05, case.n_loads)
        base = solve_dispatch(case, d)
        J = dispatch_jacobian(case, d)
        flags = compute_lmce(case, d).degenerate_flags
        for i in np.flatnonzero(~flags):
            e = np.zeros_like(d)
            e[i] = 1e-4
            up, dn = solve_dispatch(case, d + e), solve_dispatch(case, d - e)
            if not (up.active_set == base.active_set == dn.active_set):
                continue
            fd = (up.g_star - dn.g_star) / 2e-4
            rel = max(rel, float(np.max(np.abs(J[:, i] - fd) / np.maximum(1.0, np.abs(fd)))))
            compared += 1
    c.add("basis sensitivity vs re-solve (rel 1e-6)", rel <= 1e-6, f"{compared} columns, max rel {rel:.1e}")

    part = ClusterPartition(3, (0, 0, 1, 1, 2, 2))
    zone = np.kron(np.eye(3), np.ones((1, 2)))
    worst = 0.0
    for k in range(100):
        zonal = k % 4 == 3
        m = random_model(rng, out=3 if zonal else 6)
        d = rng.uniform(3, 12, (2, 6))
        spec = LossSpec.zonal(zone, 0.3) if zonal else LossSpec.nodal(part, 0.3, 0.2, 0.01)
        errs = gradient_errors(m, d, rng.uniform(5, 20, 2), rng.uniform(0, 1, (2, 6)), spec, rng, n_weights=4)
        worst = max(worst, float(errs.max()))
    c.add("parameter gradients vs central differences (rel 1e-4, 100 pairs)", worst <= 1e-4, f"max rel {worst:.1e}")

    proj, idem, ident = 0.0, 0.0, 0.0
    for _ in range(200):
        D = int(rng.integers(2, 25))
        lam, d, E = rng.uniform(0, 1, D), rng.uniform(0.5, 60, D), float(rng.uniform(1, 200))
        t = project_balance(lam, d, E)
        proj = max(proj, abs(d @ t - E))
        idem = max(idem, float(np.max(np.abs(project_balance(t, d, E) - t))))
    for _ in range(50):
        m = random_model(rng)
        d = rng.uniform(3, 12, (4, 6))
        J = m.input_jacobian(d)
        lam = m.forward(d)
        for b in range(4):
            p = predict(m, d[b], 10.0)
            ident = max(ident, float(np.max(np.abs(p.mu_hat - (lam[b] + J[b].T @ d[b])))))
    c.add("projection d'lam_tilde = E (1e-9)", proj <= 1e-9, f"{proj:.1e}")
    c.add("projection idempotent", idem <= 1e-12, f"{idem:.1e}")
    c.add("mu_hat = lam_hat + J'd (1e-9)", ident <= 1e-9, f"{ident:.1e}")
    c.finish(criteria)


# -- 4, 5, 6 share one desk-scale dataset and the trained models ---------------------
@dataclass
class Desk:
    case: object
    ds: object
    partition: ClusterPartition
    zones: ClusterPartition
    lace: object
    dense: object
    seconds: dict


@pytest.fixture(scope="module")
def desk():
    case = load_bundled("case30")
    threads = resolve_threads(None)
    t = time.perf_counter()
    ds = generate_dataset(case, 5000, (1.1, 1.3), 0.05, seed=1, threads=threads)
    t_data = time.perf_counter() - t
    part = ClusterPartition(case.clusters.K, case.clusters.assignment)
    zones = ClusterPartition(case.zones.K, case.zones.assignment)
    eps = default_eps(case)
    t = time.perf_counter()
    cfg = TrainConfig(stage_epochs=DESK_CAPS, gamma1=10.0, gamma2=1.0, dropout_rate=0.0, early_advance=False, seed=0)
    lace, _ = train(make_model(case, (40, 40, 40), part, dropout_rate=0.0, seed=0), ds, cfg, part, eps)
    t_lace = time.perf_counter() - t
    t = time.perf_counter()
    base_cfg = TrainConfig(stage_epochs=DESK_CAPS, gamma1=0.0, gamma2=0.0, dropout_rate=0.0, early_advance=False, seed=0)
    dense, _ = train(make_model(case, (40, 40, 40), None, dropout_rate=0.0, seed=0), ds, base_cfg, part, eps)
    t_dense = time.perf_counter() - t
    return Desk(case, ds, part, zones, lace, dense, {"data": t_data, "lace": t_lace, "dense": t_dense})


def test_criterion_4_desk_training(criteria, desk):
    c = Checks(4, "desk-scale training", 1800.0)
    d, E, mu = desk.ds.test_arrays(drop_flagged=True)
    rep = evaluate(desk.lace, d, E, mu)
    base = evaluate(desk.dense, d, E, mu)
    r_lace = offblock_ratio(desk.lace, d, desk.partition)
    r_base = offblock_ratio(desk.dense, d, desk.partition)
    med = rep.summary()
    c.add("balance avg <= 0.01", rep.balance_avg <= 0.01, f"{rep.balance_avg:.4f}")
    c.add("balance max <= 0.02", rep.balance_max <= 0.02, f"{rep.balance_max:.4f} (median per-scenario max {med['balance_max_median']:.4f})")
    c.add("max |mu_hat - mu| <= 0.05", rep.sensitivity_max <= 0.05,
          f"{rep.sensitivity_max:.3f} (avg {rep.sensitivity_avg:.3f}, median per-scenario max {med['sensitivity_max_median']:.3f})")
    c.add("max |mu_hat - mu| below dense baseline", rep.sensitivity_max < base.sensitivity_max,
          f"{rep.sensitivity_max:.4f} vs {base.sensitivity_max:.4f}")
    c.add("off-block ratio >= 50% below baseline", r_lace <= 0.5 * r_base, f"{r_lace:.3f} vs {r_base:.3f}")
    c.add("parameters (reported)", True, f"LACE-S {desk.lace.n_parameters()}, dense {desk.dense.n_parameters()}")
    c.finish(criteria, sum(desk.seconds.values()) + (time.perf_counter() - c.t0))


def test_criterion_5_zonal(criteria, desk):
    c = Checks(5, "zonal scalability", 900.0)
    cfg = TrainConfig(stage_epochs=DESK_CAPS, dropout_rate=0.0, early_advance=False, seed=0)
    model = make_model(desk.case, (40, 40, 40), zones=desk.zones, dropout_rate=0.0, seed=0)
    t = time.perf_counter()
    model, _ = train_zonal(model, desk.ds, cfg, desk.zones)
    per_epoch = (time.perf_counter() - t) / cfg.epochs
    nodal_epoch = desk.seconds["lace"] / sum(DESK_CAPS)
    d, E, mu = desk.ds.test_arrays(drop_flagged=True)
    z = evaluate(model, d, E, mu, desk.zones)
    n = evaluate(desk.lace, d, E, mu)
    c.add("balance avg within 2x nodal", z.balance_avg <= 2 * n.balance_avg, f"{z.balance_avg:.4f} vs {n.balance_avg:.4f}")
    c.add("balance max within 2x nodal", z.balance_max <= 2 * n.balance_max, f"{z.balance_max:.4f} vs {n.balance_max:.4f}")
    c.add("ZMCE avg within 2x nodal", z.sensitivity_avg <= 2 * n.sensitivity_avg, f"{z.sensitivity_avg:.4f} vs {n.sensitivity_avg:.4f}")
    c.add("ZMCE max within 2x nodal", z.sensitivity_max <= 2 * n.sensitivity_max, f"{z.sensitivity_max:.4f} vs {n.sensitivity_max:.4f}")
    c.add("fewer parameters", model.n_parameters() < desk.lace.n_parameters(),
          f"zonal {model.n_parameters()} vs nodal {desk.lace.n_parameters()}")
    c.add("epoch time LACE-S > ZACE-S", nodal_epoch > per_epoch, f"{nodal_epoch:.3f} s vs {per_epoch:.3f} s")
    c.finish(criteria)


def test_criterion_6_load_shifting(criteria, desk):
    c = Checks(6, "load shifting", 1200.0)
    case = desk.case
    flexible = [case.load_index(b) for b in FLEX30]
    signals = {"LACE-S": NeuralSignal(desk.lace), "LMCE": lmce_signal, "LACE-R": LaceRSignal(200), "CEF": cef_signal}
    res = sls_experiment(case, flexible, signals, 200, seed=0, cap=5.0, search=SearchConfig(seed=0),
                         threads=resolve_threads(None))
    opt, lace = res.deltas("OPT"), res.deltas("LACE-S")
    c.add("profiles evaluated", len(opt) == 200, f"{len(opt)} ok, {len(res.skipped)} skipped")
    c.add("Opt-shift dE <= 0 on every profile", np.all(opt <= 0.0), f"max {opt.max():.4g}")
    c.add("LACE-S dE <= 1e-6 on every profile", np.all(lace <= 1e-6),
          f"{int(np.sum(lace > 1e-6))} of {lace.size} positive, max {lace.max():.4g}")
    shares = {m: float(np.mean(res.deltas(m) > 0)) for m in ("LMCE", "LACE-R", "CEF")}
    c.add("a baseline raises E on >= 20% of profiles", max(shares.values()) >= 0.2,
          ", ".join(f"{m} {100 * s:.1f}%" for m, s in shares.items()))
    d = case.nominal_loads * 1.2
    single = run_profile(case, d, flexible, signals, 5.0, SearchConfig(seed=0))
    e_pre = single["OPT"][0]
    dE = {m: single[m][1] - single[m][0] for m in METHODS}
    table = ", ".join(f"{m} {dE[m]:+.3f} (ref {REFERENCE_120[m]:+.3f})" for m in METHODS)
    c.add("120% profile reported", True, f"E_pre {e_pre:.3f} (ref {REFERENCE_120['E_pre']}); {table}")
    c.add("sign pattern Opt<0, LACE-S<0", dE["OPT"] < 0 and dE["LACE-S"] < 0, f"{dE['OPT']:+.3f}, {dE['LACE-S']:+.3f}")
    c.add("sign pattern LMCE, LACE-R, CEF >= 0", all(dE[m] >= 0 for m in ("LMCE", "LACE-R", "CEF")),
          ", ".join(f"{m} {dE[m]:+.3f}" for m in ("LMCE", "LACE-R", "CEF")))
    c.finish(criteria)


# -- 7 ---------------------------------------------------------------------------
def test_criterion_7_determinism(criteria, tmp_path):
    c = Checks(7, "determinism", 600.0)
    cfg = {
        "dataset": {"n": 120},
        "train": {"stage_epochs": [3, 5, 3, 3], "batch_size": 32},
        "model": {"hidden": [16, 16, 16]},
        "sls": {"n_profiles": 4, "lace_r_segments": 20, "signals": ["LACE-S", "ZACE-S", "LMCE", "LACE-R", "CEF"],
                "search": {"n_vertex_starts": 2, "n_interior_starts": 2, "vertex_sweep": False}},
    }
    p = tmp_path / "run.json"
    p.write_text(json.dumps(cfg))
    outs = []
    for k, threads in enumerate(("1", "2")):
        out = tmp_path / f"run{k}"
        for cmd in (["datagen"], ["train"], ["eval"], ["sls"], ["metrics", "--what", "lmce"], ["metrics", "--what", "jacobian"], ["report"]):
            rc = cli.main([cmd[0], "--config", str(p), "--output-dir", str(out), "--threads", threads, *cmd[1:]])
            c.add(f"run {k} {' '.join(cmd)}", rc == 0) if rc != 0 else None
        outs.append(out)
    names = sorted(q.name for q in outs[0].glob("*.csv"))
    same = [n for n in names if (outs[1] / n).exists() and (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    c.add("byte-identical CSVs", len(same) == len(names) and len(names) >= 10, f"{len(same)}/{len(names)} files")
    c.finish(criteria)
