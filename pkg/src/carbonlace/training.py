"""Scenario generation, load clustering, and the staged trainer."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .case_io import GridCase
from .dispatch import DispatchError, compute_lmce, lmp, solve_dispatch
from .nn import AdamState, ClusterPartition, LossBreakdown, LossSpec, NetworkModel, batch_gradients, batch_loss, project_balance

log = logging.getLogger(__name__)

MAX_TRIES = 10
LOG_COLUMNS = ["stage", "epoch", "L_lambda", "L_mu", "L", "L_bd", "L_d", "total"]


class TrainingDivergence(RuntimeError):
    def __init__(self, msg: str, checkpoint: NetworkModel | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# -- data ---------------------------------------------------------------------
@dataclass
class LabeledScenario:
    d: np.ndarray
    E: float
    mu: np.ndarray
    degenerate_flags: np.ndarray
    scenario_seed: int
    scale: float


@dataclass
class ShiftAugment:
    """Random sum-preserving shifts on a subset of loads (indices), within ``cap`` MW."""

    loads: tuple[int, ...] = ()
    cap: float = 5.0
    fraction: float = 0.0


@dataclass
class Dataset:
    case_hash: str
    scenarios: list[LabeledScenario]
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenarios)

    def arrays(self, idx=None, drop_flagged: bool = False):
        idx = np.arange(len(self.scenarios)) if idx is None else np.asarray(idx)
        sc = [self.scenarios[i] for i in idx]
        if drop_flagged:
            sc = [s for s in sc if not s.degenerate_flags.any()]
        d = np.array([s.d for s in sc])
        E = np.array([s.E for s in sc])
        mu = np.array([s.mu for s in sc])
        return d, E, mu

    def train_arrays(self, drop_flagged: bool = False):
        return self.arrays(self.train_idx, drop_flagged)

    def test_arrays(self, drop_flagged: bool = False):
        return self.arrays(self.test_idx, drop_flagged)


def _split(n: int, seed: int, test_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _draw(case: GridCase, seed: int, idx: int, lo: float, hi: float, jitter: float, aug: ShiftAugment):
    rng = np.random.default_rng([seed, idx])
    base = case.nominal_loads
    for _ in range(MAX_TRIES):
        scale = float(rng.uniform(lo, hi))
        d = base * scale
        if jitter > 0:
            d = d * rng.uniform(1.0 - jitter, 1.0 + jitter, size=d.size)
        if aug.loads and rng.random() < aug.fraction:
            d = _random_shift(d, list(aug.loads), aug.cap, rng)
        try:
            res = solve_dispatch(case, d)
            v = compute_lmce(case, d)
        except DispatchError:
            continue
        return LabeledScenario(d, res.total_emissions, v.mu, v.degenerate_flags, idx, scale)
    raise DispatchError(f"scenario {idx}: no feasible draw in {MAX_TRIES} tries")


def _random_shift(d: np.ndarray, loads: list[int], cap: float, rng) -> np.ndarray:
    """Uniform box sample on the loads, pulled back onto the base total."""
    lo = np.maximum(d[loads] - cap, 0.0)
    hi = d[loads] + cap
    s = rng.uniform(lo, hi)
    target = d[loads].sum()
    # bisect a common offset so the shifted total matches the base total
    a, b = -2 * cap, 2 * cap
    for _ in range(80):
        t = 0.5 * (a + b)
        if np.clip(s + t, lo, hi).sum() < target:
            a = t
        else:
            b = t
    out = d.copy()
    out[loads] = np.clip(s + 0.5 * (a + b), lo, hi)
    return out


def _worker(args):
    case, seed, lo_idx, hi_idx, lo, hi, jitter, aug = args
    return [_draw(case, seed, i, lo, hi, jitter, aug) for i in range(lo_idx, hi_idx)]


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("CARBONLACE_THREADS", "1") or 1)
    return max(1, int(threads))


def generate_dataset(
    case: GridCase,
    n_samples: int,
    scale_range=(1.10, 1.30),
    per_bus_jitter: float = 0.05,
    seed: int = 0,
    test_fraction: float = 0.1,
    shift_augment: ShiftAugment | None = None,
    threads: int | None = None,
) -> Dataset:
    """Labelled scenarios around scaled nominal load.

    Scenario ``i`` draws from its own generator seeded by ``(seed, i)`` so the
    result does not depend on how the work is split across processes.
    """
    lo, hi = map(float, scale_range)
    if lo > hi:
        raise ValueError("scale range must satisfy lo <= hi")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    aug = shift_augment or ShiftAugment()
    try:
        solve_dispatch(case, case.nominal_loads * hi)
    except DispatchError as exc:
        raise DispatchError(f"case infeasible at the top of the scale range ({hi})") from exc
    threads = min(resolve_threads(threads), n_samples)
    if threads == 1:
        scen = _worker((case, seed, 0, n_samples, lo, hi, per_bus_jitter, aug))
    else:
        chunks = np.linspace(0, n_samples, 4 * threads + 1).astype(int)
        jobs = [(case, seed, int(a), int(b), lo, hi, per_bus_jitter, aug) for a, b in zip(chunks[:-1], chunks[1:]) if b > a]
        with ProcessPoolExecutor(threads) as ex:
            scen = [s for part in ex.map(_worker, jobs) for s in part]
    tr, te = _split(n_samples, seed, test_fraction)
    meta = {
        "n_samples": n_samples,
        "scale_range": [lo, hi],
        "per_bus_jitter": per_bus_jitter,
        "seed": seed,
        "test_fraction": test_fraction,
        "shift_augment": asdict(aug),
    }
    return Dataset(case.digest(), scen, tr, te, meta)


def dataset_to_csv(ds: Dataset, header_lines: list[str] | None = None) -> str:
    D = len(ds.scenarios[0].d)
    buf = io.StringIO()
    for line in header_lines or []:
        buf.write(f"# {line}\n")
    meta = dict(ds.meta, case_hash=ds.case_hash, test_idx=[int(i) for i in ds.test_idx])
    buf.write("# meta " + json.dumps(meta, sort_keys=True) + "\n")
    cols = ["seed", "scale"] + [f"d_{i + 1}" for i in range(D)] + ["E"] + [f"mu_{i + 1}" for i in range(D)] + ["flags"]
    buf.write(",".join(cols) + "\n")
    for s in ds.scenarios:
        flags = "".join("1" if f else "0" for f in s.degenerate_flags)
        row = [str(s.scenario_seed), repr(float(s.scale))]
        row += [repr(float(x)) for x in s.d] + [repr(float(s.E))] + [repr(float(x)) for x in s.mu] + [flags]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    meta = None
    rows = []
    header = None
    for line in text.splitlines():
        if line.startswith("# meta "):
            meta = json.loads(line[len("# meta ") :])
        elif line.startswith("#") or not line.strip():
            continue
        elif header is None:
            header = line.split(",")
        else:
            rows.append(line.split(","))
    if header is None or meta is None:
        raise ValueError("dataset file lacks a header or metadata line")
    D = sum(1 for c in header if c.startswith("d_"))
    scen = []
    for r in rows:
        d = np.array([float(x) for x in r[2 : 2 + D]])
        E = float(r[2 + D])
        mu = np.array([float(x) for x in r[3 + D : 3 + 2 * D]])
        flags = np.array([c == "1" for c in r[3 + 2 * D]], dtype=bool)
        scen.append(LabeledScenario(d, E, mu, flags, int(r[0]), float(r[1])))
    te = np.array(sorted(meta.pop("test_idx")), dtype=int)
    tr = np.setdiff1d(np.arange(len(scen)), te)
    case_hash = meta.pop("case_hash")
    return Dataset(case_hash, scen, tr, te, meta)


# -- clustering ------------------------------------------------------------
def _canonical_labels(labels) -> tuple[int, ...]:
    # renumber clusters in order of first appearance so results are comparable
    order: dict[int, int] = {}
    for x in labels:
        order.setdefault(int(x), len(order))
    return tuple(order[int(x)] for x in labels)


def kmeans_partition(features: np.ndarray, k: int, seed: int = 0, n_init: int = 100) -> ClusterPartition:
    """k-means++ with ``n_init`` restarts over rows of ``features``."""
    from sklearn.cluster import KMeans

    n = features.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, {n}]")
    if k == 1:
        return ClusterPartition.single(n)
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed, algorithm="lloyd")
    labels = km.fit(np.asarray(features, dtype=float)).labels_
    return ClusterPartition(k, _canonical_labels(labels))


def cluster_loads(ds: Dataset, k: int, seed: int = 0, subset: int = 512, n_init: int = 100) -> ClusterPartition:
    """Group loads whose LMCE traces across scenarios look alike."""
    if not ds.scenarios:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([seed, 0xC1])
    n = len(ds.scenarios)
    idx = np.sort(rng.choice(n, size=min(subset, n), replace=False))
    mu = np.array([ds.scenarios[i].mu for i in idx])
    return kmeans_partition(mu.T, k, seed, n_init)


def jacobian_partition(jac: np.ndarray, k: int, seed: int = 0) -> ClusterPartition:
    """k-means on unit-normalised dispatch-Jacobian columns."""
    cols = jac.T / np.maximum(np.linalg.norm(jac, axis=0), 1e-12)[:, None]
    return kmeans_partition(cols, k, seed)


def lmp_zones(case: GridCase, ds: Dataset, K: int, seed: int = 0, subset: int = 512) -> ClusterPartition:
    """Market zones from k-means on per-load LMP traces."""
    rng = np.random.default_rng([seed, 0x21])
    n = len(ds.scenarios)
    idx = np.sort(rng.choice(n, size=min(subset, n), replace=False))
    prices = np.array([lmp(solve_dispatch(case, ds.scenarios[i].d), case) for i in idx])
    return kmeans_partition(prices.T, K, seed)


def _allocate(width: int, sizes: list[int]) -> list[int]:
    total = sum(sizes)
    if width < len(sizes):
        raise ValueError("hidden width must be at least the cluster count")
    base = [width * s // total for s in sizes]
    base = [max(1, b) for b in base]
    order = sorted(range(len(sizes)), key=lambda c: (-sizes[c], c))
    i = 0
    while sum(base) < width:
        base[order[i % len(order)]] += 1
        i += 1
    while sum(base) > width:
        c = order[i % len(order)]
        if base[c] > 1:
            base[c] -= 1
        i += 1
    return base


def build_masks(partition: ClusterPartition, layer_sizes, output_groups=None) -> dict[int, np.ndarray]:
    """Block masks for the first and last weight matrices.

    Hidden neurons next to each masked layer are split among clusters in
    proportion to cluster size. ``output_groups`` gives the cluster of each
    output (default: the input partition, for nodal models).
    """
    sizes = list(layer_sizes)
    a = np.asarray(partition.assignment)
    if output_groups is None:
        output_groups = a
    output_groups = np.asarray(output_groups)
    counts = [int((a == c).sum()) for c in range(partition.count)]
    if partition.count == 1:
        return {0: np.ones((sizes[1], sizes[0])), len(sizes) - 2: np.ones((sizes[-1], sizes[-2]))}

    def owner(width):
        alloc = _allocate(width, counts)
        return np.repeat(np.arange(partition.count), alloc)

    first = owner(sizes[1])
    last = owner(sizes[-2])
    masks = {0: (first[:, None] == a[None, :]).astype(float)}
    mL = (output_groups[:, None] == last[None, :]).astype(float)
    L = len(sizes) - 1
    if L == 1:
        masks[0] = masks[0] * mL
    else:
        masks[L - 1] = mL
    return masks


# -- training -------------------------------------------------------------------
@dataclass
class TrainConfig:
    stage_epochs: tuple[int, ...] = (100, 400, 250, 250)
    learning_rate: float = 1e-3
    batch_size: int = 256
    gamma1: float = 0.1
    gamma2: float = 0.01
    gamma3: float = 0.1
    eps: float | None = None
    stage_threshold: float = 1e-3
    stage_window: int = 10
    min_stage_epochs: int = 20
    early_advance: bool = True
    dropout_rate: float = 0.1
    seed: int = 0
    drop_degenerate_labels: bool = True

    def __post_init__(self):
        self.stage_epochs = tuple(int(x) for x in self.stage_epochs)
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("learning rate and batch size must be positive")
        if self.stage_threshold <= 0:
            raise ValueError("stage threshold must be positive")
        if any(x < 0 for x in self.stage_epochs):
            raise ValueError("stage epochs must be nonnegative")

    @property
    def epochs(self) -> int:
        return sum(self.stage_epochs)


def _stage_specs(cfg: TrainConfig, partition: ClusterPartition | None, zone: np.ndarray | None, eps: float):
    if zone is not None:
        return [
            LossSpec.zonal(zone, 0.0, mode="ace"),
            LossSpec.zonal(zone, 0.0),
            LossSpec.zonal(zone, cfg.gamma3),
        ]
    return [
        LossSpec.nodal(partition, 0.0, 0.0, eps, mode="ace"),
        LossSpec.nodal(partition, 0.0, 0.0, eps),
        LossSpec.nodal(partition, cfg.gamma1, 0.0, eps),
        LossSpec.nodal(partition, cfg.gamma1, cfg.gamma2, eps),
    ]


def _converged(hist: list[float], cfg: TrainConfig) -> bool:
    """Per-epoch relative loss reduction, smoothed over two windows, fell below threshold.

    The window means absorb the epoch-to-epoch noise that dropout and
    minibatching put on the loss.
    """
    w = cfg.stage_window
    if len(hist) < max(cfg.min_stage_epochs, 2 * w):
        return False
    old = float(np.mean(hist[-2 * w : -w]))
    new = float(np.mean(hist[-w:]))
    if old <= 0:
        return True
    return (old - new) / old / w < cfg.stage_threshold


def _run_stages(model: NetworkModel, ds: Dataset, cfg: TrainConfig, specs: list[LossSpec], caps: list[int]):
    d, E, mu = ds.train_arrays(cfg.drop_degenerate_labels)
    if len(d) == 0:
        raise ValueError("no training scenarios left after filtering")
    rng = np.random.default_rng([cfg.seed, 0x7A])
    opt = AdamState(lr=cfg.learning_rate)
    model.dropout_rate = cfg.dropout_rate
    rows = []
    epoch = 0
    good = model.copy()
    for stage, (spec, cap) in enumerate(zip(specs, caps), start=1):
        hist: list[float] = []
        for _ in range(cap):
            perm = rng.permutation(len(d))
            for s in range(0, len(d), cfg.batch_size):
                b = perm[s : s + cfg.batch_size]
                drop = model.dropout_masks(len(b), rng)
                _, gW, gb = batch_gradients(model, d[b], E[b], mu[b], spec, drop)
                opt.step(model.params(), gW + gb)
                model.apply_masks()
            epoch += 1
            lb = batch_loss(model, d, E, mu, spec)
            if not np.isfinite(lb.total):
                raise TrainingDivergence(f"loss diverged in stage {stage} at epoch {epoch}", good)
            good = model.copy()
            rows.append([stage, epoch] + lb.as_row())
            hist.append(lb.total)
            if cfg.early_advance and _converged(hist, cfg):
                break
        log.info("stage %d finished after %d epochs, loss %.3g", stage, len(hist), hist[-1] if hist else float("nan"))
    model.metadata["epochs"] = epoch
    return model, rows


def default_eps(case: GridCase) -> float:
    return 0.01 * float(case.emission_factors.max())


def make_model(
    case: GridCase,
    hidden=(40, 40, 40),
    partition: ClusterPartition | None = None,
    zones: ClusterPartition | None = None,
    dropout_rate: float = 0.1,
    seed: int = 0,
) -> NetworkModel:
    """Nodal model (``zones`` None) or zonal model with ``zones.count`` outputs."""
    D = case.n_loads
    out = D if zones is None else zones.count
    sizes = [D, *hidden, out]
    masks = None
    if zones is not None:
        masks = build_masks(zones, sizes, output_groups=np.arange(zones.count))
    elif partition is not None and partition.count > 1:
        masks = build_masks(partition, sizes)
    return NetworkModel(
        sizes,
        output_scale=float(case.emission_factors.max()),
        input_scale=np.maximum(case.nominal_loads, 1e-6),
        masks=masks,
        dropout_rate=dropout_rate,
        seed=seed,
    )


def train(model: NetworkModel, ds: Dataset, cfg: TrainConfig, partition: ClusterPartition | None = None, eps: float | None = None):
    """Four-stage training; returns ``(model, log_rows)``.

    Stage 1 anchors every output to the system average, stage 2 fits the
    balance and sensitivity losses, stage 3 adds the off-block Jacobian
    penalty and stage 4 the off-diagonal one.
    """
    if partition is not None and len(partition.assignment) != model.n_inputs:
        raise ValueError("partition size does not match the model input")
    eps = cfg.eps if cfg.eps is not None else (eps if eps is not None else 0.01 * model.output_scale)
    specs = _stage_specs(cfg, partition, None, eps)
    caps = list(cfg.stage_epochs) + [0] * (4 - len(cfg.stage_epochs))
    return _run_stages(model, ds, cfg, specs, caps[:4])


def train_zonal(model: NetworkModel, ds: Dataset, cfg: TrainConfig, zones: ClusterPartition):
    """Three stages: anchor, zonal primary loss, then the zone-mask Jacobian penalty.

    Stages 3 and 4 of the nodal schedule merge into one, so its cap is the
    sum of both.
    """
    zone = indicator(zones)
    if model.n_outputs != zones.count:
        raise ValueError("zonal model must have one output per zone")
    caps = list(cfg.stage_epochs) + [0] * (4 - len(cfg.stage_epochs))
    caps = [caps[0], caps[1], caps[2] + caps[3]]
    return _run_stages(model, ds, cfg, _stage_specs(cfg, None, zone, 0.0), caps)


def indicator(zones: ClusterPartition) -> np.ndarray:
    a = np.asarray(zones.assignment)
    return (np.arange(zones.count)[:, None] == a[None, :]).astype(float)


# -- evaluation -----------------------------------------------------------------
@dataclass
class EvalReport:
    balance_avg: float  # mean over scenarios of the per-scenario mean |lam_hat - lam_tilde|
    balance_max: float  # largest entry over all scenarios
    sensitivity_avg: float
    sensitivity_max: float
    rows: np.ndarray  # per scenario: bal_avg, bal_max, sen_avg, sen_max

    def summary(self) -> dict:
        q = lambda c: float(np.median(self.rows[:, c]))
        return {
            "balance_avg": self.balance_avg,
            "balance_max": self.balance_max,
            "sensitivity_avg": self.sensitivity_avg,
            "sensitivity_max": self.sensitivity_max,
            "balance_max_median": q(1),
            "sensitivity_max_median": q(3),
        }


def model_outputs(model, d: np.ndarray):
    """Batched ``(lam_hat, J)``; any object with ``forward``/``input_jacobian`` works."""
    return model.forward(d), model.input_jacobian(d)


def evaluate(model, d: np.ndarray, E: np.ndarray, mu: np.ndarray, zones: ClusterPartition | None = None) -> EvalReport:
    """Balance and sensitivity deviations on a set of scenarios."""
    d = np.atleast_2d(d)
    lam, J = model_outputs(model, d)
    rows = []
    Mz = None if zones is None else indicator(zones)
    for b in range(d.shape[0]):
        if Mz is None:
            dz = d[b]
            mu_t = mu[b]
            mu_h = lam[b] + J[b].T @ d[b]
        else:
            dz = Mz @ d[b]
            W = Mz * d[b][None, :]
            W = W / W.sum(axis=1, keepdims=True)
            mu_t = W @ mu[b]
            mu_h = W @ (Mz.T @ lam[b] + J[b].T @ dz)
        bal = np.abs(lam[b] - project_balance(lam[b], dz, E[b]))
        sen = np.abs(mu_h - mu_t)
        rows.append([bal.mean(), bal.max(), sen.mean(), sen.max()])
    rows = np.array(rows)
    return EvalReport(
        balance_avg=float(rows[:, 0].mean()),
        balance_max=float(rows[:, 1].max()),
        sensitivity_avg=float(rows[:, 2].mean()),
        sensitivity_max=float(rows[:, 3].max()),
        rows=rows,
    )


def offblock_ratio(model, d: np.ndarray, partition: ClusterPartition) -> float:
    """Mean over scenarios of the off-block share of Jacobian l1 mass."""
    J = model.input_jacobian(np.atleast_2d(d))
    mask = partition.off_block
    num = np.abs(J * mask).sum(axis=(1, 2))
    den = np.maximum(np.abs(J).sum(axis=(1, 2)), 1e-300)
    return float(np.mean(num / den))


def gamma_sweep(
    case: GridCase,
    ds: Dataset,
    partition: ClusterPartition,
    gamma1_grid,
    gamma2_grid,
    cfg: TrainConfig,
    hidden=(40, 40, 40),
    model_seed: int = 0,
    select=None,
) -> list[tuple[float, float, float, float, float]]:
    """Sequential sweep: gamma1 with gamma2 = 0, then gamma2 at the chosen gamma1.

    Each point trains a fresh model and reports test-set ``(g1, g2, L, L_bd, L_d)``.
    ``select`` picks gamma1 from the first leg (default: the largest value whose
    primary loss stays within 10% of the smallest primary loss seen).
    """
    if not len(gamma1_grid) or not len(gamma2_grid):
        raise ValueError("sweep grids must be non-empty")
    eps = cfg.eps if cfg.eps is not None else default_eps(case)
    d, E, mu = ds.test_arrays(cfg.drop_degenerate_labels)
    rows = []

    def point(g1, g2):
        c = TrainConfig(**{**asdict(cfg), "gamma1": g1, "gamma2": g2})
        m = make_model(case, hidden, partition, dropout_rate=c.dropout_rate, seed=model_seed)
        m, _ = train(m, ds, c, partition, eps)
        lb: LossBreakdown = batch_loss(m, d, E, mu, LossSpec.nodal(partition, g1, g2, eps))
        return (float(g1), float(g2), lb.primary, lb.block_diag, lb.diag_dom)

    first = [point(g1, 0.0) for g1 in gamma1_grid]
    rows.extend(first)
    if select is None:
        best = min(r[2] for r in first)
        ok = [r[0] for r in first if r[2] <= 1.1 * best]
        chosen = max(ok)
    else:
        chosen = select(first)
    rows.extend(point(chosen, g2) for g2 in gamma2_grid)
    return rows


def config_digest(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
