"""Command-line front end: ``carbonlace <command> [--config FILE] [--section.key VALUE ...]``."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .case_io import BUNDLED, CaseError, GridCase, load_bundled, read_case
from .dispatch import DispatchError, compute_lmce, dispatch_jacobian, solve_dispatch
from .lp import LpError

log = logging.getLogger("carbonlace")

EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DIVERGENCE, EXIT_IO = 1, 2, 3, 4

DEFAULT_CONFIG: dict = {
    "case": "case30",
    "output_dir": "carbonlace-out",
    "seed": 0,
    "threads": None,
    "dataset": {"n": 5000, "scale_range": [1.1, 1.3], "jitter": 0.05, "seed": 1, "test_fraction": 0.1},
    "model": {"hidden": [40, 40, 40], "seed": 0},
    "train": {
        "stage_epochs": [100, 400, 250, 250],
        "learning_rate": 1e-3,
        "batch_size": 256,
        "gamma1": 0.1,
        "gamma2": 0.01,
        "gamma3": 0.1,
        "eps": None,
        "stage_threshold": 1e-3,
        "stage_window": 10,
        "min_stage_epochs": 20,
        "early_advance": True,
        "dropout_rate": 0.1,
        "seed": 0,
        "drop_degenerate_labels": True,
    },
    "baseline": {"dropout": 0.0},
    "cluster": {"k": 4, "source": "case"},
    "zones": {"K": 5, "source": "case"},
    "sls": {
        "buses": [2, 7, 8, 12, 19, 21],
        "mode": "cap",
        "cap": 5.0,
        "n_profiles": 200,
        "seed": 0,
        "scale_range": [1.1, 1.3],
        "jitter": 0.05,
        "lace_r_segments": 200,
        "single_scale": 1.2,
        "signals": ["LACE-S", "LMCE", "LACE-R", "CEF"],
        "search": {"n_vertex_starts": 20, "n_interior_starts": 20, "vertex_sweep": True},
    },
    "metrics": {"load_scale": 1.2, "segments": 200},
    "sweep": {"gamma1_grid": [0.0, 0.05, 0.1, 0.5], "gamma2_grid": [0.0, 0.01, 0.05], "stage_epochs": [20, 60, 40, 40]},
}

# keys that do not influence results and so stay out of the config hash
_UNHASHED = ("threads", "output_dir")


class ConfigError(ValueError):
    pass


# -- config -------------------------------------------------------------------
def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k not in ("search",):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, path + k + ".")
        elif isinstance(base[k], dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(cfg: dict, dotted: str, raw) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node and not (len(keys) > 1 and keys[-2] == "search"):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = _parse_value(raw) if isinstance(raw, str) else raw


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok and "=" not in tok:
            raise ConfigError(f"unexpected argument {tok!r}")
        tok = tok[2:]
        if "=" in tok:
            k, v = tok.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{tok}")
            k, v = tok, extra[i + 1]
            i += 2
        out.append((k, v))
    return out


def load_config(path: str | None, overrides: list[tuple[str, str]] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
        base_dir = Path(path).resolve().parent
        case = cfg["case"]
        if case not in BUNDLED and not Path(case).is_absolute() and (base_dir / case).exists():
            cfg["case"] = str(base_dir / case)
    for k, v in overrides:
        apply_override(cfg, k, v)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    case = cfg["case"]
    if case not in BUNDLED and not Path(case).exists():
        raise ConfigError(f"case {case!r} is neither a bundled case nor an existing file")
    ds = cfg["dataset"]
    if int(ds["n"]) < 1:
        raise ConfigError("dataset.n must be positive")
    lo, hi = ds["scale_range"]
    if lo > hi:
        raise ConfigError("dataset.scale_range must be increasing")
    tr = cfg["train"]
    if tr["learning_rate"] <= 0 or tr["batch_size"] <= 0 or tr["stage_threshold"] <= 0:
        raise ConfigError("train rates, batch size and threshold must be positive")
    if cfg["cluster"]["source"] not in ("case", "kmeans") or cfg["zones"]["source"] not in ("case", "kmeans"):
        raise ConfigError("cluster/zones source must be 'case' or 'kmeans'")
    if cfg["sls"]["mode"] not in ("cap", "fraction"):
        raise ConfigError("sls.mode must be 'cap' or 'fraction'")
    unknown = set(cfg["sls"]["signals"]) - {"LACE-S", "LMCE", "LACE-R", "CEF", "ZACE-S"}
    if unknown:
        raise ConfigError(f"unknown SLS signals {sorted(unknown)}")


def config_hash(cfg: dict) -> str:
    c = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return hashlib.sha1(json.dumps(c, sort_keys=True).encode()).hexdigest()[:16]


def threads_of(cfg: dict) -> int:
    from .training import resolve_threads

    return resolve_threads(cfg.get("threads"))


# -- io helpers -----------------------------------------------------------------
def atomic_write(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def header_lines(cfg: dict, case: GridCase, extra: str = "") -> list[str]:
    line = f"carbonlace {__version__} config={config_hash(cfg)} case={case.digest()[:16]} seed={cfg['seed']}"
    return [line + (f" {extra}" if extra else "")]


def write_csv(path: Path, header: list[str], columns: list[str], rows) -> None:
    buf = io.StringIO()
    for h in header:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    atomic_write(path, buf.getvalue())


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def record_timing(out: Path, command: str, seconds: float) -> None:
    p = out / "timing.json"
    data = {}
    if p.exists():
        try:
            data = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError):
            data = {}
    data[command] = round(seconds, 3)
    atomic_write(p, json.dumps(data, indent=1, sort_keys=True) + "\n")


def resolve_case(name: str) -> GridCase:
    if name in BUNDLED:
        return load_bundled(name)
    return read_case(name)


def _outdir(cfg: dict) -> Path:
    p = Path(cfg["output_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- shared pipeline pieces -------------------------------------------------------
def _load_dataset(out: Path):
    from .training import dataset_from_csv

    p = out / "dataset.csv"
    if not p.exists():
        raise FileNotFoundError(f"{p} not found; run 'carbonlace datagen' first")
    return dataset_from_csv(p.read_text())


def _partition(cfg: dict, case: GridCase, ds):
    from .nn import ClusterPartition
    from .training import cluster_loads

    c = cfg["cluster"]
    if c["source"] == "case" and case.clusters is not None and case.clusters.K == c["k"]:
        return ClusterPartition(case.clusters.K, case.clusters.assignment)
    return cluster_loads(ds, int(c["k"]), seed=cfg["seed"])


def _zones(cfg: dict, case: GridCase, ds):
    from .nn import ClusterPartition
    from .training import lmp_zones

    z = cfg["zones"]
    if z["source"] == "case" and case.zones is not None and case.zones.K == z["K"]:
        return ClusterPartition(case.zones.K, case.zones.assignment)
    return lmp_zones(case, ds, int(z["K"]), seed=cfg["seed"])


def _train_config(cfg: dict, **over):
    from .training import TrainConfig

    t = dict(cfg["train"])
    t.update(over)
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in t.items() if k in names})


MODEL_FILES = {"lace": "model_lace.npz", "full": "model_full.npz", "zonal": "model_zonal.npz"}


def _load_model(out: Path, which: str):
    from .nn import NetworkModel

    p = out / MODEL_FILES[which]
    if not p.exists():
        raise FileNotFoundError(f"{p} not found; run 'carbonlace train' first")
    return NetworkModel.load(p)


# -- commands -------------------------------------------------------------------
def cmd_case_validate(path: str, dialect: str | None = None) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if path in BUNDLED:
            case = load_bundled(path)
        else:
            from .case_io import parse_case

            text = Path(path).read_text()
            if dialect is None:
                dialect = "matpower-subset" if path.endswith(".m") else "native"
            case = parse_case(text, dialect, name=Path(path).stem)
        solve_dispatch(case, case.nominal_loads)
    for w in caught:
        print(f"warning: {w.message}")
    print(
        f"OK {case.name or path}: {len(case.buses)} buses, {len(case.lines)} lines, "
        f"{case.n_gens} generators, {case.n_loads} loads"
    )
    return 0


def cmd_datagen(cfg: dict) -> int:
    from .training import dataset_to_csv, generate_dataset

    case = resolve_case(cfg["case"])
    out = _outdir(cfg)
    d = cfg["dataset"]
    ds = generate_dataset(
        case,
        int(d["n"]),
        tuple(d["scale_range"]),
        float(d["jitter"]),
        seed=int(d["seed"]),
        test_fraction=float(d["test_fraction"]),
        threads=threads_of(cfg),
    )
    atomic_write(out / "dataset.csv", dataset_to_csv(ds, header_lines(cfg, case)))
    print(f"wrote {len(ds)} scenarios to {out / 'dataset.csv'}")
    return 0


def cmd_train(cfg: dict, which=("lace", "full", "zonal")) -> int:
    from .training import LOG_COLUMNS, default_eps, make_model, train, train_zonal

    case = resolve_case(cfg["case"])
    out = _outdir(cfg)
    ds = _load_dataset(out)
    part = _partition(cfg, case, ds)
    m = cfg["model"]
    eps = cfg["train"]["eps"] if cfg["train"]["eps"] is not None else default_eps(case)
    hdr = header_lines(cfg, case)
    for name in which:
        if name == "lace":
            tc = _train_config(cfg)
            model = make_model(case, m["hidden"], part, dropout_rate=tc.dropout_rate, seed=m["seed"])
            model, rows = train(model, ds, tc, part, eps)
        elif name == "full":
            tc = _train_config(cfg, gamma1=0.0, gamma2=0.0, dropout_rate=cfg["baseline"]["dropout"])
            model = make_model(case, m["hidden"], None, dropout_rate=tc.dropout_rate, seed=m["seed"])
            model, rows = train(model, ds, tc, part, eps)
        elif name == "zonal":
            zones = _zones(cfg, case, ds)
            tc = _train_config(cfg)
            model = make_model(case, m["hidden"], zones=zones, dropout_rate=tc.dropout_rate, seed=m["seed"])
            model, rows = train_zonal(model, ds, tc, zones)
            model.metadata["zones"] = list(zones.assignment)
        else:
            raise ConfigError(f"unknown model {name!r}")
        model.metadata.update({"config_hash": config_hash(cfg), "case": case.digest()[:16], "partition": list(part.assignment)})
        tmp = out / f".{MODEL_FILES[name]}.partial"
        model.save(tmp)
        os.replace(tmp, out / MODEL_FILES[name])
        write_csv(out / f"loss_{name}.csv", hdr, LOG_COLUMNS, rows)
        print(f"trained {name}: {rows[-1][1] if rows else 0} epochs, {model.n_parameters()} parameters")
    return 0


def evaluate_models(cfg: dict, case: GridCase, ds, out: Path):
    """Evaluation rows for every trained model present in the output directory."""
    from .nn import ClusterPartition
    from .training import evaluate, offblock_ratio

    d, E, mu = ds.test_arrays(cfg["train"]["drop_degenerate_labels"])
    summary, per_row = [], []
    part = None
    for name in ("lace", "full", "zonal"):
        p = out / MODEL_FILES[name]
        if not p.exists():
            continue
        model = _load_model(out, name)
        part = ClusterPartition(max(model.metadata["partition"]) + 1, model.metadata["partition"])
        zones = None
        if name == "zonal":
            z = model.metadata["zones"]
            zones = ClusterPartition(max(z) + 1, z)
        rep = evaluate(model, d, E, mu, zones)
        ratio = offblock_ratio(model, d, part) if zones is None else float("nan")
        s = rep.summary()
        summary.append(
            [name, model.n_parameters(), s["balance_avg"], s["balance_max"], s["sensitivity_avg"], s["sensitivity_max"],
             s["balance_max_median"], s["sensitivity_max_median"], ratio]
        )
        for k, r in enumerate(rep.rows):
            per_row.append([name, k, *r])
    return summary, per_row


EVAL_COLUMNS = ["model", "n_params", "balance_avg", "balance_max", "sensitivity_avg", "sensitivity_max",
                "balance_max_median", "sensitivity_max_median", "offblock_ratio"]


def cmd_eval(cfg: dict) -> int:
    case = resolve_case(cfg["case"])
    out = _outdir(cfg)
    ds = _load_dataset(out)
    summary, rows = evaluate_models(cfg, case, ds, out)
    if not summary:
        raise FileNotFoundError("no trained models found; run 'carbonlace train' first")
    hdr = header_lines(cfg, case)
    write_csv(out / "eval_summary.csv", hdr, EVAL_COLUMNS, summary)
    write_csv(out / "eval_rows.csv", hdr, ["model", "scenario", "bal_avg", "bal_max", "sen_avg", "sen_max"], rows)
    for s in summary:
        print("{}: balance avg {:.4g} max {:.4g}; sensitivity avg {:.4g} max {:.4g}; params {}".format(s[0], s[2], s[3], s[4], s[5], s[1]))
    return 0


def cmd_metrics(cfg: dict, what: str, out_path: str | None) -> int:
    from .metrics import ace, cef, lace_r

    case = resolve_case(cfg["case"])
    scale = float(cfg["metrics"]["load_scale"])
    d = case.nominal_loads * scale
    res = solve_dispatch(case, d)
    hdr = header_lines(cfg, case, f"load_scale={scale!r}")
    target = Path(out_path) if out_path else _outdir(cfg) / f"metrics_{what}.csv"
    if what == "lmce":
        mu = compute_lmce(case, d)
        lr = lace_r(case, d, int(cfg["metrics"]["segments"]))
        cf = cef(case, d, res)
        eta = ace(case, d, res)
        rows = [
            [b, d[i], eta, mu.mu[i], lr.values[i], cf.values[i], int(mu.degenerate_flags[i])]
            for i, b in enumerate(case.load_buses)
        ]
        write_csv(target, hdr, ["bus", "d", "ace", "lmce", "lace_r", "cef", "lmce_flag"], rows)
    elif what == "e":
        write_csv(target, hdr, ["load_scale", "E", "objective", "active_set"],
                  [[scale, res.total_emissions, res.objective, " ".join(res.active_set)]])
    elif what == "jacobian":
        J = dispatch_jacobian(case, d)
        cols = ["generator_bus"] + [f"d_{b}" for b in case.load_buses]
        write_csv(target, hdr, cols, [[g.bus, *J[k]] for k, g in enumerate(case.generators)])
    else:
        raise ConfigError(f"unknown metrics output {what!r}")
    print(f"wrote {target}")
    return 0


REFERENCE_120 = {"E_pre": 176.062, "OPT": -0.233, "LACE-S": -0.175, "LMCE": 0.224, "LACE-R": 0.094, "CEF": 0.224}


def _signals(cfg: dict, out: Path) -> dict:
    from .sls import LaceRSignal, NeuralSignal, cef_signal, lmce_signal

    s = cfg["sls"]
    sig = {}
    for name in s["signals"]:
        if name == "LACE-S":
            sig[name] = NeuralSignal(_load_model(out, "lace"))
        elif name == "ZACE-S":
            m = _load_model(out, "zonal")
            sig[name] = NeuralSignal(m, tuple(m.metadata["zones"]))
        elif name == "LMCE":
            sig[name] = lmce_signal
        elif name == "LACE-R":
            sig[name] = LaceRSignal(int(s["lace_r_segments"]))
        elif name == "CEF":
            sig[name] = cef_signal
    return sig


def cmd_sls(cfg: dict) -> int:
    from .sls import METHODS, SearchConfig, histogram_rows, run_profile, sls_experiment

    case = resolve_case(cfg["case"])
    out = _outdir(cfg)
    s = cfg["sls"]
    flexible = tuple(case.load_index(b) for b in s["buses"])
    signals = _signals(cfg, out)
    search = SearchConfig(seed=int(s["seed"]), **s["search"])
    res = sls_experiment(
        case, flexible, signals, int(s["n_profiles"]), seed=int(s["seed"]), cap=float(s["cap"]), search=search,
        scale_range=tuple(s["scale_range"]), jitter=float(s["jitter"]), threads=threads_of(cfg), mode=s["mode"],
    )
    hdr = header_lines(cfg, case, f"skipped={len(res.skipped)}")
    write_csv(out / "sls.csv", hdr, ["profile_seed", "method", "E_pre", "E_post", "delta_E"], res.rows)
    write_csv(out / "sls_hist.csv", hdr, ["method", "bin_lo", "bin_hi", "count"], histogram_rows(res))
    # the single nominal-scaled profile next to the published reference values
    d = case.nominal_loads * float(s["single_scale"])
    single = run_profile(case, d, flexible, signals, float(s["cap"]), search, s["mode"])
    rows = []
    for m in METHODS:
        if m in single:
            pre, post = single[m]
            rows.append([m, pre, post, post - pre, REFERENCE_120.get(m, float("nan")), REFERENCE_120["E_pre"]])
    write_csv(out / "sls_single.csv", header_lines(cfg, case, f"load_scale={s['single_scale']!r}"),
              ["method", "E_pre", "E_post", "delta_E", "reference_delta_E", "reference_E_pre"], rows)
    n = int(s["n_profiles"])
    for m in METHODS:
        x = res.deltas(m)
        if x.size:
            print(f"{m}: {np.mean(x > 1e-6) * 100:.1f}% of {x.size} profiles increase emissions; median dE {np.median(x):.4g}")
    if res.skipped:
        print(f"{len(res.skipped)} of {n} profiles skipped")
    return 0


def cmd_report(cfg: dict) -> int:
    from .plotting import box_panels, histogram_grid, loss_curves

    out = _outdir(cfg)
    made = []
    p = out / "eval_rows.csv"
    if p.exists():
        _, rows = read_csv(p)
        names = list(dict.fromkeys(r[0] for r in rows))
        col = lambda n, c: np.array([float(r[c]) for r in rows if r[0] == n])
        box_panels({"max": {n: col(n, 3) for n in names}, "average": {n: col(n, 2) for n in names}},
                   out / "fig_balance.svg", "|lambda_hat - lambda_tilde|", "Balance deviation")
        box_panels({"max": {n: col(n, 5) for n in names}, "average": {n: col(n, 4) for n in names}},
                   out / "fig_sensitivity.svg", "|mu_hat - mu|", "Sensitivity deviation")
        made += ["fig_balance.svg", "fig_sensitivity.svg"]
    p = out / "sls_hist.csv"
    if p.exists():
        _, rows = read_csv(p)
        hist = [(r[0], float(r[1]), float(r[2]), int(r[3])) for r in rows]
        histogram_grid(hist, out / "fig_sls_hist.svg", "Realized emission change after shifting")
        made.append("fig_sls_hist.svg")
    for name in MODEL_FILES:
        p = out / f"loss_{name}.csv"
        if p.exists():
            _, rows = read_csv(p)
            loss_curves([[float(x) for x in r] for r in rows], out / f"fig_loss_{name}.svg", f"Training loss ({name})")
            made.append(f"fig_loss_{name}.svg")
    if not made:
        raise FileNotFoundError(f"no experiment CSVs found in {out}")
    print("rendered " + ", ".join(made))
    return 0


def cmd_sweep(cfg: dict) -> int:
    from .training import gamma_sweep

    case = resolve_case(cfg["case"])
    out = _outdir(cfg)
    ds = _load_dataset(out)
    part = _partition(cfg, case, ds)
    sw = cfg["sweep"]
    tc = _train_config(cfg, stage_epochs=tuple(sw["stage_epochs"]))
    rows = gamma_sweep(case, ds, part, sw["gamma1_grid"], sw["gamma2_grid"], tc, cfg["model"]["hidden"], cfg["model"]["seed"])
    write_csv(out / "gamma_sweep.csv", header_lines(cfg, case), ["gamma1", "gamma2", "L", "L_bd", "L_d"], rows)
    print(f"wrote {len(rows)} sweep points")
    return 0


# -- entry point -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carbonlace", description=__doc__)
    p.add_argument("--version", action="version", version=f"carbonlace {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    case = sub.add_parser("case", help="case file utilities")
    csub = case.add_subparsers(dest="case_command", required=True)
    v = csub.add_parser("validate", help="parse a case and check its invariants")
    v.add_argument("path")
    v.add_argument("--dialect", choices=["native", "matpower-subset"])

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--threads", type=int, help="worker processes (default $CARBONLACE_THREADS or 1)")
        sp.add_argument("--output-dir", help="override output_dir")

    common(sub.add_parser("datagen", help="generate the labelled scenario dataset"))
    t = sub.add_parser("train", help="train LACE-S, the dense baseline and ZACE-S")
    common(t)
    t.add_argument("--models", default="lace,full,zonal")
    common(sub.add_parser("eval", help="evaluate trained models on the test split"))
    m = sub.add_parser("metrics", help="metrics for one scaled load profile")
    common(m)
    m.add_argument("--case")
    m.add_argument("--load-scale", type=float)
    m.add_argument("--what", choices=["lmce", "e", "jacobian"], default="lmce")
    m.add_argument("--out")
    common(sub.add_parser("sls", help="load-shifting experiment"))
    common(sub.add_parser("report", help="render SVG figures from experiment CSVs"))
    common(sub.add_parser("sweep", help="sequential gamma sweep"))
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "case":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            return cmd_case_validate(args.path, args.dialect)
        overrides = parse_overrides(extra)
        if getattr(args, "case", None):
            overrides.append(("case", args.case))
        if getattr(args, "load_scale", None) is not None:
            overrides.append(("metrics.load_scale", args.load_scale))
        if args.threads is not None:
            overrides.append(("threads", args.threads))
        if args.output_dir:
            overrides.append(("output_dir", args.output_dir))
        cfg = load_config(args.config, overrides)
        t0 = time.perf_counter()
        if args.command == "datagen":
            rc = cmd_datagen(cfg)
        elif args.command == "train":
            rc = cmd_train(cfg, tuple(x for x in args.models.split(",") if x))
        elif args.command == "eval":
            rc = cmd_eval(cfg)
        elif args.command == "metrics":
            rc = cmd_metrics(cfg, args.what, args.out)
        elif args.command == "sls":
            rc = cmd_sls(cfg)
        elif args.command == "report":
            rc = cmd_report(cfg)
        elif args.command == "sweep":
            rc = cmd_sweep(cfg)
        else:  # pragma: no cover - argparse rejects unknown commands
            raise ConfigError(f"unknown command {args.command}")
        record_timing(_outdir(cfg), args.command, time.perf_counter() - t0)
        return rc
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CaseError as exc:
        print(f"case error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DispatchError, LpError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        from .training import TrainingDivergence

        if isinstance(exc, TrainingDivergence):
            if exc.checkpoint is not None and "cfg" in locals():
                exc.checkpoint.save(Path(cfg["output_dir"]) / "diverged_checkpoint.npz")
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGENCE
        raise


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
