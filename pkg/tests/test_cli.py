import json

import numpy as np
import pytest

from carbonlace import cli
from carbonlace.case_io import bundled_text
from carbonlace.nn import ClusterPartition, NetworkModel
from carbonlace.training import dataset_from_csv, evaluate

TINY = {
    "dataset": {"n": 40},
    "train": {"stage_epochs": [2, 2, 1, 1], "batch_size": 16},
    "model": {"hidden": [12, 12]},
    "sls": {"n_profiles": 2, "lace_r_segments": 10,
            "search": {"n_vertex_starts": 1, "n_interior_starts": 1, "vertex_sweep": False}},
}


def write_config(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(tmp_path / "out")
    for k, v in (extra or {}).items():
        cfg[k] = v
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def csv_body(path):
    return path.read_text()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = write_config(tmp)
    for cmd in ("datagen", "train", "eval", "sls", "report"):
        assert cli.main([cmd, "--config", str(cfg)]) == 0, cmd
    return tmp / "out", cfg


class TestConfig:
    def test_defaults_validate(self):
        cfg = cli.load_config(None)
        assert cfg["case"] == "case30" and cfg["train"]["learning_rate"] == 1e-3

    def test_dotted_override(self, tmp_path):
        cfg = cli.load_config(str(write_config(tmp_path)), [("train.learning_rate", "0.01"), ("dataset.scale_range", "[1.0, 1.2]")])
        assert cfg["train"]["learning_rate"] == 0.01 and cfg["dataset"]["scale_range"] == [1.0, 1.2]

    def test_unknown_key(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            cli.load_config(None, [("train.learnign_rate", "1")])
        p = tmp_path / "bad.json"
        p.write_text('{"trian": {}}')
        with pytest.raises(cli.ConfigError):
            cli.load_config(str(p))

    def test_invalid_values(self):
        with pytest.raises(cli.ConfigError):
            cli.load_config(None, [("train.learning_rate", "-1")])
        with pytest.raises(cli.ConfigError):
            cli.load_config(None, [("case", "no/such/file.json")])

    def test_hash_ignores_threads(self):
        a = cli.load_config(None, [("threads", "1")])
        b = cli.load_config(None, [("threads", "4")])
        c = cli.load_config(None, [("seed", "5")])
        assert cli.config_hash(a) == cli.config_hash(b) != cli.config_hash(c)

    def test_parse_overrides(self):
        assert cli.parse_overrides(["--train.seed", "3", "--sls.cap=2.5"]) == [("train.seed", "3"), ("sls.cap", "2.5")]
        with pytest.raises(cli.ConfigError):
            cli.parse_overrides(["stray"])


class TestCaseValidate:
    def test_bundled(self, capsys):
        assert cli.main(["case", "validate", "case30"]) == 0
        assert capsys.readouterr().out.startswith("OK")

    def test_dangling_line(self, tmp_path, capsys):
        doc = json.loads(bundled_text("case2"))
        doc["lines"].append({"from_bus": 2, "to_bus": 7, "reactance": 0.1, "flow_limit": 1.0})
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        assert cli.main(["case", "validate", str(p)]) == cli.EXIT_CONFIG
        assert "line 1" in capsys.readouterr().err

    def test_matpower_unknown_section(self, tmp_path, capsys):
        p = tmp_path / "c.m"
        p.write_text(bundled_text("case30.m") + "\nmpc.areas = [1 1];\n")
        assert cli.main(["case", "validate", str(p)]) == 0
        out = capsys.readouterr().out
        assert "warning" in out and "mpc.areas" in out and "OK" in out

    def test_missing_file(self, tmp_path):
        assert cli.main(["case", "validate", str(tmp_path / "none.json")]) == cli.EXIT_IO


class TestExitCodes:
    def test_config_error(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert cli.main(["datagen", "--config", str(p)]) == cli.EXIT_CONFIG

    def test_infeasible_case(self, tmp_path):
        cfg = write_config(tmp_path, {"case": "case2"})
        assert cli.main(["datagen", "--config", str(cfg), "--dataset.scale_range", "[4, 4]"]) == cli.EXIT_INFEASIBLE

    def test_missing_inputs(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["eval", "--config", str(cfg)]) == cli.EXIT_IO

    def test_divergence(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["datagen", "--config", str(cfg)]) == 0
        with pytest.warns(RuntimeWarning):
            rc = cli.main(["train", "--config", str(cfg), "--models", "full", "--train.learning_rate", "1e300"])
        assert rc in (0, cli.EXIT_DIVERGENCE)


class TestPipeline:
    def test_artifacts(self, pipeline):
        out, _ = pipeline
        for name in ("dataset.csv", "model_lace.npz", "model_full.npz", "model_zonal.npz", "loss_lace.csv",
                     "eval_summary.csv", "eval_rows.csv", "sls.csv", "sls_hist.csv", "sls_single.csv",
                     "fig_balance.svg", "fig_sensitivity.svg", "fig_sls_hist.svg", "fig_loss_lace.svg", "timing.json"):
            assert (out / name).exists(), name
        assert not list(out.glob(".*tmp")) and not list(out.glob("*.partial"))

    def test_headers(self, pipeline):
        out, _ = pipeline
        for p in out.glob("*.csv"):
            first = p.read_text().splitlines()[0]
            assert first.startswith("# carbonlace ") and "config=" in first and "case=" in first and "seed=" in first

    def test_sls_methods(self, pipeline):
        out, _ = pipeline
        _, rows = cli.read_csv(out / "sls.csv")
        assert {r[1] for r in rows} == {"OPT", "LACE-S", "LMCE", "LACE-R", "CEF"}
        assert len(rows) == 2 * 5

    def test_eval_matches_library(self, pipeline):
        out, _ = pipeline
        ds = dataset_from_csv((out / "dataset.csv").read_text())
        m = NetworkModel.load(out / "model_lace.npz")
        d, E, mu = ds.test_arrays(True)
        rep = evaluate(m, d, E, mu)
        head, rows = cli.read_csv(out / "eval_summary.csv")
        row = dict(zip(head, next(r for r in rows if r[0] == "lace")))
        assert float(row["balance_avg"]) == rep.balance_avg
        assert float(row["sensitivity_max"]) == rep.sensitivity_max
        assert int(row["n_params"]) == m.n_parameters()

    def test_zonal_fewer_parameters(self, pipeline):
        out, _ = pipeline
        assert NetworkModel.load(out / "model_zonal.npz").n_parameters() < NetworkModel.load(out / "model_lace.npz").n_parameters()

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        out, cfg = pipeline
        other = tmp_path / "again"
        for cmd in ("datagen", "train", "eval", "sls"):
            assert cli.main([cmd, "--config", str(cfg), "--output-dir", str(other), "--threads", "2"]) == 0
        for p in out.glob("*.csv"):
            if (other / p.name).exists():
                assert csv_body(p) == csv_body(other / p.name), p.name

    def test_svg_is_static(self, pipeline):
        svg = (pipeline[0] / "fig_sls_hist.svg").read_text()
        assert "<script" not in svg


class TestMetricsCommand:
    @pytest.mark.parametrize("what", ["lmce", "e", "jacobian"])
    def test_outputs(self, tmp_path, what):
        target = tmp_path / f"{what}.csv"
        rc = cli.main(["metrics", "--case", "case2", "--load-scale", "1.0", "--what", what, "--out", str(target),
                       "--output-dir", str(tmp_path), "--metrics.segments", "50"])
        assert rc == 0
        head, rows = cli.read_csv(target)
        if what == "lmce":
            assert head[:6] == ["bus", "d", "ace", "lmce", "lace_r", "cef"]
            assert [float(r[3]) for r in rows] == pytest.approx([1.0, 1.0], abs=1e-9)
        elif what == "e":
            assert float(rows[0][1]) == pytest.approx(10.0)
        else:
            J = np.array([[float(x) for x in r[1:]] for r in rows])
            assert J.shape == (2, 2)

    def test_env_threads(self, monkeypatch):
        monkeypatch.setenv("CARBONLACE_THREADS", "3")
        assert cli.threads_of(cli.load_config(None)) == 3
        assert cli.threads_of(cli.load_config(None, [("threads", "2")])) == 2
