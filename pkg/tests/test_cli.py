import json
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evdro import artifacts as art
from evdro.cli import main
from evdro.forecasting import SeriesPanel

START = datetime(2024, 3, 1, 5, 0)


def write_region_map(path, ids):
    art.write_csv(path, art.REGION_HEADER, [(rid, i) for i, rid in enumerate(ids)])
    return path


def write_events(path, rows, with_count=True):
    header = art.EVENT_HEADER if with_count else art.EVENT_HEADER[:2]
    art.write_csv(path, header, rows)
    return path


@pytest.fixture
def region_map(tmp_path):
    return write_region_map(tmp_path / "regions.csv", ["A", "B", "C"])


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["pipeline", "--out", str(out), "--regions", "3", "--history-days", "2", "--n-seeds", "2",
                 "--steps", "3", "--nb", "50"])
    assert code == 0
    return out


class TestIngest:
    def test_counts_events(self, tmp_path, region_map, capsys):
        t = START + timedelta(minutes=5)
        trips = write_events(tmp_path / "trips.csv", [(t.isoformat(), "C", 1)] * 3, with_count=True)
        charging = write_events(tmp_path / "charging.csv", [(START.isoformat(), "A", 2)])
        assert main(["ingest", "--trips", str(trips), "--charging", str(charging), "--region-map",
                     str(region_map), "--steps", "2", "--out", str(tmp_path / "out")]) == 0
        demand, start, filled, chash = art.read_panel(tmp_path / "out" / "demand.csv")
        assert start == START
        assert demand.values[0].tolist() == [0.0, 0.0, 3.0]
        assert filled.tolist() == [False, True]
        assert chash
        assert "gap-filled" in capsys.readouterr().out

    def test_empty_file_gives_zero_panel(self, tmp_path, region_map, caplog):
        trips = write_events(tmp_path / "trips.csv", [])
        charging = write_events(tmp_path / "charging.csv", [(START.isoformat(), "B", 1)])
        assert main(["ingest", "--trips", str(trips), "--charging", str(charging), "--region-map",
                     str(region_map), "--steps", "4", "--out", str(tmp_path / "out")]) == 0
        demand = art.read_panel(tmp_path / "out" / "demand.csv")[0]
        assert demand.values.shape == (4, 3)
        assert not demand.values.any()
        assert "empty" in caplog.text

    def test_unknown_region_lists_rows(self, tmp_path, region_map, capsys):
        trips = write_events(tmp_path / "trips.csv", [(START.isoformat(), "A", 1), (START.isoformat(), "Z", 1)])
        charging = write_events(tmp_path / "charging.csv", [])
        code = main(["ingest", "--trips", str(trips), "--charging", str(charging), "--region-map",
                     str(region_map), "--out", str(tmp_path / "out")])
        assert code == 3
        assert "line 3 (Z)" in capsys.readouterr().err

    def test_bad_timestamp_reports_line(self, tmp_path, region_map, capsys):
        trips = write_events(tmp_path / "trips.csv", [(START.isoformat(), "A", 1), ("yesterday", "A", 1)])
        charging = write_events(tmp_path / "charging.csv", [])
        code = main(["ingest", "--trips", str(trips), "--charging", str(charging), "--region-map",
                     str(region_map), "--out", str(tmp_path / "out")])
        assert code == 3
        assert ":3:" in capsys.readouterr().err

    def test_unit_rows_without_count_column(self, tmp_path, region_map):
        trips = write_events(tmp_path / "trips.csv", [(START.isoformat(), "B")] * 2, with_count=False)
        charging = write_events(tmp_path / "charging.csv", [])
        main(["ingest", "--trips", str(trips), "--charging", str(charging), "--region-map", str(region_map),
              "--out", str(tmp_path / "out")])
        assert art.read_panel(tmp_path / "out" / "demand.csv")[0].values.tolist() == [[0.0, 2.0, 0.0]]

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 5), min_size=3, max_size=3), min_size=1, max_size=8))
    def test_expansion_round_trip(self, cells):
        panel = SeriesPanel(np.array(cells, dtype=float), 30.0, "demand")
        ids = ["A", "B", "C"]
        rows = list(art.expand_panel(panel, START, ids))
        times = [datetime.fromisoformat(r[0]) for r in rows]
        regions = np.array([ids.index(r[1]) for r in rows], dtype=int)
        counts = np.array([r[2] for r in rows], dtype=float)
        values, _ = art.aggregate_events(times, regions, counts, 3, START, panel.T, 30.0)
        assert np.array_equal(values, panel.values)


class TestFitAndUncertainty:
    def test_fit_then_uncertainty(self, small_run, tmp_path):
        out = tmp_path / "fit"
        assert main(["fit", "--demand", str(small_run / "history_demand.csv"), "--supply",
                     str(small_run / "history_supply.csv"), "--out", str(out)]) == 0
        models = json.loads((out / "models.json").read_text())
        assert models["tau"] == 2 and len(models["demand"]) == 3
        assert main(["uncertainty", "--run-dir", str(out), "--nb", "50"]) == 0
        sets = json.loads((out / "sets.json").read_text())
        assert sets["demand"]["gamma2"] >= max(sets["demand"]["gamma1"], 1.0)
        assert len(sets["supply"]["center"]) == 6


class TestSolve:
    def test_solve_instance(self, small_run, tmp_path):
        out = tmp_path / "plan.json"
        assert main(["solve", "--instance", str(small_run / "instance.json"), "--out", str(out)]) == 0
        plan = json.loads(out.read_text())
        assert plan["status"] == "Optimal"
        assert np.array(plan["plan"]["X"]).shape == (2, 3, 3)

    def test_env_tolerance(self, small_run, tmp_path, monkeypatch):
        monkeypatch.setenv("DRO_SOLVER_TOL", "1e-6")
        out = tmp_path / "plan.json"
        main(["solve", "--instance", str(small_run / "instance.json"), "--mode", "nonrobust", "--out", str(out)])
        assert json.loads(out.read_text())["tol"] == 1e-6

    def test_flag_beats_env(self, small_run, tmp_path, monkeypatch):
        monkeypatch.setenv("DRO_SOLVER_TOL", "1e-6")
        out = tmp_path / "plan.json"
        main(["solve", "--instance", str(small_run / "instance.json"), "--solver-tol", "1e-7", "--out", str(out)])
        assert json.loads(out.read_text())["tol"] == 1e-7

    def test_missing_inputs_is_config_error(self, tmp_path):
        assert main(["solve", "--out", str(tmp_path / "p.json")]) == 2

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["solve", "--instance", str(tmp_path / "nope.json"), "--out", str(tmp_path / "p.json")]) == 3


class TestPipeline:
    def test_manifest_and_hashes(self, small_run):
        manifest = json.loads((small_run / "manifest.json").read_text())
        assert manifest["stages"] == ["scenario", "fit", "ambiguity", "simulate", "compare"]
        chash = manifest["config_hash"]
        for name, entry in manifest["artifacts"].items():
            path = small_run / entry["path"].split("/")[-1]
            if path.suffix == ".json":
                assert json.loads(path.read_text())["config_hash"] == chash, name
            elif path.suffix == ".csv":
                assert art.read_csv(path)[0] == chash, name
        for fig in ("fig_jd_realized.png", "fig_unfair_ratio.png", "fig_unfair_util.png"):
            assert (small_run / fig).stat().st_size > 0

    def test_metrics_header(self, small_run):
        _, header, rows = art.read_csv(small_run / "metrics.csv")
        assert ",".join(header) == "step,policy,seed,jd_realized,unfair_ratio,unfair_util,solve_ms,retries"
        assert len(rows) == 2 * 2 * 3
        assert {r[6] for r in rows} == {"NA"}

    def test_rerun_from_manifest_bit_identical(self, small_run, tmp_path):
        assert main(["pipeline", "--manifest", str(small_run / "manifest.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == (small_run / "metrics.csv").read_bytes()

    def test_manifest_rerun_refuses_overrides(self, small_run, tmp_path):
        assert main(["pipeline", "--manifest", str(small_run / "manifest.json"), "--seed", "3",
                     "--out", str(tmp_path)]) == 2

    def test_nonrobust_only_skips_ambiguity(self, tmp_path):
        assert main(["pipeline", "--out", str(tmp_path), "--regions", "3", "--history-days", "2", "--n-seeds", "1",
                     "--steps", "2", "--mode", "nonrobust-only"]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert "ambiguity" not in manifest["stages"]
        assert not (tmp_path / "sets.json").exists()
        _, _, rows = art.read_csv(tmp_path / "metrics.csv")
        assert {r[1] for r in rows} == {"NonRobust"}

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = art.RunConfig(seed=4, n_seeds=1, steps=2, NB=20, city=art.CityConfig(N=3, history_days=2),
                            policies=("NoOp",))
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert main(["pipeline", "--config", str(path), "--seed", "5", "--out", str(tmp_path / "o")]) == 0
        stored = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
        assert stored["seed"] == 5 and stored["n_seeds"] == 1 and stored["city"]["N"] == 3

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 1, "bogus": 2}))
        assert main(["pipeline", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_short_flags_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["pipeline", "--o", str(tmp_path)])
        assert exc.value.code == 2


class TestCompareCommand:
    def test_rejects_mixed_hashes(self, small_run, tmp_path, capsys):
        for name in ("metrics.csv",):
            (tmp_path / name).write_bytes((small_run / name).read_bytes())
        _, header, rows = art.read_csv(small_run / "metrics.csv")
        art.write_csv(tmp_path / "metrics_extra.csv", header, rows, chash="0" * 64)
        assert main(["compare", "--run-dir", str(tmp_path)]) == 3
        assert "hash mismatch" in capsys.readouterr().err

    def test_summary_written(self, small_run):
        _, header, rows = art.read_csv(small_run / "summary.csv")
        assert header[:3] == ("policy", "metric", "mean")
        assert len(rows) == 6


class TestRunConfig:
    def test_round_trip(self):
        cfg = art.RunConfig(seed=3, policies=("robust", "noop"))
        assert art.RunConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.policies == ("Robust", "NoOp")

    def test_hash_changes_with_seed(self):
        assert art.RunConfig(seed=1).hash() != art.RunConfig(seed=2).hash()
        assert art.RunConfig(seed=1).hash() == art.RunConfig(seed=1).hash()

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        art.write_atomic(tmp_path / "a.txt", "x")
        art.write_atomic(tmp_path / "a.txt", "y")
        assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
        assert (tmp_path / "a.txt").read_text() == "y"
