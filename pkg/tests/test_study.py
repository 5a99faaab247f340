import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermoforge.cli import main as cli_main
from thermoforge.spatial import DeviceLayout
from thermoforge.study import (
    RankedPopulation,
    StudyEntry,
    StudySpec,
    StudyError,
    build_population,
    percentile_scores,
    rank,
    run_study,
)

TINY_OLOC = {"segments": 12, "mesh_refinements": 0, "dense_points": 41}


def entry(notation, t_end, success=True, status="optimal"):
    return StudyEntry(notation=notation, t_end=t_end, objective=t_end,
                      penalty=0.0, status=status, success=success,
                      wall_arrival_spread=0.0, config_index=0)


class TestPercentiles:
    def test_three_point_definition(self):
        assert percentile_scores([10.0, 20.0, 30.0]) == [0.0, 50.0, 100.0]

    def test_all_equal_scores_zero(self):
        assert percentile_scores([5.0, 5.0, 5.0]) == [0.0, 0.0, 0.0]

    def test_single_entry(self):
        assert percentile_scores([42.0]) == [0.0]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=0, max_value=1e4, allow_nan=False),
                    min_size=1, max_size=25))
    def test_against_counting_oracle(self, values):
        scores = percentile_scores(values)
        n = len(values)
        for v, s in zip(values, scores):
            lower = sum(1 for o in values if o < v)
            expected = 0.0 if n == 1 else 100.0 * lower / (n - 1)
            assert s == pytest.approx(expected)
        assert all(0.0 <= s <= 100.0 for s in scores)


class TestRank:
    def test_sorted_descending_with_ties_by_notation(self):
        entries = [entry("0 (2,1)", 10.0), entry("0 (1,2)", 10.0),
                   entry("0 (1) (2)", 30.0)]
        ranked = rank(entries)
        assert [e.notation for e in ranked.entries] == [
            "0 (1) (2)", "0 (1,2)", "0 (2,1)"]
        assert ranked.percentiles == (100.0, 0.0, 0.0)

    def test_failures_separated(self):
        entries = [entry("0 (1,2)", 10.0),
                   entry("0 (2,1)", float("nan"), success=False, status="error: x")]
        ranked = rank(entries)
        assert len(ranked.entries) == 1
        assert len(ranked.failures) == 1
        assert ranked.failures[0].notation == "0 (2,1)"

    def test_no_successes(self):
        with pytest.raises(StudyError):
            rank([entry("0 (1)", float("nan"), success=False)])

    def test_best_worst(self):
        ranked = rank([entry("0 (1,2)", 10.0), entry("0 (2,1)", 12.0)])
        assert ranked.best.notation == "0 (2,1)"
        assert ranked.worst.notation == "0 (1,2)"


def two_device_spec(tmp_path, parallelism=1, out=True):
    return StudySpec(
        layout=DeviceLayout(np.array([[0.0, 0, 0], [1.0, 0, 0]])),
        loads_w={1: 7000.0, 2: 4000.0},
        strategy="single_split",
        oloc=__import__("thermoforge.oloc", fromlist=["OlocOptions"]).OlocOptions(
            **TINY_OLOC),
        parallelism=parallelism,
        out_dir=str(tmp_path / "out") if out else None,
    )


class TestSpec:
    def test_from_json(self, tmp_path):
        spec = StudySpec.from_json(json.dumps({
            "layout": {"positions": [[0, 0, 0], [1, 0, 0]],
                       "heat_loads_kw": [7, 4]},
            "strategy": "single_split",
            "oloc": TINY_OLOC,
            "parallelism": 2,
        }))
        assert spec.loads_w == {1: 7000.0, 2: 4000.0}
        assert spec.oloc.segments == 12

    def test_loads_override_layout(self):
        spec = StudySpec.from_json(json.dumps({
            "layout": {"positions": [[0, 0, 0]], "heat_loads_kw": [7]},
            "loads_kw": [9],
            "strategy": "single_split",
        }))
        assert spec.loads_w == {1: 9000.0}

    def test_missing_loads(self):
        with pytest.raises(StudyError):
            StudySpec.from_json(json.dumps({
                "layout": {"positions": [[0, 0, 0]]},
                "strategy": "single_split",
            }))

    def test_unknown_strategy(self):
        with pytest.raises(StudyError):
            StudySpec(layout=DeviceLayout(np.array([[0.0, 0, 0]])),
                      loads_w={1: 1.0}, strategy="genetic")

    def test_layout_file_reference(self, tmp_path):
        (tmp_path / "layout.json").write_text(json.dumps({
            "positions": [[0, 0, 0], [9, 0, 0]], "heat_loads_kw": [5, 5]}))
        spec = StudySpec.from_json(json.dumps({
            "layout_file": "layout.json", "strategy": "single_split"}),
            base_dir=tmp_path)
        assert spec.layout.device_count == 2


class TestPopulations:
    def test_single_split_population(self, tmp_path):
        spec = two_device_spec(tmp_path, out=False)
        pop = build_population(spec)
        assert set(pop.notations()) == {"0 (1) (2)", "0 (1,2)", "0 (2,1)"}

    def test_config_num_selects_one(self, tmp_path):
        spec = two_device_spec(tmp_path, out=False)
        spec = StudySpec(**{**spec.__dict__, "config_num": 1})
        pop = build_population(spec)
        assert len(pop) == 1

    def test_spatial_population(self):
        positions = np.array([[2, 0, 0], [2, 1, 0], [3, 1, 0],
                              [12, 12, 0], [15, 10, 0], [13, 13, 0]], dtype=float)
        spec = StudySpec(layout=DeviceLayout(positions),
                         loads_w={i: 5000.0 for i in range(1, 7)},
                         strategy="spatial_junctions", num_levels=1)
        pop = build_population(spec)
        assert len(pop) == 9

    def test_enumerated_junctions_population(self):
        spec = StudySpec(layout=DeviceLayout(np.array([[0., 0, 0], [1., 0, 0]])),
                         loads_w={1: 1.0, 2: 1.0},
                         strategy="enumerated_junctions", junctions=1)
        assert set(build_population(spec).notations()) == {"0 (1,2)", "0 (2,1)"}


@pytest.fixture(scope="module")
def study_result(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("study")
    spec = two_device_spec(tmp)
    return spec, run_study(spec), tmp


class TestRunStudy:
    def test_every_config_accounted_for(self, study_result):
        spec, ranked, _ = study_result
        assert len(ranked.entries) + len(ranked.failures) == 3

    def test_artifacts_written(self, study_result):
        spec, ranked, tmp = study_result
        out = tmp / "out"
        assert json.loads((out / "population.json").read_text()) == [
            "0 (1) (2)", "0 (1,2)", "0 (2,1)"]
        lines = (out / "ranking.csv").read_text().splitlines()
        assert lines[0] == "rank,notation,t_end_s,objective,penalty,status"
        assert len(lines) == 1 + len(ranked.entries)
        pct = (out / "percentile.csv").read_text().splitlines()
        assert len(pct) == 1 + len(ranked.entries)
        assert sorted(p.name for p in (out / "solutions").iterdir()) == [
            "cfg_000.csv", "cfg_001.csv", "cfg_002.csv"]
        summary = (out / "summary.txt").read_text()
        assert ranked.best.notation in summary

    def test_parallel_matches_serial(self, study_result, tmp_path):
        spec, ranked, _ = study_result
        par_spec = two_device_spec(tmp_path, parallelism=2)
        par = run_study(par_spec)
        assert [e.notation for e in par.entries] == [e.notation for e in ranked.entries]
        assert [e.t_end for e in par.entries] == [e.t_end for e in ranked.entries]

    def test_rerun_byte_identical(self, study_result, tmp_path):
        spec, _, tmp = study_result
        spec2 = two_device_spec(tmp_path)
        run_study(spec2)
        for name in ("ranking.csv", "percentile.csv", "population.json"):
            assert (tmp / "out" / name).read_bytes() == \
                (tmp_path / "out" / name).read_bytes()

    def test_parallel_flag_heeds_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("THERMOFORGE_WORKERS", "1")
        spec = two_device_spec(tmp_path, parallelism=8)
        from thermoforge.study import _worker_count
        assert _worker_count(spec) == 1


class TestCli:
    def test_count(self, capsys):
        assert cli_main(["count", "--nodes", "3"]) == 0
        assert capsys.readouterr().out.strip() == "13"

    def test_count_with_junctions(self, capsys):
        assert cli_main(["count", "--nodes", "2", "--junctions", "2"]) == 0
        assert capsys.readouterr().out.strip() == "5"

    def test_enumerate_to_file(self, tmp_path, capsys):
        out = tmp_path / "pop.json"
        assert cli_main(["enumerate", "--nodes", "2", "--out", str(out)]) == 0
        assert json.loads(out.read_text()) == ["0 (1) (2)", "0 (1,2)", "0 (2,1)"]

    def test_cluster(self, tmp_path, capsys):
        layout = tmp_path / "layout.json"
        layout.write_text(json.dumps({
            "positions": [[2, 0, 0], [2, 1, 0], [3, 1, 0],
                          [12, 12, 0], [15, 10, 0], [13, 13, 0]]}))
        assert cli_main(["cluster", "--layout", str(layout), "--levels", "1"]) == 0
        obj = json.loads(capsys.readouterr().out)
        assert obj["achieved_levels"] == 1
        assert [sn["junction"] for sn in obj["levels"][1]] == [2, 4]

    def test_solve(self, tmp_path, capsys):
        opts = tmp_path / "oloc.json"
        opts.write_text(json.dumps(TINY_OLOC))
        out = tmp_path / "sol"
        code = cli_main(["solve", "--config", "0 (1)", "--loads", "8",
                         "--options", str(opts), "--out", str(out)])
        assert code == 0
        assert (out / "trajectory.csv").exists()
        summary = json.loads((out / "solution.json").read_text())
        assert summary["config"] == "0 (1)"
        assert capsys.readouterr().out.startswith("config:")

    def test_solve_load_count_mismatch(self, capsys):
        assert cli_main(["solve", "--config", "0 (1,2)", "--loads", "8"]) == 2

    def test_run(self, tmp_path, capsys):
        spec_file = tmp_path / "study.json"
        spec_file.write_text(json.dumps({
            "layout": {"positions": [[0, 0, 0], [1, 0, 0]],
                       "heat_loads_kw": [7, 4]},
            "strategy": "single_split",
            "oloc": TINY_OLOC,
            "out_dir": str(tmp_path / "results"),
        }))
        assert cli_main(["run", "--spec", str(spec_file)]) == 0
        assert (tmp_path / "results" / "ranking.csv").exists()
        assert "rank" in capsys.readouterr().out
