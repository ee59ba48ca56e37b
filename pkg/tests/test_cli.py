"""Tests for the command-line front end: configs, runs, reports, exports."""

import csv
import json

import pytest

from rts import ConfigError
from rts.cli import (
    WORKER_ENV,
    apply_overrides,
    main,
    parse_override,
    validate_config,
)

FOUR_CORNERS = {
    "weights": [0.1, 0.3, 0.3, 0.3],
    "means": [[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]],
    "stddevs": [0.6, 0.6, 0.6, 0.6],
}


def base_config(out, **extra):
    cfg = {
        "dimension": 2,
        "solver": {"mode": "sde", "steps": 8, "churn": 0.4},
        "mixture": dict(FOUR_CORNERS),
        "reward": {"kind": "mode_preference", "preferred": 0, "sharpness": 2.0},
        "method": "free",
        "seed": 0,
        "replicates": 2,
        "out": str(out),
    }
    cfg.update(extra)
    return cfg


def write_config(tmp_path, name="config.json", **extra):
    out = tmp_path / "results.jsonl"
    path = tmp_path / name
    path.write_text(json.dumps(base_config(out, **extra)))
    return str(path), str(out)


def read_records(out):
    with open(out, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


class TestValidateConfig:
    def test_defaults_applied(self):
        cfg = validate_config(base_config("r.jsonl"))
        assert cfg["workers"] == 1
        assert cfg["budget_nfe"] is None
        assert cfg["search_init"] == {}
        assert cfg["k_keysteps"] == 6
        assert cfg["eval_steps_inter"] == 1
        assert cfg["resample_inter_fresh"] is True
        assert cfg["zo_step_tau"] == 0.9

    def test_unknown_top_level_key_names_path(self):
        raw = base_config("r.jsonl")
        raw["stepz"] = 4
        with pytest.raises(ConfigError, match="stepz"):
            validate_config(raw)

    def test_unknown_nested_key_names_dotted_path(self):
        raw = base_config("r.jsonl")
        raw["solver"]["stepz"] = 4
        with pytest.raises(ConfigError, match=r"solver\.stepz"):
            validate_config(raw)

    def test_missing_required_key(self):
        raw = base_config("r.jsonl")
        del raw["mixture"]
        with pytest.raises(ConfigError, match="mixture"):
            validate_config(raw)

    def test_boolean_rejected_where_integer_expected(self):
        raw = base_config("r.jsonl")
        raw["solver"]["steps"] = True
        with pytest.raises(ConfigError, match="boolean"):
            validate_config(raw)

    def test_unknown_reward_kind(self):
        raw = base_config("r.jsonl")
        raw["reward"] = {"kind": "likes"}
        with pytest.raises(ConfigError, match=r"reward\.kind"):
            validate_config(raw)

    def test_unknown_method(self):
        raw = base_config("r.jsonl", method="anneal")
        with pytest.raises(ConfigError, match="method"):
            validate_config(raw)

    def test_unknown_search_key(self):
        raw = base_config("r.jsonl", search_init={"neighbours": 3})
        with pytest.raises(ConfigError, match=r"search_init\.neighbours"):
            validate_config(raw)

    @pytest.mark.parametrize(
        "field,value",
        [("seed", -1), ("seed", 2**64), ("replicates", 0), ("workers", 0), ("dimension", 1)],
    )
    def test_out_of_range_values(self, field, value):
        raw = base_config("r.jsonl", **{field: value})
        with pytest.raises(ConfigError, match=field):
            validate_config(raw)


class TestOverrides:
    def test_json_values_parse(self):
        assert parse_override("search_init.alpha=0.65") == ("search_init.alpha", 0.65)
        assert parse_override("replicates=3") == ("replicates", 3)
        assert parse_override("resample_inter_fresh=false") == ("resample_inter_fresh", False)

    def test_bare_strings_pass_through(self):
        assert parse_override("method=free") == ("method", "free")
        assert parse_override("solver.mode=sde") == ("solver.mode", "sde")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="KEY=VALUE"):
            parse_override("replicates")

    def test_dotted_paths_reach_nested_sections(self):
        raw = base_config("r.jsonl")
        merged = apply_overrides(raw, {"solver.steps": 16, "search_init.tau": 0.7})
        assert merged["solver"]["steps"] == 16
        assert merged["search_init"] == {"tau": 0.7}
        assert raw["solver"]["steps"] == 8  # original untouched

    def test_override_inside_scalar_rejected(self):
        raw = base_config("r.jsonl")
        with pytest.raises(ConfigError, match="seed"):
            apply_overrides(raw, {"seed.low": 1})


class TestRunCommand:
    def test_free_run_writes_records(self, tmp_path, capsys):
        config, out = write_config(tmp_path)
        assert main(["run", "--config", config]) == 0
        records = read_records(out)
        assert len(records) == 2
        for index, record in enumerate(records):
            assert record["method"] == "free"
            assert record["seed"] == index
            assert record["nfe_used"] == 16
            assert record["hit"] in (True, False)
            assert record["truncated"] is False
        assert "wrote 2 record(s)" in capsys.readouterr().out

    def test_rts_without_interior_steps_reports_empty_key_steps(self, tmp_path):
        config, out = write_config(
            tmp_path,
            solver={"mode": "ode", "steps": 4},
            method="rts",
            replicates=1,
            search_init={"n_neighbors": 2, "rounds": 2},
        )
        assert main(["run", "--config", config]) == 0
        assert read_records(out)[0]["key_steps"] == []

    def test_run_appends_to_existing_results(self, tmp_path):
        config, out = write_config(tmp_path, replicates=1)
        assert main(["run", "--config", config]) == 0
        assert main(["run", "--config", config]) == 0
        assert len(read_records(out)) == 2

    def test_reruns_identical_except_wall_time(self, tmp_path):
        config, _ = write_config(tmp_path, method="rts", replicates=2)
        first = tmp_path / "a.jsonl"
        second = tmp_path / "b.jsonl"
        assert main(["run", "--config", config, "--out", str(first)]) == 0
        assert main(["run", "--config", config, "--out", str(second)]) == 0
        a, b = read_records(first), read_records(second)
        for left, right in zip(a, b):
            left.pop("wall_ms")
            right.pop("wall_ms")
            # overrides echo the differing --out flags; everything else matches
            assert left.pop("overrides") == {"out": str(first)}
            assert right.pop("overrides") == {"out": str(second)}
            assert left == right

    def test_parallel_run_matches_serial(self, tmp_path):
        config, _ = write_config(tmp_path, replicates=4)
        serial = tmp_path / "serial.jsonl"
        parallel = tmp_path / "parallel.jsonl"
        assert main(["run", "--config", config, "--out", str(serial), "workers=1"]) == 0
        assert main(["run", "--config", config, "--out", str(parallel), "workers=3"]) == 0
        a, b = read_records(serial), read_records(parallel)
        assert len(a) == len(b) == 4
        for left, right in zip(a, b):
            for record in (left, right):
                record.pop("wall_ms")
                record.pop("overrides")
            assert left == right

    def test_worker_env_cap_must_be_positive_integer(self, tmp_path, monkeypatch, capsys):
        config, _ = write_config(tmp_path)
        monkeypatch.setenv(WORKER_ENV, "zero")
        assert main(["run", "--config", config]) == 2
        assert WORKER_ENV in capsys.readouterr().err

    def test_unknown_config_key_exits_2_with_dotted_path(self, tmp_path, capsys):
        out = tmp_path / "r.jsonl"
        raw = base_config(out)
        raw["solver"]["typo"] = 1
        config = tmp_path / "config.json"
        config.write_text(json.dumps(raw))
        assert main(["run", "--config", str(config)]) == 2
        assert "solver.typo" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_invalid_json_config_exits_2(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text("{not json")
        assert main(["run", "--config", str(config)]) == 2
        assert "not valid JSON" in capsys.readouterr().err

    def test_budget_required_for_bon_exits_2(self, tmp_path, capsys):
        config, _ = write_config(tmp_path, method="bon")
        assert main(["run", "--config", config]) == 2
        assert "budget_nfe" in capsys.readouterr().err

    def test_overrides_interleave_with_flags_and_are_echoed(self, tmp_path):
        config, out = write_config(tmp_path)
        code = main(
            ["run", "--config", config, "solver.churn=0.5", "--replicates", "1", "seed=7"]
        )
        assert code == 0
        record = read_records(out)[0]
        assert record["seed"] == 7
        assert record["overrides"] == {"solver.churn": 0.5, "seed": 7, "replicates": 1}

    def test_malformed_positional_argument_exits_2(self, tmp_path, capsys):
        config, _ = write_config(tmp_path)
        assert main(["run", "--config", config, "replicates"]) == 2
        assert "KEY=VALUE" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, tmp_path):
        config, _ = write_config(tmp_path)
        with pytest.raises(SystemExit) as excinfo:
            main(["run", "--config", config, "--turbo"])
        assert excinfo.value.code == 2

    def test_override_changes_behavior(self, tmp_path):
        config, out = write_config(tmp_path, replicates=1)
        assert main(["run", "--config", config, "solver.steps=12"]) == 0
        assert read_records(out)[0]["nfe_used"] == 24


class TestReportCommand:
    def _results_with_two_methods(self, tmp_path):
        config, out = write_config(tmp_path, replicates=6)
        assert main(["run", "--config", config]) == 0
        assert main(["run", "--config", config, "method=bon", "budget_nfe=32"]) == 0
        return out

    def test_report_prints_table_and_writes_summary(self, tmp_path, capsys):
        out = self._results_with_two_methods(tmp_path)
        summary_path = tmp_path / "summary.json"
        assert main(["report", out, "--out", str(summary_path)]) == 0
        text = capsys.readouterr().out
        assert "free" in text and "bon" in text
        assert "one-sided p-values" in text
        summary = json.loads(summary_path.read_text())
        assert set(summary["methods"]) == {"bon", "free"}
        assert summary["methods"]["free"]["n"] == 6
        assert summary["methods"]["bon"]["mean_nfe"] == 32.0
        for p in summary["comparisons"].values():
            assert 0.0 <= p <= 1.0

    def test_identical_rewards_report_half_p_value(self, tmp_path):
        results = tmp_path / "results.jsonl"
        rows = []
        for method in ("alpha", "beta"):
            for seed in range(6):
                rows.append(
                    {
                        "method": method,
                        "seed": seed,
                        "final_reward": 1.25,
                        "nfe_used": 10,
                        "truncated": False,
                        "hit": None,
                    }
                )
        results.write_text("".join(json.dumps(r) + "\n" for r in rows))
        summary_path = tmp_path / "summary.json"
        assert main(["report", str(results), "--out", str(summary_path)]) == 0
        summary = json.loads(summary_path.read_text())
        assert summary["comparisons"]["alpha>beta"] == 0.5
        assert summary["comparisons"]["beta>alpha"] == 0.5

    def test_single_record_has_zero_stddev(self, tmp_path):
        config, out = write_config(tmp_path, replicates=1)
        assert main(["run", "--config", config]) == 0
        summary_path = tmp_path / "summary.json"
        assert main(["report", out, "--out", str(summary_path)]) == 0
        summary = json.loads(summary_path.read_text())
        assert summary["methods"]["free"]["stddev_reward"] == 0.0

    def test_default_summary_path_derives_from_results(self, tmp_path):
        config, out = write_config(tmp_path, replicates=1)
        assert main(["run", "--config", config]) == 0
        assert main(["report", out]) == 0
        assert (tmp_path / "results.jsonl.summary.json").exists()

    def test_empty_results_file_exits_2(self, tmp_path, capsys):
        results = tmp_path / "results.jsonl"
        results.write_text("")
        assert main(["report", str(results)]) == 2
        assert "empty" in capsys.readouterr().err

    def test_missing_results_file_exits_2(self, tmp_path):
        assert main(["report", str(tmp_path / "absent.jsonl")]) == 2

    def test_corrupt_results_line_exits_2(self, tmp_path, capsys):
        results = tmp_path / "results.jsonl"
        results.write_text('{"method": "free"}\n{oops\n')
        assert main(["report", str(results)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_report_rejects_overrides(self, tmp_path):
        config, out = write_config(tmp_path, replicates=1)
        assert main(["run", "--config", config]) == 0
        with pytest.raises(SystemExit) as excinfo:
            main(["report", out, "seed=3"])
        assert excinfo.value.code == 2


class TestExportTrajectory:
    def _export(self, tmp_path, *overrides, **extra):
        config, _ = write_config(tmp_path, **extra)
        out = tmp_path / "trajectory.csv"
        code = main(["export-trajectory", "--config", config, "--out", str(out), *overrides])
        assert code == 0
        with open(out, newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))

    def test_row_count_and_schema(self, tmp_path):
        rows = self._export(tmp_path)
        assert len(rows) == 9  # steps + 1 points
        assert list(rows[0]) == ["step", "t", "p1", "p2", "p3", "curvature", "selected"]
        assert float(rows[0]["t"]) == 1.0
        assert float(rows[-1]["t"]) == 0.0

    def test_selected_count_matches_k_and_skips_endpoints(self, tmp_path):
        rows = self._export(tmp_path)
        selected = [int(r["selected"]) for r in rows]
        assert sum(selected) == 6
        assert selected[0] == 0 and selected[-1] == 0

    def test_endpoint_curvature_is_zero(self, tmp_path):
        rows = self._export(tmp_path)
        assert float(rows[0]["curvature"]) == 0.0
        assert float(rows[-1]["curvature"]) == 0.0
        interior = [float(r["curvature"]) for r in rows[1:-1]]
        assert all(c >= 0.0 for c in interior)

    def test_export_is_deterministic(self, tmp_path):
        first = self._export(tmp_path)
        second = self._export(tmp_path)
        assert first == second

    def test_overrides_apply_to_export(self, tmp_path):
        rows = self._export(tmp_path, "solver.steps=12", "k_keysteps=2")
        assert len(rows) == 13
        assert sum(int(r["selected"]) for r in rows) == 2