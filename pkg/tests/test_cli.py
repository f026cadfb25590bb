import csv
import json

import pytest

import main
from dcache.config import config_from_dict
from dcache.exceptions import InvariantViolation
from dcache.engine import generate
from dcache.metrics import CORRELATION_FIELDS, TRACE_FIELDS
from ExperimentRunner import ExperimentRunner


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class TestRunCommand:
    def test_compare_with_interval_one(self, tmp_path, write_config, tiny_experiment):
        tiny_experiment["policy"] = {"prompt_interval": 1, "response_interval": 1, "update_ratio": 0.25}
        out = tmp_path / "out"
        assert main.main(["run", "--config", str(write_config(tiny_experiment)),
                          "--mode", "compare", "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["match_rate"] == 1.0
        assert summary["speedup"] == 1.0
        assert summary["reserved_ids"] == {"mask": 256, "pad": 257}

    def test_cached_writes_one_row_per_step(self, tmp_path, write_config, tiny_experiment):
        out = tmp_path / "out"
        assert main.main(["run", "--config", str(write_config(tiny_experiment)),
                          "--mode", "cached", "--out", str(out)]) == 0
        with open(out / "metrics.csv", encoding="utf-8") as f:
            assert f.readline().strip() == "step,case_codes,flops,tokens_recomputed"
        rows = read_csv(out / "metrics.csv")
        assert [int(r["step"]) for r in rows] == list(range(8, 0, -1))
        assert rows[0]["case_codes"] == "II"

    def test_reproducible(self, tmp_path, write_config, tiny_experiment):
        path = str(write_config(tiny_experiment))
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main.main(["run", "--config", path, "--mode", "compare", "--out", str(out)]) == 0
            outputs.append(((out / "metrics.csv").read_bytes(), (out / "summary.json").read_bytes()))
        assert outputs[0] == outputs[1]

    def test_trace_files(self, tmp_path, write_config, tiny_experiment):
        out = tmp_path / "out"
        assert main.main(["run", "--config", str(write_config(tiny_experiment)),
                          "--mode", "baseline", "--trace", "--out", str(out)]) == 0
        rows = read_csv(out / "trace.csv")
        assert len(rows) == 7 * 2 * 12
        assert tuple(rows[0]) == TRACE_FIELDS
        assert tuple(read_csv(out / "correlation.csv")[0]) == CORRELATION_FIELDS

    def test_missing_config(self, tmp_path):
        assert main.main(["run", "--config", str(tmp_path / "missing.json"), "--mode", "cached"]) == 2

    def test_bad_config(self, write_config):
        assert main.main(["run", "--config", str(write_config({"bogus": 1})), "--mode", "cached"]) == 2

    def test_bad_mode(self, write_config, tiny_experiment):
        with pytest.raises(SystemExit) as exc:
            main.main(["run", "--config", str(write_config(tiny_experiment)), "--mode", "fast"])
        assert exc.value.code == 2

    def test_no_temp_files_left(self, tmp_path, write_config, tiny_experiment):
        out = tmp_path / "out"
        main.main(["run", "--config", str(write_config(tiny_experiment)), "--mode", "cached",
                   "--out", str(out)])
        assert not [p for p in out.iterdir() if p.name.endswith(".tmp")]


class TestSweepCommand:
    def test_grid(self, tmp_path, write_config, tiny_experiment):
        tiny_experiment["policy"] = {"prompt_interval": 8, "update_ratio": 0.25}
        tiny_experiment["sweep"] = {"response_interval": [1, 2, 4, 8]}
        out = tmp_path / "out"
        assert main.main(["sweep", "--config", str(write_config(tiny_experiment)),
                          "--out", str(out), "--jobs", "2"]) == 0
        rows = read_csv(out / "sweep.csv")
        assert [int(r["response_interval"]) for r in rows] == [1, 2, 4, 8]
        flops = [int(r["flops"]) for r in rows]
        assert flops == sorted(flops, reverse=True)
        assert all(r["flops"] == r["analytic_flops"] for r in rows)
        aggregate = json.loads((out / "summary.json").read_text())["aggregate"]
        assert aggregate["total_flops"] == sum(flops)
        assert sum(aggregate["flops_by_kind"].values()) == sum(flops)
        assert aggregate["refresh_counts"]["full"] + aggregate["refresh_counts"]["adaptive"] > 0
        assert (out / "speedup_vs_response_interval.svg").exists()
        assert (out / "match_rate_vs_response_interval.svg").exists()

    def test_single_point_matches_compare(self, tmp_path, write_config, tiny_experiment):
        tiny_experiment["sweep"] = {"update_ratio": [0.25]}
        path = str(write_config(tiny_experiment))
        assert main.main(["sweep", "--config", path, "--out", str(tmp_path / "s")]) == 0
        assert main.main(["run", "--config", path, "--mode", "compare", "--out", str(tmp_path / "r")]) == 0
        row = read_csv(tmp_path / "s" / "sweep.csv")[0]
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert float(row["speedup"]) == summary["speedup"]
        assert float(row["match_rate"]) == summary["match_rate"]
        assert int(row["flops"]) == summary["total_flops"]

    def test_requires_grid(self, write_config, tiny_experiment):
        assert main.main(["sweep", "--config", str(write_config(tiny_experiment))]) == 2

    @pytest.mark.parametrize("ratios", [["x"], [None], "abc"])
    def test_malformed_grid_exits_with_config_error(self, tmp_path, write_config, tiny_experiment, ratios):
        tiny_experiment["sweep"] = {"update_ratio": ratios}
        out = tmp_path / "out"
        assert main.main(["sweep", "--config", str(write_config(tiny_experiment)),
                          "--out", str(out)]) == 2
        assert not out.exists()

    @pytest.mark.parametrize("prompt", [{"text": 5}, {"file": 5}, {"file": ["a.txt"]}])
    def test_malformed_prompt_exits_with_config_error(self, write_config, tiny_experiment, prompt):
        tiny_experiment["prompt"] = prompt
        assert main.main(["run", "--config", str(write_config(tiny_experiment)), "--mode", "cached"]) == 2


class TestRunnerChecks:
    def test_tampered_ledger_is_caught(self, tmp_path, tiny_experiment):
        cfg = config_from_dict(tiny_experiment)
        runner = ExperimentRunner(cfg, out_dir=str(tmp_path))
        result = generate(runner.params, cfg.gen, cfg.policy)
        result.metrics.per_step[-1] = result.metrics.per_step[-1].__class__(
            step=1, cases="00", flops=result.metrics.per_step[-1].flops + 1, tokens_recomputed=0)
        with pytest.raises(InvariantViolation):
            runner.check_run(result, cfg.policy)
