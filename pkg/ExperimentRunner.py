import csv
import json
import logging
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from functools import reduce

from dcache.config import ExperimentConfig
from dcache.engine import generate, reference_generate
from dcache.exceptions import ConfigError, InvariantViolation
from dcache.metrics import (
    CORRELATION_FIELDS,
    CSV_FIELDS,
    TRACE_FIELDS,
    analytic_flops,
    compare_outputs,
    speedup,
)
from dcache.model import init_model
from dcache.plots import plot_sweep
from dcache.tokenizer import detokenize, reserved_ids

logger = logging.getLogger(__name__)

MODES = ("baseline", "cached", "compare")
SWEEP_HEADER = ("prompt_interval", "response_interval", "update_ratio", "selection",
                "flops", "analytic_flops", "speedup", "match_rate")


def _plain(value):
    """JSON-safe copy with enums flattened to their values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return getattr(value, "value", value)


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, jobs=1):
        self.cfg = cfg
        self.out_dir = out_dir or cfg.output_dir
        self.jobs = max(1, int(jobs))
        self.params = init_model(cfg.model)
        self._pending = set()
        self._lock = threading.Lock()

        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {self.out_dir}: {e}") from None
        print(f"[INFO] Writing results to {os.path.abspath(self.out_dir)}")

    # -- file output -------------------------------------------------------

    def _atomic_write(self, name, write):
        """Write through a temp file in the output directory, then rename over ``name``."""
        path = os.path.join(self.out_dir, name)
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix=".tmp")
        with self._lock:
            self._pending.add(tmp)
        try:
            with os.fdopen(fd, "w", newline="", encoding="utf-8") as f:
                write(f)
            os.replace(tmp, path)
        finally:
            with self._lock:
                self._pending.discard(tmp)
            if os.path.exists(tmp):
                os.remove(tmp)
        logger.debug("wrote %s", path)
        return path

    def _write_csv(self, name, header, rows):
        def write(f):
            writer = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        return self._atomic_write(name, write)

    def _write_json(self, name, data):
        def write(f):
            json.dump(_plain(data), f, indent=2, sort_keys=True)
            f.write("\n")
        return self._atomic_write(name, write)

    def cleanup(self):
        """Remove temp files of writes interrupted mid-flight."""
        with self._lock:
            pending = list(self._pending)
            self._pending.clear()
        for tmp in pending:
            try:
                os.remove(tmp)
            except OSError:
                pass

    # -- checks ------------------------------------------------------------

    def check_run(self, result, policy=None):
        cfg, gen = self.cfg.model, self.cfg.gen
        metrics = result.metrics
        if len(metrics.per_step) != gen.steps:
            raise InvariantViolation(f"{len(metrics.per_step)} step records for {gen.steps} steps")
        expected = analytic_flops(cfg, gen, policy)
        if metrics.total_flops != expected:
            raise InvariantViolation(
                f"FLOP ledger {metrics.total_flops} disagrees with analytic count {expected}"
            )
        if (result.tokens == cfg.mask_token_id).any():
            raise InvariantViolation("response still contains mask tokens")
        if policy is not None:
            footprint = 4 * cfg.num_layers * (gen.prompt_len + gen.gen_len) * cfg.hidden_dim
            if metrics.cache_elements != footprint:
                raise InvariantViolation(
                    f"cache holds {metrics.cache_elements} elements, expected {footprint}"
                )
            if policy.enabled and metrics.refresh_counts.total != (gen.steps - 1) * cfg.num_layers:
                raise InvariantViolation("refresh counts do not cover every cached layer step")
        return expected

    # -- runs --------------------------------------------------------------

    def _config_summary(self, policy=None):
        policy = policy or self.cfg.policy
        return {
            "model": asdict(self.cfg.model),
            "generation": {
                "steps": self.cfg.gen.steps,
                "gen_len": self.cfg.gen.gen_len,
                "block_len": self.cfg.gen.block_len,
                "prompt_len": self.cfg.gen.prompt_len,
            },
            "policy": asdict(policy),
        }

    def _run_summary(self, result, analytic):
        out = result.metrics.summary()
        out["analytic_flops"] = analytic
        out["tokens"] = [int(t) for t in result.tokens]
        out["text"] = detokenize(result.tokens)
        return out

    def _write_trace(self, result):
        tracer = result.tracer
        records = tracer.records()
        self._write_csv("trace.csv", TRACE_FIELDS, (
            dict(zip(TRACE_FIELDS, (r.step, r.layer, r.token, r.sim_k, r.sim_v, r.sim_attn, r.sim_ffn)))
            for r in records
        ))
        self._write_csv("correlation.csv", CORRELATION_FIELDS,
                        (asdict(r) for r in tracer.correlations()))
        print(f"[INFO] Similarity trace: {len(records)} rows")

    def run(self, mode, trace=None):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
        trace = self.cfg.trace if trace is None else trace
        policy = self.cfg.policy
        summary = {"mode": mode, "reserved_ids": reserved_ids(), "config": self._config_summary()}

        baseline = cached = None
        if mode in ("baseline", "compare") or trace:
            baseline = reference_generate(self.params, self.cfg.gen, trace=trace)
            summary["baseline"] = self._run_summary(baseline, self.check_run(baseline))
            if trace:
                self._write_trace(baseline)
        if mode in ("cached", "compare"):
            cached = generate(self.params, self.cfg.gen, policy)
            summary["cached"] = self._run_summary(cached, self.check_run(cached, policy))

        if mode == "compare":
            divergence = compare_outputs(cached, baseline)
            cached.metrics.divergence = divergence
            summary["cached"]["divergence"] = asdict(divergence)
            summary["speedup"] = speedup(baseline.metrics, cached.metrics)
            summary["match_rate"] = divergence.match_rate
            summary["max_abs_diff"] = divergence.max_abs_diff
            print(f"[INFO] Speedup {summary['speedup']:.3f}x, match rate {divergence.match_rate:.4f}")

        primary = baseline if mode == "baseline" else cached
        summary["total_flops"] = primary.metrics.total_flops
        summary["cache_elements"] = primary.metrics.cache_elements
        self._write_csv("metrics.csv", CSV_FIELDS, primary.metrics.csv_rows())
        self._write_json("summary.json", summary)
        print(f"[INFO] {mode} run: {primary.metrics.total_flops} FLOPs over {self.cfg.gen.steps} steps")
        return summary

    def _sweep_point(self, policy, baseline):
        result = generate(self.params, self.cfg.gen, policy)
        analytic = self.check_run(result, policy)
        divergence = compare_outputs(result, baseline)
        row = {
            "prompt_interval": policy.prompt_interval,
            "response_interval": policy.response_interval,
            "update_ratio": policy.update_ratio,
            "selection": policy.selection.value,
            "flops": result.metrics.total_flops,
            "analytic_flops": analytic,
            "speedup": speedup(baseline.metrics, result.metrics),
            "match_rate": divergence.match_rate,
        }
        return row, result.metrics

    def sweep(self):
        grid = self.cfg.sweep
        if grid is None:
            raise ConfigError("config has no sweep section")
        points = grid.points(self.cfg.policy)
        print(f"[INFO] Sweeping {len(points)} grid points with {self.jobs} worker(s)")

        baseline = reference_generate(self.params, self.cfg.gen)
        baseline_flops = self.check_run(baseline)
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            done = list(pool.map(lambda p: self._sweep_point(p, baseline), points))
        rows = [row for row, _ in done]
        aggregate = reduce(lambda a, b: a.merge(b), (m for _, m in done))

        self._write_csv("sweep.csv", SWEEP_HEADER, rows)
        plots = plot_sweep(rows, grid.axes(), self.out_dir)
        self._write_json("summary.json", {
            "mode": "sweep",
            "reserved_ids": reserved_ids(),
            "config": self._config_summary(),
            "baseline_flops": baseline_flops,
            "points": len(rows),
            "aggregate": aggregate.summary(),
            "plots": sorted(os.path.basename(p) for p in plots),
        })
        print(f"[INFO] Sweep finished: {len(rows)} rows, {len(plots)} plots")
        return rows
