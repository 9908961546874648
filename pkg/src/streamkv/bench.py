"""Latency/memory harness over the engine modes.

Every mode is driven over the same seeded stream. Each second carries exactly
``text_budget_per_second`` narration tokens, so all modes do identical work
apart from their context policy. A run is repeated ``reps`` times and the
per-second latency reported is the median across repetitions.

Per-token latency of a second = wall time of the second's compute (prefill,
any recompute, text decode, eviction) divided by the tokens in its text slot.
Frame embedding happens before the clock starts.

Summaries discard the first ``warmup`` seconds, by default the time the
streaming cache needs to saturate every tier.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .engine import EngineMode, StreamEvent, StreamingEngine, synthetic_stream
from .errors import ContextLimitExceeded, ContractViolation
from .streamcache import StreamConfig
from .tinymodel import ModelConfig, init_model

SCHEMA_VERSION = 1
CSV_COLUMNS = ["mode", "second", "per_token_latency_us", "context_len", "peak_cache_entries"]
DEFAULT_REPS = 5
SEGMENTS = 5


@dataclass(frozen=True)
class LatencyRecord:
    mode: str
    second: int
    per_token_latency_us: float
    context_len: int
    peak_cache_entries: int

    def row(self) -> list:
        return [self.mode, self.second, self.per_token_latency_us, self.context_len, self.peak_cache_entries]


@dataclass
class BenchReport:
    config: dict
    series: dict[str, list[LatencyRecord]]
    summary: dict[str, dict] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "series": {
                m: [
                    {"second": r.second, "per_token_latency_us": r.per_token_latency_us,
                     "context_len": r.context_len, "peak_cache_entries": r.peak_cache_entries}
                    for r in recs
                ]
                for m, recs in self.series.items()
            },
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ContractViolation(f"unsupported bench schema {d.get('schema_version')!r}")
        series = {
            m: [LatencyRecord(m, r["second"], r["per_token_latency_us"], r["context_len"], r["peak_cache_entries"])
                for r in recs]
            for m, recs in d["series"].items()
        }
        return cls(d["config"], series, d["summary"], d["schema_version"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, fp: IO[str]) -> None:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for recs in self.series.values():
            for r in recs:
                w.writerow(r.row())

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def read_csv(fp: IO[str]) -> list[LatencyRecord]:
    reader = csv.DictReader(fp)
    if reader.fieldnames != CSV_COLUMNS:
        raise ContractViolation(f"unexpected CSV header {reader.fieldnames}")
    return [
        LatencyRecord(r["mode"], int(r["second"]), float(r["per_token_latency_us"]),
                      int(r["context_len"]), int(r["peak_cache_entries"]))
        for r in reader
    ]


def warmup_seconds(config: StreamConfig) -> int:
    """Seconds until every bounded tier of the streaming cache is full."""
    text = (config.t_sink or 0) + (config.t_window or 0)
    rate = max(config.text_budget_per_second, 1)
    return max(math.ceil(text / rate), config.v_window_seconds or 0) + 1


def bench_stream(seconds: int, config: StreamConfig, seed: int, vocab_size: int) -> list[StreamEvent]:
    n = config.text_budget_per_second
    return synthetic_stream(seconds, config, seed=seed, vocab_size=vocab_size,
                            narration_density=1.0, narration_len=(n, n))


def decile_medians(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    k = max(1, len(v) // 10)
    return float(np.median(v[:k])), float(np.median(v[-k:]))


def segment_medians(values: Sequence[float], segments: int = SEGMENTS) -> list[float]:
    return [float(np.median(part)) for part in np.array_split(np.asarray(values, dtype=float), segments) if len(part)]


def autocorrelation(values: Sequence[float], max_lag: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    v = v - v.mean()
    denom = float(np.dot(v, v)) or 1.0
    return np.array([float(np.dot(v[: len(v) - k], v[k:])) / denom for k in range(max_lag + 1)])


def acf_peak_lag(values: Sequence[float], period_hint: int) -> int | None:
    """Lag of the largest autocorrelation within ``[period/2, 3*period/2]``."""
    lo = max(1, period_hint // 2)
    hi = min(len(values) - 1, (3 * period_hint) // 2)
    if hi <= lo:
        return None
    acf = autocorrelation(values, hi)
    return int(lo + np.argmax(acf[lo : hi + 1]))


def summarize(records: list[LatencyRecord], warmup: int, mode: EngineMode, exceeded_at: int | None) -> dict:
    lat = [r.per_token_latency_us for r in records]
    steady = [r.per_token_latency_us for r in records if r.second >= warmup]
    out: dict = {"warmup": warmup, "seconds": len(records), "exceeded_at": exceeded_at,
                 "max_context": max((r.context_len for r in records), default=0)}
    if steady:
        first, last = decile_medians(steady)
        segs = segment_medians(steady)
        out.update({
            "first_decile_median_us": first,
            "last_decile_median_us": last,
            "growth_ratio": last / first if first else math.inf,
            "segment_medians_us": segs,
            "segment_spread": max(segs) / min(segs) - 1.0 if min(segs) > 0 else math.inf,
        })
    if mode.kind == "nooverlap":
        out["acf_peak_lag"] = acf_peak_lag(lat, mode.chunk_len)
    return out


def _run_mode(model, config, mode, events, reps, context_ceiling):
    lat_runs: list[list[float]] = []
    ctx: list[int] = []
    peak: list[int] = []
    exceeded_at = None
    for rep in range(reps):
        engine = StreamingEngine(model, config, mode, keep_logits=False, context_ceiling=context_ceiling)
        lats, c, p = [], [], []
        for ev in events:
            try:
                res = engine.step(ev)
            except ContextLimitExceeded:
                exceeded_at = ev.second
                break
            lats.append(res.stats.latency_us / max(res.stats.text_tokens, 1))
            c.append(res.stats.cache_size)
            p.append(res.stats.peak_size)
        lat_runs.append(lats)
        if rep == 0:
            ctx, peak = c, p
    n = min(len(r) for r in lat_runs)
    med = np.median(np.array([r[:n] for r in lat_runs]), axis=0) if n else np.zeros(0)
    label = mode.label()
    recs = [
        LatencyRecord(label, events[i].second, round(float(med[i]), 3), ctx[i], peak[i])
        for i in range(n)
    ]
    return label, recs, exceeded_at


def run_bench(
    modes: Sequence[EngineMode],
    seconds: int,
    config: StreamConfig,
    model_config: ModelConfig | None = None,
    *,
    seed: int = 0,
    reps: int = DEFAULT_REPS,
    warmup: int | None = None,
    context_ceiling: int | None = None,
    parallel: bool = False,
) -> BenchReport:
    model_config = model_config or ModelConfig()
    warmup = warmup_seconds(config) if warmup is None else warmup
    if seconds < warmup:
        raise ContractViolation(f"stream of {seconds} s is shorter than the {warmup} s warmup")
    model = init_model(model_config)
    events = bench_stream(seconds, config, seed, model_config.vocab_size)

    def job(mode):
        return mode, _run_mode(model, config, mode, events, reps, context_ceiling)

    if parallel:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(job, modes))
    else:
        results = [job(m) for m in modes]

    series, summary = {}, {}
    for mode, (label, recs, exceeded_at) in results:
        series[label] = recs
        summary[label] = summarize(recs, warmup, mode, exceeded_at)
    snapshot = {
        "stream": config.to_dict(),
        "model": {k: getattr(model_config, k) for k in
                  ("num_layers", "num_heads", "head_dim", "vocab_size", "ffn_dim", "seed", "rope_3d")},
        "modes": [m.label() for m in modes],
        "seconds": seconds,
        "seed": seed,
        "reps": reps,
        "warmup": warmup,
        "context_ceiling": context_ceiling,
    }
    return BenchReport(snapshot, series, summary)
