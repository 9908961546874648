"""Per-second streaming decode loop and the baseline context policies.

Every second of the stream is processed the same way: embed the second's
frames, prefill their patches, then fill the text slot. The text slot holds
the narration when the event carries one (teacher forcing), otherwise
greedily generated tokens, and the ``...`` placeholder when the second ends
up silent. Budgets are enforced once the second is complete.

Modes differ only in what context survives between seconds:

``reuse``      three-tier cache, cached states reused as-is
``full``       nothing is ever dropped
``nooverlap``  everything is dropped at each chunk boundary
``overlap``    same retained set as ``reuse``, but its states are recomputed
               from scratch every ``stride`` seconds
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from typing import IO, Iterable, Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, ContextLimitExceeded, ContractViolation, ValidationError
from .streamcache import CacheEntry, EntryKind, StreamConfig, StreamingCache
from .tinymodel import EOS_ID, PLACEHOLDER_ID, AttentionBuffer, TinyModel, VisionPatch

STOP_IDS = frozenset({EOS_ID, PLACEHOLDER_ID})


class FrameSpec(NamedTuple):
    seed: int
    rows: int
    cols: int


@dataclass(frozen=True)
class StreamEvent:
    second: int
    frames: tuple[FrameSpec, ...] = ()
    narration: tuple[int, ...] | None = None

    def patches(self) -> list[VisionPatch]:
        return [
            VisionPatch(f.seed, self.second, fi, r, c)
            for fi, f in enumerate(self.frames)
            for r in range(f.rows)
            for c in range(f.cols)
        ]

    def to_dict(self) -> dict:
        return {
            "second": self.second,
            "frames": [{"seed": f.seed, "rows": f.rows, "cols": f.cols} for f in self.frames],
            "narration": None if self.narration is None else list(self.narration),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StreamEvent":
        try:
            frames = tuple(FrameSpec(int(f["seed"]), int(f["rows"]), int(f["cols"])) for f in d.get("frames") or ())
            narration = d.get("narration")
            return cls(int(d["second"]), frames, None if narration is None else tuple(int(t) for t in narration))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed stream event {d!r}: {exc}") from exc


@dataclass(frozen=True)
class EngineMode:
    kind: str = "reuse"
    chunk_len: int = 0
    window: int = 0
    stride: int = 1

    KINDS = ("reuse", "full", "nooverlap", "overlap")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown engine mode {self.kind!r}")
        if self.kind == "nooverlap" and self.chunk_len <= 0:
            raise ConfigError("nooverlap needs a positive chunk_len")
        if self.kind == "overlap" and (self.window <= 0 or self.stride <= 0):
            raise ConfigError("overlap needs positive window and stride")

    @classmethod
    def reuse(cls):
        return cls("reuse")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def no_overlap(cls, chunk_len: int):
        return cls("nooverlap", chunk_len=chunk_len)

    @classmethod
    def overlap(cls, window: int, stride: int = 1):
        return cls("overlap", window=window, stride=stride)

    @classmethod
    def parse(cls, text: str, config: StreamConfig | None = None) -> "EngineMode":
        """``reuse``, ``full``, ``nooverlap[:chunk]``, ``overlap[:window[:stride]]``."""
        name, *args = text.strip().split(":")
        try:
            nums = [int(a) for a in args]
        except ValueError as exc:
            raise ConfigError(f"bad mode spec {text!r}") from exc
        if name == "nooverlap":
            return cls.no_overlap(nums[0] if nums else 100)
        if name == "overlap":
            default_window = (config.v_window_seconds if config else None) or 16
            return cls.overlap(nums[0] if nums else default_window, nums[1] if len(nums) > 1 else 1)
        if name in ("reuse", "full") and not nums:
            return cls(name)
        raise ConfigError(f"bad mode spec {text!r}")

    def label(self) -> str:
        if self.kind == "nooverlap":
            return f"nooverlap:{self.chunk_len}"
        if self.kind == "overlap":
            return f"overlap:{self.window}:{self.stride}"
        return self.kind


class StepStats(NamedTuple):
    latency_us: int
    cache_size: int
    max_position: int
    text_tokens: int
    new_tokens: int
    peak_size: int  # entries held just before this second's eviction


class StepResult(NamedTuple):
    second: int
    tokens: list[int]  # emitted text (narration or generation), stop ids excluded
    slot: list[int]  # text ids actually fed for this second
    logits: np.ndarray | None  # (new_tokens, vocab): vision prefill rows then text rows
    stats: StepStats

    def to_json(self) -> dict:
        return {
            "second": self.second,
            "tokens": list(self.tokens),
            "latency_us": self.stats.latency_us,
            "cache_len": self.stats.cache_size,
            "max_pos": self.stats.max_position,
        }


class StreamingEngine:
    """One stream session. Not thread-safe; use one engine per stream."""

    def __init__(
        self,
        model: TinyModel,
        config: StreamConfig,
        mode: EngineMode | None = None,
        *,
        keep_logits: bool = True,
        context_ceiling: int | None = None,
    ):
        self.model = model
        self.config = config
        self.mode = mode or EngineMode.reuse()
        self.keep_logits = keep_logits
        self.context_ceiling = context_ceiling
        self._three_d = model.config.rope_3d
        self._last_second: int | None = None
        self._first_second: int | None = None
        self._reset()

    def _cache_config(self) -> StreamConfig:
        if self.mode.kind in ("full", "nooverlap"):
            return StreamConfig.unbounded(self.config)
        if self.mode.kind == "overlap":
            return replace(self.config, v_window_seconds=self.mode.window)
        return self.config

    def _reset(self):
        self.cache = StreamingCache(self._cache_config(), three_d=self._three_d)
        self._logical = 0
        self._last_logits: np.ndarray | None = None

    # -- position bookkeeping ------------------------------------------------
    def _vision_positions(self, patches, start: int) -> np.ndarray:
        if not self._three_d:
            return np.arange(start, start + len(patches), dtype=np.int64)
        return np.array([(start, p.row, p.col) for p in patches], dtype=np.int64).reshape(-1, 3)

    def _text_position(self, p: int) -> np.ndarray:
        if not self._three_d:
            return np.array([p], dtype=np.int64)
        return np.array([[p, p, p]], dtype=np.int64)

    # -- mode-specific context handling ----------------------------------------
    def _recompute(self):
        """Rebuild every retained state from scratch over contiguous positions."""
        view = self.cache.retained_view()
        if not view.entries:
            return
        embeds = np.empty((len(view.entries), self.model.config.hidden_dim), dtype=np.float32)
        text_idx = [i for i, e in enumerate(view.entries) if not e.is_vision]
        vis_idx = [i for i, e in enumerate(view.entries) if e.is_vision]
        if text_idx:
            embeds[text_idx] = self.model.embed_tokens([view.entries[i].token for i in text_idx])
        if vis_idx:
            embeds[vis_idx] = self.model.embed_patches([view.entries[i].patch for i in vis_idx])
        out = self.model.forward(embeds, view.positions)
        fresh = StreamingCache(self.cache.config, three_d=self._three_d)
        fresh.append(
            replace(e, key=out.keys[i], value=out.values[i], tier=None) for i, e in enumerate(view.entries)
        )
        self.cache = fresh
        self._last_logits = out.logits[-1]

    def _before_step(self, second: int):
        if self.mode.kind == "nooverlap":
            if second // self.mode.chunk_len != self._last_second // self.mode.chunk_len:
                self._reset()
        elif self.mode.kind == "overlap":
            if (second - self._first_second) % self.mode.stride == 0:
                self._recompute()

    # -- the loop ----------------------------------------------------------------
    def step(self, event: StreamEvent) -> StepResult:
        if self._last_second is not None and event.second <= self._last_second:
            raise ContractViolation(f"event for second {event.second} arrived after {self._last_second}")
        patches = event.patches()
        vision_embeds = self.model.embed_patches(patches) if patches else None
        narration = event.narration
        if narration is not None and any(t < 0 or t >= self.model.config.vocab_size for t in narration):
            raise ValidationError(f"narration id out of range at second {event.second}")

        t0 = time.perf_counter_ns()
        if self._last_second is None:
            self._first_second = event.second
        else:
            self._before_step(event.second)
        self._last_second = event.second

        max_text = len(narration) if narration is not None else self.config.text_budget_per_second
        keys, values, ctx_pos = self.cache.context_arrays()
        extra = len(patches) + max_text + 1
        if len(ctx_pos):
            buf = AttentionBuffer.from_context(self.model, keys, values, ctx_pos, extra=extra)
            nxt = int(ctx_pos[-1][0] if ctx_pos.ndim == 2 else ctx_pos[-1]) + 1
        else:
            buf = AttentionBuffer(self.model.config, extra)
            nxt = 0
        logit_rows: list[np.ndarray] = []
        max_pos = -1
        new_entries: list[CacheEntry] = []

        if patches:
            pos = self._vision_positions(patches, nxt)
            out = self.model.forward(vision_embeds, pos, buf)
            for i, p in enumerate(patches):
                new_entries.append(CacheEntry(EntryKind.VISION, self._logical, event.second,
                                              patch=p, key=out.keys[i], value=out.values[i]))
                self._logical += 1
            self.cache.append(new_entries)
            max_pos = int(pos.max())
            nxt = nxt + 1 if self._three_d else nxt + len(patches)
            self._last_logits = out.logits[-1]
            if self.keep_logits:
                logit_rows.append(out.logits)

        def feed(tok: int, kind: EntryKind):
            nonlocal nxt, max_pos
            pos = self._text_position(nxt)
            out = self.model.forward(self.model.embed_tokens([tok]), pos, buf)
            entry = CacheEntry(kind, self._logical, event.second, token=tok,
                               key=out.keys[0], value=out.values[0])
            self._logical += 1
            self.cache.append([entry])
            max_pos = max(max_pos, nxt)
            nxt += 1
            self._last_logits = out.logits[0]
            if self.keep_logits:
                logit_rows.append(out.logits)

        emitted: list[int] = []
        if narration is not None:
            for tok in narration:
                feed(tok, EntryKind.PLACEHOLDER if tok == PLACEHOLDER_ID else EntryKind.TEXT)
                emitted.append(tok)
        elif self._last_logits is not None:
            for _ in range(self.config.text_budget_per_second):
                tok = int(np.argmax(self._last_logits))
                if tok in STOP_IDS:
                    break
                emitted.append(tok)
                feed(tok, EntryKind.TEXT)
        slot = list(emitted)
        if not slot:
            feed(PLACEHOLDER_ID, EntryKind.PLACEHOLDER)
            slot = [PLACEHOLDER_ID]

        peak = len(self.cache)
        self.cache.enforce_budgets()
        latency_us = (time.perf_counter_ns() - t0) // 1000
        size = len(self.cache)
        if self.context_ceiling is not None and size > self.context_ceiling:
            raise ContextLimitExceeded(size, self.context_ceiling)
        logits = np.concatenate(logit_rows) if logit_rows else None
        stats = StepStats(int(latency_us), size, max_pos, len(slot), len(patches) + len(slot), peak)
        return StepResult(event.second, emitted, slot, logits, stats)

    def run(self, events: Iterable[StreamEvent]) -> Iterator[StepResult]:
        for ev in events:
            yield self.step(ev)


def run_baseline(
    model: TinyModel,
    config: StreamConfig,
    mode: EngineMode,
    events: Iterable[StreamEvent],
    **engine_kwargs,
) -> list[StepResult]:
    """Drive a fresh engine in ``mode`` over ``events`` and collect every step."""
    engine = StreamingEngine(model, config, mode, **engine_kwargs)
    return list(engine.run(events))


# -- synthetic streams and JSON-lines I/O ------------------------------------------


def frame_grid(tokens_per_frame: int) -> tuple[int, int]:
    """Most square ``rows x cols`` factorisation of a frame's token count."""
    if tokens_per_frame <= 0:
        return (0, 0)
    rows = int(np.sqrt(tokens_per_frame))
    while tokens_per_frame % rows:
        rows -= 1
    return rows, tokens_per_frame // rows


def synthetic_stream(
    seconds: int,
    config: StreamConfig,
    *,
    seed: int = 0,
    vocab_size: int = 64,
    narration_density: float = 0.5,
    narration_len: tuple[int, int] | None = None,
    start: int = 0,
) -> list[StreamEvent]:
    """Seeded event stream: ``config.fps`` frames per second, random narration.

    Each second carries narration with probability ``narration_density``
    (lengths uniform in ``narration_len``, ids drawn from the non-reserved
    range); other seconds leave the text slot to the engine.
    """
    rng = np.random.default_rng(seed)
    rows, cols = frame_grid(config.tokens_per_frame)
    lo, hi = narration_len or (1, max(1, config.text_budget_per_second))
    events = []
    for s in range(start, start + seconds):
        frames = tuple(FrameSpec(int(rng.integers(0, 2**31)), rows, cols) for _ in range(config.fps)) if rows else ()
        narration = None
        if rng.random() < narration_density:
            n = int(rng.integers(lo, hi + 1))
            narration = tuple(int(t) for t in rng.integers(2, vocab_size, n))
        events.append(StreamEvent(s, frames, narration))
    return events


def read_events(fp: IO[str]) -> Iterator[StreamEvent]:
    for lineno, line in enumerate(fp, 1):
        line = line.strip()
        if not line:
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
        yield StreamEvent.from_dict(data)


def write_events(events: Iterable[StreamEvent], fp: IO[str]) -> None:
    for ev in events:
        fp.write(json.dumps(ev.to_dict()) + "\n")
