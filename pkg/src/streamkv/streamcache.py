"""Three-tier streaming KV cache: sink text, recent text, recent vision.

Routing on append:

* text (including the ``...`` placeholder) fills the sink until it holds
  ``t_sink`` entries; later text goes to the text window;
* vision goes to the vision window.

:meth:`StreamingCache.enforce_budgets` drops whole vision seconds, oldest
first, until the vision window fits, and only then trims the oldest window
text. The sink is never touched.

Keys are stored un-rotated. :meth:`StreamingCache.retained_view` orders every
retained entry by logical stream position and hands out gap-free rotary
indices, so positions stop growing once the budgets are saturated.
"""
from __future__ import annotations

import base64
import enum
import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigError, ContractViolation
from .rope import RopeIndex3D, next_time_index, remap_positions
from .tinymodel import VisionPatch

CACHE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StreamConfig:
    """Cache budgets and stream rates.

    ``None`` for a budget means unbounded (the no-eviction escape hatch).
    """

    t_sink: int | None = 512
    t_window: int | None = 512
    v_window_seconds: int | None = 16
    vision_tokens_per_second: int = 4
    fps: int = 1
    text_budget_per_second: int = 8

    def __post_init__(self):
        for name in ("t_sink", "t_window", "v_window_seconds"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0 or None, got {value}")
        if self.vision_tokens_per_second < 0:
            raise ConfigError("vision_tokens_per_second must be >= 0")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.text_budget_per_second < 0:
            raise ConfigError("text_budget_per_second must be >= 0")

    @property
    def v_window_tokens(self) -> int | None:
        if self.v_window_seconds is None:
            return None
        return self.v_window_seconds * self.vision_tokens_per_second

    @property
    def tokens_per_frame(self) -> int:
        return self.vision_tokens_per_second // self.fps

    @classmethod
    def toy(cls) -> "StreamConfig":
        """One sink token, three window tokens, one second of four vision tokens."""
        return cls(t_sink=1, t_window=3, v_window_seconds=1, vision_tokens_per_second=4,
                   fps=1, text_budget_per_second=2)

    @classmethod
    def unbounded(cls, base: "StreamConfig | None" = None) -> "StreamConfig":
        base = base or cls()
        return replace(base, t_sink=None, t_window=None, v_window_seconds=None)

    def to_dict(self) -> dict:
        return {
            "t_sink": self.t_sink,
            "t_window": self.t_window,
            "v_window_seconds": self.v_window_seconds,
            "vision_tokens_per_second": self.vision_tokens_per_second,
            "fps": self.fps,
            "text_budget_per_second": self.text_budget_per_second,
        }


class EntryKind(str, enum.Enum):
    TEXT = "text"
    PLACEHOLDER = "placeholder"
    VISION = "vision"


class Tier(str, enum.Enum):
    SINK = "sink"
    TEXT = "text_window"
    VISION = "vision_window"


@dataclass
class CacheEntry:
    kind: EntryKind
    logical_position: int
    second: int
    token: int | None = None
    patch: VisionPatch | None = None
    key: np.ndarray | None = field(default=None, repr=False)  # (layers, heads, head_dim)
    value: np.ndarray | None = field(default=None, repr=False)
    tier: Tier | None = None

    def __post_init__(self):
        if (self.kind is EntryKind.VISION) != (self.patch is not None):
            raise ContractViolation("vision entries need a patch and text entries must not have one")

    @property
    def is_vision(self) -> bool:
        return self.kind is EntryKind.VISION

    @property
    def grid(self) -> tuple[int, int] | None:
        if self.patch is None:
            return None
        return (self.patch.row, self.patch.col)


class RetainedView(NamedTuple):
    entries: tuple[CacheEntry, ...]
    positions: np.ndarray  # (n,) for 1D, (n, 3) for 3D

    def indices(self) -> list:
        if self.positions.ndim == 2:
            return [RopeIndex3D(*map(int, p)) for p in self.positions]
        return [int(p) for p in self.positions]


class _Tier:
    """FIFO of entries with a parallel column store for fast array access."""

    def __init__(self):
        self.entries: deque[CacheEntry] = deque()
        self._cap = 0
        self._start = 0
        self._end = 0
        self._cols: dict[str, np.ndarray] = {}
        self._kv_shape: tuple[int, ...] | None = None

    def __len__(self):
        return len(self.entries)

    def _alloc(self, kv_shape, cap):
        self._kv_shape = kv_shape
        self._cap = cap
        self._cols = {
            "logical": np.zeros(cap, np.int64),
            "second": np.zeros(cap, np.int64),
            "vision": np.zeros(cap, bool),
            "row": np.zeros(cap, np.int64),
            "col": np.zeros(cap, np.int64),
            "key": np.zeros((cap,) + kv_shape, np.float32),
            "value": np.zeros((cap,) + kv_shape, np.float32),
        }

    def _make_room(self, n: int):
        live = self._end - self._start
        if self._end + n <= self._cap:
            return
        cap = self._cap
        if live + n > cap // 2:
            cap = max(2 * cap, live + n, 16)
        old = self._cols
        self._alloc(self._kv_shape, cap)
        for name, arr in old.items():
            self._cols[name][:live] = arr[self._start : self._end]
        self._start, self._end = 0, live

    def push(self, entry: CacheEntry):
        has_kv = entry.key is not None
        if self._kv_shape is None:
            self._alloc(entry.key.shape if has_kv else (0,), 16)
        self._make_room(1)
        i = self._end
        c = self._cols
        c["logical"][i] = entry.logical_position
        c["second"][i] = entry.second
        c["vision"][i] = entry.is_vision
        if entry.patch is not None:
            c["row"][i] = entry.patch.row
            c["col"][i] = entry.patch.col
        if has_kv:
            c["key"][i] = entry.key
            c["value"][i] = entry.value
        self._end += 1
        self.entries.append(entry)

    def pop_front(self, n: int) -> list[CacheEntry]:
        out = [self.entries.popleft() for _ in range(n)]
        self._start += n
        return out

    def col(self, name: str) -> np.ndarray:
        if not self._cols:
            return np.zeros(0, np.int64)
        return self._cols[name][self._start : self._end]


class StreamingCache:
    """Sink / text-window / vision-window KV store with vision-first eviction."""

    def __init__(self, config: StreamConfig, three_d: bool = False):
        self.config = config
        self.three_d = three_d
        self._sink = _Tier()
        self._text = _Tier()
        self._vision = _Tier()
        self._last_position = -1
        self._last_second: int | None = None

    # -- inspection ---------------------------------------------------------
    @property
    def sink(self) -> tuple[CacheEntry, ...]:
        return tuple(self._sink.entries)

    @property
    def text_ring(self) -> tuple[CacheEntry, ...]:
        return tuple(self._text.entries)

    @property
    def vision_ring(self) -> tuple[CacheEntry, ...]:
        return tuple(self._vision.entries)

    @property
    def last_position(self) -> int:
        """Largest logical position ever appended (``-1`` when none)."""
        return self._last_position

    def __len__(self) -> int:
        return len(self._sink) + len(self._text) + len(self._vision)

    def tier_sizes(self) -> tuple[int, int, int]:
        return len(self._sink), len(self._text), len(self._vision)

    def _sink_full(self) -> bool:
        return self.config.t_sink is not None and len(self._sink) >= self.config.t_sink

    # -- mutation ------------------------------------------------------------
    def append(self, entries: Iterable[CacheEntry]) -> "StreamingCache":
        """Route entries into tiers. Budgets are not enforced here."""
        for e in entries:
            if e.logical_position <= self._last_position:
                raise ContractViolation(
                    f"logical position {e.logical_position} does not follow {self._last_position}"
                )
            if self._last_second is not None and e.second < self._last_second:
                raise ContractViolation(f"second {e.second} goes back before {self._last_second}")
            self._last_position = e.logical_position
            self._last_second = e.second
            if e.is_vision:
                e.tier = Tier.VISION
                self._vision.push(e)
            elif not self._sink_full():
                e.tier = Tier.SINK
                self._sink.push(e)
            else:
                e.tier = Tier.TEXT
                self._text.push(e)
        return self

    def enforce_budgets(self) -> list[CacheEntry]:
        """Evict down to budget; returns evicted entries oldest-first, vision before text."""
        evicted: list[CacheEntry] = []
        v_budget = self.config.v_window_tokens
        if v_budget is not None:
            seconds = self._vision.col("second")
            excess = len(self._vision) - v_budget
            if excess > 0:
                # drop whole seconds: cut at the first second boundary covering the excess
                cut = excess
                while cut < len(seconds) and seconds[cut] == seconds[cut - 1]:
                    cut += 1
                evicted.extend(self._vision.pop_front(cut))
        t_budget = self.config.t_window
        if t_budget is not None and len(self._text) > t_budget:
            evicted.extend(self._text.pop_front(len(self._text) - t_budget))
        return evicted

    # -- views ------------------------------------------------------------------
    def _merged_order(self) -> np.ndarray:
        logical = np.concatenate([t.col("logical") for t in (self._sink, self._text, self._vision)])
        return np.argsort(logical, kind="stable")

    def _merged(self, name: str, order: np.ndarray) -> np.ndarray:
        parts = [t.col(name) for t in (self._sink, self._text, self._vision) if len(t)]
        if not parts:
            return parts
        return np.concatenate(parts)[order]

    def positions(self) -> np.ndarray:
        """Contiguous rotary indices of the retained entries in logical order."""
        order = self._merged_order()
        if len(order) == 0:
            return np.zeros((0, 3) if self.three_d else 0, np.int64)
        return remap_positions(
            self._merged("logical", order),
            self._merged("vision", order),
            self._merged("second", order),
            self._merged("row", order),
            self._merged("col", order),
            three_d=self.three_d,
        )

    def next_index(self) -> int:
        """Rotary index the next appended token would receive."""
        if not self.three_d:
            return len(self)
        return next_time_index(self.positions())

    def context_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(keys, values, positions)`` of all retained entries in logical order."""
        order = self._merged_order()
        pos = self.positions()
        if len(order) == 0:
            return np.zeros((0,)), np.zeros((0,)), pos
        return self._merged("key", order), self._merged("value", order), pos

    def retained_view(self) -> RetainedView:
        entries = sorted(
            list(self._sink.entries) + list(self._text.entries) + list(self._vision.entries),
            key=lambda e: e.logical_position,
        )
        return RetainedView(tuple(entries), self.positions())

    # -- serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        def enc(arr):
            if arr is None:
                return None
            return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")

        kv_shape = None
        tiers = {}
        for name, tier in (("sink", self._sink), ("text_window", self._text), ("vision_window", self._vision)):
            rows = []
            for e in tier.entries:
                if e.key is not None:
                    kv_shape = list(e.key.shape)
                rows.append({
                    "kind": e.kind.value,
                    "logical_position": e.logical_position,
                    "second": e.second,
                    "token": e.token,
                    "patch": list(e.patch) if e.patch is not None else None,
                    "key": enc(e.key),
                    "value": enc(e.value),
                })
            tiers[name] = rows
        return {
            "schema_version": CACHE_SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "three_d": self.three_d,
            "last_position": self._last_position,
            "last_second": self._last_second,
            "kv_shape": kv_shape,
            "dtype": "float32",
            "tiers": tiers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StreamingCache":
        if data.get("schema_version") != CACHE_SCHEMA_VERSION:
            raise ContractViolation(f"unsupported cache schema {data.get('schema_version')!r}")
        cache = cls(StreamConfig(**data["config"]), three_d=bool(data["three_d"]))
        shape = tuple(data["kv_shape"]) if data["kv_shape"] else None

        def dec(s):
            if s is None:
                return None
            return np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float32).reshape(shape)

        for name, tier in (("sink", cache._sink), ("text_window", cache._text), ("vision_window", cache._vision)):
            for row in data["tiers"][name]:
                e = CacheEntry(
                    kind=EntryKind(row["kind"]),
                    logical_position=row["logical_position"],
                    second=row["second"],
                    token=row["token"],
                    patch=VisionPatch(*row["patch"]) if row["patch"] is not None else None,
                    key=dec(row["key"]),
                    value=dec(row["value"]),
                    tier=Tier(name),
                )
                tier.push(e)
        cache._last_position = data["last_position"]
        cache._last_second = data.get("last_second")
        return cache

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "StreamingCache":
        return cls.from_dict(json.loads(text))


def one_shot_retention(history: list[CacheEntry], config: StreamConfig) -> set[int]:
    """Logical positions the retention rule keeps given the full history.

    Sink = first ``t_sink`` text tokens; text window = last ``t_window`` of the
    remaining text; vision = the longest run of most recent whole seconds that
    fits the vision budget.
    """
    text = [e.logical_position for e in history if not e.is_vision]
    vision = [e for e in history if e.is_vision]
    keep: set[int] = set()
    n_sink = len(text) if config.t_sink is None else min(config.t_sink, len(text))
    keep.update(text[:n_sink])
    rest = text[n_sink:]
    if config.t_window is None:
        keep.update(rest)
    elif config.t_window > 0:
        keep.update(rest[-config.t_window :])
    budget = config.v_window_tokens
    by_second: dict[int, list[int]] = {}
    for e in vision:
        by_second.setdefault(e.second, []).append(e.logical_position)
    used = 0
    for sec in sorted(by_second, reverse=True):
        group = by_second[sec]
        if budget is not None and used + len(group) > budget:
            break
        used += len(group)
        keep.update(group)
    return keep
