"""Training-sample assembly for overlapped full-attention chunks.

A sample is ``sink_prefix + window_prefix + [V(t), T(t) for t in chunk]``.
Only the in-chunk text positions (narration and ``...`` placeholders) are
supervised.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

from .datapipe import ChunkSpec, Word, timeline_duration
from .errors import ValidationError
from .streamcache import StreamConfig
from .tinymodel import PLACEHOLDER_ID

VISION_SLOT = -1
DEFAULT_VOCAB = 32000

SINK_PREFIX = "sink_prefix"
WINDOW_PREFIX = "window_prefix"
VISION = "vision"
TEXT = "text"
PLACEHOLDER = "placeholder"


def word_token_id(word: str, vocab_size: int = DEFAULT_VOCAB) -> int:
    """Stable one-token-per-word id outside the reserved range."""
    return 2 + zlib.crc32(word.lower().encode("utf-8")) % (vocab_size - 2)


def tokenize(words: Sequence[Word | str], vocab_size: int = DEFAULT_VOCAB) -> list[int]:
    return [word_token_id(w if isinstance(w, str) else w.text, vocab_size) for w in words]


def split_prefix(previous: Sequence[int], t_sink: int | None, t_window: int | None) -> tuple[list[int], list[int]]:
    """First ``t_sink`` tokens, then the last ``t_window`` of what follows.

    Mirrors cache routing, so the two parts never share a token.
    """
    previous = list(previous)
    sink = previous if t_sink is None else previous[:t_sink]
    rest = previous[len(sink):]
    if t_window is None:
        window = rest
    elif t_window == 0:
        window = []
    else:
        window = rest[-t_window:]
    return sink, window


@dataclass
class TrainingSample:
    chunk: ChunkSpec
    tokens: list[int]
    kinds: list[str]
    seconds: list[int | None]
    loss_mask: list[bool]
    sink_prefix: list[int]
    window_prefix: list[int]

    def to_dict(self) -> dict:
        return {
            "chunk": self.chunk.to_dict(),
            "tokens": self.tokens,
            "kinds": self.kinds,
            "seconds": self.seconds,
            "loss_mask": self.loss_mask,
            "sink_prefix": self.sink_prefix,
            "window_prefix": self.window_prefix,
        }


def build_training_sample(
    transcript: Sequence[Word],
    chunk: ChunkSpec,
    config: StreamConfig,
    *,
    vocab_size: int = DEFAULT_VOCAB,
    duration: float | None = None,
) -> TrainingSample:
    if duration is None:
        duration = math.ceil(timeline_duration(transcript))
    if chunk.start < 0 or chunk.end > duration:
        raise ValidationError(f"chunk [{chunk.start}, {chunk.end}) is outside the transcript [0, {duration}]")
    previous = tokenize([w for w in transcript if w.start < chunk.start], vocab_size)
    sink, window = split_prefix(previous, config.t_sink, config.t_window)

    tokens: list[int] = sink + window
    kinds = [SINK_PREFIX] * len(sink) + [WINDOW_PREFIX] * len(window)
    seconds: list[int | None] = [None] * len(tokens)

    by_second: dict[int, list[Word]] = {}
    for w in transcript:
        if chunk.start <= w.start < chunk.end:
            by_second.setdefault(int(math.floor(w.start)), []).append(w)

    for t in range(chunk.start, chunk.end):
        n_vis = config.vision_tokens_per_second
        tokens += [VISION_SLOT] * n_vis
        kinds += [VISION] * n_vis
        seconds += [t] * n_vis
        said = by_second.get(t)
        if said:
            ids = tokenize(said, vocab_size)
            tokens += ids
            kinds += [TEXT] * len(ids)
            seconds += [t] * len(ids)
        else:
            tokens.append(PLACEHOLDER_ID)
            kinds.append(PLACEHOLDER)
            seconds.append(t)

    mask = [k in (TEXT, PLACEHOLDER) for k in kinds]
    return TrainingSample(chunk, tokens, kinds, seconds, mask, sink, window)
