"""Deterministic transcript processing: cleaning, segmentation, clip selection.

All functions are pure. Words are assigned to a span by their start time.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from .errors import ValidationError

EPS = 1e-9

SFT_WINDOW = 24
SFT_OVERLAP = 12
EVAL_SEGMENT = 100
EVAL_MIN_WORDS = 200
CLIP_MIN_SECONDS = 16.0
CLIP_MAX_SECONDS = 64.0
CLIP_MAX_SILENCE = 3.0
CLIP_WORDS_PER_SECOND = 2.0
REALTIME_THRESHOLD = 0.8


@dataclass(frozen=True)
class Word:
    text: str
    start: float
    end: float
    realtime: bool | None = None

    def to_dict(self) -> dict:
        d = {"word": self.text, "start": self.start, "end": self.end}
        if self.realtime is not None:
            d["realtime"] = self.realtime
        return d


class Decision(str, enum.Enum):
    KEEP = "keep"
    EDIT = "edit"
    DELETE = "delete"


@dataclass
class TranscriptSentence:
    start: float
    end: float
    words: list  # str or Word
    decision: Decision = Decision.KEEP
    replacement: list[str] | None = None
    realtime: bool | None = None

    def __post_init__(self):
        if not self.start < self.end:
            raise ValidationError(f"sentence needs start < end, got [{self.start}, {self.end}]")
        if self.decision is not Decision.DELETE and not self.words:
            raise ValidationError(f"sentence at {self.start} has no words")
        if self.decision is Decision.EDIT and not self.replacement:
            raise ValidationError(f"edited sentence at {self.start} has no replacement words")

    @classmethod
    def from_dict(cls, d: dict) -> "TranscriptSentence":
        try:
            raw = d["decision"] if "decision" in d else "keep"
            replacement = None
            if isinstance(raw, dict):
                replacement = list(raw["edit"])
                decision = Decision.EDIT
            else:
                decision = Decision(raw)
                if decision is Decision.EDIT:
                    replacement = list(d.get("replacement") or [])
            words = [
                w if isinstance(w, str) else Word(str(w["word"]), float(w["start"]), float(w["end"]))
                for w in d.get("words") or []
            ]
            return cls(float(d["start"]), float(d["end"]), words, decision, replacement, d.get("realtime"))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed sentence {d!r}: {exc}") from exc


def load_transcript(data: dict | str) -> tuple[list[TranscriptSentence], float | None]:
    """Parse ``{"sentences": [...], "duration": optional}``."""
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"transcript is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("sentences"), list):
        raise ValidationError("transcript must be an object with a 'sentences' list")
    sentences = [TranscriptSentence.from_dict(s) for s in data["sentences"]]
    duration = data.get("duration")
    return sentences, None if duration is None else float(duration)


def redistribute_timestamps(interval: Sequence[float], edited_words: Sequence[str]) -> list[tuple[float, float]]:
    """Split ``[start, end]`` evenly over the words; spans tile the interval."""
    start, end = float(interval[0]), float(interval[1])
    if not end > start:
        raise ValidationError(f"interval needs end > start, got [{start}, {end}]")
    n = len(edited_words)
    if n == 0:
        raise ValidationError("cannot redistribute over an empty word list")
    bounds = [start + i * (end - start) / n for i in range(n)] + [end]
    return [(bounds[i], bounds[i + 1]) for i in range(n)]


def apply_decisions(sentences: Sequence[TranscriptSentence]) -> list[Word]:
    """Flatten cleaned sentences into a time-ordered word timeline.

    Kept sentences keep their word timings (plain-string words are spread
    evenly, having none of their own), edited sentences get their
    replacement spread over the original interval, deleted ones vanish.
    """
    out: list[Word] = []
    prev_end = -math.inf
    for s in sentences:
        if s.start < prev_end - EPS:
            raise ValidationError(f"sentence at {s.start} overlaps the previous one ending at {prev_end}")
        prev_end = s.end
        if s.decision is Decision.DELETE:
            continue
        if s.decision is Decision.EDIT:
            texts = list(s.replacement)
            spans = redistribute_timestamps((s.start, s.end), texts)
            out.extend(Word(t, a, b, s.realtime) for t, (a, b) in zip(texts, spans))
            continue
        if all(isinstance(w, Word) for w in s.words):
            out.extend(Word(w.text, w.start, w.end, s.realtime) for w in s.words)
        else:
            texts = [w if isinstance(w, str) else w.text for w in s.words]
            spans = redistribute_timestamps((s.start, s.end), texts)
            out.extend(Word(t, a, b, s.realtime) for t, (a, b) in zip(texts, spans))
    return out


def decision_stats(sentences: Iterable[TranscriptSentence]) -> dict[str, float]:
    """Share of sentences per decision."""
    counts = {d.value: 0 for d in Decision}
    for s in sentences:
        counts[s.decision.value] += 1
    total = sum(counts.values())
    return {k: (v / total if total else 0.0) for k, v in counts.items()}


# -- SFT chunking -------------------------------------------------------------------


@dataclass(frozen=True)
class ChunkSpec:
    start: int
    end: int
    W: int
    O: int

    def __post_init__(self):
        if not 0 < self.O < self.W:
            raise ValidationError(f"need 0 < O < W, got W={self.W}, O={self.O}")
        if self.end - self.start != self.W:
            raise ValidationError(f"chunk [{self.start}, {self.end}) is not {self.W} s long")

    @property
    def stride(self) -> int:
        return self.W - self.O

    @classmethod
    def from_frames(cls, start_frame: int, w_frames: int, o_frames: int, fps: int) -> "ChunkSpec":
        """Convert a frame-denominated chunk to whole seconds."""
        if any(x % fps for x in (start_frame, w_frames, o_frames)):
            raise ValidationError(f"frame counts must be whole seconds at {fps} fps")
        start = start_frame // fps
        return cls(start, start + w_frames // fps, w_frames // fps, o_frames // fps)

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "W": self.W, "O": self.O}


@dataclass
class SftChunk:
    spec: ChunkSpec
    words: list[Word]
    previous_text: list[Word]
    min_words: int

    @property
    def word_count(self) -> int:
        return len(self.words)

    def to_dict(self) -> dict:
        return {
            "chunk": self.spec.to_dict(),
            "word_count": self.word_count,
            "min_words": self.min_words,
            "passed_min_words": self.word_count >= self.min_words,
            "previous_word_count": len(self.previous_text),
            "words": [w.text for w in self.words],
        }


def timeline_duration(timeline: Sequence[Word]) -> float:
    return max((w.end for w in timeline), default=0.0)


def _words_in(timeline: Sequence[Word], start: float, end: float) -> list[Word]:
    return [w for w in timeline if start <= w.start < end]


def chunk_candidates(
    timeline: Sequence[Word],
    W: int = SFT_WINDOW,
    O: int = SFT_OVERLAP,
    min_words: int | None = None,
    duration: float | None = None,
) -> Iterator[SftChunk]:
    """Every full-length chunk at multiples of ``W - O``, kept or not."""
    if not 0 < O < W:
        raise ValidationError(f"need 0 < O < W, got W={W}, O={O}")
    min_words = 2 * W if min_words is None else min_words
    if duration is None:
        duration = math.ceil(timeline_duration(timeline))
    stride = W - O
    start = 0
    while start + W <= duration + EPS:
        spec = ChunkSpec(start, start + W, W, O)
        prev = [w for w in timeline if w.start < start]
        yield SftChunk(spec, _words_in(timeline, start, start + W), prev, min_words)
        start += stride


def chunk_transcript(
    timeline: Sequence[Word],
    W: int = SFT_WINDOW,
    O: int = SFT_OVERLAP,
    min_words: int | None = None,
    duration: float | None = None,
) -> list[SftChunk]:
    """Overlapped SFT chunks with at least ``min_words`` (default ``2 * W``) words."""
    return [c for c in chunk_candidates(timeline, W, O, min_words, duration) if c.word_count >= c.min_words]


# -- annealing clips -------------------------------------------------------------------


@dataclass
class AnnealingClip:
    start: float
    end: float
    words: list[Word]
    max_internal_silence: float
    realtime_ratio: float | None = None
    checks: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def word_count(self) -> int:
        return len(self.words)

    @property
    def kept(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "duration": self.duration,
            "word_count": self.word_count,
            "max_internal_silence": self.max_internal_silence,
            "realtime_ratio": self.realtime_ratio,
            "checks": dict(self.checks),
            "words": [w.text for w in self.words],
        }


def _silence_runs(timeline: Sequence[Word], max_silence: float) -> list[list[Word]]:
    runs: list[list[Word]] = []
    for w in timeline:
        if runs and w.start - runs[-1][-1].end <= max_silence + EPS:
            runs[-1].append(w)
        else:
            runs.append([w])
    return runs


def default_realtime_ratio(words: Sequence[Word]) -> float | None:
    """Fraction of words annotated as real-time commentary (None if unannotated)."""
    if not words or any(w.realtime is None for w in words):
        return None
    return sum(bool(w.realtime) for w in words) / len(words)


def annealing_candidates(
    timeline: Sequence[Word],
    *,
    min_seconds: float = CLIP_MIN_SECONDS,
    max_seconds: float = CLIP_MAX_SECONDS,
    max_silence: float = CLIP_MAX_SILENCE,
    words_per_second: float = CLIP_WORDS_PER_SECOND,
    realtime_ratio: Callable[[Sequence[Word]], float | None] = default_realtime_ratio,
    realtime_threshold: float = REALTIME_THRESHOLD,
) -> Iterator[AnnealingClip]:
    """Greedy non-overlapping slicing; every candidate is yielded with its checks.

    Boundaries always fall on silences longer than ``max_silence``; inside a
    silence-free run, each clip starts at the next unused word and extends to
    the last word that still ends within ``max_seconds``. The real-time check
    passes when the judged ratio exceeds ``realtime_threshold`` or no judgment
    is available.
    """
    for run in _silence_runs(timeline, max_silence):
        i = 0
        while i < len(run):
            start = run[i].start
            j = i
            while j + 1 < len(run) and run[j + 1].end - start <= max_seconds + EPS:
                j += 1
            words = run[i : j + 1]
            end = words[-1].end
            gaps = [b.start - a.end for a, b in zip(words, words[1:])]
            ratio = realtime_ratio(words)
            duration = end - start
            clip = AnnealingClip(start, end, list(words), max(gaps, default=0.0), ratio)
            clip.checks = {
                "duration": min_seconds - EPS <= duration <= max_seconds + EPS,
                "silence": clip.max_internal_silence <= max_silence + EPS,
                "words": len(words) >= words_per_second * duration - EPS,
                "realtime": ratio is None or ratio > realtime_threshold,
            }
            yield clip
            i = j + 1


def select_annealing_clips(timeline: Sequence[Word], **kwargs) -> list[AnnealingClip]:
    """Clips passing duration, silence, word-density and real-time filters."""
    return [c for c in annealing_candidates(timeline, **kwargs) if c.kept]


# -- evaluation segments ----------------------------------------------------------------


@dataclass
class EvalSegment:
    index: int
    start: int
    end: int
    words: list[Word]
    min_words: int

    @property
    def word_count(self) -> int:
        return len(self.words)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "start": self.start,
            "end": self.end,
            "word_count": self.word_count,
            "min_words": self.min_words,
            "passed_min_words": self.word_count >= self.min_words,
            "words": [w.text for w in self.words],
        }


def eval_segment_candidates(
    timeline: Sequence[Word],
    game_length: float,
    segment_seconds: int = EVAL_SEGMENT,
    min_words: int = EVAL_MIN_WORDS,
) -> Iterator[EvalSegment]:
    for k in range(int(game_length // segment_seconds)):
        a, b = k * segment_seconds, (k + 1) * segment_seconds
        yield EvalSegment(k, a, b, _words_in(timeline, a, b), min_words)


def extract_eval_segments(
    timeline: Sequence[Word],
    game_length: float,
    segment_seconds: int = EVAL_SEGMENT,
    min_words: int = EVAL_MIN_WORDS,
) -> list[EvalSegment]:
    """Back-to-back segments from t=0 holding at least ``min_words`` words."""
    return [
        s for s in eval_segment_candidates(timeline, game_length, segment_seconds, min_words)
        if s.word_count >= min_words
    ]
