"""Streaming KV cache with contiguous rotary positions, plus its data tooling."""
from .bench import BenchReport, LatencyRecord, run_bench
from .datapipe import (
    AnnealingClip,
    ChunkSpec,
    TranscriptSentence,
    Word,
    apply_decisions,
    chunk_transcript,
    extract_eval_segments,
    redistribute_timestamps,
    select_annealing_clips,
)
from .engine import EngineMode, StepResult, StreamEvent, StreamingEngine, run_baseline, synthetic_stream
from .errors import ConfigError, ContextLimitExceeded, ContractViolation, ShapeError, ValidationError
from .oracle import check_stream
from .rope import RopeSections, apply_rotary, contiguous_remap, rotate
from .streamcache import CacheEntry, EntryKind, StreamConfig, StreamingCache, one_shot_retention
from .tinymodel import ModelConfig, TinyModel, attention_forward, init_model
from .training import TrainingSample, build_training_sample

__version__ = "0.1.0"

__all__ = [
    "AnnealingClip", "BenchReport", "CacheEntry", "ChunkSpec", "ConfigError", "ContextLimitExceeded",
    "ContractViolation", "EngineMode", "EntryKind", "LatencyRecord", "ModelConfig", "RopeSections",
    "ShapeError", "StepResult", "StreamConfig", "StreamEvent", "StreamingCache", "StreamingEngine",
    "TinyModel", "TrainingSample", "TranscriptSentence", "ValidationError", "Word", "apply_decisions",
    "apply_rotary", "attention_forward", "build_training_sample", "check_stream", "chunk_transcript",
    "contiguous_remap", "extract_eval_segments", "init_model", "one_shot_retention", "redistribute_timestamps",
    "rotate", "run_baseline", "run_bench", "select_annealing_clips", "synthetic_stream",
]
