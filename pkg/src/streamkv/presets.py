"""Named stream/model configurations used by the CLI and the acceptance suite."""
from __future__ import annotations

from .streamcache import StreamConfig
from .tinymodel import ModelConfig

# Production-shaped budgets on a model small enough for the oracle.
DEFAULT = StreamConfig()
TOY = StreamConfig.toy()
# Desk-scale latency preset: budgets shrunk so the cache saturates well inside
# a 600 s run, vision-heavy seconds so context length dominates compute.
DESK = StreamConfig(t_sink=64, t_window=64, v_window_seconds=16,
                    vision_tokens_per_second=16, fps=1, text_budget_per_second=4)

PRESETS = {"toy": TOY, "default": DEFAULT, "desk": DESK}

_MODELS = {
    "toy": ModelConfig(),
    "default": ModelConfig(),
    "desk": ModelConfig(num_layers=2, num_heads=2, head_dim=16, vocab_size=256, ffn_dim=64),
}


def model_preset(name: str) -> ModelConfig:
    return _MODELS[name]
