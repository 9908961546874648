"""Brute-force reference for the streaming engine.

The reference replays a stream with none of the engine's machinery: it keeps
the complete history, decides what is retained by applying the one-shot
retention rule to that history, numbers retained entries by enumeration,
rotates with complex arithmetic and runs dense masked attention in float64
over ``retained + this second's tokens``. Text slots are taken from the
engine's results (teacher forcing) and greedy choices are checked against the
reference's own argmax wherever the top two logits are not a near tie.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import STOP_IDS, EngineMode, StepResult, StreamEvent, StreamingEngine
from .streamcache import CacheEntry, EntryKind, StreamConfig, one_shot_retention
from .tinymodel import RMS_EPS, TinyModel

TIE_MARGIN = 1e-6


def _rms(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608 * (x + 0.044715 * x**3)))


def _complex_rotate(x: np.ndarray, pair_pos: np.ndarray, head_dim: int, base: float) -> np.ndarray:
    """Rotate ``x`` (n, heads, head_dim); ``pair_pos`` is (n, head_dim // 2)."""
    freqs = np.array([base ** (-(2.0 * i) / head_dim) for i in range(head_dim // 2)])
    phase = np.exp(1j * pair_pos * freqs)[:, None, :]
    z = (x[..., 0::2] + 1j * x[..., 1::2]) * phase
    out = np.empty(x.shape, dtype=np.float64)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def enumerate_positions(items: list, three_d: bool) -> list:
    """Gap-free indices by walking the retained items in order."""
    out = []
    p = 0
    prev = None
    for it in items:
        if three_d:
            if it.is_vision and prev is not None and prev.is_vision and prev.second == it.second:
                t = out[-1][0]
            else:
                t = p
                p += 1
            out.append((t, it.patch.row, it.patch.col) if it.is_vision else (t, t, t))
        else:
            out.append(p)
            p += 1
        prev = it
    return out


@dataclass
class _Item:
    entry: CacheEntry
    key: np.ndarray  # (layers, heads, head_dim) float64
    value: np.ndarray

    @property
    def is_vision(self):
        return self.entry.is_vision

    @property
    def second(self):
        return self.entry.second

    @property
    def patch(self):
        return self.entry.patch


class ReferenceStream:
    """Dense float64 replay of a ``reuse`` (or ``full``) session."""

    def __init__(self, model: TinyModel, config: StreamConfig):
        self.model = model
        self.config = config
        self.cfg = model.config
        self.three_d = model.config.rope_3d
        self.history: list[_Item] = []
        self.last_logits: np.ndarray | None = None
        sec = model.sections
        self._axis = np.repeat(np.arange(3), [sec.t_dims, sec.h_dims, sec.w_dims])
        self._w = [
            {k: getattr(lw, k).astype(np.float64) for k in ("wq", "wk", "wv", "wo", "w1", "w2")}
            for lw in model.layers
        ]
        self._head = model.head.astype(np.float64)

    def retained(self) -> list[_Item]:
        keep = one_shot_retention([it.entry for it in self.history], self.config)
        return [it for it in self.history if it.entry.logical_position in keep]

    def _pair_pos(self, positions) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64)
        if pos.ndim == 1:
            return np.repeat(pos[:, None], self.cfg.head_dim // 2, axis=1)
        return pos[:, self._axis]

    def _dense(self, ctx: list[_Item], ctx_pos, embeds: np.ndarray, new_pos):
        cfg = self.cfg
        n, c = len(embeds), len(ctx)
        H, hd = cfg.num_heads, cfg.head_dim
        all_pp = self._pair_pos(list(ctx_pos) + list(new_pos))
        new_pp = all_pp[c:]
        allowed = np.ones((n, c + n), dtype=bool)
        for i in range(n):
            allowed[i, c + i + 1 :] = False
        h = embeds.astype(np.float64)
        keys_out = np.zeros((n, cfg.num_layers, H, hd))
        vals_out = np.zeros_like(keys_out)
        for li, w in enumerate(self._w):
            x = _rms(h)
            q = (x @ w["wq"]).reshape(n, H, hd)
            k = (x @ w["wk"]).reshape(n, H, hd)
            v = (x @ w["wv"]).reshape(n, H, hd)
            keys_out[:, li], vals_out[:, li] = k, v
            ck = np.array([it.key[li] for it in ctx]).reshape(c, H, hd)
            cv = np.array([it.value[li] for it in ctx]).reshape(c, H, hd)
            K = _complex_rotate(np.concatenate([ck, k]), all_pp, hd, cfg.rope_base)
            V = np.concatenate([cv, v])
            Q = _complex_rotate(q, new_pp, hd, cfg.rope_base)
            scores = np.einsum("nhd,mhd->hnm", Q, K) / np.sqrt(hd)
            scores = np.where(allowed[None], scores, -np.inf)
            scores -= scores.max(axis=-1, keepdims=True)
            p = np.exp(scores)
            p /= p.sum(axis=-1, keepdims=True)
            attn = np.einsum("hnm,mhd->nhd", p, V).reshape(n, cfg.hidden_dim)
            h = h + attn @ w["wo"]
            h = h + _gelu(_rms(h) @ w["w1"]) @ w["w2"]
        return _rms(h) @ self._head, keys_out, vals_out

    def step(self, event: StreamEvent, slot: list[int]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Process one second with the given text slot.

        Returns the logits of every new token and the conditioning logits used
        for each greedy decision (one per slot token, plus the one after).
        """
        ctx = self.retained()
        patches = event.patches()
        new_entries = [CacheEntry(EntryKind.VISION, 0, event.second, patch=p) for p in patches]
        new_entries += [
            CacheEntry(EntryKind.PLACEHOLDER if t == 0 else EntryKind.TEXT, 0, event.second, token=t)
            for t in slot
        ]
        embeds = []
        if patches:
            embeds.append(self.model.embed_patches(patches))
        embeds.append(self.model.embed_tokens(slot))
        embeds = np.concatenate(embeds)
        fake_new = [_Item(e, None, None) for e in new_entries]
        positions = enumerate_positions(ctx + fake_new, self.three_d)
        logits, keys, vals = self._dense(ctx, positions[: len(ctx)], embeds, positions[len(ctx) :])

        nv = len(patches)
        cond = [logits[nv - 1] if nv else self.last_logits]
        cond += [logits[nv + i] for i in range(len(slot))]
        base = self.history[-1].entry.logical_position + 1 if self.history else 0
        for i, e in enumerate(new_entries):
            e.logical_position = base + i
            self.history.append(_Item(e, keys[i], vals[i]))
        self.last_logits = logits[-1]
        return logits, cond


@dataclass
class StreamCheck:
    steps: int = 0
    max_rel_err: float = 0.0
    greedy_checked: int = 0
    greedy_mismatches: int = 0
    retained_mismatches: int = 0
    position_violations: int = 0
    failures: list[str] = field(default_factory=list)

    def ok(self, rtol: float) -> bool:
        return (
            self.max_rel_err <= rtol
            and self.greedy_mismatches == 0
            and self.retained_mismatches == 0
            and self.position_violations == 0
        )


def rel_err(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = float(np.max(np.abs(expected)))
    return float(np.max(np.abs(actual.astype(np.float64) - expected))) / max(scale, 1e-30)


def _decisive(logits: np.ndarray) -> bool:
    top2 = np.sort(logits)[-2:]
    return top2[1] - top2[0] > TIE_MARGIN


def check_stream(
    model: TinyModel,
    config: StreamConfig,
    events: list[StreamEvent],
    results: list[StepResult] | None = None,
    engine: StreamingEngine | None = None,
) -> StreamCheck:
    """Compare a ``reuse`` session against the dense reference, step by step."""
    ref = ReferenceStream(model, config)
    report = StreamCheck()
    if engine is None and results is None:
        engine = StreamingEngine(model, config, EngineMode.reuse())
    retained_before = 0
    for i, ev in enumerate(events):
        res = results[i] if results is not None else engine.step(ev)
        logits, cond = ref.step(ev, res.slot)
        report.steps += 1
        if res.logits is not None:
            err = rel_err(res.logits, logits)
            report.max_rel_err = max(report.max_rel_err, err)
        if ev.narration is None:
            report.greedy_checked += _check_greedy(res, cond, config, report)
        # an index never exceeds what was retained plus what this second added
        if res.stats.max_position > retained_before + res.stats.new_tokens:
            report.position_violations += 1
        retained_before = len(ref.retained())
        if engine is not None:
            got = {e.logical_position for e in engine.cache.retained_view().entries}
            want = {it.entry.logical_position for it in ref.retained()}
            if got != want:
                report.retained_mismatches += 1
                report.failures.append(f"second {ev.second}: retained set differs")
    return report


def _check_greedy(res: StepResult, cond: list, config: StreamConfig, report: StreamCheck) -> int:
    checked = 0
    emitted = res.tokens
    for i, tok in enumerate(emitted):
        if cond[i] is not None and _decisive(cond[i]):
            checked += 1
            if int(np.argmax(cond[i])) != tok:
                report.greedy_mismatches += 1
                report.failures.append(f"second {res.second}: token {i} is {tok}, reference argmax {int(np.argmax(cond[i]))}")
    if len(emitted) < config.text_budget_per_second:
        after = cond[len(emitted)]
        if after is not None and _decisive(after):
            checked += 1
            if int(np.argmax(after)) not in STOP_IDS:
                report.greedy_mismatches += 1
                report.failures.append(f"second {res.second}: engine stopped but reference continues")
    return checked
