import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _streams import random_config, random_history
from streamkv.errors import ConfigError, ContractViolation
from streamkv.streamcache import (
    CacheEntry,
    EntryKind,
    StreamConfig,
    StreamingCache,
    Tier,
    one_shot_retention,
)
from streamkv.tinymodel import VisionPatch


def text(p, second=0):
    return CacheEntry(EntryKind.TEXT, p, second, token=2 + p % 50)


def vision(p, second, i=0):
    return CacheEntry(EntryKind.VISION, p, second, patch=VisionPatch(0, second, 0, i // 2, i % 2))


def positions(entries):
    return [e.logical_position for e in entries]


def test_config_defaults_and_validation():
    c = StreamConfig()
    assert (c.t_sink, c.t_window, c.v_window_seconds) == (512, 512, 16)
    assert c.v_window_tokens == 16 * c.vision_tokens_per_second
    assert StreamConfig.unbounded().v_window_tokens is None
    with pytest.raises(ConfigError):
        StreamConfig(t_sink=-1)
    with pytest.raises(ConfigError):
        StreamConfig(fps=0)


def test_text_fills_sink_first():
    cache = StreamingCache(StreamConfig(t_sink=2, t_window=8))
    cache.append([text(0), text(1), text(2)])
    assert positions(cache.sink) == [0, 1]
    assert positions(cache.text_ring) == [2]
    assert [e.tier for e in cache.text_ring] == [Tier.TEXT]


def test_vision_second_fits_window():
    cache = StreamingCache(StreamConfig(v_window_seconds=1, vision_tokens_per_second=4))
    cache.append([vision(i, 0, i) for i in range(4)])
    assert cache.enforce_budgets() == []
    assert len(cache.vision_ring) == 4 and cache.sink == ()


def test_long_text_prefix_takes_first_and_last():
    cache = StreamingCache(StreamConfig(t_sink=512, t_window=512))
    cache.append(text(i) for i in range(2000))
    evicted = cache.enforce_budgets()
    assert positions(cache.sink) == list(range(512))
    assert positions(cache.text_ring) == list(range(1488, 2000))
    assert positions(evicted) == list(range(512, 1488))


def test_toy_trace():
    # two seconds of 4 vision + 2 text tokens under sink 1 / window 3 / vision 4
    cache = StreamingCache(StreamConfig.toy())
    p = 0
    for s in range(2):
        cache.append([vision(p + i, s, i) for i in range(4)] + [text(p + 4, s), text(p + 5, s)])
        p += 6
        cache.enforce_budgets()
    assert positions(cache.sink) == [4]
    assert positions(cache.text_ring) == [5, 10, 11]
    assert positions(cache.vision_ring) == [6, 7, 8, 9]
    view = cache.retained_view()
    assert positions(view.entries) == [4, 5, 6, 7, 8, 9, 10, 11]
    assert view.indices() == list(range(8))


def test_eviction_order_vision_first_whole_seconds():
    cache = StreamingCache(StreamConfig(t_sink=0, t_window=1, v_window_seconds=1, vision_tokens_per_second=2))
    cache.append([vision(0, 0, 0), vision(1, 0, 1), text(2, 0), vision(3, 1, 0), vision(4, 1, 1), text(5, 1)])
    evicted = cache.enforce_budgets()
    assert positions(evicted) == [0, 1, 2]
    assert [e.is_vision for e in evicted] == [True, True, False]


def test_vision_eviction_never_splits_a_second():
    # a 3-token second cannot partially survive a 4-token window next to another 3-token second
    cache = StreamingCache(StreamConfig(v_window_seconds=1, vision_tokens_per_second=4))
    cache.append([vision(i, 0, i) for i in range(3)] + [vision(3 + i, 1, i) for i in range(3)])
    cache.enforce_budgets()
    assert {e.second for e in cache.vision_ring} == {1}


@pytest.mark.parametrize("t_sink,t_window,sink_len,ring_len", [(0, 5, 0, 5), (5, 0, 5, 0), (None, None, 12, 0)])
def test_ablation_budgets(t_sink, t_window, sink_len, ring_len):
    cache = StreamingCache(StreamConfig(t_sink=t_sink, t_window=t_window))
    cache.append(text(i) for i in range(12))
    cache.enforce_budgets()
    assert (len(cache.sink), len(cache.text_ring)) == (sink_len, ring_len)


def test_out_of_order_append_is_rejected():
    cache = StreamingCache(StreamConfig())
    cache.append([text(5, 1)])
    with pytest.raises(ContractViolation):
        cache.append([text(5, 1)])
    with pytest.raises(ContractViolation):
        cache.append([text(6, 0)])
    with pytest.raises(ContractViolation):
        CacheEntry(EntryKind.TEXT, 0, 0, patch=VisionPatch(0, 0, 0, 0, 0))


def test_fresh_view_indices():
    cache = StreamingCache(StreamConfig())
    cache.append(text(i) for i in range(5))
    assert cache.retained_view().indices() == [0, 1, 2, 3, 4]
    assert cache.next_index() == 5


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 25))
def test_replay_equivalence(seed, seconds):
    rng = np.random.default_rng(seed)
    config = random_config(rng)
    cache = StreamingCache(config)
    history = []
    for group in random_history(rng, seconds, config):
        cache.append(group)
        cache.enforce_budgets()
        history.extend(group)
        view = cache.retained_view()
        assert set(positions(view.entries)) == one_shot_retention(history, config)
        assert view.indices() == list(range(len(view.entries)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_three_d_view_is_contiguous_in_time(seed):
    rng = np.random.default_rng(seed)
    config = random_config(rng)
    cache = StreamingCache(config, three_d=True)
    for group in random_history(rng, 12, config):
        cache.append(group)
        cache.enforce_budgets()
    idx = cache.retained_view().indices()
    ts = sorted({i.t for i in idx})
    assert ts == list(range(len(ts)))
    for e, i in zip(cache.retained_view().entries, idx):
        if e.is_vision:
            assert (i.h, i.w) == e.grid
        else:
            assert i.t == i.h == i.w


def test_json_round_trip():
    rng = np.random.default_rng(3)
    cache = StreamingCache(StreamConfig.toy(), three_d=True)
    p = 0
    for s in range(4):
        group = [vision(p + i, s, i) for i in range(4)] + [text(p + 4, s)]
        for e in group:
            e.key = rng.standard_normal((2, 2, 8)).astype(np.float32)
            e.value = rng.standard_normal((2, 2, 8)).astype(np.float32)
        cache.append(group)
        cache.enforce_budgets()
        p += 5
    text_dump = cache.dumps()
    back = StreamingCache.loads(text_dump)
    assert back.dumps() == text_dump
    assert back.tier_sizes() == cache.tier_sizes()
    k1, v1, p1 = cache.context_arrays()
    k2, v2, p2 = back.context_arrays()
    assert np.array_equal(k1, k2) and np.array_equal(v1, v2) and np.array_equal(p1, p2)
    # restored state keeps enforcing the ordering contract
    with pytest.raises(ContractViolation):
        back.append([text(p - 1, 3)])
    data = json.loads(text_dump)
    data["schema_version"] = 99
    with pytest.raises(ContractViolation):
        StreamingCache.from_dict(data)
