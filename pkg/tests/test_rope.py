import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamkv.errors import ConfigError, ContractViolation
from streamkv.rope import (
    RopeIndex3D,
    RopeSections,
    apply_rotary,
    contiguous_remap,
    inverse_frequencies,
    next_time_index,
    rerotate,
    rotate,
)
from streamkv.streamcache import CacheEntry, EntryKind
from streamkv.tinymodel import VisionPatch

HEAD_DIMS = st.sampled_from([8, 16, 32])
vec_seed = st.integers(0, 2**32 - 1)
pos1 = st.integers(0, 5000)
pos3 = st.tuples(st.integers(0, 5000), st.integers(0, 64), st.integers(0, 64))


def _vec(seed, hd, n=1):
    return np.random.default_rng(seed).standard_normal((n, hd))


def _sections(hd, three_d):
    return RopeSections.three_d(hd) if three_d else RopeSections.one_d(hd)


def test_three_d_split_is_two_one_one():
    assert RopeSections.three_d(16) == RopeSections(4, 2, 2)
    # leftovers go to time
    assert RopeSections.three_d(10) == RopeSections(3, 1, 1)
    with pytest.raises(ConfigError):
        RopeSections.three_d(4)


def test_section_mismatch_is_a_config_error():
    with pytest.raises(ConfigError):
        rotate(np.ones(8), 3, RopeSections(3, 0, 0))
    with pytest.raises(ConfigError):
        rotate(np.ones(7), 3, RopeSections(3, 0, 0))


def test_rotation_angle_of_single_pair():
    # head_dim 2 has one pair at frequency 1: a plain 2D rotation by `pos` radians
    out = rotate(np.array([1.0, 0.0]), 1, RopeSections.one_d(2))
    np.testing.assert_allclose(out, [np.cos(1.0), np.sin(1.0)], rtol=1e-6)
    np.testing.assert_allclose(inverse_frequencies(4), [1.0, 0.01])


@settings(max_examples=100, deadline=None)
@given(vec_seed, HEAD_DIMS, st.booleans())
def test_identity_at_zero(seed, hd, three_d):
    v = _vec(seed, hd)[0]
    idx = (0, 0, 0) if three_d else 0
    assert np.array_equal(rotate(v, idx, _sections(hd, three_d)), v)


@settings(max_examples=100, deadline=None)
@given(vec_seed, HEAD_DIMS, pos1, pos3)
def test_isometry(seed, hd, p1, p3):
    v = _vec(seed, hd)[0]
    n = np.linalg.norm(v)
    assert abs(np.linalg.norm(rotate(v, p1, RopeSections.one_d(hd))) - n) <= 1e-6 * n
    assert abs(np.linalg.norm(rotate(v, p3, RopeSections.three_d(hd))) - n) <= 1e-6 * n


@settings(max_examples=100, deadline=None)
@given(vec_seed, HEAD_DIMS, st.integers(0, 2000), st.integers(0, 2000), st.integers(0, 200))
def test_relative_offset_1d(seed, hd, p, shift, k):
    q, kv = _vec(seed, hd, 2)
    sec = RopeSections.one_d(hd)
    a = rotate(q, p + k, sec) @ rotate(kv, p, sec)
    b = rotate(q, p + shift + k, sec) @ rotate(kv, p + shift, sec)
    assert abs(a - b) <= 1e-5 * max(abs(a), np.linalg.norm(q) * np.linalg.norm(kv))


@settings(max_examples=100, deadline=None)
@given(vec_seed, pos3, pos3, st.integers(0, 500))
def test_relative_offset_3d(seed, p, off, shift):
    q, kv = _vec(seed, 16, 2)
    sec = RopeSections.three_d(16)
    qp = np.add(p, off)
    s = (shift, shift, shift)
    a = rotate(q, qp, sec) @ rotate(kv, p, sec)
    b = rotate(q, qp + s, sec) @ rotate(kv, np.add(p, s), sec)
    assert abs(a - b) <= 1e-5 * np.linalg.norm(q) * np.linalg.norm(kv)


@settings(max_examples=50, deadline=None)
@given(vec_seed, st.booleans(), st.lists(st.integers(0, 3000), min_size=1, max_size=12))
def test_rerotate_matches_fresh_rotation(seed, three_d, old):
    hd = 16
    sec = _sections(hd, three_d)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((len(old), hd)).astype(np.float32)
    old = np.asarray(old)
    new = rng.integers(0, 3000, len(old))
    if three_d:
        old = np.stack([old, old % 7, old % 5], axis=1)
        new = np.stack([new, new % 7, new % 5], axis=1)
    moved = rerotate(apply_rotary(x, old, sec), old, new, sec)
    np.testing.assert_allclose(moved, apply_rotary(x, new, sec), atol=1e-5)


def test_apply_rotary_broadcasts_over_heads():
    x = _vec(0, 8, 6).reshape(3, 2, 8)
    pos = np.array([0, 5, 9])
    sec = RopeSections.one_d(8)
    out = apply_rotary(x, pos, sec)
    for i in range(3):
        for h in range(2):
            np.testing.assert_allclose(out[i, h], rotate(x[i, h], int(pos[i]), sec))


def _text(p, second=0):
    return CacheEntry(EntryKind.TEXT, p, second, token=5)


def _vis(p, second, row, col):
    return CacheEntry(EntryKind.VISION, p, second, patch=VisionPatch(0, second, 0, row, col))


def test_remap_is_identity_before_eviction():
    entries = [_text(i) for i in range(5)]
    assert contiguous_remap(entries) == [0, 1, 2, 3, 4]


def test_remap_closes_gaps():
    entries = [_text(0), _text(7), _text(8), _vis(20, 3, 0, 0), _vis(21, 3, 0, 1), _text(22, 3)]
    assert contiguous_remap(entries) == list(range(6))
    three = contiguous_remap(entries, three_d=True)
    assert three == [
        RopeIndex3D(0, 0, 0), RopeIndex3D(1, 1, 1), RopeIndex3D(2, 2, 2),
        RopeIndex3D(3, 0, 0), RopeIndex3D(3, 0, 1), RopeIndex3D(4, 4, 4),
    ]
    assert next_time_index(np.array(three)) == 5


def test_vision_seconds_get_separate_time_indices():
    entries = [_vis(0, 0, 0, 0), _vis(1, 0, 1, 1), _vis(2, 1, 0, 0), _vis(3, 1, 1, 1)]
    assert [i.t for i in contiguous_remap(entries, three_d=True)] == [0, 0, 1, 1]


def test_unordered_input_is_rejected():
    with pytest.raises(ContractViolation):
        contiguous_remap([_text(3), _text(2)])
    with pytest.raises(ContractViolation):
        contiguous_remap([_text(3), _text(3)])
