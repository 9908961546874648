import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamkv.datapipe import ChunkSpec, Word
from streamkv.errors import ValidationError
from streamkv.streamcache import StreamConfig
from streamkv.tinymodel import PLACEHOLDER_ID
from streamkv.training import (
    PLACEHOLDER,
    SINK_PREFIX,
    TEXT,
    VISION,
    VISION_SLOT,
    WINDOW_PREFIX,
    build_training_sample,
    split_prefix,
    tokenize,
    word_token_id,
)

CFG = StreamConfig(t_sink=4, t_window=6, vision_tokens_per_second=3)


def words_every_second(start, end, per_second=2):
    return [Word(f"w{t}_{k}", t + k * 0.4, t + k * 0.4 + 0.3) for t in range(start, end) for k in range(per_second)]


def test_token_ids_avoid_reserved_range():
    ids = tokenize(["goal", "GOAL", "pass"], vocab_size=50)
    assert ids[0] == ids[1] and all(2 <= i < 50 for i in ids)
    assert word_token_id("goal") == word_token_id("Goal")


def test_split_prefix():
    prev = list(range(20))
    assert split_prefix(prev, 4, 6) == ([0, 1, 2, 3], list(range(14, 20)))
    assert split_prefix(prev[:7], 4, 6) == ([0, 1, 2, 3], [4, 5, 6])
    assert split_prefix(prev, 0, 3) == ([], [17, 18, 19])
    assert split_prefix(prev, 3, 0) == ([0, 1, 2], [])
    assert split_prefix(prev, None, 3) == (prev, [])


def test_narration_every_second_has_no_placeholders():
    tl = words_every_second(0, 10)
    s = build_training_sample(tl, ChunkSpec(0, 4, 4, 2), CFG)
    assert PLACEHOLDER not in s.kinds
    assert s.loss_mask == [k == TEXT for k in s.kinds]
    assert s.kinds[:3] == [VISION] * 3 and s.kinds[3:5] == [TEXT] * 2


def test_silent_second_gets_one_placeholder():
    tl = [w for w in words_every_second(0, 10) if not 5 <= w.start < 6]
    s = build_training_sample(tl, ChunkSpec(4, 8, 4, 2), CFG)
    ph = [i for i, k in enumerate(s.kinds) if k == PLACEHOLDER]
    assert len(ph) == 1 and s.seconds[ph[0]] == 5
    assert s.tokens[ph[0]] == PLACEHOLDER_ID and s.loss_mask[ph[0]]


def test_prefix_from_prior_text():
    tl = words_every_second(0, 30)
    s = build_training_sample(tl, ChunkSpec(12, 36, 24, 12), CFG, duration=36)
    prior = tokenize([w for w in tl if w.start < 12])
    assert s.sink_prefix == prior[:4] and s.window_prefix == prior[-6:]
    assert s.kinds[:10] == [SINK_PREFIX] * 4 + [WINDOW_PREFIX] * 6
    assert not any(s.loss_mask[:10])


def test_chunk_out_of_range():
    with pytest.raises(ValidationError):
        build_training_sample(words_every_second(0, 10), ChunkSpec(0, 24, 24, 12), CFG)
    with pytest.raises(ValidationError):
        build_training_sample(words_every_second(0, 10), ChunkSpec(0, 24, 24, 12), CFG, duration=20)


def test_sample_layout_interleaves_by_second():
    tl = words_every_second(0, 6, per_second=1)
    s = build_training_sample(tl, ChunkSpec(0, 6, 6, 3), CFG)
    secs = [x for x in s.seconds if x is not None]
    assert secs == sorted(secs)
    for t in range(6):
        kinds = [k for k, x in zip(s.kinds, s.seconds) if x == t]
        assert kinds == [VISION] * 3 + [TEXT]
    assert s.tokens[:3] == [VISION_SLOT] * 3
    d = s.to_dict()
    assert d["chunk"] == {"start": 0, "end": 6, "W": 6, "O": 3}


@st.composite
def transcripts(draw):
    n_sec = draw(st.integers(4, 40))
    words = []
    for t in range(n_sec):
        for k in range(draw(st.integers(0, 3))):
            words.append(Word(f"w{draw(st.integers(0, 30))}", t + 0.3 * k, t + 0.3 * k + 0.2))
    return words, n_sec


@settings(max_examples=300, deadline=None)
@given(transcripts(), st.integers(0, 6), st.integers(0, 8), st.integers(0, 4), st.data())
def test_mask_fuzz(tr, t_sink, t_window, vtps, data):
    words, n_sec = tr
    W = data.draw(st.integers(2, n_sec))
    O = data.draw(st.integers(1, W - 1))
    start = data.draw(st.integers(0, n_sec - W))
    cfg = StreamConfig(t_sink=t_sink, t_window=t_window, vision_tokens_per_second=vtps)
    s = build_training_sample(words, ChunkSpec(start, start + W, W, O), cfg, duration=n_sec)
    assert len(s.tokens) == len(s.kinds) == len(s.loss_mask) == len(s.seconds)
    assert s.loss_mask == [k in (TEXT, PLACEHOLDER) for k in s.kinds]
    spoken = {int(w.start) for w in words}
    for t in range(start, start + W):
        kinds = [k for k, x in zip(s.kinds, s.seconds) if x == t]
        assert kinds.count(PLACEHOLDER) == (0 if t in spoken else 1)
        assert kinds.count(VISION) == vtps
    prior = tokenize([w for w in words if w.start < start])
    assert s.sink_prefix == prior[:t_sink]
    rest = prior[t_sink:]
    assert s.window_prefix == rest[max(0, len(rest) - t_window):]
