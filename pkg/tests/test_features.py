from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxlm.corpus import AGENT, USER, Interaction
from ctxlm.features import (META_DIM, EmbeddingTable, FeatureConfig, FeatureError, avg_embedding,
                            build_features, decayed_embedding, meta_vector)

TABLE = EmbeddingTable({"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [2.0, 2.0]})


def ts(*args):
    return datetime(*args, tzinfo=timezone.utc).timestamp()


def turn(i, speaker, text, t=0.0):
    return Interaction("c", i, t, speaker, tuple(text.split()))


def test_embedding_table_basics(tmp_path):
    assert TABLE.lookup("zzz").tolist() == [0.0, 0.0]
    assert TABLE.lookup("a").tolist() == [1.0, 0.0]
    TABLE.save(tmp_path / "e.txt")
    again = EmbeddingTable.load(tmp_path / "e.txt")
    assert again.dim == 2 and len(again) == 3
    assert np.array_equal(again.rows(["c", "b", "?"]), TABLE.rows(["c", "b", "?"]))


def test_embedding_table_rejects_ragged(tmp_path):
    (tmp_path / "bad.txt").write_text("a 1 2\nb 1\n")
    with pytest.raises(FeatureError):
        EmbeddingTable.load(tmp_path / "bad.txt")
    with pytest.raises(FeatureError):
        EmbeddingTable({"a": [1.0], "b": [1.0, 2.0]})


@pytest.mark.parametrize("turns,expected", [
    ([], [0.0, 0.0]),
    ([["a"]], [1.0, 0.0]),
    ([["a"], ["b"]], [0.5, 0.5]),
    ([["a", "a", "a"], ["b"]], [0.75, 0.25]),
])
def test_avg_embedding(turns, expected):
    assert avg_embedding(turns, TABLE).tolist() == pytest.approx(expected)


def test_decayed_embedding_examples():
    got = decayed_embedding([["a"], ["b"]], TABLE, 0.5)
    assert got == pytest.approx([1 / 3, 2 / 3], abs=1e-4)
    assert decayed_embedding([], TABLE, 0.5).tolist() == [0.0, 0.0]
    small = decayed_embedding([["a"], ["c"], ["b"]], TABLE, 1e-6)
    assert small == pytest.approx([0.0, 1.0], abs=1e-5)


@pytest.mark.parametrize("gamma", [0.0, -0.1, 1.5])
def test_decay_out_of_range(gamma):
    with pytest.raises(FeatureError):
        decayed_embedding([["a"]], TABLE, gamma)


words = st.lists(st.sampled_from(["a", "b", "c", "oov"]), min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(st.lists(words, max_size=6))
def test_decay_one_is_mean_of_turn_means(turns):
    expect = np.mean([TABLE.rows(t).mean(axis=0) for t in turns], axis=0) if turns else np.zeros(2)
    assert np.allclose(decayed_embedding(turns, TABLE, 1.0), expect, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(words, min_size=1, max_size=6), st.randoms(use_true_random=False),
       st.floats(0.01, 1.0), st.floats(0, 4e9))
def test_bag_of_words_and_finite(turns, rnd, gamma, clock):
    shuffled = [rnd.sample(t, len(t)) for t in turns]
    assert np.allclose(avg_embedding(turns, TABLE), avg_embedding(shuffled, TABLE), atol=1e-12)
    assert np.allclose(decayed_embedding(turns, TABLE, gamma), decayed_embedding(shuffled, TABLE, gamma),
                       atol=1e-12)
    window = [turn(i, USER if i % 2 == 0 else AGENT, " ".join(t)) for i, t in enumerate(turns)]
    for blocks in ("prev,meta,cur", "prev-d,meta,cur"):
        v = build_features(window, turns[0], clock, FeatureConfig.parse(blocks, gamma), TABLE).vector()
        assert np.all(np.isfinite(v))


def test_meta_monday_morning():
    m = meta_vector(ts(2024, 1, 1, 9, 0))  # a Monday
    expected = np.zeros(META_DIM)
    expected[0] = 1
    expected[7] = 1
    assert m.tolist() == expected.tolist()


@pytest.mark.parametrize("hour,slot", [(4, 2), (5, 0), (11, 0), (12, 1), (17, 1), (18, 2), (23, 2), (0, 2)])
def test_time_of_day_boundaries(hour, slot):
    m = meta_vector(ts(2024, 1, 3, hour, 59))
    assert m[7:].tolist() == [1.0 if i == slot else 0.0 for i in range(3)]
    assert m[:7].sum() == 1 and m[2] == 1  # Wednesday


@settings(max_examples=100)
@given(st.floats(0, 4e9))
def test_meta_one_hot_groups(t):
    m = meta_vector(t)
    assert m[:7].sum() == 1 and m[7:].sum() == 1
    assert set(m.tolist()) <= {0.0, 1.0}


def test_feature_config_parsing(tmp_path):
    cfg = FeatureConfig.parse("meta, cur,prev")
    assert cfg.blocks == ("prev", "meta", "cur")
    assert cfg.label == "prev, meta, cur" and cfg.slug == "prev+meta+cur"
    assert cfg.uses_cur and cfg.dimension(50) == 100 + 10 + 50
    cfg.save(tmp_path / "f.json")
    assert FeatureConfig.load(tmp_path / "f.json") == cfg
    for bad in ["prev,prev-d", "", "prev,bogus", "meta,meta"]:
        with pytest.raises(FeatureError):
            FeatureConfig.parse(bad)
    with pytest.raises(FeatureError):
        FeatureConfig.parse("prev-d", decay=0.0)


def test_meta_only_empty_window():
    f = build_features([], None, ts(2024, 1, 1, 9), FeatureConfig(("meta",)), TABLE)
    assert f.prev_user.tolist() == [0, 0] and f.prev_agent.tolist() == [0, 0]
    assert f.vector().tolist() == meta_vector(ts(2024, 1, 1, 9)).tolist()
    assert f.cur is None


def test_agent_only_window():
    f = build_features([turn(0, AGENT, "a b")], None, 0.0, FeatureConfig(("prev",)), TABLE)
    assert f.prev_user.tolist() == [0, 0]
    assert f.prev_agent.tolist() == [0.5, 0.5]


def test_layout_and_block_omission():
    window = [turn(0, USER, "a"), turn(1, AGENT, "b"), turn(2, USER, "c a")]
    clock = ts(2024, 1, 6, 20)
    full = build_features(window, ["c"], clock, FeatureConfig.parse("prev,meta,cur"), TABLE).vector()
    user = avg_embedding([["a"], ["c", "a"]], TABLE)
    expect = np.concatenate([user, [0, 1], meta_vector(clock), [2, 2]])
    assert full.tolist() == pytest.approx(expect.tolist())
    meta_cur = build_features(window, ["c"], clock, FeatureConfig.parse("meta,cur"), TABLE).vector()
    assert meta_cur.shape == (META_DIM + 2,)


def test_prev_d_block_matches_standalone():
    window = [turn(0, USER, "a"), turn(1, AGENT, "c"), turn(2, USER, "b b")]
    cfg = FeatureConfig.parse("prev-d", decay=0.5)
    f = build_features(window, None, 0.0, cfg, TABLE)
    assert np.array_equal(f.prev_user, decayed_embedding([("a",), ("b", "b")], TABLE, 0.5))


def test_cur_requires_hypothesis():
    with pytest.raises(FeatureError):
        build_features([], None, 0.0, FeatureConfig.parse("meta,cur"), TABLE)


def test_features_ignore_current_reference_text():
    # the window ends before the current turn, so the reference text cannot reach prev/meta
    window = [turn(0, USER, "a")]
    cfg = FeatureConfig.parse("prev,meta,cur")
    f1 = build_features(window, ["b"], 100.0, cfg, TABLE).vector()
    f2 = build_features(window, ["b"], 100.0, cfg, TABLE).vector()
    assert np.array_equal(f1, f2)
    f3 = build_features(window, ["c"], 100.0, cfg, TABLE).vector()
    assert np.array_equal(f1[:-2], f3[:-2])
