import numpy as np
import pytest

from normadapt import data as dt
from normadapt.model import VisionStub


def spec(**overrides):
    base = dict(kind="text-pretrain", n_samples=50, seq_len=24, seed=0)
    base.update(overrides)
    return dt.TaskSpec(**base)


def test_same_seed_is_bitwise_identical():
    a = dt.generate(spec(kind="mm-adapt"))
    b = dt.generate(spec(kind="mm-adapt"))
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.targets, b.targets)
    np.testing.assert_array_equal(a.features, b.features)
    c = dt.generate(spec(kind="mm-adapt", seed=1))
    assert not np.array_equal(a.tokens, c.tokens)


def test_degenerate_mixture_labels_all_conversation():
    ds = dt.generate(spec(mixture=(1.0, 0.0, 0.0)))
    assert (ds.categories == 0).all()
    # every body starts with the question marker right after SEP
    for row in ds.tokens:
        assert row[list(row).index(dt.SEP) + 1] == dt.Q


def test_mixture_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        spec(mixture=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError, match="non-negative"):
        spec(mixture=(1.5, -0.5, 0.0))
    with pytest.raises(ValueError, match="n_samples"):
        spec(n_samples=0)
    with pytest.raises(ValueError, match="kind"):
        spec(kind="video")
    with pytest.raises(ValueError, match="seq_len"):
        spec(seq_len=10)


def test_category_counts_track_mixture():
    ds = dt.generate(spec(n_samples=3000, mixture=(0.6, 0.2, 0.2), seed=3))
    freq = np.bincount(ds.categories, minlength=3) / len(ds)
    np.testing.assert_allclose(freq, [0.6, 0.2, 0.2], atol=0.05)


def test_oracle_decoder_recovers_every_answer():
    for kind in dt.TASK_KINDS:
        ds = dt.generate(spec(kind=kind, n_samples=200, seed=5))
        for i in range(len(ds)):
            expect = dict(dt.expected_answers(ds.tokens[i], ds.values[i], ds.spec))
            masked = np.flatnonzero(ds.answer_mask[i])
            assert set(masked) == set(expect)
            for pos in masked:
                assert ds.tokens[i, pos] == expect[pos]


def test_text_targets_score_all_transitions():
    ds = dt.generate(spec(kind="text-pretrain", n_samples=20, seed=2))
    assert ds.targets.shape == ds.tokens.shape
    for i in range(len(ds)):
        row, tgt = ds.tokens[i], ds.targets[i]
        for j in range(ds.spec.seq_len - 1):
            if row[j + 1] != dt.PAD:
                assert tgt[j] == row[j + 1]
            else:
                assert tgt[j] == dt.IGNORE
        assert tgt[-1] == dt.IGNORE


def test_mm_targets_are_answer_only_with_prefix_offset():
    ds = dt.generate(spec(kind="mm-adapt", n_samples=20, seed=2))
    K = ds.spec.n_attrs
    assert ds.targets.shape == (20, K + ds.spec.seq_len)
    assert (ds.targets[:, :K] == dt.IGNORE).all()
    for i in range(len(ds)):
        scored = np.flatnonzero(ds.targets[i] != dt.IGNORE)
        answers = np.flatnonzero(ds.answer_mask[i])
        np.testing.assert_array_equal(scored, answers - 1 + K)
        for pos in scored:
            assert ds.targets[i, pos] == ds.tokens[i, pos - K + 1]


def test_features_follow_latent_slots():
    st = VisionStub(d_visual=8, n_slots=4 * 16, seed=11, noise_std=0.0)
    ds = dt.generate(spec(kind="mm-adapt", n_samples=10, seed=4), stub=st)
    for i in range(10):
        slots = np.arange(4) * 16 + ds.values[i]
        np.testing.assert_array_equal(ds.features[i], st._table[slots])


def test_vocab_requirement_arithmetic():
    ds = dt.generate(spec(n_samples=5))
    assert ds.vocab_required == 9 + 4 + 64 == 77
    assert ds.tokens.max() < ds.vocab_required


def test_reasoning_relation_tokens():
    ds = dt.generate(spec(mixture=(0.0, 0.0, 1.0), n_samples=300, seed=9))
    seen = set()
    for i in range(len(ds)):
        row = ds.tokens[i]
        pos = list(row).index(dt.CMP)
        a = row[pos + 1] - 9
        b = row[pos + 2] - 9
        rel = row[pos + 3]
        za, zb = ds.values[i, a], ds.values[i, b]
        want = dt.GT if za > zb else (dt.LT if za < zb else dt.EQ)
        assert rel == want
        seen.add(int(rel))
    assert seen == {dt.GT, dt.LT, dt.EQ}  # all three outcomes occur at n=300
