import numpy as np
import pytest

from helpers import random_params
from searchrl.policy import (FNV_OFFSET, FeatureBatch, logits, NonFiniteGradient, PolicyParams, SparseGrad, _mix, apply_gradient,
                             featurize, grad_log_prob, hash_index, load_checkpoint, log_probs, sample_token,
                             save_checkpoint, snapshot)


def _fd_grad_log_prob(p, feats, y, h=1e-5):
    """Central differences of log_probs[y] over every weight entry."""
    g = np.zeros_like(p.weights)
    for idx in np.ndindex(*p.weights.shape):
        old = p.weights[idx]
        p.weights[idx] = old + h
        up = log_probs(p, feats)[y]
        p.weights[idx] = old - h
        down = log_probs(p, feats)[y]
        p.weights[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def test_featurize_empty_context_is_bias_only():
    f = featurize([], 3, 64)
    assert f.rows == (0,) and f.window == ()


def test_featurize_deterministic_and_in_range():
    ctx = [5, 1, 7, 7, 2]
    a = featurize(ctx, 4, 32)
    assert a == featurize(list(ctx), 4, 32)
    assert 0 in a.rows and all(0 <= i < 32 for i in a.rows)
    assert a.window == (2, 7, 7, 1)
    # bias + 4 positional unigrams + 3 suffix n-grams, before any collisions
    assert len(featurize(ctx, 4, 1 << 20).rows) == 8


def test_featurize_last_token_changes_a_unigram():
    F, V = 4096, 60
    # enumerate the offset-1 unigram row of every token: no collisions at this F
    rows = [hash_index(_mix(_mix(_mix(FNV_OFFSET, 1), 1), v), F) for v in range(V)]
    assert len(set(rows)) == V
    a = set(featurize([3, 9, 11], 3, F).rows)
    b = set(featurize([3, 9, 12], 3, F).rows)
    assert rows[11] in a and rows[11] not in b
    assert rows[12] in b and rows[12] not in a


def test_featurize_rejects_tiny_dim():
    with pytest.raises(ValueError):
        featurize([1], 2, 1)


def test_log_probs_zero_weights_uniform():
    p = PolicyParams.zeros(8, 5, 2)
    np.testing.assert_allclose(log_probs(p, (0, 3)), np.full(5, -np.log(5)), atol=1e-15)


def test_log_probs_normalized_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = random_params(rng, F=10, V=5, scale=3.0)
        feats = tuple(sorted(set(rng.integers(10, size=4).tolist()) | {0}))
        assert abs(np.exp(log_probs(p, feats)).sum() - 1.0) <= 1e-9


def test_log_probs_column_shift_raises_own_token():
    rng = np.random.default_rng(1)
    p = random_params(rng, F=6, V=4)
    feats = (0, 2, 5)
    before = log_probs(p, feats)
    p.weights[2, 1] += 0.7
    after = log_probs(p, feats)
    assert after[1] > before[1]
    assert np.all(np.delete(after, 1) < np.delete(before, 1))
    assert abs(np.exp(after).sum() - 1) < 1e-12


def test_log_probs_shift_invariant():
    rng = np.random.default_rng(2)
    p = random_params(rng, F=6, V=4)
    feats = (0, 3)
    shifted = p.copy()
    shifted.weights[3] += 12.5  # same constant on every logit
    np.testing.assert_allclose(log_probs(p, feats), log_probs(shifted, feats), atol=1e-10)


def test_sample_token_degenerate_logit():
    p = PolicyParams.zeros(4, 5, 1)
    p.weights[0, 3] = 20.0
    rng = np.random.default_rng(0)
    draws = [sample_token(p, (0,), rng)[0] for _ in range(100_000)]
    freq = np.mean(np.array(draws) == 3)
    expected = np.exp(log_probs(p, (0,))[3])
    assert freq > 0.999 and expected > 0.999


def test_sample_token_uniform_frequencies():
    p = PolicyParams.zeros(4, 4, 1)
    rng = np.random.default_rng(1)
    counts = np.bincount([sample_token(p, (0,), rng)[0] for _ in range(100_000)], minlength=4)
    np.testing.assert_allclose(counts / counts.sum(), 0.25, atol=0.01)


def test_sample_token_log_prob_and_determinism():
    rng0 = np.random.default_rng(5)
    p = random_params(rng0, F=8, V=6, scale=2.0)
    feats = (0, 4, 7)
    a = [sample_token(p, feats, np.random.default_rng(11)) for _ in range(3)]
    run1 = [sample_token(p, feats, r) for r in [np.random.default_rng(3)] for _ in range(50)]
    run2 = [sample_token(p, feats, r) for r in [np.random.default_rng(3)] for _ in range(50)]
    assert a[0] == a[1] == a[2]
    assert run1 == run2
    for tok, lp in run1:
        assert lp == log_probs(p, feats)[tok]


def test_grad_log_prob_uniform_two_tokens():
    p = PolicyParams.zeros(3, 2, 1)
    g = grad_log_prob(p, (0, 2), 0)
    assert list(g.rows) == [0, 2]
    np.testing.assert_allclose(g.values, [[0.5, -0.5, 0.0], [0.5, -0.5, 0.0]])


def test_grad_log_prob_rows_sum_to_zero():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_params(rng, F=8, V=5, scale=2.0)
        g = grad_log_prob(p, featurize([1, 4, 2], 3, 8), int(rng.integers(5)))
        assert np.all(np.abs(g.values[:, :5].sum(axis=1)) <= 1e-12)


def test_grad_log_prob_matches_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        F, V = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        p = random_params(rng, F=F, V=V)
        ctx = rng.integers(V, size=int(rng.integers(0, 5))).tolist()
        feats = featurize(ctx, 3, F)
        y = int(rng.integers(V))
        analytic = grad_log_prob(p, feats, y).to_dense(F, V + 3)
        numeric = _fd_grad_log_prob(p, feats, y)
        err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6)
        worst = max(worst, float(np.max(np.where(np.abs(numeric) > 1e-8, err, 0.0))))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)
    assert worst <= 1e-4


def test_copy_column_raises_token_at_offset():
    p = PolicyParams.zeros(16, 5, 3)
    feats = featurize([4, 1, 2], 3, 16)
    p.weights[0, 5 + 1] = 2.0  # bias row, copy offset 2 -> token 1
    z = logits(p, feats)
    np.testing.assert_array_equal(z, [0.0, 2.0, 0.0, 0.0, 0.0])
    # same weight copies whatever sits at offset 2
    np.testing.assert_array_equal(logits(p, featurize([0, 3, 4], 3, 16)), [0.0, 0.0, 0.0, 2.0, 0.0])


def test_repeated_window_token_accumulates_copy_weights():
    p = PolicyParams.zeros(16, 4, 3)
    p.weights[0, 4:] = [1.0, 0.5, 0.25]
    np.testing.assert_allclose(logits(p, featurize([2, 2, 2], 3, 16)), [0.0, 0.0, 1.75, 0.0])


def test_feature_batch_matches_single_contexts():
    rng = np.random.default_rng(8)
    p = random_params(rng, F=12, V=5, k=3)
    feats = [featurize(rng.integers(5, size=n).tolist(), 3, 12) for n in range(6)]
    batch = FeatureBatch(feats, 3)
    np.testing.assert_allclose(batch.logits(p), np.stack([logits(p, f) for f in feats]), atol=1e-14)
    d = rng.normal(size=(6, 5))
    dense = np.zeros_like(p.weights)
    for f, row in zip(feats, d):
        g = SparseGrad(np.array(f.rows), np.tile(np.concatenate([row, [row[t] for t in f.window] + [0.0] * (3 - len(f.window))]), (len(f.rows), 1)))
        g.add_to(dense)
    np.testing.assert_allclose(batch.scatter(d, p.weights.shape), dense, atol=1e-14)


def test_snapshot_is_frozen_copy():
    rng = np.random.default_rng(6)
    p = random_params(rng, F=5, V=3)
    s1, s2 = snapshot(p), snapshot(p)
    assert s1 == s2 and s1.snapshot_id != s2.snapshot_id
    before = log_probs(s1, (0, 2))
    p.weights[2] += 1.0
    np.testing.assert_array_equal(log_probs(s1, (0, 2)), before)
    with pytest.raises(ValueError):
        s1.weights[0, 0] = 3.0
    with pytest.raises(AttributeError):
        s1.snapshot_id = 3
    assert snapshot(s1) == s1


def test_apply_gradient_contract():
    p = PolicyParams.zeros(3, 2, 1)
    apply_gradient(p, np.zeros((3, 3)), 0.1)
    assert np.all(p.weights == 0)
    g = np.zeros((3, 3))
    g[1, 0] = 0.1
    apply_gradient(p, g, 1.0)
    assert p.weights[1, 0] == 0.1
    g[2, 1] = np.nan
    with pytest.raises(NonFiniteGradient):
        apply_gradient(p, g, 1.0)
    apply_gradient(p, SparseGrad(np.array([0]), np.array([[1.0, -1.0, 0.0]])), 0.5)
    np.testing.assert_array_equal(p.weights[0], [0.5, -0.5, 0.0])


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    p = random_params(rng, F=6, V=4, k=3)
    path = tmp_path / "ck.txt"
    save_checkpoint(p, path)
    assert path.read_text().splitlines()[0] == "F=6\tV=4\tk=3"
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.weights, p.weights)
    assert back.feature_window == 3


def test_params_validation():
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((4, 1)), 1)
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((4, 3)), 0)
    with pytest.raises(ValueError):
        PolicyParams(np.full((4, 3), np.inf), 1)
