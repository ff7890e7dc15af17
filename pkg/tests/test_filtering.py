import itertools

import numpy as np
import pytest

from searchrl.core_types import Group, Provenance, Terminal, TokenRecord, Trajectory
from searchrl.environment import Prompt
from searchrl.filtering import BufferStarvation, FilterStats, fill_buffer, passes_filter

PROMPTS = [Prompt(f"p{i}", (6,), (7,), 1) for i in range(5)]
_T = Trajectory("p", (), (TokenRecord(1, Provenance.AGENT, -0.1),), Terminal.LENGTH_LIMIT)


def _bernoulli_sampler(p, G):
    def sample(prompt, rng):
        rewards = tuple(int(x) for x in rng.random(G) < p)
        return Group(prompt.prompt_id, (_T,) * G, rewards)
    return sample


def test_filter_examples():
    assert passes_filter([0, 1, 0, 0])
    assert not passes_filter([1, 1, 1, 1])
    assert not passes_filter([0, 0, 0])


@pytest.mark.parametrize("G", range(2, 13))
def test_filter_exhaustive(G):
    for bits in itertools.product((0, 1), repeat=G):
        assert passes_filter(bits) == (0 < sum(bits) < G)


def test_stats_reconcile_and_classify():
    s = FilterStats()
    s.record((1, 1), False)
    s.record((0, 0), False)
    s.record((0, 1), True)
    assert (s.groups_sampled, s.groups_accepted, s.rejected_all_correct, s.rejected_all_wrong) == (3, 1, 1, 1)
    assert s.sampled_reward == pytest.approx(3 / 6)


def test_unfiltered_takes_every_group():
    buf, stats = fill_buffer(_bernoulli_sampler(1.0, 4), PROMPTS, 3, False, np.random.default_rng(0))
    assert len(buf) == 3 and stats.groups_sampled == 3 and stats.groups_accepted == 3


def test_filtered_buffer_has_mixed_groups_only():
    buf, stats = fill_buffer(_bernoulli_sampler(0.5, 4), PROMPTS, 16, True, np.random.default_rng(1))
    assert len(buf) == 16 and all(passes_filter(g.rewards) for g in buf)
    assert stats.groups_sampled == stats.groups_accepted + stats.rejected_all_correct + stats.rejected_all_wrong


def test_starvation_after_max_attempts():
    calls = []

    def all_wrong(prompt, rng):
        calls.append(prompt)
        return Group(prompt.prompt_id, (_T, _T), (0, 0))

    with pytest.raises(BufferStarvation):
        fill_buffer(all_wrong, PROMPTS, 2, True, np.random.default_rng(0))
    assert len(calls) == 100  # default 50 * B
    try:
        fill_buffer(all_wrong, PROMPTS, 2, True, np.random.default_rng(0))
    except BufferStarvation as exc:
        assert exc.stats.rejected_all_wrong == 100
    calls.clear()
    with pytest.raises(BufferStarvation):
        fill_buffer(all_wrong, PROMPTS, 2, True, np.random.default_rng(0), max_attempts=7)
    assert len(calls) == 7


def test_fill_buffer_preconditions():
    with pytest.raises(ValueError):
        fill_buffer(_bernoulli_sampler(0.5, 2), PROMPTS, 0, True, np.random.default_rng(0))
    with pytest.raises(ValueError):
        fill_buffer(_bernoulli_sampler(0.5, 2), PROMPTS, 4, True, np.random.default_rng(0), max_attempts=3)


def test_prompts_sampled_with_replacement_deterministically():
    seen = []

    def sampler(prompt, rng):
        seen.append(prompt.prompt_id)
        return Group(prompt.prompt_id, (_T, _T), (0, 1))

    fill_buffer(sampler, PROMPTS[:2], 10, True, np.random.default_rng(3))
    first = list(seen)
    seen.clear()
    fill_buffer(sampler, PROMPTS[:2], 10, True, np.random.default_rng(3))
    assert seen == first and len(set(first)) == 2 and len(first) == 10


def _acceptance_rate(p, G, n_groups, seed):
    """Fill one-group buffers until ``n_groups`` groups were sampled; accepted / sampled."""
    rng = np.random.default_rng(seed)
    sampled = accepted = 0
    while sampled < n_groups:
        try:
            _, stats = fill_buffer(_bernoulli_sampler(p, G), PROMPTS, 1, True, rng, max_attempts=n_groups - sampled)
        except BufferStarvation as exc:
            stats = exc.stats
        sampled += stats.groups_sampled
        accepted += stats.groups_accepted
    return accepted / sampled


@pytest.mark.parametrize("p", [0.5, 0.1, 0.9])
def test_acceptance_rate_matches_binomial(p):
    G = 4
    expected = 1 - p ** G - (1 - p) ** G
    assert abs(_acceptance_rate(p, G, 10_000, int(p * 100)) - expected) <= 0.02
