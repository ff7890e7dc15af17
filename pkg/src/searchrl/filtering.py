"""Dynamic outcome filter and the buffer-filling loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_types import Group
from .environment import Prompt


class BufferStarvation(RuntimeError):
    """Raised when the attempt budget runs out; ``stats`` covers every group sampled."""

    def __init__(self, message: str, stats: "FilterStats | None" = None):
        super().__init__(message)
        self.stats = stats


def passes_filter(rewards: Sequence[int]) -> bool:
    """Keep a group only if its rewards are neither all 0 nor all 1."""
    total = sum(int(r) for r in rewards)
    return 0 < total < len(rewards)


@dataclass
class FilterStats:
    groups_sampled: int = 0
    groups_accepted: int = 0
    rejected_all_correct: int = 0
    rejected_all_wrong: int = 0
    trajectories_sampled: int = 0
    successes_sampled: int = 0

    def record(self, rewards: Sequence[int], accepted: bool) -> None:
        self.groups_sampled += 1
        self.trajectories_sampled += len(rewards)
        self.successes_sampled += sum(rewards)
        if accepted:
            self.groups_accepted += 1
        elif sum(rewards) == len(rewards):
            self.rejected_all_correct += 1
        else:
            self.rejected_all_wrong += 1

    @property
    def acceptance_rate(self) -> float:
        return self.groups_accepted / self.groups_sampled if self.groups_sampled else 0.0

    @property
    def sampled_reward(self) -> float:
        return self.successes_sampled / self.trajectories_sampled if self.trajectories_sampled else 0.0


def fill_buffer(
    sample_group: Callable[[Prompt, np.random.Generator], Group],
    prompts: Sequence[Prompt],
    batch_size: int,
    filtered: bool,
    rng: np.random.Generator,
    max_attempts: int | None = None,
) -> tuple[list[Group], FilterStats]:
    """Sample prompts uniformly with replacement until ``batch_size`` groups are admitted.

    ``sample_group`` runs one group rollout for a prompt (normally
    :func:`searchrl.rollout.rollout_group` bound to the old-policy snapshot).
    With ``filtered`` set only groups passing :func:`passes_filter` are
    admitted.  Raises :class:`BufferStarvation` after ``max_attempts`` groups
    (default ``50 * batch_size``) without filling the buffer.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not prompts:
        raise ValueError("no prompts to sample from")
    max_attempts = 50 * batch_size if max_attempts is None else max_attempts
    if max_attempts < batch_size:
        raise ValueError("max_attempts must be >= batch_size")
    buffer: list[Group] = []
    stats = FilterStats()
    while len(buffer) < batch_size:
        if stats.groups_sampled >= max_attempts:
            raise BufferStarvation(
                f"only {len(buffer)} of {batch_size} groups admitted after {max_attempts} attempts", stats)
        prompt = prompts[int(rng.integers(len(prompts)))]
        group = sample_group(prompt, rng)
        accepted = passes_filter(group.rewards) if filtered else True
        stats.record(group.rewards, accepted)
        if accepted:
            buffer.append(group)
    return buffer, stats
