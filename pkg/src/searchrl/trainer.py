"""The training loop: snapshot, fill buffer, normalize, update, validate."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .environment import Environment, KnowledgeBase, Prompt, Vocabulary
from .filtering import BufferStarvation, FilterStats, fill_buffer
from .objectives import (AlgorithmVariant, NonFiniteLoss, ObjectiveConfig, buffer_loss_and_gradient,
                         compute_advantages)
from .policy import PolicyParams, apply_gradient, clip_grad_norm, greedy_token, snapshot
from .rollout import RolloutConfig, generate_trajectory, rollout_group, trajectory_reward
from .warmstart import format_warmup

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyConfig:
    feature_dim: int = 4096
    feature_window: int = 12
    warmup_episodes: int = 2000
    warmup_iterations: int = 60
    warmup_lr: float = 20.0


@dataclass(frozen=True)
class TrainConfig:
    variant: AlgorithmVariant = AlgorithmVariant.DSPO
    steps: int = 200
    batch_size: int = 8
    lr: float = 2.5
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval_every: int = 10
    seed: int = 0
    grad_clip_norm: Optional[float] = None
    update_epochs: int = 1
    max_attempts: Optional[int] = None
    record_wall_time: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.update_epochs < 1:
            raise ValueError("update_epochs must be >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    @property
    def group_size(self) -> int:
        return self.rollout.group_size


@dataclass(frozen=True)
class StepReport:
    step: int
    mean_reward: float
    buffer_reward: float
    objective: float
    grad_norm: float
    stats: FilterStats
    eval_reward: Optional[float] = None
    wall_ms: Optional[float] = None


class TrainingError(RuntimeError):
    """A training step failed; ``step`` is the failing step index and ``cause`` the original error."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause

    @property
    def error_name(self) -> str:
        return type(self.cause).__name__


def initial_policy(cfg: TrainConfig, env: Environment, vocab: Vocabulary, prompts: Sequence[Prompt]) -> PolicyParams:
    pc = cfg.policy
    params = PolicyParams.zeros(pc.feature_dim, vocab.size, pc.feature_window)
    rng = np.random.default_rng([cfg.seed, 1])
    return format_warmup(params, env, vocab, prompts, pc.warmup_episodes, pc.warmup_iterations, pc.warmup_lr, rng)


def evaluate(params, prompts: Sequence[Prompt], kb: KnowledgeBase, cfg: RolloutConfig) -> float:
    """Fraction of prompts answered correctly under greedy decoding, one trajectory each."""
    if not prompts:
        raise ValueError("no prompts to evaluate on")
    env = Environment(kb, max_turns=cfg.max_turns, max_action_tokens=cfg.max_action_tokens)
    rng = np.random.default_rng(0)
    hits = 0
    for prompt in prompts:
        t = generate_trajectory(params, prompt, env, cfg.max_total_agent_tokens, rng,
                                sampler=lambda p, f, _rng: greedy_token(p, f))
        hits += trajectory_reward(t, prompt)
    return hits / len(prompts)


def train(
    cfg: TrainConfig,
    kb: KnowledgeBase,
    vocab: Vocabulary,
    prompts: Sequence[Prompt],
    heldout: Sequence[Prompt] = (),
    init: Optional[PolicyParams] = None,
    on_step: Optional[Callable[[StepReport, PolicyParams], Optional[bool]]] = None,
) -> tuple[PolicyParams, list[StepReport]]:
    """Run ``cfg.steps`` training steps and return the final policy with one report per step.

    The reference policy is the initial policy, frozen once.  Each step
    freezes the current policy as the old policy, fills a buffer of groups
    with it, and applies ``cfg.update_epochs`` ascent steps on the buffer
    objective.  Deterministic given ``cfg.seed``.  ``on_step`` sees every
    report with the live params; returning True ends training early.
    """
    if not prompts:
        raise ValueError("no training prompts")
    env = Environment(kb, max_turns=cfg.rollout.max_turns, max_action_tokens=cfg.rollout.max_action_tokens)
    params = init.copy() if init is not None else initial_policy(cfg, env, vocab, prompts)
    ref = snapshot(params)
    variant = cfg.variant
    reports: list[StepReport] = []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        old = snapshot(params)
        step_rng = np.random.default_rng([cfg.seed, 2, step])

        def sample_group(prompt, rng, _old=old):
            return rollout_group(_old, prompt, kb, cfg.rollout, rng)

        try:
            buffer, stats = fill_buffer(sample_group, prompts, cfg.batch_size, variant.filtered,
                                        step_rng, cfg.max_attempts)
            buffer = [compute_advantages(g, cfg.objective.advantage_delta) for g in buffer]
            objective, grad_norm = 0.0, 0.0
            for epoch in range(cfg.update_epochs):
                value, grad = buffer_loss_and_gradient(buffer, params, ref, cfg.objective, variant)
                grad, norm = clip_grad_norm(grad, cfg.grad_clip_norm)
                if epoch == 0:
                    objective, grad_norm = value, norm
                apply_gradient(params, grad, cfg.lr)
        except (BufferStarvation, NonFiniteLoss) as exc:
            raise TrainingError(step, exc) from exc

        eval_reward = None
        if heldout and (step + 1) % cfg.eval_every == 0:
            eval_reward = evaluate(params, heldout, kb, cfg.rollout)
        n_buf = sum(g.size for g in buffer)
        report = StepReport(
            step=step,
            mean_reward=stats.sampled_reward,
            buffer_reward=sum(sum(g.rewards) for g in buffer) / n_buf,
            objective=objective,
            grad_norm=grad_norm,
            stats=stats,
            eval_reward=eval_reward,
            wall_ms=(time.perf_counter() - t0) * 1e3 if cfg.record_wall_time else None,
        )
        reports.append(report)
        if on_step is not None and on_step(report, params):
            break
    return params, reports
