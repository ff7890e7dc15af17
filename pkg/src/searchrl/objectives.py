"""Group advantages, importance ratios, clipped surrogates and their gradients.

Four objective variants share this machinery:

* ``TOKEN_GRPO``         token-level ratios, no filter
* ``TOKEN_FILTERED``     token-level ratios, outcome filter
* ``SEQUENCE_UNFILTERED`` sequence-level ratio, no filter
* ``DSPO``               sequence-level ratio, outcome filter

All objectives are *maximized*; gradients are with respect to the policy
weight matrix and are returned dense.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core_types import Group, Trajectory
from .policy import FeatureBatch, Policy


class NonFiniteLoss(FloatingPointError):
    pass


class AlgorithmVariant(enum.Enum):
    TOKEN_GRPO = "TokenLevelGRPO"
    TOKEN_FILTERED = "TokenLevelFiltered"
    SEQUENCE_UNFILTERED = "SequenceLevelUnfiltered"
    DSPO = "DSPO"

    @property
    def sequence_level(self) -> bool:
        return self in (AlgorithmVariant.SEQUENCE_UNFILTERED, AlgorithmVariant.DSPO)

    @property
    def filtered(self) -> bool:
        return self in (AlgorithmVariant.TOKEN_FILTERED, AlgorithmVariant.DSPO)

    @classmethod
    def parse(cls, text: str) -> "AlgorithmVariant":
        for v in cls:
            if text in (v.value, v.name, v.name.lower()):
                return v
        raise ValueError(f"unknown algorithm variant {text!r}")


@dataclass(frozen=True)
class ObjectiveConfig:
    clip_epsilon: Optional[float] = None  # None: 0.01 for sequence-level variants, 0.2 for token-level
    kl_beta: float = 0.0
    advantage_delta: float = 1e-8
    std_mode: str = "population"

    def __post_init__(self):
        if self.clip_epsilon is not None and not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.kl_beta < 0.0:
            raise ValueError("kl_beta must be non-negative")
        if self.advantage_delta <= 0.0:
            raise ValueError("advantage_delta must be positive")
        if self.std_mode != "population":
            raise ValueError("only the population standard deviation is supported")

    @classmethod
    def defaults_for(cls, variant: AlgorithmVariant, **overrides) -> "ObjectiveConfig":
        return cls(**{"clip_epsilon": default_epsilon(variant), **overrides})

    def epsilon_for(self, variant: AlgorithmVariant) -> float:
        return default_epsilon(variant) if self.clip_epsilon is None else self.clip_epsilon


def default_epsilon(variant: AlgorithmVariant) -> float:
    return 0.01 if variant.sequence_level else 0.2


def group_advantages(rewards: Sequence[float], delta: float = 1e-8) -> np.ndarray:
    """``(R_i - mean R) / (std R + delta)`` with the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group advantages need at least two rewards")
    return (r - r.mean()) / (r.std() + delta)


def compute_advantages(group: Group, delta: float = 1e-8) -> Group:
    return group.with_advantages(group_advantages(group.rewards, delta))


def clipped_surrogate(ratio: float, advantage: float, eps: float) -> float:
    return min(ratio * advantage, min(max(ratio, 1.0 - eps), 1.0 + eps) * advantage)


def _new_log_probs(t: Trajectory, live: Policy) -> tuple[np.ndarray, np.ndarray]:
    agent = t.agent_records()
    batch = FeatureBatch.from_records(agent, live)
    lp = batch.log_probs(live)
    toks = np.array([r.token for r in agent])
    old = np.array([r.old_log_prob for r in agent], dtype=np.float64)
    return lp[np.arange(len(agent)), toks], old


def token_ratios(t: Trajectory, live: Policy) -> np.ndarray:
    new, old = _new_log_probs(t, live)
    return np.exp(new - old)


def sequence_ratio(t: Trajectory, live: Policy) -> float:
    """Geometric mean of the token ratios, over agent tokens only."""
    new, old = _new_log_probs(t, live)
    return float(np.exp(np.mean(new - old)))


def kl_penalty(t: Trajectory, live: Policy, ref: Policy) -> float:
    """Exact ``KL(live || ref)`` over the vocabulary, averaged over agent-token contexts."""
    agent = t.agent_records()
    batch = FeatureBatch.from_records(agent, live)
    lp, lq = batch.log_probs(live), batch.log_probs(ref)
    kl = np.sum(np.exp(lp) * (lp - lq), axis=1)
    return float(np.mean(kl))


@dataclass
class _Flat:
    """All agent tokens of a list of groups, flattened for vectorized evaluation."""

    batch: FeatureBatch
    tokens: np.ndarray
    old_lp: np.ndarray
    traj_of_token: np.ndarray
    traj_len: np.ndarray
    traj_adv: np.ndarray
    traj_weight: np.ndarray  # 1 / (n_groups * G) per trajectory

    @classmethod
    def build(cls, groups: Sequence[Group], policy: Policy) -> "_Flat":
        records, traj_of_token, lens, advs, weights = [], [], [], [], []
        n_groups = len(groups)
        j = 0
        for g in groups:
            if g.advantages is None:
                raise ValueError(f"group {g.prompt_id} has no advantages")
            for t, a in zip(g.trajectories, g.advantages):
                agent = t.agent_records()
                records.extend(agent)
                traj_of_token.extend([j] * len(agent))
                lens.append(len(agent))
                advs.append(a)
                weights.append(1.0 / (n_groups * g.size))
                j += 1
        return cls(
            batch=FeatureBatch.from_records(records, policy),
            tokens=np.array([r.token for r in records], dtype=np.int64),
            old_lp=np.array([r.old_log_prob for r in records], dtype=np.float64),
            traj_of_token=np.array(traj_of_token, dtype=np.int64),
            traj_len=np.array(lens, dtype=np.float64),
            traj_adv=np.array(advs, dtype=np.float64),
            traj_weight=np.array(weights, dtype=np.float64),
        )


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(seg, weights=values, minlength=n)


def buffer_loss_and_gradient(
    groups: Sequence[Group],
    live: Policy,
    ref: Optional[Policy],
    cfg: ObjectiveConfig,
    variant: AlgorithmVariant,
) -> tuple[float, np.ndarray]:
    """Objective and gradient averaged over a buffer of groups.

    Each group contributes ``1/G`` times the sum of its per-trajectory terms
    and the buffer value is the mean over groups.  Where the min selects the
    clipped branch the ratio carries no gradient; ties go to the unclipped
    branch.  Retrieved tokens are absent from the flattened batch, so they
    contribute neither likelihood terms nor gradient.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _buffer_loss_and_gradient(groups, live, ref, cfg, variant)


def _buffer_loss_and_gradient(groups, live, ref, cfg, variant):
    flat = _Flat.build(groups, live)
    n_traj = len(flat.traj_len)
    T = len(flat.tokens)
    eps = cfg.epsilon_for(variant)

    lp = flat.batch.log_probs(live)
    probs = np.exp(lp)
    idx = np.arange(T)
    log_ratio = lp[idx, flat.tokens] - flat.old_lp
    seg = flat.traj_of_token
    adv_tok = flat.traj_adv[seg]

    if variant.sequence_level:
        mean_log_ratio = _segment_sum(log_ratio, seg, n_traj) / flat.traj_len
        s = np.exp(mean_log_ratio)
        unclipped = s * flat.traj_adv
        clipped = np.clip(s, 1.0 - eps, 1.0 + eps) * flat.traj_adv
        use_unclipped = unclipped <= clipped
        surrogate = np.where(use_unclipped, unclipped, clipped)
        objective = float(np.sum(flat.traj_weight * surrogate))
        coef_traj = np.where(use_unclipped, flat.traj_weight * flat.traj_adv * s / flat.traj_len, 0.0)
        coef = coef_traj[seg]
    else:
        r = np.exp(log_ratio)
        unclipped = r * adv_tok
        clipped = np.clip(r, 1.0 - eps, 1.0 + eps) * adv_tok
        use_unclipped = unclipped <= clipped
        surrogate = np.where(use_unclipped, unclipped, clipped)
        w_tok = (flat.traj_weight / flat.traj_len)[seg]
        objective = float(np.sum(w_tok * surrogate))
        coef = np.where(use_unclipped, w_tok * adv_tok * r, 0.0)

    # d log pi(y_t) / d logits_t = onehot(y_t) - p_t
    dlogits = -coef[:, None] * probs
    dlogits[idx, flat.tokens] += coef

    if cfg.kl_beta > 0.0:
        if ref is None:
            raise ValueError("kl_beta > 0 needs a reference policy")
        lq = flat.batch.log_probs(ref)
        diff = lp - lq
        kl_tok = np.sum(probs * diff, axis=1)
        w_kl = cfg.kl_beta * (flat.traj_weight / flat.traj_len)[seg]
        objective -= float(np.sum(w_kl * kl_tok))
        dlogits -= w_kl[:, None] * probs * (diff - kl_tok[:, None])

    if not math.isfinite(objective) or not np.all(np.isfinite(dlogits)):
        raise NonFiniteLoss("objective or gradient is not finite")
    grad = flat.batch.scatter(dlogits, live.weights.shape)
    return objective, grad


def loss_and_gradient(
    group: Group,
    live: Policy,
    ref: Optional[Policy],
    cfg: ObjectiveConfig,
    variant: AlgorithmVariant,
) -> tuple[float, np.ndarray]:
    return buffer_loss_and_gradient([group], live, ref, cfg, variant)


def buffer_objective(groups: Sequence[Group], live: Policy, ref: Optional[Policy],
                     cfg: ObjectiveConfig, variant: AlgorithmVariant) -> float:
    """Objective value alone, computed term by term (no gradient)."""
    total = 0.0
    for g in groups:
        value = 0.0
        for t, a in zip(g.trajectories, g.advantages):
            if variant.sequence_level:
                term = clipped_surrogate(sequence_ratio(t, live), a, cfg.epsilon_for(variant))
            else:
                term = float(np.mean([clipped_surrogate(r, a, cfg.epsilon_for(variant)) for r in token_ratios(t, live)]))
            if cfg.kl_beta > 0.0:
                term -= cfg.kl_beta * kl_penalty(t, live, ref)
            value += term
        total += value / g.size
    return total / len(groups)


def per_trajectory_gradient_norms(group: Group, live: Policy, sequence_level: bool) -> np.ndarray:
    """Norms of each trajectory's unclipped policy-gradient contribution.

    Token-level weighting: ``A_i * sum_t r_t * grad log pi_t``.
    Sequence-level weighting: ``A_i * s_i * sum_t grad log pi_t``.
    """
    norms = []
    for t, a in zip(group.trajectories, group.advantages):
        agent = t.agent_records()
        batch = FeatureBatch.from_records(agent, live)
        lp = batch.log_probs(live)
        toks = np.array([r.token for r in agent])
        old = np.array([r.old_log_prob for r in agent])
        idx = np.arange(len(agent))
        log_r = lp[idx, toks] - old
        weight = np.full(len(agent), np.exp(np.mean(log_r))) if sequence_level else np.exp(log_r)
        dlogits = -(a * weight)[:, None] * np.exp(lp)
        dlogits[idx, toks] += a * weight
        norms.append(batch.sparse_norm(dlogits))
    return np.array(norms)

