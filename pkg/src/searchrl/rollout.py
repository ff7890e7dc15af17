"""Group rollouts of a frozen policy snapshot against the search environment."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core_types import Group, Provenance, Terminal, TokenRecord, Trajectory, dumps_trajectory
from .environment import (EnvError, Environment, KnowledgeBase, OutcomeKind, Prompt, ProtocolTokens,
                          terminal_reward)
from .policy import Policy, sample_token

Sampler = Callable[[Policy, tuple, np.random.Generator], tuple[int, float]]


@dataclass(frozen=True)
class RolloutConfig:
    group_size: int = 8
    max_turns: int = 4
    max_action_tokens: int = 32
    max_total_agent_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2 for group-normalized advantages")
        if min(self.max_turns, self.max_action_tokens, self.max_total_agent_tokens) < 1:
            raise ValueError("rollout limits must be positive")


def trajectory_rng(base_seed: int, prompt_id: str, index: int) -> np.random.Generator:
    """Independent substream for trajectory ``index`` of a group."""
    return np.random.default_rng([base_seed, zlib.crc32(prompt_id.encode()), index])


def generate_trajectory(
    policy: Policy,
    prompt: Prompt,
    env: Environment,
    max_total_agent_tokens: int,
    rng: np.random.Generator,
    sampler: Sampler = sample_token,
) -> Trajectory:
    p = env.protocol
    stops = (p.end_tool_call, p.end_answer)
    context = list(prompt.question)
    records: list[TokenRecord] = []
    n_agent = 0
    turns = 0
    answer: tuple[int, ...] = ()
    while True:
        action: list[int] = []
        limit_hit = False
        while True:
            if n_agent >= max_total_agent_tokens or len(action) >= env.max_action_tokens:
                limit_hit = True
                break
            feats = policy.featurize(context)
            tok, lp = sampler(policy, feats, rng)
            records.append(TokenRecord(tok, Provenance.AGENT, lp, feats))
            context.append(tok)
            action.append(tok)
            n_agent += 1
            if tok in stops:
                break
        try:
            outcome = env.step(prompt, turns, action, limit_hit=limit_hit)
        except EnvError:
            terminal = Terminal.MALFORMED
            break
        if outcome.kind is OutcomeKind.TOOL_RESULT:
            turns += 1
            for tok in outcome.tokens:
                records.append(TokenRecord(tok, Provenance.RETRIEVED))
                context.append(tok)
            continue
        if outcome.kind is OutcomeKind.TERMINATED:
            terminal = Terminal.ANSWERED
            answer = outcome.tokens
        else:
            terminal = Terminal.SEARCH_BUDGET_EXHAUSTED if outcome.budget_exhausted else Terminal.LENGTH_LIMIT
        break
    return Trajectory(prompt.prompt_id, prompt.question, tuple(records), terminal, answer)


def trajectory_reward(t: Trajectory, prompt: Prompt) -> int:
    if t.terminal is not Terminal.ANSWERED:
        return 0
    return terminal_reward(t.answer_span, prompt.gold_answer)


def rollout_group(
    snapshot: Policy,
    prompt: Prompt,
    kb: KnowledgeBase,
    cfg: RolloutConfig,
    rng: np.random.Generator,
    sampler: Sampler = sample_token,
    protocol: ProtocolTokens = ProtocolTokens(),
) -> Group:
    """Sample ``cfg.group_size`` trajectories for one prompt under a frozen policy.

    Environment errors end the offending trajectory (terminal ``Malformed``,
    reward 0) without aborting the group.
    """
    env = Environment(kb, protocol, cfg.max_turns, cfg.max_action_tokens)
    base = int(rng.integers(2**63))
    trajs, rewards = [], []
    for i in range(cfg.group_size):
        t = generate_trajectory(snapshot, prompt, env, cfg.max_total_agent_tokens,
                                trajectory_rng(base, prompt.prompt_id, i), sampler)
        trajs.append(t)
        rewards.append(trajectory_reward(t, prompt))
    return Group(prompt.prompt_id, tuple(trajs), tuple(rewards))


def dump_group(group: Group, directory, step: Optional[int] = None) -> list[Path]:
    """Write each trajectory of ``group`` to its own file under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = "" if step is None else f"s{step:05d}_"
    paths = []
    for i, t in enumerate(group.trajectories):
        path = directory / f"{tag}{group.prompt_id}_{i:02d}.traj"
        path.write_text(dumps_trajectory(t))
        paths.append(path)
    return paths
