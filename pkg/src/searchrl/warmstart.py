"""Format-only warm start for the initial policy.

A freshly zeroed policy almost never produces a well-formed answer, so every
group is all-wrong and a filtered learner starves.  The warm start fits the
policy by maximum likelihood to episodes that follow the token protocol but
pick their content at random from the visible context: searches query
random window tokens and the answer names a random window entity.  The
result knows the protocol, not the task.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .environment import EmptyQuery, Environment, Prompt, Vocabulary, search
from .policy import FeatureBatch, PolicyParams, log_softmax


def format_episode(env: Environment, vocab: Vocabulary, prompt: Prompt, window: int,
                   rng: np.random.Generator, max_searches: int = 2) -> tuple[list[int], list[bool]]:
    """One random-content, well-formed episode: ``(tokens, is_agent)`` after the question."""
    p = env.protocol
    content = set(vocab.entity_ids) | set(vocab.relation_ids)
    entities = set(vocab.entity_ids)
    context = list(prompt.question)
    tokens: list[int] = []
    is_agent: list[bool] = []

    def emit(tok, agent=True):
        context.append(tok)
        tokens.append(tok)
        is_agent.append(agent)

    for _ in range(int(rng.integers(max_searches + 1))):
        visible = [t for t in context[-window:] if t in content]
        if not visible:
            break
        n = int(rng.integers(1, 3))
        query = [visible[int(rng.integers(len(visible)))] for _ in range(n)]
        emit(p.begin_search)
        for tok in query:
            emit(tok)
        emit(p.end_tool_call)
        try:
            result = env.render_results(search(env.kb, query, p))
        except EmptyQuery:
            result = env.render_results([])
        for tok in result:
            emit(tok, agent=False)
    visible = [t for t in context[-window:] if t in entities]
    answer = visible[int(rng.integers(len(visible)))] if visible else int(rng.choice(list(entities)))
    emit(p.begin_answer)
    emit(answer)
    emit(p.end_answer)
    return tokens, is_agent


def format_warmup(
    params: PolicyParams,
    env: Environment,
    vocab: Vocabulary,
    prompts: Sequence[Prompt],
    episodes: int,
    iterations: int,
    lr: float,
    rng: np.random.Generator,
) -> PolicyParams:
    """Full-batch gradient ascent on the mean log-likelihood of random format episodes (in place)."""
    if episodes <= 0 or iterations <= 0:
        return params
    feats, targets = [], []
    for _ in range(episodes):
        prompt = prompts[int(rng.integers(len(prompts)))]
        tokens, is_agent = format_episode(env, vocab, prompt, params.feature_window, rng)
        context = list(prompt.question)
        for tok, agent in zip(tokens, is_agent):
            if agent:
                feats.append(params.featurize(context))
                targets.append(tok)
            context.append(tok)
    batch = FeatureBatch(feats, params.feature_window, params.feature_dim)
    targets = np.array(targets)
    idx = np.arange(len(targets))
    for _ in range(iterations):
        probs = np.exp(log_softmax(batch.logits(params)))
        dlogits = -probs
        dlogits[idx, targets] += 1.0
        params.weights += lr * batch.scatter(dlogits / len(targets), params.weights.shape)
    return params
