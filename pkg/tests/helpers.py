import numpy as np

from searchrl.core_types import Provenance, Terminal, TokenRecord, Trajectory
from searchrl.policy import PolicyParams, featurize, sample_token


def random_params(rng, F=8, V=4, k=3, scale=1.0):
    return PolicyParams(rng.normal(scale=scale, size=(F, V + k)), k)


def random_trajectory(rng, policy, n_agent=3, n_retrieved=2, question_len=2, prompt_id="p"):
    """Interleave sampled agent tokens with random retrieved tokens under ``policy``."""
    V = policy.vocab_size
    question = tuple(int(x) for x in rng.integers(V, size=question_len))
    kinds = [Provenance.AGENT] * n_agent + [Provenance.RETRIEVED] * n_retrieved
    order = [kinds[0]] + list(rng.permutation(kinds[1:]))
    context = list(question)
    records = []
    for kind in order:
        if kind is Provenance.AGENT:
            feats = featurize(context, policy.feature_window, policy.feature_dim)
            tok, lp = sample_token(policy, feats, rng)
            records.append(TokenRecord(tok, kind, lp, feats))
        else:
            tok = int(rng.integers(V))
            records.append(TokenRecord(tok, kind))
        context.append(tok)
    return Trajectory(prompt_id, question, tuple(records), Terminal.LENGTH_LIMIT)


def random_group(rng, policy, G=2, max_agent=3, max_retrieved=2, prompt_id="p", rewards=None):
    """A group of random trajectories sampled under ``policy`` with advantages attached."""
    from searchrl.core_types import Group
    from searchrl.objectives import compute_advantages

    trajs = tuple(random_trajectory(rng, policy, int(rng.integers(1, max_agent + 1)),
                                    int(rng.integers(0, max_retrieved + 1)), prompt_id=prompt_id)
                  for _ in range(G))
    if rewards is None:
        rewards = [int(x) for x in rng.integers(0, 2, size=G)]
        if len(set(rewards)) == 1:
            rewards[int(rng.integers(G))] ^= 1
    return compute_advantages(Group(prompt_id, trajs, tuple(rewards)))


def perturbed(rng, params, scale=0.1):
    out = params.copy()
    out.weights += rng.normal(scale=scale, size=out.weights.shape)
    return out


def fd_gradient(f, params, h=1e-5):
    """Central differences of scalar ``f(params)`` over every weight."""
    g = np.zeros_like(params.weights)
    for idx in np.ndindex(*params.weights.shape):
        old = params.weights[idx]
        params.weights[idx] = old + h
        up = f(params)
        params.weights[idx] = old - h
        down = f(params)
        params.weights[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g
