"""Simulated multi-turn search environment.

A synthetic knowledge base of ``(subject, relation, object)`` facts, a
lexical-overlap search tool, the tool-call / answer token protocol and the
substring-match terminal reward.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

PROTOCOL_NAMES = ("<search>", "</tool_call>", "<answer>", "</answer>", "<result>", "</result>")


class EnvError(Exception):
    """Base class for environment errors."""


class EmptyQuery(EnvError):
    pass


class MalformedAction(EnvError):
    pass


class InfeasibleConfig(EnvError):
    pass


@dataclass(frozen=True)
class ProtocolTokens:
    begin_search: int = 0
    end_tool_call: int = 1
    begin_answer: int = 2
    end_answer: int = 3
    begin_result: int = 4
    end_result: int = 5

    def __post_init__(self):
        if len(set(self.ids())) != 6:
            raise ValueError("protocol token ids must be distinct")

    def ids(self) -> tuple[int, ...]:
        return (self.begin_search, self.end_tool_call, self.begin_answer,
                self.end_answer, self.begin_result, self.end_result)


@dataclass(frozen=True)
class Vocabulary:
    """Token names, laid out as protocol tokens, entities, relations, filler."""

    names: tuple[str, ...]
    n_entities: int
    n_relations: int

    @classmethod
    def build(cls, n_entities: int, n_relations: int, n_filler: int = 0) -> "Vocabulary":
        names = list(PROTOCOL_NAMES)
        names += [f"e{i:02d}" for i in range(n_entities)]
        names += [f"r{i}" for i in range(n_relations)]
        names += [f"w{i:02d}" for i in range(n_filler)]
        return cls(tuple(names), n_entities, n_relations)

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def protocol(self) -> ProtocolTokens:
        return ProtocolTokens()

    def entity(self, i: int) -> int:
        return len(PROTOCOL_NAMES) + i

    def relation(self, i: int) -> int:
        return len(PROTOCOL_NAMES) + self.n_entities + i

    @property
    def entity_ids(self) -> range:
        return range(self.entity(0), self.entity(0) + self.n_entities)

    @property
    def relation_ids(self) -> range:
        return range(self.relation(0), self.relation(0) + self.n_relations)

    def encode(self, text: str) -> tuple[int, ...]:
        index = {n: i for i, n in enumerate(self.names)}
        return tuple(index[t] for t in text.split())

    def decode(self, tokens: Iterable[int]) -> str:
        return " ".join(self.names[t] for t in tokens)

    def save(self, path) -> None:
        Path(path).write_text(f"# n_entities={self.n_entities} n_relations={self.n_relations}\n"
                              + "\n".join(self.names) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        meta = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
        return cls(tuple(lines[1:]), int(meta["n_entities"]), int(meta["n_relations"]))


@dataclass(frozen=True)
class Fact:
    subject: tuple[int, ...]
    relation: tuple[int, ...]
    object: tuple[int, ...]

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.subject + self.relation + self.object


@dataclass(frozen=True)
class KnowledgeBase:
    facts: tuple[Fact, ...]
    top_k: int = 1

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        object.__setattr__(self, "_search_cache", {})


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    question: tuple[int, ...]
    gold_answer: tuple[int, ...]
    hops: int


def search(kb: KnowledgeBase, query: Sequence[int], protocol: ProtocolTokens = ProtocolTokens()) -> list[Fact]:
    """Top ``kb.top_k`` facts by number of fact tokens that also occur in the query.

    Ties go to the lower fact index; facts with zero overlap are never returned.
    """
    reserved = set(protocol.ids())
    terms = frozenset(t for t in query if t not in reserved)
    if not terms:
        raise EmptyQuery("query has no content tokens")
    cache = kb._search_cache
    if terms not in cache:
        cache[terms] = _rank(kb, terms)
    return list(cache[terms])


def _rank(kb: KnowledgeBase, terms: frozenset) -> tuple[Fact, ...]:
    scored = []
    for idx, fact in enumerate(kb.facts):
        overlap = sum(1 for t in fact.tokens if t in terms)
        if overlap > 0:
            scored.append((-overlap, idx))
    scored.sort()
    return tuple(kb.facts[idx] for _, idx in scored[: kb.top_k])


def terminal_reward(answer_span: Sequence[int], gold: Sequence[int]) -> int:
    """1 iff ``gold`` occurs as a contiguous run inside ``answer_span``."""
    span, gold = tuple(answer_span), tuple(gold)
    if not gold:
        return 0
    n = len(gold)
    return int(any(span[i:i + n] == gold for i in range(len(span) - n + 1)))


class OutcomeKind(enum.Enum):
    TOOL_RESULT = "ToolResult"
    TERMINATED = "Terminated"
    TRUNCATED = "Truncated"


@dataclass(frozen=True)
class StepOutcome:
    kind: OutcomeKind
    tokens: tuple[int, ...] = ()
    budget_exhausted: bool = False

    @classmethod
    def tool_result(cls, tokens):
        return cls(OutcomeKind.TOOL_RESULT, tuple(tokens))

    @classmethod
    def terminated(cls, answer_span):
        return cls(OutcomeKind.TERMINATED, tuple(answer_span))

    @classmethod
    def truncated(cls, budget_exhausted: bool = False):
        return cls(OutcomeKind.TRUNCATED, (), budget_exhausted)


@dataclass(frozen=True)
class Environment:
    kb: KnowledgeBase
    protocol: ProtocolTokens = field(default_factory=ProtocolTokens)
    max_turns: int = 4
    max_action_tokens: int = 32

    def render_results(self, facts: Sequence[Fact]) -> tuple[int, ...]:
        body = tuple(t for f in facts for t in f.tokens)
        return (self.protocol.begin_result,) + body + (self.protocol.end_result,)

    def parse_action(self, action: Sequence[int]) -> tuple[str, tuple[int, ...]]:
        """Split an action ending in a terminator into ``("search"|"answer", payload)``.

        Tokens before the opening marker are free-form thought tokens.  Raises
        :class:`MalformedAction` for unopened or nested markers and for agent
        use of the result framing tokens.
        """
        p = self.protocol
        if not action or action[-1] not in (p.end_tool_call, p.end_answer):
            raise MalformedAction("action does not end with a terminator")
        opener = p.begin_search if action[-1] == p.end_tool_call else p.begin_answer
        open_at = None
        for i, tok in enumerate(action[:-1]):
            if tok in (p.begin_result, p.end_result, p.end_tool_call, p.end_answer):
                raise MalformedAction(f"reserved token {tok} inside an action")
            if tok in (p.begin_search, p.begin_answer):
                if open_at is not None:
                    raise MalformedAction("nested opening markers")
                if tok != opener:
                    raise MalformedAction("opening marker does not match the terminator")
                open_at = i
        if open_at is None:
            raise MalformedAction("terminator without an opening marker")
        kind = "search" if opener == p.begin_search else "answer"
        return kind, tuple(action[open_at + 1:-1])

    def step(self, prompt: Prompt, turns_used: int, action: Sequence[int], limit_hit: bool = False) -> StepOutcome:
        """Advance the episode by one agent action.

        ``turns_used`` is the number of tool calls already made this episode.
        Raises :class:`MalformedAction` (and :class:`EmptyQuery`) for invalid
        actions; callers treat those as truncation.
        """
        if limit_hit:
            return StepOutcome.truncated()
        kind, payload = self.parse_action(action)
        if kind == "answer":
            if not payload:
                raise MalformedAction("empty answer span")
            return StepOutcome.terminated(payload)
        if turns_used >= self.max_turns:
            return StepOutcome.truncated(budget_exhausted=True)
        facts = search(self.kb, payload, self.protocol)
        return StepOutcome.tool_result(self.render_results(facts))


# --- generation --------------------------------------------------------------


def solving_actions(env: Environment, prompt: Prompt) -> list[tuple[int, ...]]:
    """The canonical action sequence for ``prompt``: one ``subject relation`` query per hop, then the answer.

    Returns the actions only if executing them actually earns reward 1, else
    an empty list.
    """
    p = env.protocol
    q = prompt.question
    entity, relations = q[:1], q[1:]
    actions = []
    for rel in relations:
        query = entity + (rel,)
        try:
            facts = search(env.kb, query, p)
        except EmptyQuery:
            return []
        if not facts or facts[0].subject != entity or facts[0].relation != (rel,):
            return []
        actions.append((p.begin_search,) + query + (p.end_tool_call,))
        entity = facts[0].object
    actions.append((p.begin_answer,) + entity + (p.end_answer,))
    if terminal_reward(entity, prompt.gold_answer) != 1:
        return []
    return actions


def chain_answers(kb: KnowledgeBase, subject: Sequence[int], relations: Sequence[tuple[int, ...]]) -> set[tuple[int, ...]]:
    """All objects reachable from ``subject`` by following ``relations`` in order (exhaustive)."""
    frontier = {tuple(subject)}
    for rel in relations:
        frontier = {f.object for f in kb.facts for s in frontier if f.subject == s and f.relation == tuple(rel)}
    return frontier


def generate_kb(
    seed: int,
    n_entities: int = 30,
    n_relations: int = 8,
    hops_mix: float = 0.5,
    *,
    facts_per_entity: int = 3,
    n_prompts: int = 140,
    top_k: int = 1,
    n_filler: int = 16,
) -> tuple[Vocabulary, KnowledgeBase, list[Prompt]]:
    """Build a random functional knowledge base and a mixed 1-/2-hop prompt set.

    Each entity is the subject of ``facts_per_entity`` facts with distinct
    relations.  A 1-hop question is ``subject relation``; a 2-hop question is
    ``subject relation1 relation2`` where the object of the first fact is the
    subject of the second.  ``hops_mix`` is the fraction of 2-hop prompts.
    Only prompts whose canonical search path retrieves the right fact are
    kept.
    """
    if n_entities < 4 or n_relations < 1:
        raise InfeasibleConfig("need n_entities >= 4 and n_relations >= 1")
    if not 0.0 <= hops_mix <= 1.0:
        raise InfeasibleConfig("hops_mix must lie in [0, 1]")
    if facts_per_entity > n_relations:
        raise InfeasibleConfig("facts_per_entity cannot exceed n_relations")
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.build(n_entities, n_relations, n_filler)

    facts = []
    for e in range(n_entities):
        rels = rng.choice(n_relations, size=facts_per_entity, replace=False)
        for r in sorted(int(x) for x in rels):
            obj = int(rng.integers(n_entities - 1))
            obj = obj + 1 if obj >= e else obj
            facts.append(Fact((vocab.entity(e),), (vocab.relation(r),), (vocab.entity(obj),)))
    kb = KnowledgeBase(tuple(facts), top_k=top_k)
    env = Environment(kb)

    by_subject: dict[tuple[int, ...], list[Fact]] = {}
    for f in facts:
        by_subject.setdefault(f.subject, []).append(f)
    one_hop, two_hop = [], []
    for f in facts:
        one_hop.append((f.subject + f.relation, f.object, 1))
        for g in by_subject.get(f.object, []):
            if g.object != f.subject:
                two_hop.append((f.subject + f.relation + g.relation, g.object, 2))

    def solvable(cands):
        out = []
        for q, gold, hops in cands:
            prompt = Prompt("", q, gold, hops)
            if solving_actions(env, prompt) and chain_answers(kb, q[:1], [(r,) for r in q[1:]]) == {gold}:
                out.append((q, gold, hops))
        return out

    one_hop, two_hop = solvable(one_hop), solvable(two_hop)
    n_two = int(round(hops_mix * n_prompts))
    n_one = n_prompts - n_two
    if n_one > len(one_hop) or n_two > len(two_hop):
        raise InfeasibleConfig(
            f"asked for {n_one} 1-hop and {n_two} 2-hop prompts, "
            f"only {len(one_hop)} and {len(two_hop)} are constructible")
    pick_one = sorted(int(i) for i in rng.choice(len(one_hop), size=n_one, replace=False))
    pick_two = sorted(int(i) for i in rng.choice(len(two_hop), size=n_two, replace=False))
    chosen = [one_hop[i] for i in pick_one] + [two_hop[i] for i in pick_two]
    order = rng.permutation(len(chosen))
    prompts = [Prompt(f"p{j:04d}", *chosen[i]) for j, i in enumerate(order)]
    return vocab, kb, prompts


def split_prompts(prompts: Sequence[Prompt], heldout_fraction: float, seed: int) -> tuple[list[Prompt], list[Prompt]]:
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(len(prompts))
    n_held = int(round(heldout_fraction * len(prompts)))
    held = sorted(order[:n_held])
    train = sorted(order[n_held:])
    return [prompts[i] for i in train], [prompts[i] for i in held]


# --- file formats ------------------------------------------------------------


PathLike = Union[str, Path]


def save_kb(kb: KnowledgeBase, vocab: Vocabulary, path: PathLike) -> None:
    lines = ["\t".join(vocab.decode(part) for part in (f.subject, f.relation, f.object)) for f in kb.facts]
    Path(path).write_text("\n".join(lines) + "\n")


def load_kb(path: PathLike, vocab: Vocabulary, top_k: int = 1) -> KnowledgeBase:
    facts = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            s, r, o = line.split("\t")
            facts.append(Fact(vocab.encode(s), vocab.encode(r), vocab.encode(o)))
    return KnowledgeBase(tuple(facts), top_k)


def save_prompts(prompts: Sequence[Prompt], vocab: Vocabulary, path: PathLike) -> None:
    lines = [f"{vocab.decode(p.question)}\t{vocab.decode(p.gold_answer)}\t{p.hops}" for p in prompts]
    Path(path).write_text("\n".join(lines) + "\n")


def load_prompts(path: PathLike, vocab: Vocabulary, prefix: str = "p") -> list[Prompt]:
    prompts = []
    for j, line in enumerate(l for l in Path(path).read_text().splitlines() if l.strip()):
        q, gold, hops = line.split("\t")
        prompts.append(Prompt(f"{prefix}{j:04d}", vocab.encode(q), vocab.encode(gold), int(hops)))
    return prompts
