"""Trajectory, group and reward data model shared across the package."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional, Sequence

if TYPE_CHECKING:
    from .policy import ContextFeatures


class Provenance(enum.Enum):
    AGENT = "A"
    RETRIEVED = "R"


class Terminal(enum.Enum):
    ANSWERED = "Answered"
    SEARCH_BUDGET_EXHAUSTED = "SearchBudgetExhausted"
    LENGTH_LIMIT = "LengthLimit"
    MALFORMED = "Malformed"


@dataclass(frozen=True)
class TokenRecord:
    """One position of a trajectory.

    ``features`` is the policy observation the token was sampled under (the
    active feature rows of its context).  It is only present on agent records
    and is what the objectives condition on, so the stored token id of a
    retrieved record is never read as a loss target.
    """

    token: int
    provenance: Provenance
    old_log_prob: Optional[float] = None
    features: Optional["ContextFeatures"] = field(default=None, repr=False)

    def __post_init__(self):
        if self.token < 0:
            raise ValueError(f"token id must be non-negative, got {self.token}")
        if self.provenance is Provenance.RETRIEVED:
            if self.old_log_prob is not None:
                raise ValueError("retrieved records carry no old_log_prob")
        else:
            if self.old_log_prob is None:
                raise ValueError("agent records need an old_log_prob")
            if self.old_log_prob > 0.0:
                raise ValueError(f"old_log_prob must be <= 0, got {self.old_log_prob}")

    @property
    def is_agent(self) -> bool:
        return self.provenance is Provenance.AGENT


@dataclass(frozen=True)
class Trajectory:
    prompt_id: str
    question: tuple[int, ...]
    records: tuple[TokenRecord, ...]
    terminal: Terminal
    answer_span: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "question", tuple(self.question))
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "answer_span", tuple(self.answer_span))
        if self.agent_token_count < 1:
            raise ValueError("a trajectory needs at least one agent-generated token")
        if bool(self.answer_span) != (self.terminal is Terminal.ANSWERED):
            raise ValueError("answer_span must be non-empty iff terminal is Answered")

    @property
    def agent_token_count(self) -> int:
        return sum(1 for r in self.records if r.is_agent)

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(r.token for r in self.records)

    def agent_records(self) -> list[TokenRecord]:
        return [r for r in self.records if r.is_agent]


def trajectory_agent_length(t: Trajectory) -> int:
    """Number of optimized tokens; retrieved tokens are loss-masked and excluded."""
    return t.agent_token_count


@dataclass(frozen=True)
class Group:
    prompt_id: str
    trajectories: tuple[Trajectory, ...]
    rewards: tuple[int, ...]
    advantages: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "rewards", tuple(int(r) for r in self.rewards))
        if len(self.trajectories) != len(self.rewards):
            raise ValueError("need one reward per trajectory")
        if any(r not in (0, 1) for r in self.rewards):
            raise ValueError(f"rewards must be binary, got {self.rewards}")
        if self.advantages is not None:
            object.__setattr__(self, "advantages", tuple(float(a) for a in self.advantages))
            if len(self.advantages) != len(self.rewards):
                raise ValueError("need one advantage per trajectory")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    def with_advantages(self, advantages: Sequence[float]) -> "Group":
        return Group(self.prompt_id, self.trajectories, self.rewards, tuple(advantages))


# --- serialization -----------------------------------------------------------


def _fmt_tokens(tokens: Sequence[int]) -> str:
    return " ".join(str(t) for t in tokens)


def _parse_tokens(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split())


def dumps_trajectory(t: Trajectory) -> str:
    """Render a trajectory in the line-oriented text format.

    The header carries ``prompt_id`` and ``terminal`` followed by the question
    and answer span token ids.  Each record line is
    ``token_id<TAB>A|R<TAB>old_log_prob`` (empty for retrieved records).
    """
    header = "\t".join([
        f"prompt_id={t.prompt_id}",
        f"terminal={t.terminal.value}",
        f"question={_fmt_tokens(t.question)}",
        f"answer={_fmt_tokens(t.answer_span)}",
    ])
    lines = [header]
    for r in t.records:
        lp = "" if r.old_log_prob is None else repr(r.old_log_prob)
        lines.append(f"{r.token}\t{r.provenance.value}\t{lp}")
    return "\n".join(lines) + "\n"


def loads_trajectory(
    text: str,
    featurizer: Optional[Callable[[Sequence[int]], "ContextFeatures"]] = None,
) -> Trajectory:
    """Parse :func:`dumps_trajectory` output.

    Observations are not stored in the file; pass the policy's ``featurizer``
    (context tokens -> feature rows) to rebuild them from each record's prefix.
    """
    lines = text.rstrip("\n").split("\n")
    header = dict(part.split("=", 1) for part in lines[0].split("\t"))
    question = _parse_tokens(header.get("question", ""))
    context = list(question)
    records = []
    for line in lines[1:]:
        token_s, prov_s, lp_s = line.split("\t")
        token = int(token_s)
        prov = Provenance(prov_s)
        if prov is Provenance.AGENT:
            feats = featurizer(context) if featurizer is not None else None
            records.append(TokenRecord(token, prov, float(lp_s), feats))
        else:
            if lp_s:
                raise ValueError(f"retrieved record with log-prob: {line!r}")
            records.append(TokenRecord(token, prov))
        context.append(token)
    return Trajectory(
        prompt_id=header["prompt_id"],
        question=question,
        records=tuple(records),
        terminal=Terminal(header["terminal"]),
        answer_span=_parse_tokens(header.get("answer", "")),
    )
