"""Speculative decoding loops: PCG, standard SD, and the constant-bias SSD baseline.

A round drafts ``lookahead`` tokens, scores every drafted prefix with the
target (counted as one batched target call), then verifies positions in
order.  The first rejection emits one residual token and ends the round; if
every position is accepted, a bonus token is drawn from the target.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .asg_index import GroupIndex
from .coarse import (
    DEFAULT_MAX_TRIALS,
    ResidualSampleResult,
    TokenDistribution,
    as_distribution,
    residual_sample_thinning,
    sample_group_label,
)
from .errors import ConfigError, DegenerateProposal
from .rng import DecodeStreams

METHODS = ("target-only", "sd", "ssd", "pcg")


class SequenceModel(Protocol):
    """What the decoder needs from a draft or target model.

    ``next_distribution`` must be deterministic in the prefix and must not
    keep a reference to the (mutable) prefix list it is handed.
    """

    n: int
    cost: float

    def next_distribution(self, prefix: Sequence[int]) -> TokenDistribution: ...


@dataclass
class StepOutcome:
    position: int
    drafted: Optional[int]
    label: Optional[int]
    group: Optional[int]
    ratio: Optional[float]
    u: Optional[float]
    accepted: Optional[bool]
    residual: Optional[ResidualSampleResult]
    emitted: int
    kind: str = "draft"

    def as_dict(self) -> dict:
        d = asdict(self)
        if self.residual is None:
            d["residual"] = None
        return d


@dataclass
class DecodeTrace:
    method: str
    lookahead: int
    cost_ratio: float
    tokens: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    drafted: int = 0
    proposals: int = 0
    acceptances: int = 0
    target_calls: int = 0
    bonus_tokens: int = 0
    residual_calls: int = 0
    residual_trials: int = 0
    fallbacks: int = 0
    wall_seconds: float = 0.0

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def acceptance_rate(self) -> Optional[float]:
        return self.acceptances / self.proposals if self.proposals else None

    @property
    def tokens_per_round(self) -> float:
        return self.emitted / self.n_rounds if self.rounds else 0.0

    @property
    def emitted(self) -> int:
        return sum(len(r) for r in self.rounds)

    @property
    def mean_trials(self) -> Optional[float]:
        return self.residual_trials / self.residual_calls if self.residual_calls else None

    @property
    def cost(self) -> float:
        """Abstract cost: one target call per round plus ``cost_ratio`` per drafted token."""
        return self.target_calls + self.cost_ratio * self.drafted

    @property
    def speedup(self) -> float:
        """Emitted tokens per unit cost; target-only decoding scores exactly 1."""
        return self.emitted / self.cost if self.rounds else 0.0

    def emitted_groups(self) -> list:
        return [o.group for r in self.rounds for o in r]

    def summary(self) -> dict:
        return {
            "method": self.method,
            "lookahead": self.lookahead,
            "cost_ratio": self.cost_ratio,
            "tokens": len(self.tokens),
            "rounds": self.n_rounds,
            "drafted": self.drafted,
            "proposals": self.proposals,
            "acceptances": self.acceptances,
            "acceptance_rate": self.acceptance_rate,
            "target_calls": self.target_calls,
            "bonus_tokens": self.bonus_tokens,
            "tokens_per_round": self.tokens_per_round,
            "mean_trials": self.mean_trials if self.method == "pcg" else None,
            "fallbacks": self.fallbacks,
            "modeled_speedup": self.speedup,
        }

    def write_jsonl(self, fh) -> None:
        """One JSON record per round, then a summary record."""
        for i, r in enumerate(self.rounds):
            fh.write(json.dumps({"round": i, "steps": [o.as_dict() for o in r]}) + "\n")
        fh.write(json.dumps({"summary": self.summary()}) + "\n")


# ---------------------------------------------------------------------------
# single-position verifiers


def pcg_verify(i: int, x: int, p: TokenDistribution, q: TokenDistribution, index: GroupIndex,
               streams: DecodeStreams, max_trials: int = DEFAULT_MAX_TRIALS) -> StepOutcome:
    """Group-level verification of drafted token ``x``.

    On acceptance the drafted token itself is emitted as the representative
    of its group; on rejection a residual group and token come from thinning.
    """
    k = sample_group_label(x, index, streams.group)
    pc = p.mass(k, index)
    if pc <= 0.0:
        raise DegenerateProposal(f"group {k} has zero draft mass")
    r = q.mass(k, index) / pc
    if r > 1.0:
        r = 1.0
    u = streams.accept.random()
    if u < r:
        return StepOutcome(i, x, k, k, r, u, True, None, x)
    res = residual_sample_thinning(p, q, index, streams.residual, max_trials)
    return StepOutcome(i, x, k, res.group, r, u, False, res, res.token)


def token_residual(p: TokenDistribution, q: TokenDistribution) -> Optional[TokenDistribution]:
    """Normalized ``[q - p]_+``, or None when it vanishes."""
    diff = np.maximum(q.probs - p.probs, 0.0)
    total = diff.sum()
    if total <= 0.0:
        return None
    return TokenDistribution(diff / total, role="residual", validate=False)


def _token_verify(i, x, p, q, streams, bias: float) -> StepOutcome:
    r = q[x] / p[x] + bias
    if r > 1.0:
        r = 1.0
    u = streams.accept.random()
    if u < r:
        return StepOutcome(i, x, None, None, r, u, True, None, x)
    resid = token_residual(p, q)
    if resid is None:
        z, fallback = q.sample(streams.residual), True
    else:
        z, fallback = resid.sample(streams.residual), False
    return StepOutcome(i, x, None, None, r, u, False, ResidualSampleResult(None, z, 1, fallback), z)


def sd_verify(i, x, p, q, streams) -> StepOutcome:
    return _token_verify(i, x, p, q, streams, 0.0)


def ssd_verify(i, x, p, q, streams, bias: float) -> StepOutcome:
    return _token_verify(i, x, p, q, streams, bias)


# ---------------------------------------------------------------------------
# rounds


@dataclass
class RoundResult:
    tokens: list
    outcomes: list
    drafted: int


def _speculative_round(draft, target, seq: list, lookahead: int, streams: DecodeStreams,
                       verify: Callable, bonus_group: Optional[Callable] = None) -> RoundResult:
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    base = len(seq)
    drafted, pdists = [], []
    for _ in range(lookahead):
        p = as_distribution(draft.next_distribution(seq), "draft")
        x = p.sample(streams.draft)
        drafted.append(x)
        pdists.append(p)
        seq.append(x)
    # target scores all lookahead+1 prefixes; walk back so no prefix is copied
    qdists = [None] * (lookahead + 1)
    for i in range(lookahead, -1, -1):
        qdists[i] = as_distribution(target.next_distribution(seq), "target")
        if i:
            seq.pop()
    assert len(seq) == base

    outcomes, tokens = [], []
    for i in range(lookahead):
        o = verify(i, drafted[i], pdists[i], qdists[i])
        outcomes.append(o)
        tokens.append(o.emitted)
        if not o.accepted:
            break
    else:
        q_last = qdists[lookahead]
        z = q_last.sample(streams.bonus)
        g = bonus_group(z) if bonus_group is not None else None
        outcomes.append(StepOutcome(lookahead, None, g, g, None, None, None, None, z, kind="bonus"))
        tokens.append(z)
    return RoundResult(tokens, outcomes, lookahead)


def pcg_round(draft, target, prefix, lookahead: int, index: GroupIndex, streams: DecodeStreams,
              max_trials: int = DEFAULT_MAX_TRIALS) -> RoundResult:
    seq = list(prefix)

    def verify(i, x, p, q):
        return pcg_verify(i, x, p, q, index, streams, max_trials)

    return _speculative_round(draft, target, seq, lookahead, streams, verify,
                              lambda z: sample_group_label(z, index, streams.group))


def sd_round(draft, target, prefix, lookahead: int, streams: DecodeStreams) -> RoundResult:
    return _speculative_round(draft, target, list(prefix), lookahead, streams,
                              lambda i, x, p, q: sd_verify(i, x, p, q, streams))


def ssd_round(draft, target, prefix, lookahead: int, bias: float, streams: DecodeStreams) -> RoundResult:
    if not 0.0 <= bias <= 1.0:
        raise ValueError("bias must lie in [0, 1]")
    return _speculative_round(draft, target, list(prefix), lookahead, streams,
                              lambda i, x, p, q: ssd_verify(i, x, p, q, streams, bias))


# ---------------------------------------------------------------------------
# full generation


@dataclass
class DecodeConfig:
    lookahead: int = 3
    bias: float = 0.3
    cost_ratio: Optional[float] = None
    max_trials: int = DEFAULT_MAX_TRIALS


def generate(method: str, draft, target, prompt: Sequence[int], length: int,
             config: Optional[DecodeConfig] = None, index: Optional[GroupIndex] = None,
             streams: Optional[DecodeStreams] = None) -> DecodeTrace:
    """Decode ``length`` tokens after ``prompt`` with the chosen method.

    The final round may overshoot ``length``; its extra tokens are dropped
    from ``tokens`` but its outcomes stay in the counters.
    """
    config = config or DecodeConfig()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "pcg" and index is None:
        raise ConfigError("pcg decoding needs a group index")
    if method == "pcg" and index.n != target.n:
        raise ConfigError(f"index vocabulary {index.n} != target vocabulary {target.n}")
    if method != "target-only" and draft.n != target.n:
        raise ConfigError("draft and target vocabularies differ")
    streams = streams or DecodeStreams.for_sequence(0)
    c = config.cost_ratio
    if c is None:
        c = getattr(draft, "cost", 1.0) / getattr(target, "cost", 1.0) if draft is not None else 0.0
    lookahead = 0 if method == "target-only" else config.lookahead
    trace = DecodeTrace(method=method, lookahead=lookahead, cost_ratio=float(c))

    seq = list(prompt)
    start = len(seq)
    t0 = time.perf_counter()
    while len(seq) - start < length:
        if method == "target-only":
            q = as_distribution(target.next_distribution(seq), "target")
            z = q.sample(streams.target)
            rnd = RoundResult([z], [StepOutcome(0, None, None, None, None, None, None, None, z, kind="target")], 0)
        elif method == "pcg":
            rnd = _speculative_round(
                draft, target, seq, lookahead, streams,
                lambda i, x, p, q: pcg_verify(i, x, p, q, index, streams, config.max_trials),
                lambda z: sample_group_label(z, index, streams.group))
        elif method == "sd":
            rnd = _speculative_round(draft, target, seq, lookahead, streams,
                                     lambda i, x, p, q: sd_verify(i, x, p, q, streams))
        else:
            rnd = _speculative_round(draft, target, seq, lookahead, streams,
                                     lambda i, x, p, q: ssd_verify(i, x, p, q, streams, config.bias))
        trace.rounds.append(rnd.outcomes)
        trace.target_calls += 1
        trace.drafted += rnd.drafted
        for o in rnd.outcomes:
            if o.kind == "draft":
                trace.proposals += 1
                if o.accepted:
                    trace.acceptances += 1
                else:
                    trace.residual_calls += 1
                    trace.residual_trials += o.residual.trials
                    trace.fallbacks += o.residual.fallback
            elif o.kind == "bonus":
                trace.bonus_tokens += 1
        seq.extend(rnd.tokens)
    trace.wall_seconds = time.perf_counter() - t0
    trace.tokens = seq[start:start + length]
    return trace
