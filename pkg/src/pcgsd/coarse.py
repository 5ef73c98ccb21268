"""Coarse-grained group masses, group-level acceptance and residual sampling.

``p`` is the draft distribution and ``q`` the target.  Group masses are only
ever computed for groups that were actually sampled, at cost O(|G_k|).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .asg_index import GroupIndex
from .errors import DegenerateProposal
from .rng import Stream

DEFAULT_MAX_TRIALS = 1000


class TokenDistribution:
    """A probability vector over the vocabulary.

    Caches its cumulative sums and the coarse masses of groups it has been
    asked about, so a model returning the same object at every step pays
    for each only once.
    """

    def __init__(self, probs, role: str = "target", step: Optional[int] = None, validate: bool = True):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.role = role
        self.step = step
        if validate:
            if self.probs.ndim != 1 or self.probs.size == 0:
                raise ValueError("distribution must be a non-empty vector")
            if np.any(self.probs < 0) or not np.all(np.isfinite(self.probs)):
                raise ValueError("distribution has negative or non-finite entries")
            total = float(self.probs.sum())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"distribution sums to {total!r}, not 1")
        self._plist = self.probs.tolist()
        self._mass_index: Optional[GroupIndex] = None
        self._masses: dict[int, float] = {}

    def __len__(self):
        return self.probs.size

    def __getitem__(self, t):
        return self._plist[t]

    def __repr__(self):
        return f"TokenDistribution(n={self.probs.size}, role={self.role!r})"

    @cached_property
    def cdf(self) -> list[float]:
        return np.cumsum(self.probs).tolist()

    def sample(self, stream: Stream) -> int:
        return stream.categorical(self.cdf)

    def mass(self, k: int, index: GroupIndex) -> float:
        if self._mass_index is not index:
            self._mass_index = index
            self._masses = {}
        m = self._masses.get(k)
        if m is None:
            members = index.groups[k]
            m = float(np.dot(self.probs[members], index.group_weights[k]))
            self._masses[k] = m
        return m


def as_distribution(dist, role: str = "target") -> TokenDistribution:
    return dist if isinstance(dist, TokenDistribution) else TokenDistribution(dist, role=role)


@dataclass(frozen=True)
class CoarseMassPair:
    group: int
    pc: float
    qc: float


@dataclass(frozen=True)
class ResidualSampleResult:
    group: Optional[int]
    token: int
    trials: int
    fallback: bool = False


def coarse_mass(dist, k: int, index: GroupIndex) -> float:
    """Sum of ``dist(t) * w_{k,t}`` over the members of group ``k``."""
    return as_distribution(dist).mass(k, index)


def coarse_pair(p, q, k: int, index: GroupIndex) -> CoarseMassPair:
    return CoarseMassPair(k, coarse_mass(p, k, index), coarse_mass(q, k, index))


def sample_group_label(x: int, index: GroupIndex, stream: Stream) -> int:
    """Group containing ``x``, drawn with the per-token split weights."""
    ks = index.memberships[x]
    if ks.size == 1:
        return int(ks[0])
    if index.equal_split:
        return int(ks[stream.below(ks.size)])
    return int(ks[stream.categorical(index.token_weight_cdfs[x])])


def accept_prob(p, q, k: int, index: GroupIndex) -> float:
    """``min(1, Q_c(G_k) / P_c(G_k))``; ``k`` must have positive draft mass."""
    pc = coarse_mass(p, k, index)
    if pc <= 0.0:
        raise DegenerateProposal(f"group {k} has zero draft mass")
    qc = coarse_mass(q, k, index)
    return min(1.0, qc / pc)


def emit_within_group(q, k: int, index: GroupIndex, stream: Stream) -> int:
    """Token of group ``k`` drawn with probability ``q(t) w_{k,t} / Q_c(G_k)``."""
    q = as_distribution(q)
    members = index.groups[k]
    if members.size == 1:
        return int(members[0])
    cdf = np.cumsum(q.probs[members] * index.group_weights[k]).tolist()
    return int(members[stream.categorical(cdf)])


def residual_sample_thinning(p, q, index: GroupIndex, stream: Stream,
                             max_trials: int = DEFAULT_MAX_TRIALS) -> ResidualSampleResult:
    """Draw a group from the normalized residual ``[Q_c - P_c]_+`` by thinning.

    Each trial samples ``y ~ q`` and a label ``K`` from ``y``'s groups (so
    ``K ~ Q_c``) and keeps it with probability ``[1 - P_c/Q_c]_+``.  The
    emitted token comes from the q-conditional inside the kept group.  If
    ``max_trials`` pass without a keep (only plausible when P_c and Q_c are
    numerically equal), a token is drawn from ``q`` directly and flagged.
    """
    p = as_distribution(p, "draft")
    q = as_distribution(q, "target")
    for trial in range(1, max_trials + 1):
        y = q.sample(stream)
        k = sample_group_label(y, index, stream)
        qc = q.mass(k, index)
        pc = p.mass(k, index)
        keep = 1.0 - pc / qc
        if keep > 0.0 and stream.random() < keep:
            return ResidualSampleResult(k, emit_within_group(q, k, index, stream), trial)
    z = q.sample(stream)
    return ResidualSampleResult(sample_group_label(z, index, stream), z, max_trials, fallback=True)


def coarse_vector(dist, index: GroupIndex) -> np.ndarray:
    """Masses of all groups (enumerates every group; diagnostics only)."""
    dist = as_distribution(dist)
    return np.array([float(np.dot(dist.probs[g], w)) for g, w in zip(index.groups, index.group_weights)])


def exact_group_identity_check(p, q, index: GroupIndex) -> float:
    """Largest |min(Pc, Qc) + [Qc - Pc]_+ - Qc| over groups."""
    pc = coarse_vector(p, index)
    qc = coarse_vector(q, index)
    return float(np.max(np.abs(np.minimum(pc, qc) + np.maximum(qc - pc, 0.0) - qc)))
