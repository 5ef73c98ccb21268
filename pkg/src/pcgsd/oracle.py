"""Brute-force references and goodness-of-fit checks for the samplers.

Exact quantities here go through a dense group-by-token weight matrix built
from the token side of the index (``memberships`` and the weight rule),
never through the per-group arrays the samplers use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats as sps

from .asg_index import GroupIndex
from .errors import DegenerateResidual

ENUMERATION_LIMIT = 4096


@dataclass
class GroupDistribution:
    probs: np.ndarray
    kind: str

    def __len__(self):
        return self.probs.size


def _probs(dist) -> np.ndarray:
    return np.asarray(getattr(dist, "probs", dist), dtype=np.float64)


def weight_matrix(index: GroupIndex, limit: int = ENUMERATION_LIMIT) -> np.ndarray:
    """Dense ``W[k, t] = w_{k,t}``."""
    if index.n > limit:
        raise ValueError(f"vocabulary {index.n} exceeds the enumeration limit {limit}")
    W = np.zeros((index.M, index.n))
    rule = index.rule
    for t in range(index.n):
        W[index.memberships[t], t] = rule.token_weights(index, t)
    return W


def exact_coarse(dist, index: GroupIndex, kind: str = "exact-coarse") -> GroupDistribution:
    return GroupDistribution(weight_matrix(index) @ _probs(dist), kind)


def exact_residual(p, q, index: GroupIndex) -> GroupDistribution:
    """Normalized ``[Q_c - P_c]_+``; raises ``DegenerateResidual`` when it is zero."""
    W = weight_matrix(index)
    diff = np.maximum(W @ _probs(q) - W @ _probs(p), 0.0)
    total = diff.sum()
    if total <= 0.0:
        raise DegenerateResidual("coarse draft and target masses coincide")
    return GroupDistribution(diff / total, "exact-residual")


def exact_emitted(p, q, index: GroupIndex) -> GroupDistribution:
    """Group law of one PCG step: accepted mass plus rejection times residual."""
    W = weight_matrix(index)
    pc, qc = W @ _probs(p), W @ _probs(q)
    accepted = np.minimum(pc, qc)
    reject = 1.0 - accepted.sum()
    diff = np.maximum(qc - pc, 0.0)
    if diff.sum() > 0.0:
        emitted = accepted + reject * diff / diff.sum()
    else:
        emitted = accepted
    return GroupDistribution(emitted, "exact-emitted")


def tv_distance(a, b) -> float:
    a, b = _probs(a), _probs(b)
    if a.shape != b.shape:
        raise ValueError("distributions have different lengths")
    return 0.5 * float(np.abs(a - b).sum())


# ---------------------------------------------------------------------------
# analytic acceptance and throughput


def pcg_acceptance(p, q, index: GroupIndex) -> float:
    """Per-position acceptance probability, ``sum_k min(P_c, Q_c)``."""
    W = weight_matrix(index)
    return float(np.minimum(W @ _probs(p), W @ _probs(q)).sum())


def sd_acceptance(p, q) -> float:
    return float(np.minimum(_probs(p), _probs(q)).sum())


def ssd_acceptance(p, q, bias: float) -> float:
    p, q = _probs(p), _probs(q)
    pos = p > 0
    return float((p[pos] * np.minimum(1.0, q[pos] / p[pos] + bias)).sum())


def ssd_emitted_tokens(p, q, bias: float) -> np.ndarray:
    """Token law of one SSD step (biased acceptance, token-level residual)."""
    p, q = _probs(p), _probs(q)
    r = np.zeros_like(p)
    pos = p > 0
    r[pos] = np.minimum(1.0, q[pos] / p[pos] + bias)
    accepted = p * r
    reject = 1.0 - accepted.sum()
    diff = np.maximum(q - p, 0.0)
    if diff.sum() > 0.0:
        return accepted + reject * diff / diff.sum()
    return accepted + reject * q


def expected_tokens_per_round(a: float, lookahead: int) -> float:
    """``sum_{i=0}^{L} a^i``: accepted prefix plus the residual or bonus token."""
    return float(sum(a ** i for i in range(lookahead + 1)))


def modeled_speedup(a: float, lookahead: int, cost_ratio: float) -> float:
    return expected_tokens_per_round(a, lookahead) / (1.0 + lookahead * cost_ratio)


# ---------------------------------------------------------------------------
# empirical checks


@dataclass
class EmpiricalResult:
    counts: np.ndarray
    trials: int
    reference: Optional[np.ndarray] = None
    tv: Optional[float] = None
    chi2: Optional[float] = None
    pvalue: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @property
    def freqs(self) -> np.ndarray:
        return self.counts / self.trials

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "empirical": self.freqs.tolist(),
            "exact": None if self.reference is None else self.reference.tolist(),
            "tv": self.tv,
            "chi2": self.chi2,
            "pvalue": self.pvalue,
            **self.extra,
        }


def goodness_of_fit(counts, reference) -> tuple:
    """TV, chi-square statistic and p-value of ``counts`` against ``reference``.

    Empty reference bins are dropped from the chi-square test; any count in
    one makes the fit fail outright (chi2 = inf, p = 0).
    """
    counts = np.asarray(counts, dtype=np.float64)
    ref = _probs(reference)
    trials = counts.sum()
    tv = tv_distance(counts / trials, ref)
    support = ref > 0
    if np.any(counts[~support] > 0):
        return tv, math.inf, 0.0
    if support.sum() < 2:
        return tv, 0.0, 1.0
    expected = ref[support] / ref[support].sum() * trials
    chi2, pvalue = sps.chisquare(counts[support], expected)
    return tv, float(chi2), float(pvalue)


def empirical_distribution(sampler: Callable, trials: int, size: int, stream=None,
                           reference=None) -> EmpiricalResult:
    """Tally ``trials`` calls of ``sampler`` (given ``stream`` when supplied)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    counts = np.zeros(size, dtype=np.int64)
    if stream is None:
        for _ in range(trials):
            counts[sampler()] += 1
    else:
        for _ in range(trials):
            counts[sampler(stream)] += 1
    return fit_counts(counts, reference)


def fit_counts(counts, reference=None) -> EmpiricalResult:
    counts = np.asarray(counts, dtype=np.int64)
    res = EmpiricalResult(counts=counts, trials=int(counts.sum()))
    if reference is not None:
        res.reference = _probs(reference)
        res.tv, res.chi2, res.pvalue = goodness_of_fit(counts, res.reference)
    return res


def tv_bound(size: int, trials: int, sigmas: float = 3.0) -> float:
    """Loose upper bound on sampling TV: mean plus ``sigmas`` standard deviations.

    ``E[TV] <= 0.5 * sqrt(size / trials)`` by Cauchy-Schwarz and the TV of
    a multinomial frequency concentrates with spread ``<= 0.5 / sqrt(trials)``
    per McDiarmid.
    """
    return 0.5 * math.sqrt(size / trials) + sigmas * 0.5 / math.sqrt(trials)
