"""Synthetic draft/target model pairs and embedding generators."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .asg_index import GroupIndex, load_table, normalize
from .coarse import TokenDistribution
from .errors import ConfigError

DEFAULT_TEMPERATURE = 0.8


def softmax_temperature(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise ``softmax(logits / temperature)``, max-subtracted for stability."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_rows(table: np.ndarray, what: str) -> None:
    if np.any(table < 0) or np.any(np.abs(table.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{what}: every row must be a probability distribution")


class MemorylessModel:
    """Same next-token distribution regardless of prefix."""

    kind = "memoryless"

    def __init__(self, probs, role: str = "target", cost: float = 1.0):
        self.dist = TokenDistribution(probs, role=role)
        self.n = len(self.dist)
        self.role = role
        self.cost = cost

    def next_distribution(self, prefix: Sequence[int]) -> TokenDistribution:
        return self.dist

    def to_spec(self) -> dict:
        return {"kind": self.kind, "n": self.n, "probs": self.dist.probs.tolist()}


class MarkovModel:
    """First-order chain: the next distribution is the row of the last token."""

    kind = "markov"

    def __init__(self, table, initial=None, role: str = "target", cost: float = 1.0):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ValueError(f"transition table must be square, got shape {table.shape}")
        _check_rows(table, "transition table")
        self.n = table.shape[0]
        if initial is None:
            initial = np.full(self.n, 1.0 / self.n)
        initial = np.asarray(initial, dtype=np.float64)
        if initial.shape != (self.n,):
            raise ValueError(f"initial row has length {initial.size}, expected {self.n}")
        self.table = table
        self.rows = [TokenDistribution(r, role=role) for r in table]
        self.initial = TokenDistribution(initial, role=role)
        self.role = role
        self.cost = cost

    def next_distribution(self, prefix: Sequence[int]) -> TokenDistribution:
        return self.rows[prefix[-1]] if prefix else self.initial

    def to_spec(self) -> dict:
        return {"kind": self.kind, "n": self.n, "table": self.table.tolist(),
                "initial": self.initial.probs.tolist()}


def markov_model(table, initial=None, role: str = "target", cost: float = 1.0) -> MarkovModel:
    return MarkovModel(table, initial, role=role, cost=cost)


def logit_table_model(logits, temperature: float = DEFAULT_TEMPERATURE, initial_logits=None,
                      role: str = "target", cost: float = 1.0) -> MarkovModel:
    """Markov model whose rows are tempered softmaxes of a logit table."""
    table = softmax_temperature(logits, temperature)
    initial = None if initial_logits is None else softmax_temperature(initial_logits, temperature)
    return MarkovModel(table, initial, role=role, cost=cost)


def model_from_spec(spec: dict, base_dir=None, role: str = "target"):
    """Build a model from its JSON description.

    Recognized kinds: ``memoryless`` (``probs``), ``markov`` (``table`` or
    ``table_path``, optional ``initial``) and ``logit-table`` (``logits`` or
    ``table_path``, ``temperature``).  A ``table_path`` names a PCGE binary
    file; with n + 1 rows the last row is the initial distribution.
    """
    kind = spec.get("kind")
    cost = float(spec.get("cost", 1.0))
    base = Path(base_dir) if base_dir is not None else Path(".")

    def table_from(key):
        if "table_path" in spec:
            return load_table(base / spec["table_path"])
        if key not in spec:
            raise ConfigError(f"{kind} model spec needs {key!r} or 'table_path'")
        return np.asarray(spec[key], dtype=np.float64)

    def split(table):
        if table.ndim == 2 and table.shape[0] == table.shape[1] + 1:
            return table[:-1], table[-1]
        return table, spec.get("initial")

    if kind == "memoryless":
        model = MemorylessModel(spec["probs"], role=role, cost=cost)
    elif kind == "markov":
        table, initial = split(table_from("table"))
        model = MarkovModel(table, initial, role=role, cost=cost)
    elif kind == "logit-table":
        table, initial = split(table_from("logits"))
        model = logit_table_model(table, float(spec.get("temperature", DEFAULT_TEMPERATURE)),
                                  initial, role=role, cost=cost)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    if "n" in spec and int(spec["n"]) != model.n:
        raise ConfigError(f"model spec declares n={spec['n']} but its table has n={model.n}")
    return model


def load_model(path, role: str = "target"):
    path = Path(path)
    return model_from_spec(json.loads(path.read_text()), base_dir=path.parent, role=role)


# ---------------------------------------------------------------------------
# clustered instances


@dataclass
class ClusteredPair:
    draft: object
    target: object
    embeddings: np.ndarray
    labels: np.ndarray

    def cluster_index(self) -> GroupIndex:
        """The ground-truth clusters as a (non-overlapping) index."""
        groups = [np.flatnonzero(self.labels == c) for c in np.unique(self.labels)]
        return GroupIndex.from_groups(len(self.labels), groups)


def _shuffle_within(probs: np.ndarray, labels: np.ndarray, noise: float) -> np.ndarray:
    """Blend each cluster's masses with a cyclic roll of themselves.

    Cluster totals are preserved exactly in real arithmetic, so draft and
    target coarse masses agree whenever groups coincide with clusters.
    """
    if noise == 0.0:
        return probs.copy()
    rolled = probs.copy()
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        rolled[..., members] = np.roll(probs[..., members], 1, axis=-1)
    return (1.0 - noise) * probs + noise * rolled


def clustered_pair(n: int = 16, n_clusters: int = 4, d: int = 8, intra_spread: float = 0.05,
                   draft_noise: float = 1.0, seed: int = 0,
                   temperature: float = DEFAULT_TEMPERATURE, markov: bool = False,
                   cluster_scale: float = 1.0, token_scale: float = 1.5,
                   draft_cost: float = 0.05) -> ClusteredPair:
    """Draft/target pair whose tokens fall into ``n_clusters`` embedding clusters.

    The target's logits combine a per-cluster and a per-token term; the
    draft blends target mass with a within-cluster roll (``draft_noise`` in
    [0, 1]), moving token-level mass but not cluster-level mass.  Cluster
    centres are orthonormal when ``d >= n_clusters``.
    """
    if not 1 <= n_clusters <= n:
        raise ValueError("need 1 <= n_clusters <= n")
    if d < 2:
        raise ValueError("need d >= 2")
    if not 0.0 <= draft_noise <= 1.0:
        raise ValueError("draft_noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) * n_clusters // n
    if d >= n_clusters:
        q_mat, _ = np.linalg.qr(rng.standard_normal((d, n_clusters)))
        centres = q_mat.T
    else:
        centres = normalize(rng.standard_normal((n_clusters, d)))
    emb = normalize(centres[labels] + intra_spread * rng.standard_normal((n, d)))

    rows = n if markov else 1
    logits = (cluster_scale * rng.standard_normal((rows, n_clusters))[:, labels]
              + token_scale * rng.standard_normal((rows, n)))
    target_tab = softmax_temperature(logits, temperature)
    draft_tab = _shuffle_within(target_tab, labels, draft_noise)
    if markov:
        init = softmax_temperature(cluster_scale * rng.standard_normal(n_clusters)[labels]
                                   + token_scale * rng.standard_normal(n), temperature)
        draft_init = _shuffle_within(init, labels, draft_noise)
        target = MarkovModel(target_tab, init, role="target")
        draft = MarkovModel(draft_tab, draft_init, role="draft", cost=draft_cost)
    else:
        target = MemorylessModel(target_tab[0], role="target")
        draft = MemorylessModel(draft_tab[0], role="draft", cost=draft_cost)
    return ClusteredPair(draft, target, emb, labels)


# ---------------------------------------------------------------------------
# fixed instances


RUNNING_GROUPS = ([0, 1], [1, 2], [3])
RUNNING_P = (0.4, 0.4, 0.1, 0.1)
RUNNING_Q = (0.1, 0.2, 0.3, 0.4)


@dataclass
class Instance:
    """A draft/target pair plus whatever the PCG index is built from."""

    draft: object
    target: object
    embeddings: Optional[np.ndarray] = None
    index: Optional[GroupIndex] = None


def running_example() -> Instance:
    """Four tokens, groups {0,1}, {1,2}, {3}; token 1 is shared."""
    return Instance(MemorylessModel(RUNNING_P, role="draft"),
                    MemorylessModel(RUNNING_Q, role="target"),
                    index=GroupIndex.from_groups(4, RUNNING_GROUPS))


def acceptance_pair(a: float) -> Instance:
    """Two-token pair whose per-position acceptance probability is ``a``.

    The draft always proposes token 0, which the target gives mass ``a``;
    singleton groups make PCG and SD coincide.
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError("a must lie in [0, 1]")
    return Instance(MemorylessModel([1.0, 0.0], role="draft"),
                    MemorylessModel([a, 1.0 - a], role="target"),
                    index=GroupIndex.singletons(2))


def disjoint_pair(n: int = 4) -> Instance:
    """Draft and target with disjoint supports; nothing is ever accepted."""
    half = n // 2
    p = np.r_[np.full(half, 1.0 / half), np.zeros(n - half)]
    q = np.r_[np.zeros(half), np.full(n - half, 1.0 / (n - half))]
    return Instance(MemorylessModel(p, role="draft"), MemorylessModel(q, role="target"),
                    index=GroupIndex.singletons(n))


# clusters crowded into 3 dimensions, so groups grow gradually as theta falls
GRADED_PARAMS = {"n": 32, "n_clusters": 8, "d": 3, "intra_spread": 0.3}


def preset(name: str, **params) -> Instance:
    """Named instances used by the CLI."""
    if name == "running-example":
        return running_example()
    if name == "acceptance":
        return acceptance_pair(float(params.get("a", 0.6)))
    if name == "disjoint":
        return disjoint_pair(int(params.get("n", 4)))
    if name in ("clustered", "identical", "graded"):
        kw = dict(params)
        if name == "identical":
            kw["draft_noise"] = 0.0
        elif name == "graded":
            kw = {**GRADED_PARAMS, **kw}
        pair = clustered_pair(**kw)
        return Instance(pair.draft, pair.target, embeddings=pair.embeddings)
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("running-example", "acceptance", "disjoint", "clustered", "identical", "graded")
