"""Acoustic similarity group (ASG) index.

A token's group is every token whose target-embedding cosine similarity to
it is strictly greater than ``theta``.  Identical groups are stored once;
a token may sit in several groups, and its probability mass is split
across them by a weight rule (equal split by default).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConsistencyError, FormatError, ZeroRow

EMBEDDING_MAGIC = b"PCGE"
INDEX_MAGIC = b"PCGI"
FORMAT_VERSION = 1

_EMB_HEADER = struct.Struct("<4sIQQB")
_IDX_HEADER = struct.Struct("<4sIQQdB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


# ---------------------------------------------------------------------------
# weight rules


class WeightRule:
    """Per-token split of probability mass over the groups containing it.

    Subclasses return, for a token ``t``, one weight per entry of
    ``index.memberships[t]`` (same order).  Weights must be nonnegative and
    sum to one for the coarse distributions to be normalized.
    """

    rule_id: int = -1
    name: str = ""

    def token_weights(self, index: "GroupIndex", t: int) -> np.ndarray:
        raise NotImplementedError


class EqualSplit(WeightRule):
    rule_id = 0
    name = "equal-split"

    def token_weights(self, index, t):
        n_t = len(index.memberships[t])
        return np.full(n_t, 1.0 / n_t)


WEIGHT_RULES: dict[str, WeightRule] = {"equal-split": EqualSplit()}


def register_weight_rule(rule: WeightRule) -> None:
    WEIGHT_RULES[rule.name] = rule


def _rule_by_id(rule_id: int) -> WeightRule:
    for rule in WEIGHT_RULES.values():
        if rule.rule_id == rule_id:
            return rule
    raise FormatError(f"unknown weight rule id {rule_id}")


# ---------------------------------------------------------------------------
# embeddings


def normalize(matrix) -> np.ndarray:
    """Scale every row to unit L2 norm (in float64).

    Raises ``ZeroRow`` for a row with norm below 1e-12 and ``ValueError`` for
    non-finite entries or a malformed shape.
    """
    emb = np.asarray(matrix, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
        raise ValueError(f"embedding matrix must be n x d with n, d >= 1, got shape {emb.shape}")
    if not np.all(np.isfinite(emb)):
        raise ValueError("embedding matrix has non-finite entries")
    norms = np.linalg.norm(emb, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ZeroRow(int(bad[0]))
    return emb / norms[:, None]


def save_embeddings(path, matrix, dtype: str = "f32") -> None:
    """Write a matrix in the PCGE binary format (also used for model tables)."""
    code = {"f32": 0, "f64": 1}[dtype]
    arr = np.ascontiguousarray(matrix, dtype=_DTYPES[code])
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, n, d, code))
        fh.write(arr.tobytes())


def load_table(path) -> np.ndarray:
    """Read a PCGE file as a raw float64 matrix, without normalizing."""
    data = Path(path).read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d, code = _EMB_HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = _EMB_HEADER.size + n * d * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=dtype, offset=_EMB_HEADER.size, count=n * d)
    return arr.reshape(n, d).astype(np.float64)


def load_embeddings(path, prenormalized: bool = False) -> np.ndarray:
    table = load_table(path)
    if prenormalized:
        if table.shape[0] < 1 or table.shape[1] < 1 or not np.all(np.isfinite(table)):
            raise ValueError(f"{path}: invalid embedding matrix")
        return table
    return normalize(table)


# ---------------------------------------------------------------------------
# the index


@dataclass(frozen=True, eq=False)
class GroupIndex:
    """Deduplicated groups plus the reverse (token -> groups) lists.

    ``groups[k]`` is the sorted member array of group ``k``;
    ``memberships[t]`` the sorted ids of groups containing token ``t``.
    Treat as immutable once built; it is shared freely between decoders.
    """

    n: int
    groups: tuple
    memberships: tuple
    theta: float = math.nan
    weight_rule: str = "equal-split"
    degree: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "degree", np.array([len(m) for m in self.memberships], dtype=np.int64))

    @property
    def M(self) -> int:
        return len(self.groups)

    @property
    def rule(self) -> WeightRule:
        return WEIGHT_RULES[self.weight_rule]

    @classmethod
    def from_groups(cls, n: int, groups: Iterable[Sequence[int]], theta: float = math.nan,
                    weight_rule: str = "equal-split") -> "GroupIndex":
        """Validate ``groups`` and derive memberships.

        Raises ``ConsistencyError`` for unsorted or repeated members,
        out-of-range ids, duplicate groups, or uncovered tokens.
        """
        arrs = tuple(np.asarray(g, dtype=np.int64) for g in groups)
        seen = set()
        for k, g in enumerate(arrs):
            if g.ndim != 1 or g.size == 0:
                raise ConsistencyError(f"group {k} is empty")
            if np.any(np.diff(g) <= 0):
                raise ConsistencyError(f"group {k} is not strictly increasing")
            if g[0] < 0 or g[-1] >= n:
                raise ConsistencyError(f"group {k} has ids outside [0, {n})")
            key = g.tobytes()
            if key in seen:
                raise ConsistencyError(f"group {k} duplicates an earlier group")
            seen.add(key)
        if weight_rule not in WEIGHT_RULES:
            raise ConsistencyError(f"unknown weight rule {weight_rule!r}")
        memberships = _memberships(n, arrs)
        for t, m in enumerate(memberships):
            if m.size == 0:
                raise ConsistencyError(f"token {t} belongs to no group")
        return cls(n=n, groups=arrs, memberships=memberships, theta=float(theta),
                   weight_rule=weight_rule)

    @classmethod
    def singletons(cls, n: int) -> "GroupIndex":
        return cls.from_groups(n, [[t] for t in range(n)], theta=1.0)

    def with_weight_rule(self, name: str) -> "GroupIndex":
        if name not in WEIGHT_RULES:
            raise KeyError(name)
        return GroupIndex(self.n, self.groups, self.memberships, self.theta, name)

    @cached_property
    def token_weights(self) -> tuple:
        """``token_weights[t][j]`` is the weight of ``t`` in group ``memberships[t][j]``."""
        rule = self.rule
        return tuple(np.asarray(rule.token_weights(self, t), dtype=np.float64) for t in range(self.n))

    @cached_property
    def token_weight_cdfs(self) -> tuple:
        return tuple(np.cumsum(w).tolist() for w in self.token_weights)

    @cached_property
    def equal_split(self) -> bool:
        return isinstance(self.rule, EqualSplit)

    @cached_property
    def group_weights(self) -> tuple:
        """``group_weights[k][j]`` is w_{k,t} for ``t = groups[k][j]``."""
        if self.equal_split:
            inv = 1.0 / self.degree
            return tuple(inv[g] for g in self.groups)
        out = [np.empty(g.size) for g in self.groups]
        pos = [dict(zip(g.tolist(), range(g.size))) for g in self.groups]
        for t, (ks, ws) in enumerate(zip(self.memberships, self.token_weights)):
            for k, w in zip(ks.tolist(), ws.tolist()):
                out[k][pos[k][t]] = w
        return tuple(out)

    def weight(self, k: int, t: int) -> float:
        ks = self.memberships[t]
        j = np.searchsorted(ks, k)
        if j < ks.size and ks[j] == k:
            return float(self.token_weights[t][j])
        return 0.0

    def __eq__(self, other):
        if not isinstance(other, GroupIndex):
            return NotImplemented
        same_theta = (self.theta == other.theta) or (math.isnan(self.theta) and math.isnan(other.theta))
        return (self.n == other.n and self.M == other.M and same_theta
                and self.weight_rule == other.weight_rule
                and all(np.array_equal(a, b) for a, b in zip(self.groups, other.groups))
                and all(np.array_equal(a, b) for a, b in zip(self.memberships, other.memberships)))

    __hash__ = None


def _memberships(n: int, groups: tuple) -> tuple:
    if not groups:
        return tuple(np.empty(0, dtype=np.int64) for _ in range(n))
    sizes = np.fromiter((g.size for g in groups), dtype=np.int64, count=len(groups))
    tokens = np.concatenate(groups)
    gids = np.repeat(np.arange(len(groups), dtype=np.int64), sizes)
    order = np.argsort(tokens, kind="stable")
    counts = np.bincount(tokens, minlength=n)
    return tuple(np.split(gids[order], np.cumsum(counts)[:-1]))


# ---------------------------------------------------------------------------
# construction


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not (-1.0 < theta <= 1.0):
        raise ValueError(f"theta must lie in (-1, 1], got {theta}")
    return theta


def _dedup(n: int, neighbour_rows: Iterable[np.ndarray], theta: float) -> GroupIndex:
    ids: dict[bytes, int] = {}
    groups = []
    for members in neighbour_rows:
        key = members.tobytes()
        if key not in ids:
            ids[key] = len(groups)
            groups.append(members)
    groups = tuple(groups)
    return GroupIndex(n=n, groups=groups, memberships=_memberships(n, groups), theta=theta)


def build_groups(matrix, theta: float, block_size: int = 1024, normalized: bool = True) -> GroupIndex:
    """Build the index with a blocked matrix product.

    ``matrix`` must already hold unit rows unless ``normalized=False``.  A
    token always belongs to its own group, which keeps ``theta = 1``
    meaningful (all singletons) despite the strict inequality.
    """
    theta = _check_theta(theta)
    emb = np.asarray(matrix, dtype=np.float64) if normalized else normalize(matrix)
    n = emb.shape[0]

    def rows():
        for start in range(0, n, block_size):
            sims = emb[start:start + block_size] @ emb.T
            mask = sims > theta
            for r in range(mask.shape[0]):
                mask[r, start + r] = True
                yield np.flatnonzero(mask[r])

    return _dedup(n, rows(), theta)


def build_groups_reference(matrix, theta: float) -> GroupIndex:
    """Pairwise O(n^2 d) construction; the reference for ``build_groups``."""
    theta = _check_theta(theta)
    emb = np.asarray(matrix, dtype=np.float64).tolist()
    n = len(emb)

    def rows():
        for t in range(n):
            et = emb[t]
            members = [s for s in range(n)
                       if s == t or sum(a * b for a, b in zip(et, emb[s])) > theta]
            yield np.array(members, dtype=np.int64)

    return _dedup(n, rows(), theta)


def sliding_window_index(n: int, width: int) -> GroupIndex:
    """Synthetic index of ``n`` cyclic windows of ``width`` consecutive ids.

    Built without Python-level loops over members, for memory-accounting
    checks at full vocabulary scale.
    """
    if not 1 <= width <= n:
        raise ValueError("width must be in [1, n]")
    if width == n and n > 1:
        raise ValueError("width == n makes every window identical")
    base = np.arange(width, dtype=np.int64)
    groups = tuple(np.sort((k + base) % n) for k in range(n))
    return GroupIndex.from_groups(n, groups) if n <= 4096 else GroupIndex(
        n=n, groups=groups, memberships=_memberships(n, groups))


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class IndexStats:
    n: int
    M: int
    entries: int
    mean_group_size: float
    max_group_size: int
    mean_degree: float
    max_degree: int
    id_bytes: int
    storage_bytes: int

    @property
    def storage_mb(self) -> float:
        return self.storage_bytes / 1e6

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["storage_mb"] = self.storage_mb
        return d


def stats(index: GroupIndex, id_bytes: int = 4) -> IndexStats:
    """Group counts, size summaries, and membership-list storage at ``id_bytes``."""
    if id_bytes not in (2, 4):
        raise ValueError("id_bytes must be 2 or 4")
    sizes = np.fromiter((g.size for g in index.groups), dtype=np.int64, count=index.M)
    entries = int(sizes.sum())
    return IndexStats(
        n=index.n,
        M=index.M,
        entries=entries,
        mean_group_size=float(sizes.mean()),
        max_group_size=int(sizes.max()),
        mean_degree=float(index.degree.mean()),
        max_degree=int(index.degree.max()),
        id_bytes=id_bytes,
        storage_bytes=entries * id_bytes,
    )


# ---------------------------------------------------------------------------
# persistence


def save_index(index: GroupIndex, path) -> None:
    rule = index.rule
    sizes = np.fromiter((g.size for g in index.groups), dtype=np.int64, count=index.M)
    body = np.empty(index.M + int(sizes.sum()), dtype="<u4")
    starts = np.concatenate(([0], np.cumsum(sizes + 1)[:-1]))
    body[starts] = sizes
    mask = np.ones(body.size, dtype=bool)
    mask[starts] = False
    if index.M:
        body[mask] = np.concatenate(index.groups)
    with open(path, "wb") as fh:
        fh.write(_IDX_HEADER.pack(INDEX_MAGIC, FORMAT_VERSION, index.n, index.M,
                                  float(index.theta), rule.rule_id))
        fh.write(body.tobytes())


def load_index(path) -> GroupIndex:
    """Read a PCGI file; memberships are recomputed and every invariant checked."""
    data = Path(path).read_bytes()
    if len(data) < _IDX_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, M, theta, rule_id = _IDX_HEADER.unpack_from(data)
    if magic != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rule = _rule_by_id(rule_id)
    payload = data[_IDX_HEADER.size:]
    if len(payload) % 4:
        raise FormatError(f"{path}: payload is not a whole number of u32 words")
    words = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    groups = []
    pos = 0
    for k in range(M):
        if pos >= words.size:
            raise FormatError(f"{path}: truncated at group {k}")
        size = int(words[pos])
        end = pos + 1 + size
        if end > words.size:
            raise FormatError(f"{path}: truncated inside group {k}")
        groups.append(words[pos + 1:end])
        pos = end
    if pos != words.size:
        raise FormatError(f"{path}: {words.size - pos} trailing words")
    return GroupIndex.from_groups(n, groups, theta=theta, weight_rule=rule.name)
