"""Relation-subset enumeration, validity filtering, sampling and subgraph extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .hetgraph import HeteroGraph, RelationType

DEFAULT_CAP = 20


class TooManyRelationsError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class RelationSubset:
    mask: int

    def __post_init__(self):
        if self.mask <= 0:
            raise ValueError("relation subset must be non-empty")

    @classmethod
    def from_ids(cls, ids) -> "RelationSubset":
        mask = 0
        for i in ids:
            mask |= 1 << int(i)
        return cls(mask)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.mask.bit_length()) if self.mask >> i & 1)

    def __contains__(self, rel: int) -> bool:
        return bool(self.mask >> rel & 1)

    def __or__(self, other: "RelationSubset") -> "RelationSubset":
        return RelationSubset(self.mask | other.mask)

    def names(self, g: HeteroGraph) -> list[str]:
        return [g.relations[i].name for i in self.ids]


def enumerate_subsets(relations: list[RelationType], cap: int = DEFAULT_CAP) -> list[RelationSubset]:
    n = len(relations)
    if n < 1:
        raise ValueError("need at least one relation type")
    if n > cap:
        raise TooManyRelationsError(
            f"{n} relation types exceed the power-set cap of {cap}; "
            "use sample_random_subsets() to draw random subsets instead"
        )
    return [RelationSubset(m) for m in range(1, 1 << n)]


def is_valid_subset(g: HeteroGraph, s: RelationSubset, target: int) -> bool:
    """True iff the metagraph restricted to ``s`` is one connected piece touching ``target``.

    Node types are vertices and each relation in ``s`` an undirected edge.
    A subset fails if it never reaches the target type or if some of its
    relations sit in a component that does not contain the target.
    """
    parent = list(range(len(g.node_types)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for r in s.ids:
        rel = g.relations[r]
        parent[find(rel.src)] = find(rel.dst)
    root = find(target)
    touched = False
    for r in s.ids:
        rel = g.relations[r]
        if find(rel.src) != root:
            return False
        touched = touched or target in (rel.src, rel.dst)
    return touched


def valid_subsets(g: HeteroGraph, target: int, cap: int = DEFAULT_CAP) -> list[RelationSubset]:
    return [s for s in enumerate_subsets(g.relations, cap) if is_valid_subset(g, s, target)]


def sample_subsets(valid: list[RelationSubset], k: int, seed: int) -> list[RelationSubset]:
    """Draw ``k`` distinct subsets uniformly without replacement."""
    if k > len(valid):
        raise ValueError(f"cannot sample K={k} subsets from only {len(valid)} valid subsets")
    if k < 0:
        raise ValueError("K must be non-negative")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(valid), size=k, replace=False)
    return [valid[i] for i in idx]


def sample_random_subsets(
    g: HeteroGraph, target: int, k: int, seed: int, max_tries: int = 100_000, exclude: int = 0
) -> list[RelationSubset]:
    """Rejection sampling for graphs with too many relations to enumerate.

    Each relation is included with probability 1/2; invalid or repeated
    draws, and draws touching the ``exclude`` mask, are discarded.
    """
    rng = np.random.default_rng(seed)
    n = len(g.relations)
    out: list[RelationSubset] = []
    seen: set[int] = set()
    for _ in range(max_tries):
        if len(out) == k:
            break
        bits = rng.random(n) < 0.5
        mask = int(sum(1 << i for i in np.flatnonzero(bits)))
        if mask == 0 or mask & exclude or mask in seen:
            continue
        s = RelationSubset(mask)
        if is_valid_subset(g, s, target):
            seen.add(mask)
            out.append(s)
    if len(out) < k:
        raise ValueError(f"found only {len(out)} valid subsets after {max_tries} draws, wanted {k}")
    return out


def choose_subsets(
    g: HeteroGraph, target: int, k: int, seed: int, cap: int = DEFAULT_CAP, exclude=()
) -> list[RelationSubset]:
    """Sample K valid subsets, never using a relation named or numbered in ``exclude``."""
    mask = RelationSubset.from_ids(g.relation_id(r) if isinstance(r, str) else r
                                   for r in exclude).mask if exclude else 0
    if len(g.relations) > cap:
        return sample_random_subsets(g, target, k, seed, exclude=mask)
    pool = [s for s in valid_subsets(g, target, cap) if not s.mask & mask]
    return sample_subsets(pool, k, seed)


@dataclass(frozen=True)
class RelationSubgraph:
    subset: RelationSubset
    csr: sp.csr_matrix
    degree: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.csr.nnz)

    def neighbors(self, v: int) -> np.ndarray:
        return self.csr.indices[self.csr.indptr[v]:self.csr.indptr[v + 1]]


def extract_subgraph(g: HeteroGraph, s: RelationSubset, symmetrize: bool = True) -> RelationSubgraph:
    """Homogeneous CSR over all global ids keeping only relations in ``s``.

    Row ``v`` lists the nodes whose features flow into ``v``. Without
    symmetrization that is the in-neighbours (sources) of ``v``.
    """
    rows, cols = [], []
    for r in s.ids:
        rel = g.relations[r]
        src, dst = g.edges(r)
        gs = src + g.offsets[rel.src]
        gd = dst + g.offsets[rel.dst]
        rows.append(gd)
        cols.append(gs)
        if symmetrize:
            rows.append(gs)
            cols.append(gd)
    n = g.num_nodes
    row = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    col = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    csr = sp.csr_matrix((np.ones(len(row), dtype=np.int32), (row, col)), shape=(n, n))
    csr.sum_duplicates()
    csr.sort_indices()
    csr.data[:] = 1
    degree = np.diff(csr.indptr).astype(np.int64)
    return RelationSubgraph(s, csr, degree)
