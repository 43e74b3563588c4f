"""Input features for node types that ship without any."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hetgraph import FeatureMatrix, HeteroGraph, read_nfeat, write_nfeat

log = logging.getLogger(__name__)


def featurize_zero(g: HeteroGraph, node_type: int, dim: int) -> FeatureMatrix:
    if dim <= 0:
        raise ValueError(f"feature dimension must be positive, got {dim}")
    return FeatureMatrix(node_type, np.zeros((g.node_types[node_type].count, dim), np.float32))


def featurize_neighbor_avg_all(
    g: HeteroGraph, source_feats: dict[int, FeatureMatrix]
) -> dict[int, FeatureMatrix]:
    """Fill every reachable featureless type by breadth-first neighbour averaging.

    Each round featurizes the types adjacent to already featured ones,
    using only features that existed before the round. A node's value is
    the mean over its featured neighbours, pooled across relations in both
    directions; nodes without such neighbours get zeros.
    """
    if not source_feats:
        raise ValueError("need at least one featured node type")
    dims = {fm.dim for fm in source_feats.values()}
    if len(dims) != 1:
        raise ValueError("source feature dimensions differ")
    dim = dims.pop()
    feats = dict(source_feats)
    while True:
        frontier = set()
        for r in g.relations:
            if r.src in feats and r.dst not in feats:
                frontier.add(r.dst)
            if r.dst in feats and r.src not in feats:
                frontier.add(r.src)
        if not frontier:
            break
        new = {}
        for t in sorted(frontier):
            n = g.node_types[t].count
            acc = np.zeros((n, dim), np.float64)
            cnt = np.zeros(n, np.float64)
            for r in g.relations:
                # t as destination pulls from featured sources, and vice versa
                if r.dst == t and r.src in feats:
                    adj = g.reverse[r.id]
                    acc += adj @ feats[r.src].data.astype(np.float64)
                    cnt += np.diff(adj.indptr)
                if r.src == t and r.dst in feats:
                    adj = g.forward[r.id]
                    acc += adj @ feats[r.dst].data.astype(np.float64)
                    cnt += np.diff(adj.indptr)
            out = np.zeros_like(acc)
            np.divide(acc, cnt[:, None], out=out, where=cnt[:, None] > 0)
            new[t] = FeatureMatrix(t, out.astype(np.float32))
        feats.update(new)
    return feats


def featurize_neighbor_avg(
    g: HeteroGraph, node_type: int, source_feats: dict[int, FeatureMatrix]
) -> FeatureMatrix:
    feats = featurize_neighbor_avg_all(g, source_feats)
    if node_type not in feats:
        raise ValueError(
            f"no featured node type is reachable from {g.node_types[node_type].name!r}"
        )
    return feats[node_type]


# ---------------------------------------------------------------- TransE


@dataclass
class EmbeddingTable:
    entity: np.ndarray
    relation: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    trained: bool = False

    @property
    def dim(self) -> int:
        return int(self.entity.shape[1])


def _triples(g: HeteroGraph) -> np.ndarray:
    parts = []
    for r in g.relations:
        s, d = g.edges(r.id)
        parts.append(np.stack([s + g.offsets[r.src], np.full_like(s, r.id), d + g.offsets[r.dst]], 1))
    return np.concatenate(parts) if parts else np.zeros((0, 3), np.int64)


def _transe_batch(ent, rel, pos, neg, margin):
    """Summed hinge loss and sparse gradients for paired positive/negative triples.

    Returns ``(loss, entity_ids, entity_grad_rows, relation_grad)``. At a
    zero distance the subgradient of the norm is taken as zero.
    """
    h, r, t = pos[:, 0], pos[:, 1], pos[:, 2]
    hn, tn = neg[:, 0], neg[:, 2]
    dp_vec = ent[h] + rel[r] - ent[t]
    dn_vec = ent[hn] + rel[r] - ent[tn]
    dp = np.linalg.norm(dp_vec, axis=1)
    dn = np.linalg.norm(dn_vec, axis=1)
    hinge = margin + dp - dn
    active = hinge > 0
    loss = float(hinge[active].sum())

    up = np.zeros_like(dp_vec)
    un = np.zeros_like(dn_vec)
    np.divide(dp_vec, dp[:, None], out=up, where=(dp[:, None] > 0) & active[:, None])
    np.divide(dn_vec, dn[:, None], out=un, where=(dn[:, None] > 0) & active[:, None])

    ids = np.concatenate([h, t, hn, tn])
    rows = np.concatenate([up, -up, -un, un])
    grad_rel = np.zeros_like(rel)
    np.add.at(grad_rel, r, up - un)
    return loss, ids, rows, grad_rel


def transe_loss_and_grads(ent, rel, pos, neg, margin):
    """Dense version of the batch loss, for gradient checking."""
    loss, ids, rows, grad_rel = _transe_batch(ent, rel, pos, neg, margin)
    grad_ent = np.zeros_like(ent)
    np.add.at(grad_ent, ids, rows)
    return loss, grad_ent, grad_rel


def corrupt(g: HeteroGraph, pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Replace head or tail (probability 1/2 each) by a uniform node of the same type."""
    neg = pos.copy()
    src_t = np.array([r.src for r in g.relations])[pos[:, 1]]
    dst_t = np.array([r.dst for r in g.relations])[pos[:, 1]]
    head = rng.random(len(pos)) < 0.5
    types = np.where(head, src_t, dst_t)
    counts = np.array([t.count for t in g.node_types])[types]
    repl = g.offsets[types] + np.floor(rng.random(len(pos)) * counts).astype(np.int64)
    neg[head, 0] = repl[head]
    neg[~head, 2] = repl[~head]
    return neg


def _unit_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def train_transe(
    g: HeteroGraph,
    dim: int,
    epochs: int = 100,
    margin: float = 1.0,
    lr: float = 0.01,
    neg_per_pos: int = 1,
    seed: int = 0,
    batch_size: int = 1024,
    dtype=np.float32,
) -> EmbeddingTable:
    """Train TransE with plain SGD on the margin ranking loss.

    Every entity row that receives a gradient is projected back to unit L2
    norm after the update. Relations are normalised once at init.
    """
    if dim < 1:
        raise ValueError("embedding dimension must be >= 1")
    if margin <= 0:
        raise ValueError("margin must be positive")
    triples = _triples(g)
    if len(triples) == 0:
        raise ValueError("cannot train TransE on a graph with zero edges")
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(dim)
    ent = _unit_rows(rng.uniform(-bound, bound, (g.num_nodes, dim))).astype(dtype)
    rel = _unit_rows(rng.uniform(-bound, bound, (len(g.relations), dim))).astype(dtype)
    table = EmbeddingTable(ent, rel)

    for epoch in range(epochs):
        order = rng.permutation(len(triples))
        total, pairs = 0.0, 0
        for start in range(0, len(order), batch_size):
            pos = np.repeat(triples[order[start:start + batch_size]], neg_per_pos, axis=0)
            neg = corrupt(g, pos, rng)
            loss, ids, rows, grad_rel = _transe_batch(ent, rel, pos, neg, margin)
            np.add.at(ent, ids, (-lr * rows).astype(dtype))
            rel -= (lr * grad_rel).astype(dtype)
            touched = np.unique(ids)
            ent[touched] = _unit_rows(ent[touched])
            total += loss
            pairs += len(pos)
        table.loss_history.append(total / pairs)
        log.debug("transe epoch %d loss %.5f", epoch, table.loss_history[-1])
    table.trained = True
    return table


def featurize_transe(table: EmbeddingTable, g: HeteroGraph, node_type: int) -> FeatureMatrix:
    if not table.trained:
        raise ValueError("embedding table has not been trained")
    if table.entity.shape[0] != g.num_nodes:
        raise ValueError(
            f"embedding table has {table.entity.shape[0]} rows, graph has {g.num_nodes} nodes"
        )
    return FeatureMatrix(node_type, table.entity[g.type_slice(node_type)].astype(np.float32))


def save_embeddings(table: EmbeddingTable, directory: str | os.PathLike) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_nfeat(root / "entity.nfeat", table.entity)
    write_nfeat(root / "relation.nfeat", table.relation)


def load_embeddings(directory: str | os.PathLike) -> EmbeddingTable:
    root = Path(directory)
    return EmbeddingTable(read_nfeat(root / "entity.nfeat"), read_nfeat(root / "relation.nfeat"),
                          trained=True)
