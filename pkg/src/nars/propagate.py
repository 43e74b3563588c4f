"""Multi-hop neighbour averaging over relation subgraphs.

Each hop is one product with the row-normalised adjacency ``W``. Row sums
accumulate in float64 and are rounded to the output dtype on store; rows
are independent, so splitting them across threads never changes a bit.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .hetgraph import FeatureMatrix, GraphFormatError, HeteroGraph, read_nfeat, write_nfeat
from .metagraph import RelationSubgraph

MANIFEST = "hops.meta"


class PropagationError(FloatingPointError):
    pass


@dataclass
class HopFeatureTensor:
    subgraph_id: int
    hops: list[np.ndarray]

    @property
    def num_hops(self) -> int:
        """L, so there are L + 1 matrices."""
        return len(self.hops) - 1

    @property
    def nbytes(self) -> int:
        return sum(h.nbytes for h in self.hops)


def assemble_input(g: HeteroGraph, feats: dict[int, FeatureMatrix], dtype=np.float32) -> np.ndarray:
    dims = {}
    for t in g.node_types:
        if t.id not in feats:
            raise KeyError(f"node type {t.name!r} has no features; featurize it first")
        dims[t.name] = feats[t.id].dim
    if len(set(dims.values())) != 1:
        raise ValueError(f"feature dimensions differ across node types: {dims}")
    d = next(iter(dims.values()))
    out = np.empty((g.num_nodes, d), dtype=dtype)
    for t in g.node_types:
        out[g.type_slice(t.id)] = feats[t.id].data
    return out


def assemble_block_input(
    g: HeteroGraph, feats: dict[int, FeatureMatrix], dtype=np.float32
) -> tuple[np.ndarray, list[slice]]:
    """Lay each type's features out in its own column block, zeros elsewhere.

    Used when node types have different raw dimensions. Because averaging
    is linear, a linear map on the propagated blocks acts as a separate
    input projection per node type. Returns the matrix and the column
    slice of each type.
    """
    for t in g.node_types:
        if t.id not in feats:
            raise KeyError(f"node type {t.name!r} has no features; featurize it first")
    cols, start = [], 0
    for t in g.node_types:
        cols.append(slice(start, start + feats[t.id].dim))
        start += feats[t.id].dim
    out = np.zeros((g.num_nodes, start), dtype=dtype)
    for t, c in zip(g.node_types, cols):
        out[g.type_slice(t.id), c] = feats[t.id].data
    return out, cols


def row_normalize(sub: RelationSubgraph) -> sp.csr_matrix:
    """Weights ``1/deg(v)`` on every stored edge of row ``v``; empty rows stay empty."""
    deg = sub.degree.astype(np.float64)
    inv = np.zeros_like(deg)
    np.divide(1.0, deg, out=inv, where=deg > 0)
    w = sp.csr_matrix(
        (np.repeat(inv, sub.degree), sub.csr.indices.copy(), sub.csr.indptr.copy()),
        shape=sub.csr.shape,
    )
    return w


def _spmm(w: sp.csr_matrix, x: np.ndarray, threads: int) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    n = w.shape[0]
    if threads <= 1 or n < 2 * threads:
        return w @ x64
    bounds = np.linspace(0, n, threads + 1).astype(int)
    out = np.empty((n, x.shape[1]), dtype=np.float64)

    def work(i):
        lo, hi = bounds[i], bounds[i + 1]
        out[lo:hi] = w[lo:hi] @ x64

    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(work, range(threads)))
    return out


def gen_neighbor_features(
    sub: RelationSubgraph,
    h0: np.ndarray,
    num_hops: int,
    subgraph_id: int = 0,
    dtype=np.float32,
    threads: int = 1,
    rows: slice | None = None,
) -> HopFeatureTensor:
    """Hop features ``[H0, W H0, ..., W^L H0]`` with ``W`` the row-normalised adjacency.

    With ``rows`` only that row range of every hop is kept; propagation still
    runs over the whole graph but holds just two full matrices at a time.
    """
    if num_hops < 1:
        raise ValueError("number of hops must be at least 1")
    if h0.shape[0] != sub.csr.shape[0]:
        raise ValueError(f"feature rows {h0.shape[0]} != subgraph nodes {sub.csr.shape[0]}")
    if not np.all(np.isfinite(h0)):
        raise PropagationError("input features contain NaN or Inf")
    w = row_normalize(sub)
    keep = slice(None) if rows is None else rows
    cur = np.array(h0, dtype=dtype, copy=True)
    hops = [cur if rows is None else cur[keep].copy()]
    for hop in range(1, num_hops + 1):
        cur = _spmm(w, cur, threads).astype(dtype)
        if not np.all(np.isfinite(cur)):
            raise PropagationError(f"non-finite values produced at hop {hop}")
        hops.append(cur if rows is None else cur[keep].copy())
    return HopFeatureTensor(subgraph_id, hops)


# ---------------------------------------------------------------- persistence


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hop_filename(subgraph_id: int, hop: int) -> str:
    return f"sg{subgraph_id:03d}_hop{hop}.nfeat"


def save_hops(tensor: HopFeatureTensor, directory: str | os.PathLike) -> None:
    """Write one file per hop and (re)write this subgraph's rows of the manifest."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = {k: v for k, v in read_manifest(root).items() if k[0] != tensor.subgraph_id} \
        if (root / MANIFEST).exists() else {}
    for hop, mat in enumerate(tensor.hops):
        if mat.dtype != np.float32:
            raise TypeError("hop tensors are persisted as float32")
        name = hop_filename(tensor.subgraph_id, hop)
        write_nfeat(root / name, mat)
        entries[(tensor.subgraph_id, hop)] = (name, _sha256(root / name))
    write_manifest(root, entries)


def write_manifest(root: Path, entries: dict[tuple[int, int], tuple[str, str]]) -> None:
    lines = ["# subgraph\thop\tfile\tsha256"]
    for (sg, hop), (name, digest) in sorted(entries.items()):
        lines.append(f"{sg}\t{hop}\t{name}\t{digest}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(directory: str | os.PathLike) -> dict[tuple[int, int], tuple[str, str]]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise GraphFormatError(f"{path}:{lineno}: expected 4 columns")
        out[(int(parts[0]), int(parts[1]))] = (parts[2], parts[3])
    return out


def load_hops(
    directory: str | os.PathLike,
    subgraph_id: int,
    num_hops: int | None = None,
    verify: bool = True,
    rows: slice | None = None,
) -> HopFeatureTensor:
    root = Path(directory)
    manifest = read_manifest(root)
    hops_present = sorted(h for (sg, h) in manifest if sg == subgraph_id)
    if not hops_present:
        raise KeyError(f"subgraph {subgraph_id} not in manifest")
    if hops_present != list(range(len(hops_present))):
        raise GraphFormatError(f"subgraph {subgraph_id}: hop files are not contiguous")
    if num_hops is not None and len(hops_present) != num_hops + 1:
        raise GraphFormatError(
            f"subgraph {subgraph_id}: manifest has {len(hops_present)} hop matrices, "
            f"expected {num_hops + 1}"
        )
    mats = []
    for hop in hops_present:
        name, digest = manifest[(subgraph_id, hop)]
        path = root / name
        if verify and _sha256(path) != digest:
            raise GraphFormatError(f"{path}: checksum mismatch")
        mats.append(read_nfeat(path, rows))
    return HopFeatureTensor(subgraph_id, mats)
