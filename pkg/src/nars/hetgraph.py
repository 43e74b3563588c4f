"""Heterogeneous graph container, on-disk formats and global index space.

A dataset directory holds ``graph.meta`` plus one TSV edge file per
relation::

    node paper 3
    node author 2
    relation writes author paper writes.tsv

Node types are laid out back to back in declaration order, so every node
has a global id in ``[0, N)``.
"""
from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

FEAT_MAGIC = b"NARSFEAT"
_HEADER = struct.Struct("<8sQQ")


class GraphFormatError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass(frozen=True)
class NodeType:
    id: int
    name: str
    count: int


@dataclass(frozen=True)
class RelationType:
    id: int
    name: str
    src: int
    dst: int


def _csr(src: np.ndarray, dst: np.ndarray, shape: tuple[int, int]) -> sp.csr_matrix:
    m = sp.csr_matrix(
        (np.ones(len(src), dtype=np.int32), (src, dst)), shape=shape, dtype=np.int32
    )
    m.sum_duplicates()
    m.sort_indices()
    m.data[:] = 1
    return m


@dataclass
class HeteroGraph:
    """Typed node sets plus a forward and reverse CSR per relation.

    Treat instances as immutable once built; ``with_relations_dropped``
    returns a new graph.
    """

    node_types: list[NodeType]
    relations: list[RelationType]
    forward: list[sp.csr_matrix]
    reverse: list[sp.csr_matrix]
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = [t.count for t in self.node_types]
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @classmethod
    def from_edges(
        cls,
        node_types: list[tuple[str, int]],
        relations: list[tuple[str, str, str, np.ndarray, np.ndarray]],
    ) -> "HeteroGraph":
        """Build from ``(name, count)`` pairs and ``(name, src, dst, src_ids, dst_ids)``.

        Edges are deduplicated and sorted; endpoints are range checked.
        """
        types = []
        seen = set()
        for i, (name, count) in enumerate(node_types):
            if name in seen:
                raise GraphFormatError(f"duplicate node type {name!r}")
            if count <= 0:
                raise GraphFormatError(f"node type {name!r} must have a positive count")
            seen.add(name)
            types.append(NodeType(i, name, int(count)))
        by_name = {t.name: t for t in types}

        rels, fwd, rev = [], [], []
        rel_names = set()
        for j, (name, s, d, src, dst) in enumerate(relations):
            if name in rel_names:
                raise GraphFormatError(f"duplicate relation {name!r}")
            rel_names.add(name)
            if s not in by_name or d not in by_name:
                raise GraphFormatError(f"relation {name!r} references unknown node type")
            st, dt = by_name[s], by_name[d]
            src = np.asarray(src, dtype=np.int64)
            dst = np.asarray(dst, dtype=np.int64)
            if len(src) and (src.min() < 0 or src.max() >= st.count):
                raise GraphFormatError(f"relation {name!r}: source endpoint out of range")
            if len(dst) and (dst.min() < 0 or dst.max() >= dt.count):
                raise GraphFormatError(f"relation {name!r}: destination endpoint out of range")
            rels.append(RelationType(j, name, st.id, dt.id))
            f = _csr(src, dst, (st.count, dt.count))
            fwd.append(f)
            rev.append(f.T.tocsr(copy=True))
            rev[-1].sort_indices()
        return cls(types, rels, fwd, rev)

    @property
    def num_nodes(self) -> int:
        return int(self.offsets[-1])

    def type_id(self, name_or_id: str | int) -> int:
        if isinstance(name_or_id, (int, np.integer)):
            if not 0 <= name_or_id < len(self.node_types):
                raise KeyError(f"no node type with id {name_or_id}")
            return int(name_or_id)
        for t in self.node_types:
            if t.name == name_or_id:
                return t.id
        raise KeyError(f"unknown node type {name_or_id!r}")

    def relation_id(self, name: str) -> int:
        for r in self.relations:
            if r.name == name:
                return r.id
        raise KeyError(f"unknown relation {name!r}")

    def num_edges(self, rel: int) -> int:
        return int(self.forward[rel].nnz)

    def edges(self, rel: int) -> tuple[np.ndarray, np.ndarray]:
        """Local ``(src, dst)`` arrays in canonical (src, dst) sorted order."""
        coo = self.forward[rel].tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64)

    def type_slice(self, type_id: int) -> slice:
        return slice(int(self.offsets[type_id]), int(self.offsets[type_id + 1]))

    def with_relations_dropped(self, names: list[str]) -> "HeteroGraph":
        """Same node set with every edge of the named relations removed."""
        for n in names:
            self.relation_id(n)
        rels = []
        for r in self.relations:
            s, d = self.edges(r.id)
            if r.name in names:
                s, d = s[:0], d[:0]
            rels.append((r.name, self.node_types[r.src].name, self.node_types[r.dst].name, s, d))
        return HeteroGraph.from_edges([(t.name, t.count) for t in self.node_types], rels)


def global_id(g: HeteroGraph, node_type: int, local) -> np.ndarray | int:
    local_arr = np.asarray(local, dtype=np.int64)
    count = g.node_types[node_type].count
    if np.any(local_arr < 0) or np.any(local_arr >= count):
        raise IndexError(
            f"local index out of range for node type {g.node_types[node_type].name!r} "
            f"(count {count})"
        )
    out = g.offsets[node_type] + local_arr
    return int(out) if out.ndim == 0 else out


def local_id(g: HeteroGraph, gid: int) -> tuple[int, int]:
    """Inverse of :func:`global_id`."""
    if not 0 <= gid < g.num_nodes:
        raise IndexError(f"global id {gid} out of range [0, {g.num_nodes})")
    t = int(np.searchsorted(g.offsets, gid, side="right") - 1)
    return t, int(gid - g.offsets[t])


# ---------------------------------------------------------------- graph IO


def _read_edge_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"missing edge file {path}")
    src, dst = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 2 columns, got {len(parts)}")
            try:
                src.append(int(parts[0]))
                dst.append(int(parts[1]))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id") from None
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def load_graph(dataset_dir: str | os.PathLike) -> HeteroGraph:
    root = Path(dataset_dir)
    meta = root / "graph.meta"
    if not meta.exists():
        raise FileNotFoundError(f"missing {meta}")
    node_types: list[tuple[str, int]] = []
    rel_specs = []
    with open(meta) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "node" and len(parts) == 3:
                try:
                    node_types.append((parts[1], int(parts[2])))
                except ValueError:
                    raise GraphFormatError(f"{meta}:{lineno}: bad node count") from None
            elif parts[0] == "relation" and len(parts) == 5:
                rel_specs.append((lineno, *parts[1:]))
            else:
                raise GraphFormatError(f"{meta}:{lineno}: cannot parse {line!r}")

    counts = dict(node_types)
    relations = []
    for lineno, name, s, d, fname in rel_specs:
        if s not in counts or d not in counts:
            raise GraphFormatError(f"{meta}:{lineno}: relation {name!r} uses undeclared node type")
        path = root / fname
        src, dst = _read_edge_file(path)
        for ids, t in ((src, s), (dst, d)):
            bad = np.flatnonzero((ids < 0) | (ids >= counts[t]))
            if len(bad):
                raise GraphFormatError(
                    f"{path}: endpoint out of range: id {ids[bad[0]]} for type {t!r} "
                    f"with count {counts[t]}"
                )
        relations.append((name, s, d, src, dst))
    return HeteroGraph.from_edges(node_types, relations)


def save_graph(g: HeteroGraph, dataset_dir: str | os.PathLike) -> None:
    root = Path(dataset_dir)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"node {t.name} {t.count}" for t in g.node_types]
    for r in g.relations:
        fname = f"{r.name}.tsv"
        lines.append(
            f"relation {r.name} {g.node_types[r.src].name} {g.node_types[r.dst].name} {fname}"
        )
        s, d = g.edges(r.id)
        with open(root / fname, "w") as f:
            f.writelines(f"{a}\t{b}\n" for a, b in zip(s.tolist(), d.tolist()))
    (root / "graph.meta").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- features


@dataclass
class FeatureMatrix:
    node_type: int
    data: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


def write_nfeat(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("feature array must be 2-D")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEAT_MAGIC, arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_nfeat(path: str | os.PathLike, rows: slice | None = None) -> np.ndarray:
    """Read a NARSFEAT matrix; ``rows`` reads only that contiguous row range."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing feature file {path}")
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise GraphFormatError(f"{path}: truncated header")
        magic, n, cols = _HEADER.unpack(head)
        if magic != FEAT_MAGIC:
            raise GraphFormatError(f"{path}: bad magic {magic!r}")
        body = size - _HEADER.size
        if body != n * cols * 4:
            raise GraphFormatError(
                f"{path}: expected {n}x{cols} float32 payload ({n * cols * 4} bytes), "
                f"found {body} bytes"
            )
        lo, hi, _ = (rows or slice(None)).indices(n)
        hi = max(hi, lo)
        f.seek(_HEADER.size + lo * cols * 4)
        data = np.fromfile(f, dtype="<f4", count=(hi - lo) * cols)
    return data.reshape(hi - lo, cols).astype(np.float32, copy=False)


def load_features(g: HeteroGraph, node_type: int | str, path: str | os.PathLike) -> FeatureMatrix:
    """Load an ``NARSFEAT`` file, or whitespace-separated text if the suffix is .tsv/.txt."""
    t = g.type_id(node_type)
    path = Path(path)
    if path.suffix in (".tsv", ".txt"):
        try:
            data = np.loadtxt(path, dtype=np.float64, ndmin=2).astype(np.float32)
        except ValueError as e:
            raise GraphFormatError(f"{path}: {e}") from None
    else:
        data = read_nfeat(path)
    count = g.node_types[t].count
    if data.shape[0] != count:
        raise GraphFormatError(
            f"{path}: dimension mismatch, {data.shape[0]} rows for node type "
            f"{g.node_types[t].name!r} with count {count}"
        )
    if not np.all(np.isfinite(data)):
        raise GraphFormatError(f"{path}: features contain NaN or Inf")
    return FeatureMatrix(t, data)


def save_features(fm: FeatureMatrix, path: str | os.PathLike) -> None:
    write_nfeat(path, fm.data)


# ---------------------------------------------------------------- labels


@dataclass
class LabelSet:
    """Labels for one node type.

    ``y`` is an int array with -1 for unlabeled nodes (single-label) or a
    0/1 indicator matrix (multi-label). Splits hold local node ids.
    """

    node_type: int
    task: str
    num_classes: int
    y: np.ndarray
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @property
    def multilabel(self) -> bool:
        return self.task == "multi"

    def label_sets(self, nodes: np.ndarray) -> list[set[int]]:
        if self.multilabel:
            return [set(np.flatnonzero(self.y[n]).tolist()) for n in nodes]
        return [{int(self.y[n])} for n in nodes]

    def has_label(self, nodes: np.ndarray) -> np.ndarray:
        if self.multilabel:
            return self.y[nodes].any(axis=1)
        return self.y[nodes] >= 0


_LABEL_LINE = re.compile(r"^\s*(\d+)\s*(?:\t|:|\s)\s*(.+?)\s*$")


def _read_split(path: Path, count: int) -> np.ndarray:
    if not path.exists():
        return np.zeros(0, dtype=np.int64)
    ids = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                v = int(line)
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id") from None
            if not 0 <= v < count:
                raise GraphFormatError(f"{path}:{lineno}: unknown node id {v}")
            ids.append(v)
    return np.array(ids, dtype=np.int64)


def load_labels(
    g: HeteroGraph,
    path: str | os.PathLike,
    node_type: int | str,
    num_classes: int | None = None,
    task: str | None = None,
    split_dir: str | os.PathLike | None = None,
) -> LabelSet:
    """Parse a label TSV plus ``train.txt``/``valid.txt``/``test.txt``.

    ``task`` is inferred as multi-label when any row lists several labels,
    unless given explicitly.
    """
    t = g.type_id(node_type)
    count = g.node_types[t].count
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing label file {path}")
    rows: dict[int, list[int]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            m = _LABEL_LINE.match(line)
            if not m:
                raise GraphFormatError(f"{path}:{lineno}: cannot parse {line.strip()!r}")
            node = int(m.group(1))
            if node >= count:
                raise GraphFormatError(f"{path}:{lineno}: unknown node id {node}")
            try:
                labs = [int(x) for x in m.group(2).split(",") if x.strip()]
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer label") from None
            if not labs or min(labs) < 0:
                raise GraphFormatError(f"{path}:{lineno}: invalid label list")
            rows[node] = labs
    if task is None:
        task = "multi" if any(len(v) > 1 for v in rows.values()) else "single"
    if task not in ("single", "multi"):
        raise ValueError(f"task must be 'single' or 'multi', got {task!r}")
    max_label = max((max(v) for v in rows.values()), default=-1)
    if num_classes is None:
        num_classes = max_label + 1
    elif max_label >= num_classes:
        raise GraphFormatError(f"{path}: label {max_label} >= num_classes {num_classes}")

    if task == "multi":
        y = np.zeros((count, num_classes), dtype=np.uint8)
        for n, labs in rows.items():
            y[n, labs] = 1
    else:
        y = np.full(count, -1, dtype=np.int64)
        for n, labs in rows.items():
            if len(labs) != 1:
                raise GraphFormatError(f"{path}: node {n} has several labels in a single-label task")
            y[n] = labs[0]

    sdir = Path(split_dir) if split_dir is not None else path.parent
    splits = [_read_split(sdir / f"{s}.txt", count) for s in ("train", "valid", "test")]
    names = ("train", "valid", "test")
    for i in range(3):
        for j in range(i + 1, 3):
            if np.intersect1d(splits[i], splits[j]).size:
                raise GraphFormatError(f"splits {names[i]} and {names[j]} overlap")
    ls = LabelSet(t, task, int(num_classes), y, *splits)
    for name, s in zip(names, splits):
        if s.size and not ls.has_label(s).all():
            missing = s[~ls.has_label(s)][0]
            raise GraphFormatError(f"{name} split contains unlabeled node {missing}")
    return ls


def save_labels(ls: LabelSet, directory: str | os.PathLike, fname: str = "labels.tsv") -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / fname, "w") as f:
        if ls.multilabel:
            for n in np.flatnonzero(ls.y.any(axis=1)):
                f.write(f"{n}\t{','.join(map(str, np.flatnonzero(ls.y[n])))}\n")
        else:
            for n in np.flatnonzero(ls.y >= 0):
                f.write(f"{n}\t{ls.y[n]}\n")
    for name in ("train", "valid", "test"):
        ids = getattr(ls, name)
        (root / f"{name}.txt").write_text("".join(f"{v}\n" for v in ids.tolist()))
