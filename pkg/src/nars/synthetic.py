"""Typed stochastic-block-model benchmark.

Papers carry noisy class-centred features. Only the ``cites`` relation is
homophilous; ``writes`` (author-paper) and ``has_field`` (paper-field)
attach papers to random authors and fields whose features are pure noise,
so merging every relation washes the class signal out.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import NarsConfig
from .hetgraph import FeatureMatrix, HeteroGraph, LabelSet, save_features, save_graph, save_labels


@dataclass
class SyntheticDataset:
    graph: HeteroGraph
    features: dict[int, FeatureMatrix]
    labels: LabelSet


def make_typed_sbm(
    n_paper: int = 1000,
    n_author: int = 800,
    n_field: int = 200,
    n_classes: int = 4,
    dim: int = 16,
    cites_in: float = 10.0,
    cites_out: float = 1.0,
    authors_per_paper: int = 6,
    fields_per_paper: int = 3,
    feature_noise: float = 1.2,
    context_noise: float = 4.0,
    seed: int = 0,
    split: tuple[float, float] = (0.5, 0.25),
) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, n_paper)

    # expected cites_in same-class and cites_out cross-class partners per paper
    same = y[:, None] == y[None, :]
    class_size = np.bincount(y, minlength=n_classes)[y][:, None]
    p_in = cites_in / np.maximum(class_size - 1, 1)
    p_out = cites_out / np.maximum(n_paper - class_size, 1)
    prob = np.where(same, p_in, p_out) / 2  # each pair is drawn in both orientations
    np.fill_diagonal(prob, 0.0)
    src, dst = np.nonzero(rng.random((n_paper, n_paper)) < prob)

    w_paper = np.repeat(np.arange(n_paper), authors_per_paper)
    w_author = rng.integers(0, n_author, len(w_paper))
    f_paper = np.repeat(np.arange(n_paper), fields_per_paper)
    f_field = rng.integers(0, n_field, len(f_paper))

    g = HeteroGraph.from_edges(
        [("paper", n_paper), ("author", n_author), ("field", n_field)],
        [
            ("cites", "paper", "paper", src, dst),
            ("writes", "author", "paper", w_author, w_paper),
            ("has_field", "paper", "field", f_paper, f_field),
        ],
    )

    centres = np.zeros((n_classes, dim))
    centres[np.arange(n_classes), np.arange(n_classes) % dim] = 1.0
    x_paper = centres[y] + feature_noise * rng.standard_normal((n_paper, dim))
    feats = {
        0: FeatureMatrix(0, x_paper.astype(np.float32)),
        1: FeatureMatrix(1, (context_noise * rng.standard_normal((n_author, dim))).astype(np.float32)),
        2: FeatureMatrix(2, (context_noise * rng.standard_normal((n_field, dim))).astype(np.float32)),
    }

    perm = rng.permutation(n_paper)
    n_tr = int(split[0] * n_paper)
    n_va = int(split[1] * n_paper)
    labels = LabelSet(0, "single", n_classes, y.astype(np.int64),
                      np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_va]),
                      np.sort(perm[n_tr + n_va:]))
    return SyntheticDataset(g, feats, labels)


def write_dataset(ds: SyntheticDataset, directory: str | os.PathLike) -> Path:
    """Write graph, per-type ``<type>.nfeat`` features and labels/splits."""
    root = Path(directory)
    save_graph(ds.graph, root)
    for t, fm in ds.features.items():
        save_features(fm, root / f"{ds.graph.node_types[t].name}.nfeat")
    save_labels(ds.labels, root)
    return root


INFORMATIVE = ["cites"]
MERGED = ["cites", "writes", "has_field"]


def bench_config(seed: int, subsets: list[list[str]], epochs: int = 60) -> NarsConfig:
    cfg = NarsConfig()
    cfg.data.target = "paper"
    cfg.sample.subsets = subsets
    cfg.model.hidden = 64
    cfg.model.num_hops = 2
    cfg.train.lr = 0.01
    cfg.train.epochs = epochs
    cfg.train.batch_size = 256
    cfg.train.seed = seed
    return cfg


def run_benchmark(seeds=range(5), epochs: int = 60, **sbm_kwargs) -> dict:
    """NARS over every valid subset against one merged all-relation subgraph (SIGN-style).

    One dataset is generated per seed; returns per-seed and mean test accuracy
    at the best validation epoch for both variants.
    """
    from .metagraph import valid_subsets
    from .train import Trainer, prepare_in_memory

    out = {"nars": [], "sign": [], "k": None}
    for seed in seeds:
        ds = make_typed_sbm(seed=seed, **sbm_kwargs)
        g = ds.graph
        variants = {"nars": [s.names(g) for s in valid_subsets(g, g.type_id("paper"))],
                    "sign": [MERGED]}
        out["k"] = len(variants["nars"])
        for name, subsets in variants.items():
            cfg = bench_config(seed, subsets, epochs)
            tr = Trainer(cfg, prepare_in_memory(cfg, g, ds.features), ds.labels)
            try:
                out[name].append(tr.fit().test_at_best["accuracy"])
            finally:
                tr.close()
    out["nars_mean"] = float(np.mean(out["nars"]))
    out["sign_mean"] = float(np.mean(out["sign"]))
    return out
