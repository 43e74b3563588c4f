"""Preprocessing, the training loop (full or staged), evaluation and replicates."""
from __future__ import annotations

import csv
import functools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import NarsConfig
from .featurize import (
    featurize_neighbor_avg_all,
    featurize_transe,
    featurize_zero,
    load_embeddings,
    train_transe,
)
from .hetgraph import FeatureMatrix, HeteroGraph, LabelSet, load_features, load_graph, load_labels
from .metagraph import RelationSubset, choose_subsets, extract_subgraph
from .metrics import accuracy, micro_f1, ranking_metrics
from .model import (
    Adam,
    NarsModel,
    ShapeError,
    aggregate,
    coefficient_grad,
    init_coefficients,
    load_checkpoint,
    loss_from_logits,
    save_checkpoint,
)
from .propagate import (
    HopFeatureTensor,
    assemble_block_input,
    assemble_input,
    gen_neighbor_features,
    load_hops,
    save_hops,
)
from .staged import (
    HopCache,
    ResidencyAccountant,
    advance_stage,
    draw_subset,
    fold_coefficients,
    gather_rows,
    init_history,
    new_stage,
    stage_forward,
    stage_grads,
)

log = logging.getLogger(__name__)

Loader = Callable[[int], HopFeatureTensor]


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------- preprocessing


def input_features(cfg: NarsConfig, g: HeteroGraph) -> dict[int, FeatureMatrix]:
    """Load configured feature files and featurize every remaining node type."""
    root = Path(cfg.data.dataset_dir)
    feats = {}
    for tname, fname in cfg.data.features.items():
        t = g.type_id(tname)
        feats[t] = load_features(g, t, root / fname)
    missing = [t.id for t in g.node_types if t.id not in feats]
    if not missing:
        return feats

    strategy = cfg.data.featureless
    if strategy == "transe":
        if cfg.data.transe_dir:
            table = load_embeddings(cfg.data.transe_dir)
        else:
            table = train_transe(g, cfg.data.transe_dim, cfg.data.transe_epochs,
                                 cfg.data.transe_margin, cfg.data.transe_lr, seed=cfg.sample_seed)
        for t in missing:
            feats[t] = featurize_transe(table, g, t)
        return feats
    if strategy == "neighbor_avg":
        if feats:
            feats = featurize_neighbor_avg_all(g, feats)
        missing = [t.id for t in g.node_types if t.id not in feats]
        strategy = "zero"
    if strategy == "zero":
        dims = {fm.dim for fm in feats.values()}
        dim = cfg.data.feature_dim or (dims.pop() if len(dims) == 1 else None)
        if dim is None:
            raise ValueError("set data.feature_dim to zero-pad featureless node types")
        for t in missing:
            feats[t] = featurize_zero(g, t, dim)
        return feats
    raise ValueError(f"unknown featureless strategy {cfg.data.featureless!r}")


def build_input(cfg: NarsConfig, g: HeteroGraph, feats) -> tuple[np.ndarray, list | None]:
    dims = {fm.dim for fm in feats.values()}
    layout = cfg.data.layout
    if layout == "auto":
        layout = "stack" if len(dims) == 1 else "block"
    if layout == "stack":
        return assemble_input(g, feats), None
    if layout == "block":
        h0, cols = assemble_block_input(g, feats)
        return h0, [(c.start, c.stop) for c in cols]
    raise ValueError(f"unknown feature layout {cfg.data.layout!r}")


def pick_subsets(cfg: NarsConfig, g: HeteroGraph, target: int) -> list[RelationSubset]:
    if cfg.sample.subsets:
        return [RelationSubset.from_ids(g.relation_id(n) for n in names)
                for names in cfg.sample.subsets]
    # emptied relations would only yield duplicates of smaller subsets
    return choose_subsets(g, target, cfg.sample.k, cfg.sample_seed, cfg.sample.cap,
                          exclude=cfg.data.drop_relations)


def prepared_graph(cfg: NarsConfig) -> HeteroGraph:
    g = load_graph(cfg.data.dataset_dir)
    if cfg.data.drop_relations:
        g = g.with_relations_dropped(cfg.data.drop_relations)
    return g


def regenerating_loader(g, subsets, h0, num_hops, rows: slice | None = None,
                        symmetrize=True, threads=1) -> Loader:
    """Loader that recomputes a subgraph's hop features on every call."""

    def load(i: int) -> HopFeatureTensor:
        sub = extract_subgraph(g, subsets[i], symmetrize)
        return gen_neighbor_features(sub, h0, num_hops, subgraph_id=i, threads=threads,
                                     rows=rows)

    return load


@dataclass
class Artifacts:
    """Everything the trainer needs besides labels.

    ``loader(i)`` returns subgraph ``i``'s hop features restricted to the
    target type's rows, indexed by local target id.
    """

    k: int
    num_hops: int
    in_dim: int
    num_nodes: int
    target: int
    target_offset: int
    loader: Loader
    subsets: list[list[str]]
    blocks: list | None = None
    directory: Path | None = None


def prepare_in_memory(cfg: NarsConfig, g: HeteroGraph, feats: dict[int, FeatureMatrix]) -> Artifacts:
    target = g.type_id(cfg.data.target)
    h0, blocks = build_input(cfg, g, feats)
    subsets = pick_subsets(cfg, g, target)
    tensors = [
        gen_neighbor_features(extract_subgraph(g, s, cfg.data.symmetrize), h0,
                              cfg.model.num_hops, subgraph_id=i, threads=cfg.train.threads,
                              rows=g.type_slice(target))
        for i, s in enumerate(subsets)
    ]
    return Artifacts(len(subsets), cfg.model.num_hops, h0.shape[1], g.num_nodes, target,
                     int(g.offsets[target]), tensors.__getitem__,
                     [s.names(g) for s in subsets], blocks)


def preprocess(cfg: NarsConfig, out_dir: str | os.PathLike) -> Path:
    """Sample subsets, featurize, propagate and persist K hop tensors plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = prepared_graph(cfg)
    target = g.type_id(cfg.data.target)
    feats = input_features(cfg, g)
    h0, blocks = build_input(cfg, g, feats)
    subsets = pick_subsets(cfg, g, target)
    hop_dir = out / "hops"
    for i, s in enumerate(subsets):
        sub = extract_subgraph(g, s, cfg.data.symmetrize)
        t = gen_neighbor_features(sub, h0, cfg.model.num_hops, subgraph_id=i,
                                  threads=cfg.train.threads)
        save_hops(t, hop_dir)
        log.info("subgraph %d %s: %d edges", i, s.names(g), sub.num_edges)
    (out / "subsets.txt").write_text("".join(" ".join(s.names(g)) + "\n" for s in subsets))
    meta = {
        "k": len(subsets), "num_hops": cfg.model.num_hops, "in_dim": int(h0.shape[1]),
        "num_nodes": g.num_nodes, "target": target, "target_offset": int(g.offsets[target]),
        "target_count": g.node_types[target].count, "subsets": [s.names(g) for s in subsets], "blocks": blocks, "config": cfg.to_dict(),
    }
    (out / "preprocess.json").write_text(json.dumps(meta, indent=2))
    return out


def open_artifacts(directory: str | os.PathLike) -> Artifacts:
    root = Path(directory)
    path = root / "preprocess.json"
    if not path.exists():
        raise FileNotFoundError(f"{root} has no preprocess.json; run preprocess first")
    meta = json.loads(path.read_text())
    off = meta["target_offset"]
    loader = functools.partial(load_hops, root / "hops", num_hops=meta["num_hops"],
                               rows=slice(off, off + meta["target_count"]))
    return Artifacts(meta["k"], meta["num_hops"], meta["in_dim"], meta["num_nodes"], meta["target"],
                     meta["target_offset"], lambda i: loader(i), meta["subsets"],
                     meta["blocks"], root)


def labels_for(cfg: NarsConfig, g_or_target) -> LabelSet:
    g = g_or_target if isinstance(g_or_target, HeteroGraph) else prepared_graph(cfg)
    return load_labels(g, Path(cfg.data.dataset_dir) / cfg.data.labels, cfg.data.target,
                       cfg.data.num_classes, cfg.data.task)


# ---------------------------------------------------------------- metrics


def compute_metrics(scores: np.ndarray, labels: LabelSet, nodes: np.ndarray,
                    ndcg_k: int | None = None) -> dict[str, float]:
    truth = labels.label_sets(nodes)
    if labels.multilabel:
        pred_sets = [set(np.flatnonzero(s >= 0.5).tolist()) for s in scores]
        out = {"micro_f1": micro_f1(pred_sets, truth)}
    else:
        pred = scores.argmax(axis=1)
        out = {"accuracy": accuracy(pred, labels.y[nodes]),
               "micro_f1": micro_f1([{int(p)} for p in pred], truth)}
    rank = ranking_metrics(scores, truth, ndcg_k)
    out["ndcg"], out["mrr"] = rank["ndcg"], rank["mrr"]
    return out


# ---------------------------------------------------------------- training


@dataclass
class FitResult:
    best_epoch: int
    best_valid: dict[str, float]
    test_at_best: dict[str, float]
    train_losses: list[float]
    rows: list[tuple[int, str, str, float]]
    checkpoint: Path | None
    selection_log: list[str] = field(default_factory=list)


def _dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


class Trainer:
    """Algorithm-1 training, or its staged memory-bounded variant when ``stage.enabled``.

    All randomness comes from ``train.seed``: one stream initialises the
    parameters, one drives shuffling and dropout, one draws stage subsets.
    """

    def __init__(self, cfg: NarsConfig, art: Artifacts, labels: LabelSet,
                 out_dir: str | os.PathLike | None = None,
                 accountant: ResidencyAccountant | None = None):
        self.cfg = cfg
        self.art = art
        self.labels = labels
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = _dtype(cfg.model.dtype)
        self.staged = cfg.stage.enabled
        self.accountant = accountant or ResidencyAccountant()
        self.cache = HopCache(art.loader, self.accountant, prefetch=cfg.stage.prefetch)
        self.epoch = 0
        self.train_losses: list[float] = []
        self.rows: list[tuple[int, str, str, float]] = []
        self.selection_log: list[str] = []
        self.best: tuple[int, float] | None = None
        self.best_valid: dict = {}
        self.test_at_best: dict = {}
        self._best_snapshot = None
        self._setup()

    def _setup(self):
        init_ss, train_ss, stage_ss = np.random.SeedSequence(self.cfg.train.seed).spawn(3)
        rng_init = np.random.default_rng(init_ss)
        self.rng = np.random.default_rng(train_ss)
        self.rng_stage = np.random.default_rng(stage_ss)
        m = self.cfg.model
        self.model = NarsModel(self.art.in_dim, m.hidden, self.labels.num_classes,
                               self.art.num_hops, m.proj_dim, m.dropout,
                               self.labels.multilabel, self.dtype).init(rng_init)
        self.a = init_coefficients(self.art.k, self.art.num_hops, self.art.in_dim, rng_init,
                                   self.dtype)
        self.opt = Adam(lr=self.cfg.train.lr)
        self.state = None
        if self.staged:
            hist = init_history(self.cache.stream(range(self.art.k)), self.a, self.accountant)
            subset = draw_subset(self.art.k, self.cfg.stage.p, self.rng_stage)
            self.cache.swap(int(i) for i in subset)
            self.state = new_stage(1, subset, hist, self.cfg.stage.epochs_per_stage)
        else:
            self.cache.swap(range(self.art.k))

    # -- forward helpers

    @staticmethod
    def _rows(nodes):
        return np.asarray(nodes, dtype=np.int64)

    def _full_inputs(self, rows):
        return np.stack([gather_rows(self.cache.get(i), rows, self.dtype)
                         for i in range(self.art.k)])

    def _targets(self, nodes):
        return self.labels.y[nodes]

    def _logits_eval(self, nodes, batch=8192):
        out = []
        for s in range(0, len(nodes), batch):
            rows = self._rows(nodes[s:s + batch])
            if self.staged:
                agg, _ = stage_forward(self.state, self.cache, rows)
            else:
                agg = aggregate(self._full_inputs(rows), self.a)
            logits, _ = self.model.forward(agg, train=False)
            out.append(logits)
        return np.concatenate(out)

    def coefficients(self) -> np.ndarray:
        """Coefficients reproducing the current aggregate over all K tensors."""
        if self.staged:
            st = self.state
            return fold_coefficients(self.a, st.b, st.alpha, st.subset)
        return self.a.copy()

    # -- training

    def train_epoch(self) -> float:
        nodes = self.rng.permutation(self.labels.train)
        bs = self.cfg.train.batch_size
        total = 0.0
        for s in range(0, len(nodes), bs):
            batch = nodes[s:s + bs]
            rows = self._rows(batch)
            if self.staged:
                agg, xs = stage_forward(self.state, self.cache, rows)
            else:
                xs = self._full_inputs(rows)
                agg = aggregate(xs, self.a)
            logits, mc = self.model.forward(agg, train=True, rng=self.rng)
            loss, dlogits = loss_from_logits(logits, self._targets(batch), self.model.multilabel)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {self.epoch + 1}",
                                       self._save_last_good())
            grads, dxs = self.model.backward(mc, dlogits)
            params = dict(self.model.params)
            if self.staged:
                grads["b"], grads["alpha"] = stage_grads(self.state, rows, xs, dxs)
                params["b"], params["alpha"] = self.state.b, self.state.alpha
                if not self.cfg.stage.train_alpha:
                    del grads["alpha"], params["alpha"]
            else:
                grads["a"] = coefficient_grad(xs, dxs)
                params["a"] = self.a
            self.opt.step(params, grads)
            total += loss * len(batch)
        self.epoch += 1
        return total / len(nodes)

    def evaluate_split(self, split: str) -> dict[str, float]:
        if split not in ("train", "valid", "test"):
            raise KeyError(f"unknown split {split!r}")
        nodes = getattr(self.labels, split)
        if len(nodes) == 0:
            raise ValueError(f"split {split!r} is empty")
        scores = self.model.scores(self._logits_eval(nodes))
        return compute_metrics(scores, self.labels, nodes, self.cfg.train.ndcg_k)

    @property
    def select_metric(self) -> str:
        if self.cfg.train.select_metric:
            return self.cfg.train.select_metric
        return "ndcg" if self.labels.multilabel else "accuracy"

    def fit(self, epochs: int | None = None) -> FitResult:
        """Train until ``epochs`` total epochs have run, tracking the best validation epoch."""
        epochs = self.cfg.train.epochs if epochs is None else epochs
        T = self.cfg.stage.epochs_per_stage
        while self.epoch < epochs:
            loss = self.train_epoch()
            e = self.epoch
            self.train_losses.append(loss)
            self.rows.append((e, "train", "loss", loss))
            valid = self.evaluate_split("valid") if len(self.labels.valid) else {}
            for k, v in valid.items():
                self.rows.append((e, "valid", k, v))
            improved = False
            if valid:
                score = valid[self.select_metric]
                improved = self.best is None or score > self.best[1]
                self.selection_log.append(
                    f"epoch {e} valid {self.select_metric}={score:.6f} "
                    f"{'selected' if improved else 'kept'} best"
                )
                if improved:
                    self.best = (e, score)
                    self.best_valid = valid
                    self._best_snapshot = ({k: v.copy() for k, v in self.model.params.items()},
                                           self.coefficients())
            if len(self.labels.test):
                test = self.evaluate_split("test")
                for k, v in test.items():
                    self.rows.append((e, "test", k, v))
                if improved:
                    self.test_at_best = test
            if self.staged and e % T == 0 and e < self.cfg.train.epochs:
                self.state, self.a = advance_stage(self.state, self.a, self.cache,
                                                   self.rng_stage, self.opt)
        ckpt = self._write_outputs()
        return FitResult(self.best[0] if self.best else self.epoch, self.best_valid,
                         self.test_at_best, list(self.train_losses), list(self.rows), ckpt,
                         list(self.selection_log))

    # -- persistence

    def _ckpt_meta(self) -> dict:
        return {"config": self.cfg.to_dict(), "artifacts": str(self.art.directory or ""),
                "subsets": self.art.subsets}

    def _write_outputs(self) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "split", "metric", "value"])
            w.writerows((e, s, m, repr(float(v))) for e, s, m, v in self.rows)
        (self.out_dir / "selection.log").write_text("\n".join(self.selection_log) + "\n")
        if self._best_snapshot is None:
            return None
        params, a = self._best_snapshot
        model = NarsModel(**{**self._model_spec(), "params": params})
        path = self.out_dir / "best.ckpt"
        save_checkpoint(path, model, {"a": a}, meta={**self._ckpt_meta(), "epoch": self.best[0]})
        return path

    def _model_spec(self):
        m = self.model
        return dict(in_dim=m.in_dim, hidden=m.hidden, num_classes=m.num_classes,
                    num_hops=m.num_hops, proj_dim=m.proj_dim, dropout=m.dropout,
                    multilabel=m.multilabel, dtype=m.dtype)

    def _save_last_good(self) -> Path | None:
        if self.out_dir is None or self._best_snapshot is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        params, a = self._best_snapshot
        path = self.out_dir / "last_good.ckpt"
        save_checkpoint(path, NarsModel(**{**self._model_spec(), "params": params}), {"a": a},
                        meta=self._ckpt_meta())
        return path

    def save_state(self, path: str | os.PathLike) -> None:
        """Full resumable state; for staged runs call it at a stage boundary."""
        tensors = {"a": self.a}
        meta = {**self._ckpt_meta(), "epoch": self.epoch, "train_losses": self.train_losses,
                "rng_stage": self.rng_stage.bit_generator.state,
                "best": list(self.best) if self.best else None}
        if self.staged:
            st = self.state
            tensors.update(b=st.b, alpha=st.alpha, subset=np.asarray(st.subset),
                           history=st.history)
            meta.update(stage_t=st.t, history_sha256=st.checksum())
        save_checkpoint(path, self.model, tensors, self.opt, self.rng, meta)

    def load_state(self, path: str | os.PathLike) -> None:
        ck = load_checkpoint(path)
        if ck.tensors["a"].shape != self.a.shape:
            raise ShapeError(f"checkpoint coefficients {ck.tensors['a'].shape} "
                             f"do not match artifacts {self.a.shape}")
        self.model, self.opt, self.rng = ck.model, ck.opt, ck.rng
        self.a = ck.tensors["a"]
        self.rng_stage.bit_generator.state = ck.meta["rng_stage"]
        self.epoch = ck.meta["epoch"]
        self.train_losses = list(ck.meta["train_losses"])
        self.best = tuple(ck.meta["best"]) if ck.meta.get("best") else None
        if self.staged:
            hist = ck.tensors["history"]
            st = new_stage(ck.meta["stage_t"], ck.tensors["subset"], hist,
                           self.cfg.stage.epochs_per_stage)
            if st.checksum() != ck.meta["history_sha256"]:
                raise ValueError("history checksum mismatch in checkpoint")
            st.b, st.alpha = ck.tensors["b"], ck.tensors["alpha"]
            self.cache.swap(int(i) for i in st.subset)
            self.state = st

    def close(self):
        self.cache.close()


def fit(cfg: NarsConfig, art: Artifacts, labels: LabelSet,
        out_dir: str | os.PathLike | None = None) -> FitResult:
    tr = Trainer(cfg, art, labels, out_dir)
    try:
        return tr.fit()
    finally:
        tr.close()


def evaluate(checkpoint: str | os.PathLike, split: str, art: Artifacts | None = None,
             labels: LabelSet | None = None, batch: int = 8192) -> dict[str, float]:
    """Eval-mode metrics from a saved checkpoint.

    Subgraph tensors are streamed one at a time and only the split's rows
    are kept, so memory stays proportional to the split size.
    """
    ck = load_checkpoint(checkpoint)
    cfg = NarsConfig.from_dict(ck.meta["config"])
    if art is None:
        art = open_artifacts(ck.meta["artifacts"])
    if labels is None:
        labels = labels_for(cfg, None)
    a = ck.tensors["a"]
    if a.shape != (art.k, art.num_hops + 1, art.in_dim):
        raise ShapeError(f"checkpoint coefficients {a.shape} do not match artifacts "
                         f"({art.k}, {art.num_hops + 1}, {art.in_dim})")
    if split not in ("train", "valid", "test"):
        raise KeyError(f"unknown split {split!r}")
    nodes = getattr(labels, split)
    if len(nodes) == 0:
        raise ValueError(f"split {split!r} is empty")
    rows = np.asarray(nodes, dtype=np.int64)
    dtype = ck.model.dtype
    x = np.empty((art.k, art.num_hops + 1, len(rows), art.in_dim), dtype=dtype)
    for i in range(art.k):
        x[i] = gather_rows(art.loader(i), rows, dtype)
    logits = np.concatenate([
        ck.model.forward(aggregate(x[:, :, s:s + batch], a), train=False)[0]
        for s in range(0, len(rows), batch)
    ])
    return compute_metrics(ck.model.scores(logits), labels, nodes, cfg.train.ndcg_k)


def run_replicates(cfg: NarsConfig, art: Artifacts, labels: LabelSet, seeds,
                   out_dir: str | os.PathLike | None = None) -> dict:
    """Repeat ``fit`` per seed; report mean and std of test metrics at the best epoch."""
    results = []
    for seed in seeds:
        c = NarsConfig.from_dict(cfg.to_dict())
        c.train.seed = seed
        sub = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        results.append(fit(c, art, labels, sub))
    summary = {}
    for key in results[0].test_at_best:
        vals = np.array([r.test_at_best[key] for r in results])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return {"seeds": list(seeds), "results": results, "summary": summary}
