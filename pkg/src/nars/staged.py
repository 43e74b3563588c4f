"""Memory-bounded training over a rotating subset of subgraph tensors.

Only ``p`` of the ``K`` hop tensors are resident during a stage. The
classifier input is ``alpha * history + sum_j b[j] * H[S_j]``, and at each
stage boundary the stage variables are folded into the global
coefficients so that ``history == aggregate(all tensors, a)`` keeps
holding.
"""
from __future__ import annotations

import hashlib
import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .propagate import HopFeatureTensor

log = logging.getLogger(__name__)


class ResidencyError(RuntimeError):
    pass


class ResidencyAccountant:
    """Byte count of hop-feature matrices currently held, with a high-water mark."""

    def __init__(self):
        self._held: dict[str, int] = {}
        self._lock = threading.Lock()
        self.peak = 0

    def acquire(self, key: str, nbytes: int) -> None:
        with self._lock:
            self._held[key] = nbytes
            self.peak = max(self.peak, self.current)

    def release(self, key: str) -> None:
        with self._lock:
            self._held.pop(key, None)

    @property
    def current(self) -> int:
        return sum(self._held.values())

    def reset_peak(self) -> None:
        self.peak = self.current


class HopCache:
    """Resident subset of subgraph tensors, filled from a loader callback.

    The loader reads from disk or regenerates by propagation. With
    ``prefetch=True`` the next stage's tensors are produced on a worker
    thread while the current stage trains; the hand-off happens in
    :meth:`swap`.
    """

    def __init__(self, loader: Callable[[int], HopFeatureTensor],
                 accountant: ResidencyAccountant | None = None, prefetch: bool = False):
        self.loader = loader
        self.accountant = accountant or ResidencyAccountant()
        self.resident: dict[int, HopFeatureTensor] = {}
        self._pool = ThreadPoolExecutor(1) if prefetch else None
        self._pending: dict[int, Future] = {}

    def _load(self, i: int) -> HopFeatureTensor:
        t = self.loader(i)
        self.accountant.acquire(f"subgraph{i}", t.nbytes)
        return t

    def get(self, i: int) -> HopFeatureTensor:
        if i not in self.resident:
            raise ResidencyError(f"subgraph tensor {i} is not resident")
        return self.resident[i]

    def prefetch(self, ids: Iterable[int]) -> None:
        if self._pool is None:
            return
        for i in ids:
            if i not in self.resident and i not in self._pending:
                self._pending[i] = self._pool.submit(self._load, i)

    def swap(self, ids: Iterable[int]) -> None:
        """Make exactly ``ids`` resident, evicting everything else first."""
        ids = list(ids)
        for i in list(self.resident):
            if i not in ids:
                del self.resident[i]
                self.accountant.release(f"subgraph{i}")
        for i in ids:
            if i in self.resident:
                continue
            fut = self._pending.pop(i, None)
            self.resident[i] = fut.result() if fut is not None else self._load(i)
        for i, fut in list(self._pending.items()):
            fut.result()
            self.accountant.release(f"subgraph{i}")
            del self._pending[i]

    def stream(self, ids: Iterable[int]) -> Iterable[HopFeatureTensor]:
        """Yield tensors one at a time without keeping them resident."""
        for i in ids:
            if i in self.resident:
                yield self.resident[i]
                continue
            t = self._load(i)
            try:
                yield t
            finally:
                self.accountant.release(f"subgraph{i}")

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)


@dataclass
class StageState:
    t: int
    subset: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    history: np.ndarray
    epochs_per_stage: int

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.history).tobytes()).hexdigest()


def init_history(tensors: Iterable[HopFeatureTensor], a: np.ndarray,
                 accountant: ResidencyAccountant | None = None) -> np.ndarray:
    """``sum_i a[i] * H^i`` accumulated one tensor at a time, shape ``(L+1, N, D)``."""
    hist = None
    seen = set()
    for t in tensors:
        i = t.subgraph_id
        if hist is None:
            n, d = t.hops[0].shape
            hist = np.zeros((len(t.hops), n, d), dtype=a.dtype)
            if accountant is not None:
                accountant.acquire("history", hist.nbytes)
        for l, h in enumerate(t.hops):
            hist[l] += a[i, l] * h
        seen.add(i)
    missing = set(range(a.shape[0])) - seen
    if missing:
        raise ResidencyError(f"missing subgraph tensors {sorted(missing)} for history")
    return hist


def gather_rows(tensor: HopFeatureTensor, rows: np.ndarray, dtype) -> np.ndarray:
    return np.stack([h[rows] for h in tensor.hops]).astype(dtype, copy=False)


def stage_forward(state: StageState, cache: HopCache, rows: np.ndarray):
    """Approximate aggregate for ``rows``; returns it with the gathered stage tensors."""
    dtype = state.history.dtype
    xs = np.stack([gather_rows(cache.get(int(i)), rows, dtype) for i in state.subset]) \
        if len(state.subset) else np.zeros((0,) + state.history[:, rows].shape, dtype)
    out = state.alpha[0] * state.history[:, rows]
    for j in range(len(state.subset)):
        out = out + state.b[j][:, None, :] * xs[j]
    return out, xs


def stage_grads(state: StageState, rows: np.ndarray, xs: np.ndarray, d_agg: np.ndarray):
    """Gradients w.r.t. ``b`` and ``alpha`` from the gradient of the aggregate."""
    db = np.einsum("lbd,plbd->pld", d_agg, xs)
    dalpha = np.array([np.sum(d_agg * state.history[:, rows])], dtype=state.alpha.dtype)
    return db, dalpha


def fold_coefficients(a: np.ndarray, b: np.ndarray, alpha, subset) -> np.ndarray:
    """``b + alpha * a`` on the stage's subgraphs, ``alpha * a`` everywhere else."""
    alpha = np.asarray(alpha).reshape(())
    out = alpha * a
    for j, i in enumerate(np.asarray(subset, dtype=int)):
        out[i] = b[j] + alpha * a[i]
    return out.astype(a.dtype, copy=False)


def update_history(state: StageState, cache: HopCache) -> np.ndarray:
    """Full-graph ``alpha * history + sum_j b[j] * H[S_j]``, in place."""
    hist = state.history
    hist *= state.alpha[0]
    for j, i in enumerate(state.subset):
        for l, h in enumerate(cache.get(int(i)).hops):
            hist[l] += state.b[j, l] * h
    return hist


def draw_subset(k: int, p: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= p <= k:
        raise ValueError(f"stage size p={p} must lie in [1, K={k}]")
    return rng.choice(k, size=p, replace=False)


def new_stage(t: int, subset: np.ndarray, history: np.ndarray, epochs_per_stage: int) -> StageState:
    _, _, d = history.shape
    return StageState(
        t=t,
        subset=np.asarray(subset),
        b=np.zeros((len(subset), history.shape[0], d), dtype=history.dtype),
        alpha=np.ones(1, dtype=history.dtype),
        history=history,
        epochs_per_stage=epochs_per_stage,
    )


def advance_stage(state: StageState, a: np.ndarray, cache: HopCache, rng: np.random.Generator,
                  opt=None) -> tuple[StageState, np.ndarray]:
    """Close the current stage and open the next one.

    Folds ``b``/``alpha`` into ``a``, rolls the history forward, draws a new
    subset, swaps its tensors in and resets the stage variables together
    with their optimizer moments. Returns ``(new_state, new_a)``.
    """
    history = update_history(state, cache)
    a_new = fold_coefficients(a, state.b, state.alpha, state.subset)
    subset = draw_subset(a.shape[0], len(state.subset), rng)
    cache.swap(int(i) for i in subset)
    if opt is not None:
        opt.reset(["b", "alpha"])
    log.debug("stage %d -> %d, subset %s", state.t, state.t + 1, subset.tolist())
    return new_stage(state.t + 1, subset, history, state.epochs_per_stage), a_new
