"""Learned 1-D convolution over subgraph hop features feeding a SIGN-style MLP.

Everything is plain numpy with hand-written backward passes, so the model
runs in float32 for speed or float64 for gradient checks and lockstep
comparisons.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def stack_hops(hops: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """K lists of L+1 ``(B, D)`` arrays -> one ``(K, L+1, B, D)`` array."""
    try:
        arr = np.asarray([np.stack(list(h)) for h in hops])
    except ValueError as e:
        raise ShapeError(f"hop tensors disagree in shape: {e}") from None
    if arr.ndim != 4:
        raise ShapeError(f"expected K x (L+1) x B x D hop features, got shape {arr.shape}")
    return arr


def aggregate(hops, a: np.ndarray) -> np.ndarray:
    """Per-hop weighted sum over subgraphs: ``out[l] = sum_i a[i, l] * hops[i][l]``.

    Returns an ``(L+1, B, D)`` array. Terms are summed in sorted order per
    element, so permuting subgraphs together with their coefficient slices
    leaves the result bitwise unchanged.
    """
    x = hops if isinstance(hops, np.ndarray) and hops.ndim == 4 else stack_hops(hops)
    if a.shape != (x.shape[0], x.shape[1], x.shape[3]):
        raise ShapeError(f"coefficients {a.shape} do not match hop features {x.shape}")
    if x.shape[0] == 0:
        return np.zeros(x.shape[1:], dtype=np.result_type(x, a))
    terms = a[:, :, None, :] * x
    if x.shape[0] > 1:
        terms = np.sort(terms, axis=0)
    out = terms[0].copy()
    for k in range(1, terms.shape[0]):
        out += terms[k]
    return out


def coefficient_grad(hops: np.ndarray, d_agg: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. ``a`` given its gradient w.r.t. the aggregate."""
    return np.einsum("lbd,klbd->kld", d_agg, hops)


def init_coefficients(k: int, num_hops: int, dim: int, rng: np.random.Generator, dtype=np.float32):
    """Uniform(0, 1) draws scaled by 1/K, so the initial aggregate is an average."""
    if k == 0:
        return np.zeros((0, num_hops + 1, dim), dtype=dtype)
    return (rng.random((k, num_hops + 1, dim)) / k).astype(dtype)


# ---------------------------------------------------------------- MLP


def _prelu(x, w):
    return np.where(x > 0, x, w * x)


@dataclass
class NarsModel:
    in_dim: int
    hidden: int
    num_classes: int
    num_hops: int
    proj_dim: int | None = None
    dropout: float = 0.5
    multilabel: bool = False
    dtype: type = np.float32
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.num_hops < 0:
            raise ValueError("number of hops must be non-negative")

    @property
    def width(self) -> int:
        return self.proj_dim if self.proj_dim else self.in_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, d = self.hidden, self.width
        s: dict[str, tuple[int, ...]] = {}
        if self.proj_dim:
            s["proj.W"] = (self.in_dim, self.proj_dim)
        for l in range(self.num_hops + 1):
            s[f"theta{l}.W"] = (d, h)
            s[f"theta{l}.b"] = (h,)
            s[f"theta{l}.prelu"] = (1,)
        s["omega.W"] = ((self.num_hops + 1) * h, h)
        s["omega.b"] = (h,)
        s["omega.prelu"] = (1,)
        s["head.W"] = (h, self.num_classes)
        s["head.b"] = (self.num_classes,)
        return s

    def init(self, rng: np.random.Generator) -> "NarsModel":
        """Fan-in uniform weights and biases, PReLU slopes at 0.25."""
        fan_in = {}
        for name, shape in self.shapes().items():
            if name.endswith(".W"):
                fan_in[name.rsplit(".", 1)[0]] = shape[0]
        for name, shape in self.shapes().items():
            layer, kind = name.rsplit(".", 1)
            if kind == "prelu":
                self.params[name] = np.full(shape, 0.25, dtype=self.dtype)
            else:
                bound = 1.0 / np.sqrt(fan_in[layer])
                self.params[name] = rng.uniform(-bound, bound, shape).astype(self.dtype)
        return self

    def check_shapes(self) -> None:
        for name, shape in self.shapes().items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, found {self.params[name].shape}")

    def forward(self, xs, train: bool = False, rng: np.random.Generator | None = None):
        """Logits for aggregated hop inputs ``xs`` of shape ``(L+1, B, D_in)``."""
        p = self.params
        xs = [np.asarray(x, dtype=self.dtype) for x in xs]
        if len(xs) != self.num_hops + 1:
            raise ShapeError(f"expected {self.num_hops + 1} hop inputs, got {len(xs)}")
        drop = self.dropout if train else 0.0
        if drop and rng is None:
            raise ValueError("training-mode dropout needs an rng")
        cache: dict = {"xs": xs}
        us = [x @ p["proj.W"] for x in xs] if self.proj_dim else xs
        ss = [u @ p[f"theta{l}.W"] + p[f"theta{l}.b"] for l, u in enumerate(us)]
        acts = [_prelu(s, p[f"theta{l}.prelu"]) for l, s in enumerate(ss)]
        cat = np.concatenate(acts, axis=1)
        m1 = self._mask(rng, cat.shape, drop)
        cat_d = cat * m1 if m1 is not None else cat
        o = cat_d @ p["omega.W"] + p["omega.b"]
        oa = _prelu(o, p["omega.prelu"])
        m2 = self._mask(rng, oa.shape, drop)
        oa_d = oa * m2 if m2 is not None else oa
        logits = oa_d @ p["head.W"] + p["head.b"]
        cache.update(us=us, ss=ss, cat=cat, m1=m1, cat_d=cat_d, o=o, m2=m2, oa_d=oa_d)
        if not np.all(np.isfinite(logits)):
            for name, val in [("input projection", us), ("hop transforms", ss),
                              ("combiner", [o]), ("classifier head", [logits])]:
                if not all(np.all(np.isfinite(v)) for v in val):
                    raise NonFiniteError(f"non-finite activation in {name}")
        return logits, cache

    def _mask(self, rng, shape, drop):
        if not drop:
            return None
        keep = 1.0 - drop
        return (rng.random(shape) < keep).astype(self.dtype) / self.dtype(keep)

    def backward(self, cache, dlogits):
        """Parameter gradients and gradients w.r.t. the hop inputs."""
        p = self.params
        g: dict[str, np.ndarray] = {}
        g["head.W"] = cache["oa_d"].T @ dlogits
        g["head.b"] = dlogits.sum(0)
        d_oa = dlogits @ p["head.W"].T
        if cache["m2"] is not None:
            d_oa = d_oa * cache["m2"]
        o = cache["o"]
        g["omega.prelu"] = np.array([np.sum(d_oa * np.where(o > 0, 0, o))], dtype=self.dtype)
        d_o = d_oa * np.where(o > 0, 1, p["omega.prelu"])
        g["omega.W"] = cache["cat_d"].T @ d_o
        g["omega.b"] = d_o.sum(0)
        d_cat = d_o @ p["omega.W"].T
        if cache["m1"] is not None:
            d_cat = d_cat * cache["m1"]
        h = self.hidden
        dxs = []
        if self.proj_dim:
            g["proj.W"] = np.zeros_like(p["proj.W"])
        for l in range(self.num_hops + 1):
            s = cache["ss"][l]
            d_act = d_cat[:, l * h:(l + 1) * h]
            g[f"theta{l}.prelu"] = np.array([np.sum(d_act * np.where(s > 0, 0, s))], dtype=self.dtype)
            d_s = d_act * np.where(s > 0, 1, p[f"theta{l}.prelu"])
            g[f"theta{l}.W"] = cache["us"][l].T @ d_s
            g[f"theta{l}.b"] = d_s.sum(0)
            d_u = d_s @ p[f"theta{l}.W"].T
            if self.proj_dim:
                g["proj.W"] += cache["xs"][l].T @ d_u
                dxs.append(d_u @ p["proj.W"].T)
            else:
                dxs.append(d_u)
        return g, np.stack(dxs)

    def scores(self, logits):
        if self.multilabel:
            return 1.0 / (1.0 + np.exp(-logits))
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def loss_from_logits(logits, labels, multilabel: bool):
    """Mean loss and its gradient w.r.t. the logits."""
    b = logits.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if multilabel:
        y = labels.astype(logits.dtype)
        # softplus(z) - y*z, stable form
        loss = np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
        sig = 1.0 / (1.0 + np.exp(-logits))
        return float(loss), (sig - y) / y.size
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label outside [0, num_classes)")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logz - z[np.arange(b), labels])
    prob = np.exp(z - logz[:, None])
    prob[np.arange(b), labels] -= 1
    return float(loss), prob / b


def loss_and_grads(model: NarsModel, a, hops, labels, train=False, rng=None):
    """Loss and gradients for every model parameter plus the coefficients ``a``.

    ``hops`` is a ``(K, L+1, B, D)`` array (or nested sequences of it).
    """
    x = hops if isinstance(hops, np.ndarray) and hops.ndim == 4 else stack_hops(hops)
    if x.shape[2] == 0:
        raise ValueError("empty batch")
    agg = aggregate(x, a)
    logits, cache = model.forward(agg, train=train, rng=rng)
    loss, dlogits = loss_from_logits(logits, labels, model.multilabel)
    grads, dxs = model.backward(cache, dlogits)
    grads["a"] = coefficient_grad(x, dxs)
    return loss, grads


def param_count(model: NarsModel, a: np.ndarray | None) -> int:
    n = sum(int(np.prod(s)) for s in model.shapes().values())
    return n + (int(a.size) if a is not None else 0)


# ---------------------------------------------------------------- Adam


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place bias-corrected update of every parameter named in ``grads``."""
        for name, grad in grads.items():
            param = params[name]
            if grad.shape != param.shape:
                raise ShapeError(f"{name}: gradient {grad.shape} vs parameter {param.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            param -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(param.dtype)

    def reset(self, names) -> None:
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)
            self.t.pop(n, None)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(
    path: str | os.PathLike,
    model: NarsModel,
    tensors: dict[str, np.ndarray],
    opt: Adam | None = None,
    rng: np.random.Generator | None = None,
    meta: dict | None = None,
) -> None:
    """Write parameters, extra tensors (``a``, ``b``, ...), Adam state and RNG state."""
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"tensor/{k}": v for k, v in tensors.items()})
    header = {
        "version": CHECKPOINT_VERSION,
        "model": {
            "in_dim": model.in_dim, "hidden": model.hidden, "num_classes": model.num_classes,
            "num_hops": model.num_hops, "proj_dim": model.proj_dim, "dropout": model.dropout,
            "multilabel": model.multilabel, "dtype": np.dtype(model.dtype).name,
        },
        "meta": meta or {},
    }
    if opt is not None:
        header["adam"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                          "eps": opt.eps, "t": opt.t}
        arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    if rng is not None:
        header["rng"] = rng.bit_generator.state
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


@dataclass
class Checkpoint:
    model: NarsModel
    tensors: dict[str, np.ndarray]
    opt: Adam | None
    rng: np.random.Generator | None
    meta: dict


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        spec = dict(header["model"])
        spec["dtype"] = np.dtype(spec["dtype"]).type
        model = NarsModel(**spec)
        groups: dict[str, dict[str, np.ndarray]] = {}
        for key in z.files:
            if key == "__header__":
                continue
            grp, name = key.split("/", 1)
            groups.setdefault(grp, {})[name] = z[key]
    model.params = groups.get("param", {})
    model.check_shapes()
    opt = None
    if "adam" in header:
        h = header["adam"]
        opt = Adam(h["lr"], h["beta1"], h["beta2"], h["eps"], groups.get("adam_m", {}),
                   groups.get("adam_v", {}), {k: int(v) for k, v in h["t"].items()})
    rng = None
    if "rng" in header:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    return Checkpoint(model, groups.get("tensor", {}), opt, rng, header["meta"])
