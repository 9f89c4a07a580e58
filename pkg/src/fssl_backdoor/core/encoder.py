"""Small NHWC encoders with hand-written backward passes.

The engine is deliberately narrow: a fixed menu of layer kinds (conv, dense,
batchnorm, relu, pool, flatten) evaluated in sequence.  Parameters are read
from a flat :class:`ParameterVector`, so aggregation rules never need to know
about layers.

Batch norm has two regimes.  In ``train`` mode it normalises with the batch
statistics and reports updated running statistics on the tape; in ``eval``
mode (and whenever the state has ``bn_frozen`` set) it uses the stored
running statistics and leaves them alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .params import BN_AFFINE, BN_STAT, WEIGHT, Layout, ParameterVector, digest

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LAYER_KINDS = ("conv", "dense", "batchnorm", "relu", "pool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    options: tuple[tuple[str, Any], ...] = ()

    def get(self, key: str, default=None):
        return dict(self.options).get(key, default)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **dict(self.options)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, tuple(sorted(d.items())))


def conv(out_channels: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> LayerSpec:
    return LayerSpec("conv", (("kernel", kernel), ("out_channels", out_channels), ("padding", padding), ("stride", stride)))


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", (("units", units),))


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def pool(size: int = 2) -> LayerSpec:
    return LayerSpec("pool", (("size", size),))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass(frozen=True)
class EncoderSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    embedding_dim: int
    float_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.float_width not in (32, 64):
            raise ShapeError("float_width must be 32 or 64")
        if self.embedding_dim < 1:
            raise ShapeError("embedding_dim must be positive")
        shapes = self.activation_shapes()
        if shapes[-1] != (self.embedding_dim,):
            raise ShapeError(f"encoder output shape {shapes[-1]} != ({self.embedding_dim},)")

    @property
    def dtype(self):
        return np.float32 if self.float_width == 32 else np.float64

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shape after each layer (index 0 is the input)."""
        shapes = [self.input_shape]
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k == "conv":
                if len(cur) != 3:
                    raise ShapeError(f"layer {i}: conv needs HWC input, got {cur}")
                ks, st, pd = layer.get("kernel"), layer.get("stride"), layer.get("padding")
                h = (cur[0] + 2 * pd - ks) // st + 1
                w = (cur[1] + 2 * pd - ks) // st + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {i}: conv output would be empty")
                cur = (h, w, layer.get("out_channels"))
            elif k == "dense":
                if len(cur) != 1:
                    raise ShapeError(f"layer {i}: dense needs flat input, got {cur}")
                cur = (layer.get("units"),)
            elif k == "pool":
                s = layer.get("size")
                if len(cur) != 3 or cur[0] % s or cur[1] % s:
                    raise ShapeError(f"layer {i}: pool size {s} does not tile {cur}")
                cur = (cur[0] // s, cur[1] // s, cur[2])
            elif k == "flatten":
                cur = (int(np.prod(cur)),)
            elif k in ("batchnorm", "relu"):
                pass
            else:
                raise ShapeError(f"layer {i}: unknown kind {k!r}")
            shapes.append(cur)
        return shapes

    def layout(self) -> Layout:
        return _layout_for(self)

    def _build_layout(self) -> Layout:
        entries = []
        shapes = self.activation_shapes()
        for i, layer in enumerate(self.layers):
            cin = shapes[i]
            if layer.kind == "conv":
                ks = layer.get("kernel")
                cout = layer.get("out_channels")
                entries.append((f"{i}.conv.weight", (ks, ks, cin[-1], cout), WEIGHT))
                entries.append((f"{i}.conv.bias", (cout,), WEIGHT))
            elif layer.kind == "dense":
                entries.append((f"{i}.dense.weight", (cin[0], layer.get("units")), WEIGHT))
                entries.append((f"{i}.dense.bias", (layer.get("units"),), WEIGHT))
            elif layer.kind == "batchnorm":
                c = cin[-1]
                entries.append((f"{i}.bn.gamma", (c,), BN_AFFINE))
                entries.append((f"{i}.bn.beta", (c,), BN_AFFINE))
                entries.append((f"{i}.bn.running_mean", (c,), BN_STAT))
                entries.append((f"{i}.bn.running_var", (c,), BN_STAT))
        return Layout.from_shapes(entries)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "embedding_dim": self.embedding_dim,
            "float_width": self.float_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(
            tuple(d["input_shape"]),
            tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            int(d["embedding_dim"]),
            int(d.get("float_width", 64)),
        )

    def hash(self) -> bytes:
        return digest(json.dumps(self.to_dict(), sort_keys=True))


@lru_cache(maxsize=64)
def _layout_for(spec: EncoderSpec) -> Layout:
    return spec._build_layout()


def default_spec(channels: int = 1, size: int = 16, embedding_dim: int = 32, width: int = 8,
                 float_width: int = 64) -> EncoderSpec:
    """Two stride-2 convs with batch norm, then one dense projection."""
    layers = (
        conv(width), batchnorm(), relu(),
        conv(2 * width), batchnorm(), relu(),
        flatten(), dense(embedding_dim),
    )
    return EncoderSpec((size, size, channels), layers, embedding_dim, float_width)


def identity_spec(dim: int) -> EncoderSpec:
    return EncoderSpec((dim,), (dense(dim),), dim)


@dataclass
class EncoderState:
    spec: EncoderSpec
    params: ParameterVector
    bn_frozen: bool = False

    def __post_init__(self):
        if self.params.layout != self.spec.layout():
            raise ShapeError("parameter layout does not match the encoder spec")

    def with_params(self, params: ParameterVector) -> "EncoderState":
        return replace(self, params=params)

    def frozen(self, flag: bool = True) -> "EncoderState":
        return replace(self, bn_frozen=flag)

    def copy(self) -> "EncoderState":
        return replace(self, params=self.params.copy())


def init_params(spec: EncoderSpec, seed) -> ParameterVector:
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    pv = ParameterVector.zeros(layout, dtype=spec.dtype)
    for seg in layout:
        name = seg.name
        if name.endswith("conv.weight"):
            ks, _, cin, _ = seg.shape
            pv.view(name)[...] = rng.normal(0.0, np.sqrt(2.0 / (ks * ks * cin)), seg.shape)
        elif name.endswith("dense.weight"):
            pv.view(name)[...] = rng.normal(0.0, np.sqrt(1.0 / seg.shape[0]), seg.shape)
        elif name.endswith(("bn.gamma", "bn.running_var")):
            pv.view(name)[...] = 1.0
    return pv


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Tape:
    """Everything the backward pass needs, plus updated BN running stats."""

    spec: EncoderSpec
    values: np.ndarray
    layout: Layout
    caches: list = field(default_factory=list)
    running: dict = field(default_factory=dict)
    train: bool = False

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        return _backward(self, d_out)

    def apply_running_stats(self, params: ParameterVector) -> ParameterVector:
        """Copy of ``params`` with the running statistics this pass produced."""
        if not self.running:
            return params
        out = params.copy()
        for name, val in self.running.items():
            out.view(name)[...] = val
        return out


def _seg(layout: Layout, values: np.ndarray, name: str) -> np.ndarray:
    s = layout[name]
    return values[s.offset : s.stop].reshape(s.shape)


def _im2col(xp, ks, st, ho, wo):
    cols = [
        xp[:, i : i + st * (ho - 1) + 1 : st, j : j + st * (wo - 1) + 1 : st, :]
        for i in range(ks)
        for j in range(ks)
    ]
    return np.concatenate(cols, axis=-1)


def run(spec: EncoderSpec, params: ParameterVector, batch: np.ndarray, *, train: bool = False) -> tuple[np.ndarray, Tape]:
    """Evaluate the encoder and return ``(embeddings, tape)``."""
    batch = np.asarray(batch)
    if batch.ndim != len(spec.input_shape) + 1 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {spec.input_shape}")
    if batch.shape[0] < 1:
        raise ShapeError("empty batch")
    layout = params.layout
    vals = params.values
    x = batch.astype(spec.dtype, copy=False)
    tape = Tape(spec, vals, layout, train=train)
    for i, layer in enumerate(spec.layers):
        k = layer.kind
        if k == "conv":
            W = _seg(layout, vals, f"{i}.conv.weight")
            b = _seg(layout, vals, f"{i}.conv.bias")
            ks, st, pd = layer.get("kernel"), layer.get("stride"), layer.get("padding")
            n, h, w, cin = x.shape
            ho = (h + 2 * pd - ks) // st + 1
            wo = (w + 2 * pd - ks) // st + 1
            xp = np.pad(x, ((0, 0), (pd, pd), (pd, pd), (0, 0))) if pd else x
            cols = _im2col(xp, ks, st, ho, wo)
            out = cols @ W.reshape(-1, W.shape[-1]) + b
            tape.caches.append((cols, x.shape, xp.shape))
            x = out
        elif k == "dense":
            W = _seg(layout, vals, f"{i}.dense.weight")
            b = _seg(layout, vals, f"{i}.dense.bias")
            tape.caches.append(x)
            x = x @ W + b
        elif k == "batchnorm":
            gamma = _seg(layout, vals, f"{i}.bn.gamma")
            beta = _seg(layout, vals, f"{i}.bn.beta")
            axes = tuple(range(x.ndim - 1))
            if train:
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
                m = x.size // x.shape[-1]
                rm = _seg(layout, vals, f"{i}.bn.running_mean")
                rv = _seg(layout, vals, f"{i}.bn.running_var")
                unbiased = var * m / max(m - 1, 1)
                tape.running[f"{i}.bn.running_mean"] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean
                tape.running[f"{i}.bn.running_var"] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * unbiased
            else:
                mean = _seg(layout, vals, f"{i}.bn.running_mean")
                var = _seg(layout, vals, f"{i}.bn.running_var")
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mean) * inv
            tape.caches.append((xhat, inv, axes))
            x = xhat * gamma + beta
        elif k == "relu":
            mask = x > 0
            tape.caches.append(mask)
            x = x * mask
        elif k == "pool":
            s = layer.get("size")
            n, h, w, c = x.shape
            tape.caches.append(x.shape)
            x = x.reshape(n, h // s, s, w // s, s, c).mean(axis=(2, 4))
        elif k == "flatten":
            tape.caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite activation in encoder output")
    return x, tape


def _backward(tape: Tape, d_out: np.ndarray) -> np.ndarray:
    spec = tape.spec
    layout = tape.layout
    vals = tape.values
    grad = np.zeros_like(vals)
    dx = np.asarray(d_out, dtype=vals.dtype)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = tape.caches[i]
        k = layer.kind
        if k == "conv":
            cols, xshape, xpshape = cache
            W = _seg(layout, vals, f"{i}.conv.weight")
            ks, st, pd = layer.get("kernel"), layer.get("stride"), layer.get("padding")
            cout = W.shape[-1]
            d2 = dx.reshape(-1, cout)
            gw = cols.reshape(-1, cols.shape[-1]).T @ d2
            s = layout[f"{i}.conv.weight"]
            grad[s.offset : s.stop] = gw.ravel()
            s = layout[f"{i}.conv.bias"]
            grad[s.offset : s.stop] = d2.sum(axis=0)
            dcols = dx @ W.reshape(-1, cout).T
            _, ho, wo, _ = dx.shape
            cin = xshape[-1]
            dxp = np.zeros(xpshape, dtype=vals.dtype)
            p = 0
            for a in range(ks):
                for b in range(ks):
                    dxp[:, a : a + st * (ho - 1) + 1 : st, b : b + st * (wo - 1) + 1 : st, :] += dcols[..., p : p + cin]
                    p += cin
            dx = dxp[:, pd : pd + xshape[1], pd : pd + xshape[2], :] if pd else dxp
        elif k == "dense":
            x_in = cache
            W = _seg(layout, vals, f"{i}.dense.weight")
            s = layout[f"{i}.dense.weight"]
            grad[s.offset : s.stop] = (x_in.T @ dx).ravel()
            s = layout[f"{i}.dense.bias"]
            grad[s.offset : s.stop] = dx.sum(axis=0)
            dx = dx @ W.T
        elif k == "batchnorm":
            xhat, inv, axes = cache
            gamma = _seg(layout, vals, f"{i}.bn.gamma")
            s = layout[f"{i}.bn.gamma"]
            grad[s.offset : s.stop] = (dx * xhat).sum(axis=axes)
            s = layout[f"{i}.bn.beta"]
            grad[s.offset : s.stop] = dx.sum(axis=axes)
            dxhat = dx * gamma
            if tape.train:
                m = dxhat.size // dxhat.shape[-1]
                dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                dx = dxhat * inv
        elif k == "relu":
            dx = dx * cache
        elif k == "pool":
            n, h, w, c = cache
            s_ = layer.get("size")
            dx = np.repeat(np.repeat(dx, s_, axis=1), s_, axis=2) / (s_ * s_)
        elif k == "flatten":
            dx = dx.reshape(cache)
    return grad


def forward(state: EncoderState, batch: np.ndarray) -> np.ndarray:
    """Embeddings ``[batch, embedding_dim]`` using stored BN statistics."""
    out, _ = run(state.spec, state.params, batch, train=False)
    return out


def forward_train(state: EncoderState, batch: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Training-mode pass; frozen batch norm falls back to running statistics."""
    return run(state.spec, state.params, batch, train=not state.bn_frozen)


def embed_many(state: EncoderState, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    if len(batch) <= chunk:
        return forward(state, batch)
    return np.concatenate([forward(state, batch[i : i + chunk]) for i in range(0, len(batch), chunk)])


def trainable_mask(layout: Layout, bn_frozen: bool) -> np.ndarray:
    """Coordinates an optimizer may touch."""
    if bn_frozen:
        return layout.mask(WEIGHT)
    return layout.mask(WEIGHT, BN_AFFINE)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def make_state(spec: EncoderSpec, seed, bn_frozen: bool = False) -> EncoderState:
    return EncoderState(spec, init_params(spec, seed), bn_frozen)


def stack_inputs(parts: Sequence[np.ndarray]) -> tuple[np.ndarray, list[slice]]:
    """Concatenate batches along axis 0 and return the slice of each part."""
    slices, pos = [], 0
    for p in parts:
        slices.append(slice(pos, pos + len(p)))
        pos += len(p)
    return np.concatenate(parts, axis=0), slices
