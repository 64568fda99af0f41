"""Small deterministic CNN inference engine.

Tensors are numpy arrays laid out as ``[channel, y, x]`` (or ``[n]`` for
vectors), stored as float32. Every op computes in float64 and rounds once on
output, so reductions run at 64-bit precision regardless of storage.

Batched helpers take an extra leading image axis. The public single-image
ops accept either form and keep the rank they were given.
"""
from __future__ import annotations

import hashlib
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ModelValidationError, ValidationError

LAYER_KINDS = (
    "conv2d",
    "dense",
    "relu",
    "maxpool2d",
    "batchnorm",
    "residual_add",
    "flatten",
    "softmax",
)
MASKABLE_KINDS = ("conv2d", "dense")
INPUT_ID = "input"

# tensors each layer kind owns, in serialization order
PARAM_TENSORS = {
    "conv2d": ("weight", "bias"),
    "dense": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
}

DEFAULT_CHUNK = 64


# ---------------------------------------------------------------------------
# raw float64 kernels on batched arrays; shared with the trainer
# ---------------------------------------------------------------------------

def conv_windows(x, ky, kx, stride, padding):
    """Strided patch view ``[n, c, oy, ox, ky, kx]`` of a zero-padded batch."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (ky, kx), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_raw(x, w, b, stride=1, padding=0):
    win = conv_windows(x, w.shape[2], w.shape[3], stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    return out + b[None, :, None, None]


def dense_raw(x, w, b):
    return x @ w.T + b


def maxpool_raw(x, window, stride):
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(-2, -1))


def _channel_shape(ndim):
    return (1, -1) + (1,) * (ndim - 2)


def batchnorm_raw(x, gamma, beta, mean, var, eps):
    shp = _channel_shape(x.ndim)
    scale = gamma / np.sqrt(var + eps)
    return (x - mean.reshape(shp)) * scale.reshape(shp) + beta.reshape(shp)


def softmax_raw(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# public single-tensor ops
# ---------------------------------------------------------------------------

def _as64(a):
    return np.asarray(a, dtype=np.float64)


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def _pair(v):
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(input, kernel, bias, stride=1, padding=0, layer_id=None):
    """Cross-correlate ``input`` [ch, y, x] with ``kernel`` [out, in, ky, kx]."""
    x = _as64(input)
    w = _as64(kernel)
    b = _as64(bias)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects [ch,y,x] input and 4-d kernel, got {x.shape[1:]} and {w.shape}", layer_id)
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}", layer_id)
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match {w.shape[0]} output channels", layer_id)
    if stride < 1 or padding < 0:
        raise ValidationError("stride must be >= 1 and padding >= 0")
    if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
        raise DimensionError(f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]}", layer_id)
    out = conv2d_raw(x, w, b, stride, padding)
    return _f32(out[0] if single else out)


def dense(input, weights, bias, layer_id=None):
    x = _as64(input)
    w = _as64(weights)
    b = _as64(bias)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(
            f"dense got input {x.shape}, weights {w.shape}, bias {b.shape}", layer_id
        )
    return _f32(dense_raw(x, w, b))


def maxpool2d(input, window, stride=None, layer_id=None):
    x = _as64(input)
    stride = window if stride is None else stride
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects [ch,y,x], got {x.shape}", layer_id)
    if window > x.shape[2] or window > x.shape[3]:
        raise DimensionError(f"window {window} larger than input {x.shape[2:]}", layer_id)
    out = maxpool_raw(x, window, stride)
    return _f32(out[0] if single else out)


def batchnorm_infer(input, gamma, beta, mean, var, eps=1e-5, layer_id=None, batched=False):
    x = _as64(input)
    params = [_as64(p) for p in (gamma, beta, mean, var)]
    ch = x.shape[1] if batched else x.shape[0]
    if any(p.shape != (ch,) for p in params):
        raise DimensionError(f"per-channel vectors must have length {ch}", layer_id)
    if np.any(params[3] < 0):
        raise ValidationError("batchnorm variance must be non-negative")
    if eps < 0:
        raise ValidationError("batchnorm eps must be non-negative")
    xb = x if batched else x[None]
    out = batchnorm_raw(xb, *params, eps)
    return _f32(out if batched else out[0])


def relu(input):
    return _f32(np.maximum(_as64(input), 0.0))


def softmax(logits):
    """Numerically stable softmax over the last axis."""
    return _f32(softmax_raw(_as64(logits)))


# ---------------------------------------------------------------------------
# units and masks
# ---------------------------------------------------------------------------

class UnitId(NamedTuple):
    layer: str
    index: int


@dataclass(frozen=True)
class AblationMask:
    entries: frozenset = frozenset()

    def __init__(self, entries: Iterable = ()):
        object.__setattr__(self, "entries", frozenset(UnitId(str(l), int(i)) for l, i in entries))

    @classmethod
    def for_units(cls, layer, indices):
        return cls((layer, i) for i in indices)

    def indices(self, layer) -> list[int]:
        return sorted(u.index for u in self.entries if u.layer == layer)

    def layers(self) -> set[str]:
        return {u.layer for u in self.entries}

    def __len__(self):
        return len(self.entries)

    def __or__(self, other):
        return AblationMask(self.entries | other.entries)

    def validate(self, model: "ModelGraph"):
        for u in self.entries:
            n = model.unit_counts.get(u.layer)
            if n is None:
                raise ValidationError(f"mask refers to {u.layer!r}, which is not a maskable layer")
            if not 0 <= u.index < n:
                raise ValidationError(f"unit index {u.index} out of range for layer {u.layer!r} with {n} units")


EMPTY_MASK = AblationMask()


def apply_mask(activation, layer_id, mask: AblationMask, batched=False):
    """Zero the masked units of ``layer_id``; every other value is untouched.

    A unit is a whole channel of a ``[ch, y, x]`` map or one element of a
    vector. ``batched`` means axis 0 indexes images.
    """
    idx = mask.indices(layer_id)
    act = np.asarray(activation)
    if not idx:
        return act
    axis = 1 if batched else 0
    n = act.shape[axis]
    bad = [i for i in idx if i >= n or i < 0]
    if bad:
        raise ValidationError(f"unit index {bad[0]} out of range for layer {layer_id!r} with {n} units")
    out = act.copy()
    if batched:
        out[:, idx] = 0
    else:
        out[idx] = 0
    return out


# ---------------------------------------------------------------------------
# model graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple
    params: Mapping = field(default_factory=dict)

    def __init__(self, id, kind, inputs, params=None):
        object.__setattr__(self, "id", str(id))
        object.__setattr__(self, "kind", str(kind))
        if isinstance(inputs, str):
            inputs = (inputs,)
        object.__setattr__(self, "inputs", tuple(inputs))
        object.__setattr__(self, "params", dict(params or {}))

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["kind"], d["inputs"], d.get("params", {}))


class ModelGraph:
    """Ordered layer DAG plus its weights; validated and frozen on creation.

    Layers must be listed so that every input precedes its consumer, which
    makes declaration order a topological order. ``weights`` maps
    ``"<layer>.<param>"`` to arrays.
    """

    def __init__(self, input_shape, layers, weights):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = tuple(layers)
        w = {}
        for k, v in weights.items():
            a = np.array(v, dtype=np.float32, copy=True)
            a.flags.writeable = False
            w[k] = a
        self.weights = w
        self._validate()

    # -- validation -------------------------------------------------------
    def _validate(self):
        seen = {INPUT_ID}
        shapes = {INPUT_ID: self.input_shape}
        consumers: dict[str, list[str]] = {INPUT_ID: []}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ModelValidationError(f"layer {layer.id!r}: unknown kind {layer.kind!r}")
            if layer.id in seen:
                raise ModelValidationError(f"duplicate layer id {layer.id!r}")
            want = 2 if layer.kind == "residual_add" else 1
            if len(layer.inputs) != want:
                raise ModelValidationError(
                    f"layer {layer.id!r}: {layer.kind} takes {want} input(s), got {len(layer.inputs)}"
                )
            for src in layer.inputs:
                if src not in seen:
                    raise ModelValidationError(
                        f"layer {layer.id!r}: input {src!r} is not defined before it"
                    )
                consumers[src].append(layer.id)
            for name in PARAM_TENSORS.get(layer.kind, ()):
                if f"{layer.id}.{name}" not in self.weights:
                    raise ModelValidationError(f"layer {layer.id!r}: missing tensor {name!r}")
            shapes[layer.id] = self._infer_shape(layer, [shapes[s] for s in layer.inputs])
            seen.add(layer.id)
            consumers[layer.id] = []
        if not self.layers:
            raise ModelValidationError("model has no layers")
        expected = {f"{l.id}.{n}" for l in self.layers for n in PARAM_TENSORS.get(l.kind, ())}
        extra = set(self.weights) - expected
        if extra:
            raise ModelValidationError(f"unused weight tensors: {sorted(extra)}")
        self.shapes = shapes
        self.consumers = {k: tuple(v) for k, v in consumers.items()}
        self.unit_counts = {
            l.id: shapes[l.id][0] for l in self.layers if l.kind in MASKABLE_KINDS
        }
        self.capture_points = {lid: self._capture_point(lid) for lid in self.unit_counts}
        self._capture_owner = {cp: lid for lid, cp in self.capture_points.items()}

    def _infer_shape(self, layer, in_shapes):
        k, p, lid = layer.kind, layer.params, layer.id
        s = in_shapes[0]
        W = self.weights
        if k == "conv2d":
            w = W[f"{lid}.weight"]
            if len(s) != 3:
                raise DimensionError(f"conv2d needs [ch,y,x] input, got {s}", lid)
            if w.ndim != 4 or w.shape[1] != s[0]:
                raise DimensionError(f"kernel {w.shape} inconsistent with {s[0]} input channels", lid)
            if W[f"{lid}.bias"].shape != (w.shape[0],):
                raise DimensionError("bias length differs from output channels", lid)
            st, pad = int(p.get("stride", 1)), int(p.get("padding", 0))
            if st < 1 or pad < 0:
                raise DimensionError("stride must be >= 1 and padding >= 0", lid)
            oy = (s[1] + 2 * pad - w.shape[2]) // st + 1
            ox = (s[2] + 2 * pad - w.shape[3]) // st + 1
            if oy < 1 or ox < 1:
                raise DimensionError(f"kernel {w.shape[2:]} larger than padded input {s[1:]}", lid)
            return (w.shape[0], oy, ox)
        if k == "dense":
            w = W[f"{lid}.weight"]
            if len(s) != 1 or w.ndim != 2 or w.shape[1] != s[0]:
                raise DimensionError(f"weights {w.shape} inconsistent with input {s}", lid)
            if W[f"{lid}.bias"].shape != (w.shape[0],):
                raise DimensionError("bias length differs from output width", lid)
            return (w.shape[0],)
        if k == "maxpool2d":
            win = int(p["window"])
            st = int(p.get("stride", win))
            if len(s) != 3 or win > s[1] or win > s[2]:
                raise DimensionError(f"window {win} does not fit input {s}", lid)
            return (s[0], (s[1] - win) // st + 1, (s[2] - win) // st + 1)
        if k == "batchnorm":
            for n in PARAM_TENSORS[k]:
                if W[f"{lid}.{n}"].shape != (s[0],):
                    raise DimensionError(f"{n} length must equal {s[0]} channels", lid)
            if np.any(W[f"{lid}.var"] < 0):
                raise ValidationError(f"layer {lid!r}: negative variance")
            return s
        if k == "flatten":
            return (int(np.prod(s)),)
        if k == "residual_add":
            if in_shapes[0] != in_shapes[1]:
                raise DimensionError(f"residual inputs differ: {in_shapes[0]} vs {in_shapes[1]}", lid)
            return s
        if k == "softmax" and len(s) != 1:
            raise DimensionError(f"softmax needs a vector, got {s}", lid)
        return s

    def _capture_point(self, lid):
        cur = lid
        kinds = {l.id: l.kind for l in self.layers}
        while len(self.consumers[cur]) == 1 and kinds[self.consumers[cur][0]] == "batchnorm":
            cur = self.consumers[cur][0]
        if len(self.consumers[cur]) == 1 and kinds[self.consumers[cur][0]] == "relu":
            cur = self.consumers[cur][0]
        return cur

    # -- queries ------------------------------------------------------------
    @property
    def output_id(self):
        return self.layers[-1].id

    @property
    def output_shape(self):
        return self.shapes[self.output_id]

    def layer(self, lid) -> LayerSpec:
        for l in self.layers:
            if l.id == lid:
                return l
        raise KeyError(lid)

    def maskable_layers(self) -> list[str]:
        return [l.id for l in self.layers if l.kind in MASKABLE_KINDS]

    def tensor_names(self) -> list[str]:
        return [f"{l.id}.{n}" for l in self.layers for n in PARAM_TENSORS.get(l.kind, ())]

    def upstream(self, lid) -> set[str]:
        """Ids of all layers that ``lid`` depends on (excluding itself)."""
        layer = self.layer(lid)
        out = set()
        stack = list(layer.inputs)
        while stack:
            s = stack.pop()
            if s == INPUT_ID or s in out:
                continue
            out.add(s)
            stack.extend(self.layer(s).inputs)
        return out

    def weights_blob(self) -> bytes:
        return b"".join(self.weights[n].astype("<f4").tobytes() for n in self.tensor_names())

    def checksum(self) -> str:
        return hashlib.sha256(self.weights_blob()).hexdigest()

    def with_weights(self, updates) -> "ModelGraph":
        w = dict(self.weights)
        w.update(updates)
        return ModelGraph(self.input_shape, self.layers, w)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _run_layer(model, layer, args):
    k, p, lid, W = layer.kind, layer.params, layer.id, model.weights
    x = args[0]
    if k == "conv2d":
        w, b = W[f"{lid}.weight"].astype(np.float64), W[f"{lid}.bias"].astype(np.float64)
        return conv2d_raw(x, w, b, int(p.get("stride", 1)), int(p.get("padding", 0)))
    if k == "dense":
        w, b = W[f"{lid}.weight"].astype(np.float64), W[f"{lid}.bias"].astype(np.float64)
        return dense_raw(x, w, b)
    if k == "relu":
        return np.maximum(x, 0.0)
    if k == "maxpool2d":
        win = int(p["window"])
        return maxpool_raw(x, win, int(p.get("stride", win)))
    if k == "batchnorm":
        params = [W[f"{lid}.{n}"].astype(np.float64) for n in PARAM_TENSORS[k]]
        return batchnorm_raw(x, *params, float(p.get("eps", 1e-5)))
    if k == "residual_add":
        return x + args[1]
    if k == "flatten":
        return x.reshape(x.shape[0], -1)
    if k == "softmax":
        return softmax_raw(x)
    raise ModelValidationError(f"layer {lid!r}: unknown kind {k!r}")


def _forward_chunk(model, images, mask, taps):
    values = {INPUT_ID: np.asarray(images, dtype=np.float32)}
    remaining = {k: len(v) for k, v in model.consumers.items()}
    tapped = {}
    for layer in model.layers:
        args = [values[s].astype(np.float64) for s in layer.inputs]
        out = _run_layer(model, layer, args).astype(np.float32)
        owner = model._capture_owner.get(layer.id)
        if owner is not None and mask.entries:
            out = apply_mask(out, owner, mask, batched=True)
        values[layer.id] = out
        if layer.id in taps:
            tapped[layer.id] = out
        for s in layer.inputs:
            remaining[s] -= 1
            if remaining[s] == 0 and s != model.output_id:
                del values[s]
    return values[model.output_id], tapped


def forward_batch(model: ModelGraph, images, mask: AblationMask = EMPTY_MASK, taps=(), workers=1,
                  chunk=DEFAULT_CHUNK):
    """Run a batch ``[n, *input_shape]``; returns ``(outputs [n, C], taps)``.

    Images are processed in fixed chunks of ``chunk`` consecutive rows, so the
    result does not depend on ``workers``.
    """
    images = np.asarray(images)
    if images.shape[1:] != model.input_shape:
        raise DimensionError(f"images have shape {images.shape[1:]}, model expects {model.input_shape}")
    mask = mask or EMPTY_MASK
    mask.validate(model)
    taps = set(taps)
    unknown = taps - set(model.shapes)
    if unknown:
        raise ValidationError(f"unknown tap layers: {sorted(unknown)}")
    starts = range(0, images.shape[0], chunk)
    job = lambda s: _forward_chunk(model, images[s:s + chunk], mask, taps)
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    if not parts:
        return np.zeros((0,) + model.output_shape, np.float32), {t: np.zeros((0,) + model.shapes[t], np.float32) for t in taps}
    logits = np.concatenate([p[0] for p in parts])
    tapped = {t: np.concatenate([p[1][t] for p in parts]) for t in taps}
    return logits, tapped


def forward(model: ModelGraph, image, mask: AblationMask = EMPTY_MASK, taps=()):
    """Evaluate one image; tapped tensors are the post-mask values."""
    image = np.asarray(image)
    logits, tapped = forward_batch(model, image[None], mask, taps)
    return logits[0], {k: v[0] for k, v in tapped.items()}


def capture_ids(model: ModelGraph) -> dict[str, str]:
    """Maskable layer id -> id of the layer whose output is its capture point."""
    return dict(model.capture_points)
