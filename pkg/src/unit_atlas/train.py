"""Minibatch SGD for the small CNNs analysed by the pipeline.

Training runs in float64 on a private copy of the parameters and produces a
float32 :class:`ModelGraph` at the end. Batch norm layers are trained in
their inference form: ``gamma`` and ``beta`` learn, running statistics stay
at ``mean=0, var=1``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine
from .engine import INPUT_ID, PARAM_TENSORS, LayerSpec, ModelGraph
from .errors import DivergenceError, ValidationError
from .rng import stream
from .store import Dataset

log = logging.getLogger(__name__)

TRAINABLE = {
    "conv2d": ("weight", "bias"),
    "dense": ("weight", "bias"),
    "batchnorm": ("gamma", "beta"),
}


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 15
    batch_size: int = 32
    l2: float = 1e-4
    seed: int = 0
    split: float = 0.8
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if not 0 < self.split <= 1:
            raise ValidationError("split must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    final_eval_accuracy: float | None = None
    train_rows: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def default_architecture(n_classes, channels=(16, 32), hidden=64):
    c1, c2 = channels
    return [
        LayerSpec("conv1", "conv2d", [INPUT_ID], {"out_channels": c1, "kernel": 3, "padding": 1}),
        LayerSpec("relu1", "relu", ["conv1"]),
        LayerSpec("pool1", "maxpool2d", ["relu1"], {"window": 2}),
        LayerSpec("conv2", "conv2d", ["pool1"], {"out_channels": c2, "kernel": 3, "padding": 1}),
        LayerSpec("relu2", "relu", ["conv2"]),
        LayerSpec("pool2", "maxpool2d", ["relu2"], {"window": 2}),
        LayerSpec("flat", "flatten", ["pool2"]),
        LayerSpec("fc1", "dense", ["flat"], {"out_features": hidden}),
        LayerSpec("relu3", "relu", ["fc1"]),
        LayerSpec("fc2", "dense", ["relu3"], {"out_features": n_classes}),
    ]


def residual_architecture(n_classes, channels=(16, 32), hidden=64):
    """Default net with a batch-normalised residual block after the first pool."""
    c1, c2 = channels
    return [
        LayerSpec("conv1", "conv2d", [INPUT_ID], {"out_channels": c1, "kernel": 3, "padding": 1}),
        LayerSpec("relu1", "relu", ["conv1"]),
        LayerSpec("pool1", "maxpool2d", ["relu1"], {"window": 2}),
        LayerSpec("res_a", "conv2d", ["pool1"], {"out_channels": c1, "kernel": 3, "padding": 1}),
        LayerSpec("bn_a", "batchnorm", ["res_a"], {"eps": 1e-5}),
        LayerSpec("relu_a", "relu", ["bn_a"]),
        LayerSpec("res_b", "conv2d", ["relu_a"], {"out_channels": c1, "kernel": 3, "padding": 1}),
        LayerSpec("bn_b", "batchnorm", ["res_b"], {"eps": 1e-5}),
        LayerSpec("add", "residual_add", ["bn_b", "pool1"]),
        LayerSpec("relu_add", "relu", ["add"]),
        LayerSpec("conv2", "conv2d", ["relu_add"], {"out_channels": c2, "kernel": 3, "padding": 1}),
        LayerSpec("relu2", "relu", ["conv2"]),
        LayerSpec("pool2", "maxpool2d", ["relu2"], {"window": 2}),
        LayerSpec("flat", "flatten", ["pool2"]),
        LayerSpec("fc1", "dense", ["flat"], {"out_features": hidden}),
        LayerSpec("relu3", "relu", ["fc1"]),
        LayerSpec("fc2", "dense", ["relu3"], {"out_features": n_classes}),
    ]


ARCHITECTURES = {"default": default_architecture, "residual": residual_architecture}


def _kernel(p):
    k = p.get("kernel", 3)
    return (int(k[0]), int(k[1])) if isinstance(k, (list, tuple)) else (int(k), int(k))


def init_weights(layers, input_shape, seed) -> dict:
    """Fan-scaled uniform weights, zero biases, identity batch norm.

    Every tensor draws from its own named stream so values do not depend on
    the order tensors are created in.
    """
    shapes = {INPUT_ID: tuple(input_shape)}
    weights = {}
    for l in layers:
        s = shapes[l.inputs[0]]
        p = l.params
        if l.kind == "conv2d":
            ky, kx = _kernel(p)
            out = int(p["out_channels"])
            dims = (out, s[0], ky, kx)
            fan_in, fan_out = s[0] * ky * kx, out * ky * kx
            st, pad = int(p.get("stride", 1)), int(p.get("padding", 0))
            shapes[l.id] = (out, (s[1] + 2 * pad - ky) // st + 1, (s[2] + 2 * pad - kx) // st + 1)
        elif l.kind == "dense":
            out = int(p["out_features"])
            dims = (out, s[0])
            fan_in, fan_out = s[0], out
            shapes[l.id] = (out,)
        else:
            if l.kind == "maxpool2d":
                win = int(p["window"])
                st = int(p.get("stride", win))
                shapes[l.id] = (s[0], (s[1] - win) // st + 1, (s[2] - win) // st + 1)
            elif l.kind == "flatten":
                shapes[l.id] = (int(np.prod(s)),)
            else:
                shapes[l.id] = s
            if l.kind == "batchnorm":
                c = s[0]
                weights[f"{l.id}.gamma"] = np.ones(c)
                weights[f"{l.id}.beta"] = np.zeros(c)
                weights[f"{l.id}.mean"] = np.zeros(c)
                weights[f"{l.id}.var"] = np.ones(c)
            continue
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights[f"{l.id}.weight"] = stream(seed, "init", l.id, "weight").uniform(-limit, limit, size=dims)
        weights[f"{l.id}.bias"] = np.zeros(dims[0])
    return weights


def build_model(arch, input_shape, n_classes, seed=0) -> ModelGraph:
    layers = ARCHITECTURES[arch](n_classes) if isinstance(arch, str) else list(arch)
    w = init_weights(layers, input_shape, seed)
    return ModelGraph(input_shape, layers, w)


# ---------------------------------------------------------------------------
# float64 forward/backward
# ---------------------------------------------------------------------------

class Trainable:
    """Float64 parameter copy of a model with an analytic gradient."""

    def __init__(self, model: ModelGraph):
        self.input_shape = model.input_shape
        self.layers = list(model.layers)
        self.params = {k: v.astype(np.float64) for k, v in model.weights.items()}
        # a trailing softmax is folded into the loss
        self._body = self.layers[:-1] if self.layers[-1].kind == "softmax" else self.layers
        self._out_id = self._body[-1].id

    def trainable_names(self):
        return [f"{l.id}.{n}" for l in self.layers for n in TRAINABLE.get(l.kind, ())]

    def regularized_names(self):
        return [f"{l.id}.weight" for l in self.layers if l.kind in ("conv2d", "dense")]

    def to_model(self) -> ModelGraph:
        return ModelGraph(self.input_shape, self.layers, {k: v.astype(np.float32) for k, v in self.params.items()})

    def _forward(self, x, keep=False):
        P = self.params
        acts = {INPUT_ID: x}
        cache = {}
        for l in self._body:
            a = acts[l.inputs[0]]
            p = l.params
            if l.kind == "conv2d":
                w, b = P[f"{l.id}.weight"], P[f"{l.id}.bias"]
                st, pad = int(p.get("stride", 1)), int(p.get("padding", 0))
                win = engine.conv_windows(a, w.shape[2], w.shape[3], st, pad)
                out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
                out = out + b[None, :, None, None]
                if keep:
                    cache[l.id] = win
            elif l.kind == "dense":
                out = a @ P[f"{l.id}.weight"].T + P[f"{l.id}.bias"]
            elif l.kind == "relu":
                out = np.maximum(a, 0.0)
            elif l.kind == "maxpool2d":
                win = int(p["window"])
                out = engine.maxpool_raw(a, win, int(p.get("stride", win)))
            elif l.kind == "batchnorm":
                out = engine.batchnorm_raw(
                    a, *(P[f"{l.id}.{n}"] for n in PARAM_TENSORS["batchnorm"]), float(p.get("eps", 1e-5))
                )
            elif l.kind == "residual_add":
                out = a + acts[l.inputs[1]]
            elif l.kind == "flatten":
                out = a.reshape(a.shape[0], -1)
            elif l.kind == "softmax":
                out = engine.softmax_raw(a)
            else:
                raise ValidationError(f"cannot train through layer kind {l.kind!r}")
            acts[l.id] = out
        return acts, cache

    def pattern(self, x) -> bytes:
        """Which linear piece the loss is on: ReLU on/off states and maxpool
        winners. Finite differences are only meaningful where this is constant."""
        acts, _ = self._forward(np.asarray(x, dtype=np.float64))
        parts = []
        for l in self._body:
            a = acts[l.inputs[0]]
            if l.kind == "relu":
                parts.append(np.packbits(a > 0).tobytes())
            elif l.kind == "maxpool2d":
                win = int(l.params["window"])
                v = engine.sliding_window_view(a, (win, win), axis=(2, 3))[:, :, ::int(l.params.get("stride", win)), ::int(l.params.get("stride", win))]
                parts.append(v.reshape(v.shape[:4] + (-1,)).argmax(axis=-1).astype(np.uint8).tobytes())
        return b"".join(parts)

    def logits(self, x):
        acts, _ = self._forward(np.asarray(x, dtype=np.float64))
        return acts[self._out_id]

    def _data_loss(self, z, y):
        zs = z - z.max(axis=1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(y)), y].mean(), logp

    def loss(self, x, y, l2=0.0):
        z = self.logits(x)
        data, _ = self._data_loss(z, np.asarray(y))
        reg = 0.5 * l2 * sum(float(np.sum(self.params[n] ** 2)) for n in self.regularized_names())
        return data + reg

    def loss_and_grads(self, x, y, l2=0.0):
        """Mean softmax cross-entropy plus ``l2/2 * sum(w**2)`` and its gradient."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        acts, cache = self._forward(x, keep=True)
        z = acts[self._out_id]
        data, logp = self._data_loss(z, y)
        n = len(y)
        g = np.exp(logp)
        g[np.arange(n), y] -= 1.0
        g /= n
        P = self.params
        grads = {k: np.zeros_like(P[k]) for k in self.trainable_names()}
        gacts = {self._out_id: g}

        def push(src, val):
            if src == INPUT_ID:
                return
            if src in gacts:
                gacts[src] = gacts[src] + val
            else:
                gacts[src] = val

        for l in reversed(self._body):
            if l.id not in gacts:
                continue
            g = gacts.pop(l.id)
            a = acts[l.inputs[0]]
            p = l.params
            if l.kind == "conv2d":
                w = P[f"{l.id}.weight"]
                win = cache[l.id]
                grads[f"{l.id}.weight"] += np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
                grads[f"{l.id}.bias"] += g.sum(axis=(0, 2, 3))
                st, pad = int(p.get("stride", 1)), int(p.get("padding", 0))
                push(l.inputs[0], _conv_input_grad(g, w, a.shape, st, pad))
            elif l.kind == "dense":
                w = P[f"{l.id}.weight"]
                grads[f"{l.id}.weight"] += g.T @ a
                grads[f"{l.id}.bias"] += g.sum(axis=0)
                push(l.inputs[0], g @ w)
            elif l.kind == "relu":
                push(l.inputs[0], g * (a > 0))
            elif l.kind == "maxpool2d":
                win = int(p["window"])
                push(l.inputs[0], _maxpool_input_grad(g, a, win, int(p.get("stride", win))))
            elif l.kind == "batchnorm":
                eps = float(p.get("eps", 1e-5))
                shp = (1, -1) + (1,) * (a.ndim - 2)
                axes = (0,) + tuple(range(2, a.ndim))
                inv = 1.0 / np.sqrt(P[f"{l.id}.var"] + eps)
                xhat = (a - P[f"{l.id}.mean"].reshape(shp)) * inv.reshape(shp)
                grads[f"{l.id}.gamma"] += (g * xhat).sum(axis=axes)
                grads[f"{l.id}.beta"] += g.sum(axis=axes)
                push(l.inputs[0], g * (P[f"{l.id}.gamma"] * inv).reshape(shp))
            elif l.kind == "residual_add":
                push(l.inputs[0], g)
                push(l.inputs[1], g)
            elif l.kind == "flatten":
                push(l.inputs[0], g.reshape(a.shape))
            elif l.kind == "softmax":
                s = acts[l.id]
                push(l.inputs[0], s * (g - (g * s).sum(axis=-1, keepdims=True)))

        reg = 0.0
        for name in self.regularized_names():
            w = P[name]
            reg += 0.5 * l2 * float(np.sum(w * w))
            grads[name] += l2 * w
        return data + reg, grads


def _conv_input_grad(g, w, in_shape, stride, padding):
    n, c, h, wd = in_shape
    _, _, ky, kx = w.shape
    oy, ox = g.shape[2], g.shape[3]
    gx = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(ky):
        for j in range(kx):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            gx[:, :, i:i + stride * (oy - 1) + 1:stride, j:j + stride * (ox - 1) + 1:stride] += contrib
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def _maxpool_input_grad(g, x, window, stride):
    win = engine.sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    oy, ox = win.shape[2], win.shape[3]
    am = win.reshape(win.shape[:4] + (-1,)).argmax(axis=-1)
    gx = np.zeros_like(x)
    for k in range(window * window):
        i, j = divmod(k, window)
        gx[:, :, i:i + stride * (oy - 1) + 1:stride, j:j + stride * (ox - 1) + 1:stride] += g * (am == k)
    return gx


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def stratified_split(labels, train_fraction, seed, *names):
    """Seeded per-class split; returns sorted (train_rows, eval_rows).

    Every class with at least two rows keeps one row on each side.
    """
    labels = np.asarray(labels)
    train, held = [], []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rows = stream(seed, "split", *names, int(c)).permutation(rows)
        if len(rows) == 1:
            k = 1
        else:
            k = min(max(int(round(train_fraction * len(rows))), 1), len(rows) - 1)
        train.extend(rows[:k].tolist())
        held.extend(rows[k:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(held), dtype=np.int64)


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def train_model(arch, dataset: Dataset, config: TrainConfig | None = None):
    """Train ``arch`` (a name or a layer template list) on ``dataset``.

    Returns ``(model, TrainLog)``.
    """
    config = config or TrainConfig()
    model = build_model(arch, dataset.image_shape, dataset.n_classes, config.seed)
    if model.output_shape != (dataset.n_classes,):
        raise ValidationError(
            f"architecture outputs {model.output_shape}, dataset has {dataset.n_classes} classes"
        )
    net = Trainable(model)
    train_rows, eval_rows = stratified_split(dataset.labels, config.split, config.seed, "train")
    x_all = dataset.as_float().astype(np.float64)
    y_all = dataset.labels
    velocity = {k: np.zeros_like(net.params[k]) for k in net.trainable_names()}
    record = TrainLog(train_rows=train_rows.tolist(), eval_rows=eval_rows.tolist(), config=asdict(config))

    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, "shuffle", epoch).permutation(train_rows)
        losses = []
        for s in range(0, len(order), config.batch_size):
            rows = order[s:s + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = net.loss_and_grads(x_all[rows], y_all[rows], config.l2)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, f"loss became {loss} at batch starting {s}")
            for k, g in grads.items():
                v = velocity[k]
                v *= config.momentum
                v += g
                net.params[k] -= config.lr * v
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if len(eval_rows):
            entry["eval_accuracy"] = accuracy(net.logits(x_all[eval_rows]), y_all[eval_rows])
        record.epochs.append(entry)
        log.info("epoch %d loss %.4f eval %s", epoch, entry["train_loss"], entry.get("eval_accuracy"))

    trained = net.to_model()
    if len(eval_rows):
        logits, _ = engine.forward_batch(trained, dataset.as_float(eval_rows))
        record.final_eval_accuracy = accuracy(logits, y_all[eval_rows])
    return trained, record
