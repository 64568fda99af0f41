"""Synthetic image classes: oriented gratings plus a positioned blob.

Each class owns a grating orientation and frequency and a blob position.
Individual images vary in grating phase, blob offset, contrast and colour
gain, all scaled by ``noise``, and then receive i.i.d. uniform pixel noise.
The random phase keeps classes from being separable by a pixel-space
linear model while a small CNN separates them easily.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ValidationError
from .rng import stream
from .store import Dataset

MIN_SIDE = 8
_FREQS = (2.0, 3.0, 4.5)


def class_params(n_classes, seed):
    """Per-class pattern parameters, fixed by ``seed``."""
    params = []
    for k in range(n_classes):
        g = stream(seed, "class", k)
        theta = np.pi * k / n_classes + g.uniform(-0.1, 0.1)
        freq = _FREQS[k % len(_FREQS)]
        ang = 2 * np.pi * ((k * 3) % n_classes) / n_classes
        center = (0.5 + 0.27 * np.sin(ang), 0.5 + 0.27 * np.cos(ang))
        params.append({"theta": theta, "freq": freq, "center": center})
    return params


def render(params, shape, noise, rng):
    ch, h, w = shape
    s = min(1.0, 2.0 * noise)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    theta = params["theta"] + s * rng.uniform(-0.14, 0.14)
    phase = s * rng.uniform(-np.pi, np.pi)
    contrast = 1.0 - 0.4 * s * rng.uniform()
    grating = np.cos(2 * np.pi * params["freq"] * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    cy = params["center"][0] + s * rng.uniform(-0.08, 0.08)
    cx = params["center"][1] + s * rng.uniform(-0.08, 0.08)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.09 ** 2))
    base = 0.5 + contrast * (0.22 * grating + 0.4 * blob - 0.1)
    gains = 1.0 - 0.3 * s * rng.uniform(size=ch)
    img = base[None] * gains[:, None, None]
    img = img + noise * rng.uniform(-0.5, 0.5, size=shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(n_classes, per_class, shape=(3, 32, 32), noise=0.3, seed=0, workers=1) -> Dataset:
    """Build ``n_classes * per_class`` images, labels grouped by class."""
    shape = tuple(int(d) for d in shape)
    if n_classes < 2 or per_class < 2:
        raise ValidationError("need n_classes >= 2 and per_class >= 2")
    if len(shape) != 3 or shape[1] < MIN_SIDE or shape[2] < MIN_SIDE:
        raise ValidationError(f"image shape {shape} too small; need [ch, y, x] with y, x >= {MIN_SIDE}")
    if noise < 0:
        raise ValidationError("noise must be non-negative")
    params = class_params(n_classes, seed)
    jobs = [(k, i) for k in range(n_classes) for i in range(per_class)]

    def one(job):
        k, i = job
        return render(params[k], shape, noise, stream(seed, "image", k, i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            images = list(ex.map(one, jobs))
    else:
        images = [one(j) for j in jobs]
    labels = np.repeat(np.arange(n_classes), per_class)
    names = [f"class{k}" for k in range(n_classes)]
    return Dataset(np.stack(images), labels, names)
