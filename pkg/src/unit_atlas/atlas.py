"""Per-unit activation statistics and the equal-count selectivity x magnitude grid."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .engine import EMPTY_MASK, AblationMask, ModelGraph, UnitId
from .errors import DimensionError, ValidationError
from .rng import stream
from .store import Dataset

log = logging.getLogger(__name__)

MAGNITUDE_MODES = ("rotated", "global_mean")


@dataclass
class ActivationMatrix:
    """Scalar activation of every maskable unit (columns) on every image (rows)."""

    values: np.ndarray              # float32 [n_images, n_units]
    units: list                     # column -> UnitId
    labels: np.ndarray              # row -> class index
    image_ids: np.ndarray           # row -> dataset row

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.units = [UnitId(str(u[0]), int(u[1])) for u in self.units]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        if self.values.shape != (len(self.labels), len(self.units)):
            raise ValidationError("activation matrix shape does not match its row/column tables")

    def layers(self) -> list[str]:
        out = []
        for u in self.units:
            if not out or out[-1] != u.layer:
                out.append(u.layer)
        return out

    def layer_columns(self, layer) -> np.ndarray:
        return np.array([i for i, u in enumerate(self.units) if u.layer == layer], dtype=np.int64)

    def columns(self, units) -> np.ndarray:
        index = {u: i for i, u in enumerate(self.units)}
        return np.array([index[UnitId(*u)] for u in units], dtype=np.int64)


def _unit_scalars(model, images, mask):
    cps = model.capture_points
    logits, tapped = engine.forward_batch(model, images, mask, taps=set(cps.values()))
    cols = []
    for lid in model.maskable_layers():
        t = tapped[cps[lid]].astype(np.float64)
        if t.ndim == 4:
            t = t.mean(axis=(2, 3))
        cols.append(t.astype(np.float32))
    return np.concatenate(cols, axis=1)


def capture_activations(model: ModelGraph, dataset: Dataset, mask: AblationMask = EMPTY_MASK,
                        rows=None, workers=1, chunk=engine.DEFAULT_CHUNK) -> ActivationMatrix:
    """Per image and unit: spatial mean of a conv channel, or a dense value,
    read at the unit's capture point with ``mask`` applied."""
    if dataset.image_shape != model.input_shape:
        raise DimensionError(f"dataset images {dataset.image_shape} do not match model input {model.input_shape}")
    rows = np.arange(len(dataset)) if rows is None else np.asarray(rows, dtype=np.int64)
    mask.validate(model)
    starts = list(range(0, len(rows), chunk))
    job = lambda s: _unit_scalars(model, dataset.as_float(rows[s:s + chunk]), mask)
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    units = [UnitId(l, i) for l in model.maskable_layers() for i in range(model.unit_counts[l])]
    values = np.concatenate(parts) if parts else np.zeros((0, len(units)), np.float32)
    return ActivationMatrix(values, units, dataset.labels[rows], rows)


def save_activations(acts: ActivationMatrix, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "activations.bin").write_bytes(acts.values.astype("<f4").tobytes())
    (out / "units.json").write_text(json.dumps(
        [{"column": i, "layer": u.layer, "index": u.index} for i, u in enumerate(acts.units)], indent=1) + "\n")
    (out / "images.json").write_text(json.dumps(
        [{"row": r, "image": int(i), "label": int(l)} for r, (i, l) in enumerate(zip(acts.image_ids, acts.labels))],
        indent=1) + "\n")
    return out


def load_activations(path) -> ActivationMatrix:
    path = Path(path)
    units = json.loads((path / "units.json").read_text())
    images = json.loads((path / "images.json").read_text())
    raw = np.frombuffer((path / "activations.bin").read_bytes(), dtype="<f4")
    if raw.size != len(units) * len(images):
        raise ValidationError("activations.bin size does not match units.json x images.json")
    return ActivationMatrix(
        raw.reshape(len(images), len(units)).astype(np.float32),
        [(u["layer"], u["index"]) for u in units],
        [r["label"] for r in images],
        [r["image"] for r in images],
    )


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitStats:
    unit: UnitId
    a_target: float
    a_other: float
    selectivity: float
    magnitude: float


def _row_mean(values, rows):
    # sequential float64 accumulation over rows, in row order
    acc = np.zeros(values.shape[1], dtype=np.float64)
    for r in rows:
        acc += values[r]
    return acc / len(rows)


def comparison_classes(labels, target, subsample=None, seed=0, classes=None):
    """Non-target classes used for ``a_other``; optionally a seeded subset."""
    present = sorted(set(np.asarray(labels).tolist()))
    pool = sorted(classes) if classes is not None else [c for c in present if c != target]
    if target in pool:
        raise ValidationError("comparison classes must exclude the target")
    if not pool:
        raise ValidationError("need at least one comparison class")
    if subsample is not None and subsample < len(pool):
        if subsample < 1:
            raise ValidationError("comparison subsample must be >= 1")
        pick = stream(seed, "comparison", target).choice(len(pool), size=subsample, replace=False)
        pool = sorted(pool[i] for i in pick)
    return pool


def unit_stats(acts: ActivationMatrix, target, comparison=None, seed=0, subsample=None,
               magnitude_mode="rotated") -> list[UnitStats]:
    """Class-conditional mean activations, rotated into selectivity and magnitude."""
    if magnitude_mode not in MAGNITUDE_MODES:
        raise ValidationError(f"magnitude_mode must be one of {MAGNITUDE_MODES}")
    target = int(target)
    comp = comparison_classes(acts.labels, target, subsample, seed, comparison)
    values = acts.values.astype(np.float64)

    def class_mean(c):
        rows = np.flatnonzero(acts.labels == c)
        if len(rows) == 0:
            raise ValidationError(f"class {c} has no images")
        return _row_mean(values, rows)

    a_t = class_mean(target)
    acc = np.zeros(values.shape[1])
    for c in comp:
        acc += class_mean(c)
    a_o = acc / len(comp)
    sel = a_t - a_o
    if magnitude_mode == "rotated":
        mag = (a_t + a_o) / 2
    else:
        mag = _row_mean(values, np.arange(values.shape[0]))
    return [
        UnitStats(u, float(a_t[i]), float(a_o[i]), float(sel[i]), float(mag[i]))
        for i, u in enumerate(acts.units)
    ]


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def split_sizes(n, parts) -> list[int]:
    """Near-equal contiguous sizes; the first ``n % parts`` pieces get one extra."""
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _cuts(items, parts):
    out, start = [], 0
    for size in split_sizes(len(items), parts):
        out.append(items[start:start + size])
        start += size
    return out


@dataclass
class GridAtlas:
    target_class: int
    strips: int
    bands: int
    layers: list                                    # eligible layers in model order
    assignment: dict = field(default_factory=dict)  # UnitId -> (strip, band)
    cells: dict = field(default_factory=dict)       # (layer, strip, band) -> sorted unit indices
    stats: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)     # layer -> reason

    def cell_units(self, layer, strip, band) -> list[int]:
        return self.cells[(layer, strip, band)]

    def cell_mask(self, layer, strip, band) -> AblationMask:
        return AblationMask.for_units(layer, self.cells[(layer, strip, band)])

    def cell_keys(self):
        return [(l, s, b) for l in self.layers for s in range(self.strips) for b in range(self.bands)]

    def to_dict(self):
        units = []
        for st in self.stats:
            cell = self.assignment.get(st.unit)
            units.append({
                "layer": st.unit.layer,
                "index": st.unit.index,
                "a_target": st.a_target,
                "a_other": st.a_other,
                "selectivity": st.selectivity,
                "magnitude": st.magnitude,
                "strip": None if cell is None else cell[0],
                "band": None if cell is None else cell[1],
            })
        return {
            "target_class": self.target_class,
            "grid": [self.strips, self.bands],
            "layers": list(self.layers),
            "skipped_layers": dict(self.skipped),
            "units": units,
        }

    @classmethod
    def from_dict(cls, d):
        stats = [UnitStats(UnitId(u["layer"], u["index"]), u["a_target"], u["a_other"],
                           u["selectivity"], u["magnitude"]) for u in d["units"]]
        atlas = cls(d["target_class"], d["grid"][0], d["grid"][1], list(d["layers"]),
                    stats=stats, skipped=dict(d.get("skipped_layers", {})))
        for l in atlas.layers:
            for s in range(atlas.strips):
                for b in range(atlas.bands):
                    atlas.cells[(l, s, b)] = []
        for u in d["units"]:
            if u["strip"] is not None:
                uid = UnitId(u["layer"], u["index"])
                atlas.assignment[uid] = (u["strip"], u["band"])
                atlas.cells[(u["layer"], u["strip"], u["band"])].append(u["index"])
        for k in atlas.cells:
            atlas.cells[k].sort()
        return atlas


def partition_grid(stats, strips=4, bands=4, target_class=None) -> GridAtlas:
    """Cut each layer's units into ``strips`` selectivity strips of equal count,
    then each strip into ``bands`` magnitude bands of equal count.

    Strip 0 holds the lowest selectivity, band 0 the lowest magnitude. Ties
    are broken by unit index. Layers with fewer units than cells are skipped.
    """
    if strips < 1 or bands < 1:
        raise ValidationError("grid dimensions must be >= 1")
    by_layer: dict[str, list[UnitStats]] = {}
    for st in stats:
        by_layer.setdefault(st.unit.layer, []).append(st)
    atlas = GridAtlas(target_class, strips, bands, [], stats=list(stats))
    for layer, members in by_layer.items():
        n = len(members)
        if n < strips * bands:
            msg = f"{n} units is fewer than {strips * bands} cells"
            atlas.skipped[layer] = msg
            log.warning("skipping layer %s: %s", layer, msg)
            continue
        atlas.layers.append(layer)
        ordered = sorted(members, key=lambda s: (s.selectivity, s.unit.index))
        for si, strip in enumerate(_cuts(ordered, strips)):
            strip = sorted(strip, key=lambda s: (s.magnitude, s.unit.index))
            for bi, band in enumerate(_cuts(strip, bands)):
                atlas.cells[(layer, si, bi)] = sorted(s.unit.index for s in band)
                for s in band:
                    atlas.assignment[s.unit] = (si, bi)
    return atlas


def build_atlas(acts: ActivationMatrix, target, strips=4, bands=4, comparison=None, seed=0,
                subsample=None, magnitude_mode="rotated") -> GridAtlas:
    stats = unit_stats(acts, target, comparison, seed, subsample, magnitude_mode)
    return partition_grid(stats, strips, bands, target_class=int(target))
