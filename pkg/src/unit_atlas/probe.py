"""Per-cell linear probes and per-cell ablation rank deficits."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine
from .atlas import ActivationMatrix, GridAtlas, capture_activations
from .engine import AblationMask, ModelGraph
from .errors import ValidationError
from .store import Dataset
from .train import stratified_split

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ranks
# ---------------------------------------------------------------------------

def class_rank(probs, correct) -> int:
    """1-based position of ``correct`` when classes are sorted by descending
    probability; equal probabilities rank the lower class index first."""
    p = np.asarray(probs)
    c = int(correct)
    if not 0 <= c < p.shape[-1]:
        raise ValidationError(f"class {c} out of range for {p.shape[-1]} classes")
    pc = p[c]
    return int(1 + np.sum(p > pc) + np.sum(p[:c] == pc))


def class_ranks(probs, correct) -> np.ndarray:
    """Row-wise :func:`class_rank` for a ``[n, C]`` probability matrix."""
    p = np.asarray(probs)
    c = np.asarray(correct, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() >= p.shape[1]):
        raise ValidationError("class index out of range")
    pc = p[np.arange(len(c)), c][:, None]
    lower = np.arange(p.shape[1])[None, :] < c[:, None]
    return (1 + (p > pc).sum(axis=1) + ((p == pc) & lower).sum(axis=1)).astype(np.int64)


def ranks_from_logits(logits, correct) -> np.ndarray:
    return class_ranks(engine.softmax_raw(np.asarray(logits, dtype=np.float64)), correct)


@dataclass(frozen=True)
class RankRecord:
    image: int
    baseline_rank: int
    ablated_rank: int

    @property
    def deficit(self) -> int:
        return self.ablated_rank - self.baseline_rank


def baseline_ranks(model: ModelGraph, dataset: Dataset, workers=1) -> np.ndarray:
    """Rank of the correct class for every dataset image on the intact model."""
    logits, _ = engine.forward_batch(model, dataset.as_float(), workers=workers)
    return ranks_from_logits(logits, dataset.labels)


def cell_rank_deficit(model: ModelGraph, dataset: Dataset, atlas: GridAtlas, cell, target, baseline,
                      workers=1, scope="target"):
    """Ablate every unit of ``cell`` and score how far the correct class falls.

    Returns ``(summary, records)``; ``summary`` holds ``mean_rank_deficit``,
    ``n_images_scored`` and ``n_units``. ``scope="all"`` averages over every
    image instead of the target class only.
    """
    if baseline is None:
        raise ValidationError("baseline ranks are required")
    baseline = np.asarray(baseline)
    if baseline.shape != (len(dataset),):
        raise ValidationError(f"baseline has {baseline.shape} entries, dataset has {len(dataset)} images")
    layer, strip, band = cell
    units = atlas.cell_units(layer, strip, band)
    if scope == "target":
        rows = np.flatnonzero(dataset.labels == int(target))
    elif scope == "all":
        rows = np.arange(len(dataset))
    else:
        raise ValidationError("scope must be 'target' or 'all'")
    summary = {"mean_rank_deficit": 0.0, "n_images_scored": int(len(rows)), "n_units": len(units),
               "warnings": []}
    if not units:
        summary["warnings"].append("empty cell")
        log.warning("cell %s is empty; deficit set to 0", cell)
        return summary, [RankRecord(int(r), int(baseline[r]), int(baseline[r])) for r in rows]
    mask = AblationMask.for_units(layer, units)
    logits, _ = engine.forward_batch(model, dataset.as_float(rows), mask, workers=workers)
    ablated = ranks_from_logits(logits, dataset.labels[rows])
    records = [RankRecord(int(r), int(baseline[r]), int(a)) for r, a in zip(rows, ablated)]
    deficits = ablated - baseline[rows]
    summary["mean_rank_deficit"] = float(deficits.sum() / len(rows)) if len(rows) else 0.0
    return summary, records


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeModel:
    """Multinomial logistic regression on standardised cell activations.

    ``weight`` has one column per cell unit; dropped (constant) columns hold
    zeros and are ignored at prediction time.
    """

    weight: np.ndarray              # [C, n_units], acts on standardised features
    bias: np.ndarray                # [C]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    kept: np.ndarray                # bool [n_units]
    train_rows: np.ndarray
    eval_rows: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def degenerate(self) -> bool:
        return not bool(self.kept.any())

    def logits(self, features):
        x = np.asarray(features, dtype=np.float64)[:, self.kept]
        z = (x - self.feature_mean[self.kept]) / self.feature_std[self.kept]
        return z @ self.weight[:, self.kept].T + self.bias

    def predict(self, features):
        return np.argmax(self.logits(features), axis=1)


def probe_loss_and_grad(weight, bias, z, y, l2):
    """Mean softmax cross-entropy plus ``l2/2 * |W|^2``; gradients for W and b."""
    logits = z @ weight.T + bias
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * float(np.sum(weight * weight))
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g.T @ z + l2 * weight, g.sum(axis=0)


def _descend(z, y, n_classes, lr, iters, l2):
    w = np.zeros((n_classes, z.shape[1]))
    b = np.zeros(n_classes)
    losses = []
    for _ in range(iters):
        loss, gw, gb = probe_loss_and_grad(w, b, z, y, l2)
        losses.append(loss)
        w -= lr * gw
        b -= lr * gb
    final, _, _ = probe_loss_and_grad(w, b, z, y, l2)
    losses.append(final)
    return w, b, losses


def fit_linear_probe(features, labels, split=0.8, seed=0, l2=1e-3, iters=500, lr=0.1,
                     n_classes=None, max_backoff=3) -> ProbeModel:
    """Full-batch gradient descent on a multinomial logistic probe.

    ``split`` is either a train fraction (stratified, seeded) or an explicit
    ``(train_rows, eval_rows)`` pair. If the loss ever rises, training restarts
    with a tenth of the step size, up to ``max_backoff`` times.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValidationError("probe needs a non-empty [n, k] feature matrix")
    if isinstance(split, (float, int)):
        train_rows, eval_rows = stratified_split(y, float(split), seed, "probe")
    else:
        train_rows, eval_rows = (np.asarray(r, dtype=np.int64) for r in split)
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    ytr = y[train_rows]
    if len(np.unique(ytr)) < 2:
        raise ValidationError("probe training rows need at least two classes")
    xtr = x[train_rows]
    mean = xtr.mean(axis=0)
    std = xtr.std(axis=0)
    kept = std > 0
    dropped = np.flatnonzero(~kept).tolist()
    safe_std = np.where(kept, std, 1.0)
    z = (xtr[:, kept] - mean[kept]) / safe_std[kept]

    step = lr
    for attempt in range(max_backoff + 1):
        w, b, losses = _descend(z, ytr, n_classes, step, iters, l2)
        rising = any(later > earlier for earlier, later in zip(losses, losses[1:]))
        if not rising or attempt == max_backoff:
            break
        step /= 10
    weight = np.zeros((n_classes, x.shape[1]))
    weight[:, kept] = w
    meta = {
        "iterations": iters,
        "final_loss": float(losses[-1]),
        "seed": seed,
        "lr": lr,
        "lr_used": step,
        "l2": l2,
        "dropped_columns": dropped,
        "degenerate": not bool(kept.any()),
        "monotone": not rising,
    }
    return ProbeModel(weight, b, mean, safe_std, kept, train_rows, eval_rows, meta)


def evaluate_probe(probe: ProbeModel, features, labels, target, rows=None, allow_train_rows=False) -> float:
    """Recall of ``target`` among the evaluation rows of that class."""
    y = np.asarray(labels)
    rows = probe.eval_rows if rows is None else np.asarray(rows, dtype=np.int64)
    if not allow_train_rows and np.intersect1d(rows, probe.train_rows).size:
        raise ValidationError("evaluation rows overlap the probe's training rows")
    rows = rows[y[rows] == int(target)]
    if len(rows) == 0:
        raise ValidationError(f"no evaluation images of class {target}")
    pred = probe.predict(np.asarray(features)[rows])
    return float(np.mean(pred == int(target)))


# ---------------------------------------------------------------------------
# all cells
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    lr: float = 0.1
    iters: int = 500
    l2: float = 1e-3
    split: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.iters < 1 or self.l2 < 0:
            raise ValidationError("probe needs lr > 0, iters >= 1, l2 >= 0")
        if not 0 < self.split < 1:
            raise ValidationError("probe split must lie in (0, 1)")


@dataclass
class CellResult:
    target_class: int
    layer: str
    strip: int
    band: int
    mean_rank_deficit: float | None
    probe_accuracy: float | None
    n_units: int
    n_images_scored: int
    n_probe_images: int
    probe_meta: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _probe_cell(acts, atlas, cell, target, train_rows, eval_rows, n_classes, cfg):
    layer, strip, band = cell
    units = [(layer, i) for i in atlas.cell_units(*cell)]
    cols = acts.columns(units)
    probe = fit_linear_probe(acts.values[:, cols], acts.labels, (train_rows, eval_rows), cfg.seed,
                             cfg.l2, cfg.iters, cfg.lr, n_classes)
    acc = evaluate_probe(probe, acts.values[:, cols], acts.labels, target)
    n_eval = int(np.sum(acts.labels[eval_rows] == target))
    meta = {k: probe.meta[k] for k in ("final_loss", "lr_used", "degenerate", "dropped_columns", "monotone")}
    return acc, n_eval, meta


def run_all_cells(model: ModelGraph, dataset: Dataset, atlas: GridAtlas, target, config: ProbeConfig | None = None,
                  acts: ActivationMatrix | None = None, baseline=None, workers=1,
                  parts=("ablation", "probe")) -> list[CellResult]:
    """Probe accuracy and ablation deficit for every cell of ``atlas``.

    ``parts`` selects which of the two measurements to run; the other field
    stays None.

    Baseline ranks and the unablated activation matrix are computed once (or
    taken from the caller) and shared by all cells. Results come back in
    (layer, strip, band) order whatever the worker count.
    """
    config = config or ProbeConfig()
    target = int(target)
    if atlas.target_class is not None and int(atlas.target_class) != target:
        raise ValidationError(f"atlas was built for class {atlas.target_class}, not {target}")
    parts = set(parts)
    if not parts or parts - {"ablation", "probe"}:
        raise ValidationError(f"parts must be a non-empty subset of ablation, probe; got {sorted(parts)}")
    if "ablation" in parts and baseline is None:
        baseline = baseline_ranks(model, dataset, workers)
    if acts is None:
        acts = capture_activations(model, dataset, workers=workers)
    if not np.array_equal(acts.image_ids, np.arange(len(dataset))):
        raise ValidationError("activation matrix rows must cover the dataset in order")
    train_rows, eval_rows = stratified_split(acts.labels, config.split, config.seed, "probe")

    def job(cell):
        layer, strip, band = cell
        res = CellResult(target, layer, strip, band, None, None, len(atlas.cell_units(*cell)), 0, 0)
        try:
            if "ablation" in parts:
                summary, _ = cell_rank_deficit(model, dataset, atlas, cell, target, baseline)
                res.mean_rank_deficit = summary["mean_rank_deficit"]
                res.n_images_scored = summary["n_images_scored"]
                res.warnings.extend(summary["warnings"])
            if "probe" in parts and res.n_units:
                res.probe_accuracy, res.n_probe_images, res.probe_meta = _probe_cell(
                    acts, atlas, cell, target, train_rows, eval_rows, dataset.n_classes, config)
        except Exception as exc:  # recorded per cell; the run carries on
            log.error("cell %s failed: %s", cell, exc)
            res.error = f"{type(exc).__name__}: {exc}"
        return res

    cells = atlas.cell_keys()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(job, cells))
    return [job(c) for c in cells]
