"""End-to-end runs: capture, atlas, ablation, probes and reports.

Every stage reads its inputs from the output directory written by the stages
before it, so any stage can be rerun on its own. MANIFEST.json records which
stages finished and the checksum of every file each one wrote.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import GridAtlas, build_atlas, capture_activations, load_activations, save_activations
from .errors import UnitAtlasError, ValidationError
from .probe import CellResult, ProbeConfig, baseline_ranks, run_all_cells
from .report import emit_grid_report, write_csv
from .store import load_dataset, load_model, sha256_file

log = logging.getLogger(__name__)

STAGES = ("capture", "atlas", "ablate", "probe", "report")
MAGNITUDE_MODES = ("rotated", "global_mean")
PROBE_KEYS = ("lr", "iters", "l2", "split")
# fields that change where or how fast a run happens but never what it computes
OPERATIONAL = ("out", "workers")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def parse_grid(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).lower().split("x")
    try:
        s, m = (int(p) for p in parts)
    except (TypeError, ValueError):
        raise ValidationError(f"grid must look like SxM, got {text!r}") from None
    return s, m


@dataclass
class RunConfig:
    model: str
    dataset: str
    out: str
    target_classes: list | None = None   # names or indices; None means every class
    grid: tuple = (4, 4)
    magnitude_mode: str = "rotated"
    comparison_subsample: int | None = None
    seed: int = 0                          # comparison subsample and probe split
    probe: dict = field(default_factory=lambda: {"lr": 0.1, "iters": 500, "l2": 1e-3, "split": 0.8})
    workers: int = 1
    base_dir: str = field(default=".", repr=False, compare=False)

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        for key in d:
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
        for key in ("model", "dataset", "out"):
            if key not in d:
                raise ValidationError(f"config is missing required key {key!r}")
        d = dict(d)
        probe = dict(cls.__dataclass_fields__["probe"].default_factory())
        for key, v in (d.pop("probe", None) or {}).items():
            if key not in PROBE_KEYS:
                raise ValidationError(f"unknown config key 'probe.{key}'")
            probe[key] = v
        cfg = cls(probe=probe, base_dir=str(base_dir), **d)
        cfg.grid = parse_grid(cfg.grid)
        if cfg.target_classes is not None and not isinstance(cfg.target_classes, list):
            cfg.target_classes = [cfg.target_classes]
        return cfg

    def path(self, key) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self, need_inputs=True):
        s, m = self.grid
        if s < 1 or m < 1:
            raise ValidationError("grid dimensions must be >= 1")
        if self.magnitude_mode not in MAGNITUDE_MODES:
            raise ValidationError(f"magnitude_mode must be one of {MAGNITUDE_MODES}")
        if self.comparison_subsample is not None and int(self.comparison_subsample) < 1:
            raise ValidationError("comparison_subsample must be >= 1")
        if int(self.workers) < 1:
            raise ValidationError("workers must be >= 1")
        if self.target_classes is not None and not self.target_classes:
            raise ValidationError("target_classes must not be empty")
        self.probe_config()
        if need_inputs:
            for key in ("model", "dataset"):
                if not self.path(key).is_dir():
                    raise ValidationError(f"{key} path {self.path(key)} does not exist")
        return self

    def probe_config(self) -> ProbeConfig:
        p = self.probe
        return ProbeConfig(float(p["lr"]), int(p["iters"]), float(p["l2"]), float(p["split"]), int(self.seed))

    def echo(self) -> dict:
        """Every setting that affects results, defaults included."""
        d = asdict(self)
        for key in OPERATIONAL + ("base_dir",):
            d.pop(key)
        d["grid"] = list(self.grid)
        return d


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a JSON config file and apply flag overrides on top."""
    data, base = {}, "."
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        base = str(path.parent)
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("probe."):
            data.setdefault("probe", {})[key[6:]] = value
        else:
            data[key] = value
    return RunConfig.from_dict(data, base_dir=base)


def env_workers(default=1) -> int:
    raw = os.environ.get("UNIT_ATLAS_WORKERS")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"UNIT_ATLAS_WORKERS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# run state
# ---------------------------------------------------------------------------

class Run:
    """Inputs, output directory and manifest bookkeeping for one run."""

    def __init__(self, config: RunConfig):
        self.config = config.validate()
        self.out = config.path("out")
        self.out.mkdir(parents=True, exist_ok=True)
        self.model = load_model(config.path("model"))
        self.dataset = load_dataset(config.path("dataset"))
        if tuple(self.model.input_shape) != tuple(self.dataset.image_shape):
            raise ValidationError(
                f"model expects images {tuple(self.model.input_shape)}, dataset has {self.dataset.image_shape}")
        if tuple(self.model.output_shape) != (self.dataset.n_classes,):
            raise ValidationError(
                f"model outputs {tuple(self.model.output_shape)}, dataset has {self.dataset.n_classes} classes")
        self.model_checksum = self.model.checksum()
        self.dataset_checksum = self.dataset.checksum()
        self.targets = self._targets()
        self.manifest = self._read_manifest()

    def _targets(self):
        if self.config.target_classes is None:
            return list(range(self.dataset.n_classes))
        out = []
        for t in self.config.target_classes:
            key = int(t) if isinstance(t, str) and t.isdigit() else t
            idx = self.dataset.class_index(key)
            if idx not in out:
                out.append(idx)
        return out

    @property
    def inputs(self):
        return {"model_checksum": self.model_checksum, "dataset_checksum": self.dataset_checksum}

    # -- manifest -----------------------------------------------------------

    def _read_manifest(self):
        p = self.out / "MANIFEST.json"
        if p.exists():
            m = json.loads(p.read_text())
            if m.get("inputs") == self.inputs and m.get("config") == self.config.echo():
                return m
        return {"stages": {}}

    def _write_manifest(self, status, failed=None, error=None):
        done = [s for s in STAGES if s in self.manifest["stages"]]
        self.manifest.update({
            "format_version": 1,
            "package_version": __version__,
            "inputs": self.inputs,
            "config": self.config.echo(),
            "workers": int(self.config.workers),
            "completed_stage": done[-1] if done else None,
            "stages_completed": done,
            "complete": all(s in self.manifest["stages"] for s in STAGES),
            "status": status,
            "failed_stage": failed,
            "error": error,
        })
        (self.out / "MANIFEST.json").write_text(_dump(self.manifest))

    def finish_stage(self, stage, files):
        self.manifest["stages"][stage] = {
            str(Path(f).relative_to(self.out)): sha256_file(f) for f in sorted(files)
        }
        # a rerun of an earlier stage invalidates everything downstream
        for later in STAGES[STAGES.index(stage) + 1:]:
            self.manifest["stages"].pop(later, None)
        self._write_manifest("ok")

    def fail_stage(self, stage, exc):
        self.manifest["stages"].pop(stage, None)
        self._write_manifest("failed", stage, f"{type(exc).__name__}: {exc}")

    def require(self, stage):
        if stage not in self.manifest["stages"]:
            raise ValidationError(f"stage {stage!r} has not completed in {self.out} for these inputs and config")

    def stage(self, name, fn):
        try:
            return fn()
        except Exception as exc:
            self.fail_stage(name, exc)
            raise

    # -- artefact readers ---------------------------------------------------

    def activations(self):
        self.require("capture")
        return load_activations(self.out / "activations")

    def atlases(self) -> dict:
        self.require("atlas")
        data = json.loads((self.out / "atlas.json").read_text())
        return {a["target_class"]: GridAtlas.from_dict(a) for a in data["atlases"]}

    def _cells(self, name, stage):
        self.require(stage)
        data = json.loads((self.out / name).read_text())
        return [CellResult.from_dict(r) for r in data["results"]]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_capture(run: Run):
    def go():
        acts = capture_activations(run.model, run.dataset, workers=int(run.config.workers))
        d = save_activations(acts, run.out / "activations")
        run.finish_stage("capture", [d / "activations.bin", d / "units.json", d / "images.json"])
        return acts
    return run.stage("capture", go)


def stage_atlas(run: Run, acts=None):
    def go():
        a = acts if acts is not None else run.activations()
        cfg = run.config
        s, m = cfg.grid
        atlases = {}
        for t in run.targets:
            atlas = build_atlas(a, t, s, m, seed=cfg.seed, subsample=cfg.comparison_subsample,
                                magnitude_mode=cfg.magnitude_mode)
            if not atlas.layers:
                raise ValidationError(f"class {t}: no layer has at least {s * m} units for a {s}x{m} grid")
            atlases[t] = atlas
        p = run.out / "atlas.json"
        p.write_text(_dump({"inputs": run.inputs, "grid": [s, m], "magnitude_mode": cfg.magnitude_mode,
                            "atlases": [atlases[t].to_dict() for t in run.targets]}))
        run.finish_stage("atlas", [p])
        return atlases
    return run.stage("atlas", go)


def cached_baseline(run: Run):
    """Baseline ranks, reused from baseline.json when its input keys match."""
    p = run.out / "baseline.json"
    if p.exists():
        data = json.loads(p.read_text())
        if data.get("model_checksum") == run.model_checksum and data.get("dataset_checksum") == run.dataset_checksum:
            return np.array(data["ranks"], dtype=np.int64)
    ranks = baseline_ranks(run.model, run.dataset, int(run.config.workers))
    p.write_text(_dump({**run.inputs, "ranks": ranks.tolist()}))
    return ranks


def _write_cells(run, name, results):
    p = run.out / name
    p.write_text(_dump({"inputs": run.inputs, "results": [r.to_dict() for r in results]}))
    return p


def stage_ablate(run: Run, atlases=None, acts=None):
    def go():
        atl = atlases if atlases is not None else run.atlases()
        base = cached_baseline(run)
        results = []
        for t in run.targets:
            results += run_all_cells(run.model, run.dataset, atl[t], t, run.config.probe_config(), acts=acts,
                                     baseline=base, workers=int(run.config.workers), parts=("ablation",))
        run.finish_stage("ablate", [_write_cells(run, "ablation.json", results), run.out / "baseline.json"])
        return results
    return run.stage("ablate", go)


def stage_probe(run: Run, atlases=None, acts=None):
    def go():
        atl = atlases if atlases is not None else run.atlases()
        a = acts if acts is not None else run.activations()
        results = []
        for t in run.targets:
            results += run_all_cells(run.model, run.dataset, atl[t], t, run.config.probe_config(), acts=a,
                                     workers=int(run.config.workers), parts=("probe",))
        run.finish_stage("probe", [_write_cells(run, "probes.json", results)])
        return results
    return run.stage("probe", go)


def merge_results(ablation, probes) -> list[CellResult]:
    """Join ablation and probe halves of each cell into one record."""
    key = lambda r: (r.target_class, r.layer, r.strip, r.band)
    by_key = {key(p): p for p in probes}
    if set(by_key) != {key(a) for a in ablation}:
        raise ValidationError("ablation and probe outputs cover different cells")
    merged = []
    for a in ablation:
        p = by_key[key(a)]
        errors = [e for e in (a.error, p.error) if e]
        merged.append(CellResult(
            a.target_class, a.layer, a.strip, a.band, a.mean_rank_deficit, p.probe_accuracy, a.n_units,
            a.n_images_scored, p.n_probe_images, p.probe_meta, a.warnings + p.warnings,
            "; ".join(errors) if errors else None,
        ))
    return merged


def run_metadata(run: Run) -> dict:
    pc = run.config.probe_config()
    return {
        "format_version": 1,
        "package_version": __version__,
        **run.inputs,
        "class_names": list(run.dataset.class_names),
        "target_classes": run.targets,
        "config": run.config.echo(),
        "seeds": {"comparison_subsample": run.config.seed, "probe_split": pc.seed},
        "fixed_choices": {
            "conv_unit_summary": "spatial mean of the post-activation map",
            "deficit_images": "target class only",
            "rank_tie_break": "lower class index ranks first",
            "probe": "multinomial logistic regression on standardized features, full-batch gradient descent",
            "probe_score": "held-out recall of the target class",
            "probe_split": "stratified, shared by every cell",
        },
    }


def stage_report(run: Run, results=None):
    def go():
        res = results if results is not None else merge_results(
            run._cells("ablation.json", "ablate"), run._cells("probes.json", "probe"))
        s, m = run.config.grid
        rp = run.out / "results.json"
        rp.write_text(_dump({"metadata": run_metadata(run), "results": [r.to_dict() for r in res]}))
        cp = write_csv(res, run.out / "report.csv")
        svg = run.out / "svg"
        written = []
        for metric in ("deficit", "probe"):
            w, _ = emit_grid_report(res, metric, svg, s, m, run.dataset.class_names)
            written += w
        grids = {(r.target_class, r.layer) for r in res}
        for c, layer in grids:
            for metric in ("deficit", "probe"):
                if not (svg / f"{metric}_class{c}_{layer}.svg").exists():
                    raise UnitAtlasError(f"grid {metric} class {c} layer {layer} was not emitted")
        failed = [r for r in res if r.error]
        if failed:
            log.warning("%d cell(s) failed; see the error field in results.json", len(failed))
        run.finish_stage("report", [rp, cp] + written)
        return res
    return run.stage("report", go)


def pipeline_run(config: RunConfig | Run) -> Path:
    """Run every stage and return the output directory."""
    run = config if isinstance(config, Run) else Run(config)
    acts = stage_capture(run)
    atlases = stage_atlas(run, acts)
    ablation = stage_ablate(run, atlases, acts)
    probes = stage_probe(run, atlases, acts)
    stage_report(run, merge_results(ablation, probes))
    return run.out
