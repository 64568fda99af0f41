"""Command line entry point: ``unit-atlas <subcommand>`` or ``python -m unit_atlas``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import UnitAtlasError, ValidationError
from .store import load_dataset, save_dataset, save_model
from .synth import generate_dataset
from .train import ARCHITECTURES, TrainConfig, train_model

log = logging.getLogger("unit_atlas")

DATAGEN_KEYS = {"out": None, "classes": 8, "per_class": 100, "shape": "3,32,32", "noise": 1.0, "seed": 0}
TRAIN_KEYS = {"dataset": None, "out": None, "arch": "default", "lr": 0.01, "epochs": 15, "batch_size": 32,
              "l2": 1e-4, "momentum": 0.9, "split": 0.8, "seed": 0}


def _read_json(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    return data


def _settings(args, defaults):
    """Defaults, then the config file, then explicit flags; unknown file keys are errors."""
    data = _read_json(args.config)
    for key in data:
        if key not in defaults:
            raise ValidationError(f"unknown config key {key!r}")
    out = {**defaults, **data}
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    for key, v in out.items():
        if v is None:
            raise ValidationError(f"missing required setting {key!r}")
    return out


def _workers(args):
    return args.workers if args.workers is not None else pipeline.env_workers(None)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_datagen(args):
    s = _settings(args, DATAGEN_KEYS)
    shape = tuple(int(v) for v in str(s["shape"]).split(",")) if not isinstance(s["shape"], list) else tuple(s["shape"])
    ds = generate_dataset(int(s["classes"]), int(s["per_class"]), shape, float(s["noise"]), int(s["seed"]),
                          workers=_workers(args) or 1)
    save_dataset(ds, s["out"])
    print(f"wrote {len(ds)} images of shape {ds.image_shape} to {s['out']}")


def cmd_train(args):
    s = _settings(args, TRAIN_KEYS)
    ds = load_dataset(s["dataset"])
    config = TrainConfig(float(s["lr"]), int(s["epochs"]), int(s["batch_size"]), float(s["l2"]), int(s["seed"]),
                         float(s["split"]), float(s["momentum"]))
    model, record = train_model(s["arch"], ds, config)
    out = save_model(model, s["out"])
    (Path(out) / "train_log.json").write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"held-out accuracy {record.final_eval_accuracy}; model written to {out}")


def _run(args):
    overrides = {
        "model": args.model,
        "dataset": args.dataset,
        "out": args.out,
        "target_classes": args.target_class,
        "grid": args.grid,
        "seed": args.seed,
        "magnitude_mode": args.magnitude_mode,
        "comparison_subsample": args.comparison_subsample,
        "workers": _workers(args),
    }
    return pipeline.Run(pipeline.load_config(args.config, overrides))


def cmd_capture(args):
    pipeline.stage_capture(_run(args))


def cmd_atlas(args):
    pipeline.stage_atlas(_run(args))


def cmd_ablate(args):
    pipeline.stage_ablate(_run(args))


def cmd_probe(args):
    pipeline.stage_probe(_run(args))


def cmd_report(args):
    pipeline.stage_report(_run(args))


def cmd_run(args):
    print(f"outputs in {pipeline.pipeline_run(_run(args))}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", metavar="PATH", help="JSON config file; flags override its values")
    p.add_argument("--workers", type=int, metavar="N", help="worker threads (default: $UNIT_ATLAS_WORKERS or 1)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unit-atlas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic image dataset")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--shape", help="C,H,W")
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train a network on a stored dataset")
    _common(p)
    p.add_argument("--dataset", metavar="DIR")
    p.add_argument("--arch", choices=sorted(ARCHITECTURES))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--split", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    stages = {
        "capture": (cmd_capture, "record per-unit activations"),
        "atlas": (cmd_atlas, "compute unit statistics and the selectivity x magnitude grid"),
        "ablate": (cmd_ablate, "score every cell by ablation rank deficit"),
        "probe": (cmd_probe, "score every cell by linear probe recall"),
        "report": (cmd_report, "write results.json, report.csv and SVG heatmaps"),
        "run": (cmd_run, "every stage in order"),
    }
    for name, (fn, help_text) in stages.items():
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--model", metavar="DIR")
        p.add_argument("--dataset", metavar="DIR")
        p.add_argument("--target-class", dest="target_class", action="append", metavar="NAME|INDEX",
                       help="repeat for several classes (default: all)")
        p.add_argument("--grid", metavar="SxM")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--magnitude-mode", dest="magnitude_mode", choices=pipeline.MAGNITUDE_MODES)
        p.add_argument("--comparison-subsample", dest="comparison_subsample", type=int, metavar="K")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UnitAtlasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # stage crash: manifest already marks the failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
