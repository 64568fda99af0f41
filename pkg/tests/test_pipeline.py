import json

import numpy as np
import pytest

from unit_atlas import pipeline
from unit_atlas.atlas import build_atlas, capture_activations
from unit_atlas.cli import main
from unit_atlas.probe import ProbeConfig, baseline_ranks, cell_rank_deficit, fit_linear_probe, evaluate_probe
from unit_atlas.store import load_dataset, load_model, save_dataset, save_model
from unit_atlas.synth import generate_dataset
from unit_atlas.train import TrainConfig, stratified_split, train_model


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("inputs")
    train = generate_dataset(4, 20, (3, 16, 16), 0.5, seed=1)
    model, _ = train_model("default", train, TrainConfig(epochs=3, seed=0))
    save_model(model, root / "model")
    save_dataset(generate_dataset(4, 15, (3, 16, 16), 0.5, seed=2), root / "ds")
    cfg = {"model": str(root / "model"), "dataset": str(root / "ds"), "out": "unused",
           "probe": {"iters": 200}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def run_cli(inputs, out, *extra):
    return main(["run", "--config", str(inputs / "cfg.json"), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def reference(inputs, tmp_path_factory):
    out = tmp_path_factory.mktemp("ref") / "run"
    assert run_cli(inputs, out) == 0
    return out


def test_outputs_and_grid_counts(reference):
    for name in ("atlas.json", "results.json", "baseline.json", "report.csv", "MANIFEST.json"):
        assert (reference / name).is_file()
    res = json.loads((reference / "results.json").read_text())
    per_grid = {}
    for r in res["results"]:
        per_grid.setdefault((r["target_class"], r["layer"]), []).append(r)
    # 4 classes x (conv1, conv2, fc1); the 4-unit output layer is too small for 16 cells
    assert sorted({l for _, l in per_grid}) == ["conv1", "conv2", "fc1"]
    assert len(per_grid) == 12 and all(len(v) == 16 for v in per_grid.values())
    assert all(r["error"] is None for r in res["results"])
    svgs = sorted(p.name for p in (reference / "svg").iterdir())
    assert len(svgs) == 2 * (12 + 4 + 3)
    man = json.loads((reference / "MANIFEST.json").read_text())
    assert man["complete"] and man["completed_stage"] == "report" and man["status"] == "ok"
    assert set(man["stages"]) == set(pipeline.STAGES)


def test_metadata_records_defaults(reference):
    meta = json.loads((reference / "results.json").read_text())["metadata"]
    cfg = meta["config"]
    assert cfg["probe"] == {"lr": 0.1, "iters": 200, "l2": 0.001, "split": 0.8}
    assert cfg["grid"] == [4, 4] and cfg["magnitude_mode"] == "rotated" and cfg["seed"] == 0
    assert "workers" not in cfg and "out" not in cfg
    assert len(meta["model_checksum"]) == 64 and len(meta["dataset_checksum"]) == 64


def test_values_match_isolation_oracle(reference, inputs):
    model = load_model(inputs / "model")
    ds = load_dataset(inputs / "ds")
    res = json.loads((reference / "results.json").read_text())["results"]
    acts = capture_activations(model, ds)
    base = baseline_ranks(model, ds)
    train_rows, eval_rows = stratified_split(ds.labels, 0.8, 0, "probe")
    for target, layer, strip, band in [(0, "conv2", 3, 3), (2, "fc1", 0, 1), (3, "conv1", 1, 2)]:
        atlas = build_atlas(acts, target)
        summary, _ = cell_rank_deficit(model, ds, atlas, (layer, strip, band), target, base)
        cols = acts.columns([(layer, i) for i in atlas.cell_units(layer, strip, band)])
        probe = fit_linear_probe(acts.values[:, cols], ds.labels, (train_rows, eval_rows), 0, 1e-3, 200, 0.1, 4)
        acc = evaluate_probe(probe, acts.values[:, cols], ds.labels, target)
        (row,) = [r for r in res if (r["target_class"], r["layer"], r["strip"], r["band"]) == (target, layer, strip, band)]
        assert row["mean_rank_deficit"] == summary["mean_rank_deficit"]
        assert row["probe_accuracy"] == acc


def test_rerun_byte_identical_any_workers(reference, inputs, tmp_path, monkeypatch):
    assert run_cli(inputs, reference) == 0
    other = tmp_path / "w3"
    assert run_cli(inputs, other, "--workers", "3") == 0
    for name in ("results.json", "report.csv"):
        assert (reference / name).read_bytes() == (other / name).read_bytes()
    assert json.loads((other / "MANIFEST.json").read_text())["workers"] == 3


def test_staged_subcommands_match_run(reference, inputs, tmp_path):
    out = tmp_path / "staged"
    for cmd in ("capture", "atlas", "ablate", "probe", "report"):
        assert main([cmd, "--config", str(inputs / "cfg.json"), "--out", str(out)]) == 0, cmd
    for name in ("results.json", "report.csv", "atlas.json"):
        assert (reference / name).read_bytes() == (out / name).read_bytes()


def test_stage_out_of_order_fails(inputs, tmp_path, capsys):
    rc = main(["report", "--config", str(inputs / "cfg.json"), "--out", str(tmp_path / "x")])
    assert rc != 0
    assert "has not completed" in capsys.readouterr().err


def test_unknown_key_named_before_compute(inputs, tmp_path, capsys):
    cfg = json.loads((inputs / "cfg.json").read_text())
    cfg["magnitude_mod"] = "rotated"
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    out = tmp_path / "never"
    rc = main(["run", "--config", str(tmp_path / "bad.json"), "--out", str(out)])
    assert rc == 2
    assert "magnitude_mod" in capsys.readouterr().err
    assert not out.exists()
    cfg.pop("magnitude_mod")
    cfg["probe"]["momentum"] = 0.9
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "bad.json"), "--out", str(out)]) == 2
    assert "probe.momentum" in capsys.readouterr().err


def test_missing_input_path(tmp_path, capsys):
    rc = main(["run", "--model", str(tmp_path / "nope"), "--dataset", str(tmp_path), "--out", str(tmp_path / "o")])
    assert rc == 2 and "does not exist" in capsys.readouterr().err


def test_failure_keeps_partial_outputs(inputs, tmp_path):
    out = tmp_path / "fail"
    # no layer has 100 units, so the atlas stage fails after capture finished
    assert run_cli(inputs, out, "--grid", "10x10") != 0
    man = json.loads((out / "MANIFEST.json").read_text())
    assert man["status"] == "failed" and man["failed_stage"] == "atlas"
    assert man["completed_stage"] == "capture" and not man["complete"]
    assert (out / "activations" / "activations.bin").is_file()


def test_target_class_by_name_and_index(inputs, tmp_path):
    out = tmp_path / "t"
    assert run_cli(inputs, out, "--target-class", "class2", "--target-class", "0", "--grid", "2x2") == 0
    res = json.loads((out / "results.json").read_text())
    assert res["metadata"]["target_classes"] == [2, 0]
    assert {r["target_class"] for r in res["results"]} == {0, 2}
    # 2x2 admits the 4-unit output layer
    assert {r["layer"] for r in res["results"]} == {"conv1", "conv2", "fc1", "fc2"}
    assert main(["run", "--config", str(inputs / "cfg.json"), "--out", str(out), "--target-class", "zebra"]) == 2


def test_env_workers_fallback(inputs, tmp_path, monkeypatch):
    monkeypatch.setenv("UNIT_ATLAS_WORKERS", "2")
    out = tmp_path / "env"
    assert main(["capture", "--config", str(inputs / "cfg.json"), "--out", str(out)]) == 0
    assert json.loads((out / "MANIFEST.json").read_text())["workers"] == 2
    assert main(["capture", "--config", str(inputs / "cfg.json"), "--out", str(out), "--workers", "1"]) == 0
    assert json.loads((out / "MANIFEST.json").read_text())["workers"] == 1
    monkeypatch.setenv("UNIT_ATLAS_WORKERS", "many")
    assert main(["capture", "--config", str(inputs / "cfg.json"), "--out", str(out)]) == 2


def test_flags_override_file(inputs):
    cfg = pipeline.load_config(inputs / "cfg.json", {"grid": "2x8", "magnitude_mode": "global_mean", "seed": 5})
    assert cfg.grid == (2, 8) and cfg.magnitude_mode == "global_mean" and cfg.seed == 5
    assert cfg.probe["iters"] == 200
    assert cfg.probe_config() == ProbeConfig(0.1, 200, 1e-3, 0.8, 5)
    with pytest.raises(pipeline.ValidationError):
        pipeline.load_config(inputs / "cfg.json", {"grid": "4by4"})
    with pytest.raises(pipeline.ValidationError):
        pipeline.load_config(inputs / "cfg.json", {"grid": "0x4"}).validate()


def test_baseline_cache_keyed_by_checksums(reference, inputs):
    run = pipeline.Run(pipeline.load_config(inputs / "cfg.json", {"out": str(reference)}))
    p = reference / "baseline.json"
    data = json.loads(p.read_text())
    assert data["model_checksum"] == run.model_checksum and data["dataset_checksum"] == run.dataset_checksum
    true_ranks = list(data["ranks"])
    # a cache with matching keys is trusted as is
    data["ranks"] = [7] * len(true_ranks)
    p.write_text(json.dumps(data))
    assert pipeline.cached_baseline(run).tolist() == [7] * len(true_ranks)
    # a stale key forces recomputation
    data["model_checksum"] = "0" * 64
    p.write_text(json.dumps(data))
    assert pipeline.cached_baseline(run).tolist() == true_ranks
    assert json.loads(p.read_text())["model_checksum"] == run.model_checksum


def test_merge_rejects_mismatched_halves(reference):
    a = json.loads((reference / "ablation.json").read_text())["results"]
    p = json.loads((reference / "probes.json").read_text())["results"]
    from unit_atlas.probe import CellResult

    with pytest.raises(pipeline.ValidationError):
        pipeline.merge_results([CellResult.from_dict(r) for r in a], [CellResult.from_dict(r) for r in p[1:]])


def test_datagen_and_train_cli(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert main(["datagen", "--out", str(ds), "--classes", "3", "--per-class", "4", "--shape", "1,8,8"]) == 0
    d = load_dataset(ds)
    assert len(d) == 12 and d.image_shape == (1, 8, 8)
    (tmp_path / "t.json").write_text(json.dumps({"dataset": str(ds), "epochs": 1, "optimizer": "adam"}))
    assert main(["train", "--config", str(tmp_path / "t.json"), "--out", str(tmp_path / "m")]) == 2
    assert "optimizer" in capsys.readouterr().err
    (tmp_path / "t.json").write_text(json.dumps({"dataset": str(ds), "epochs": 1}))
    assert main(["train", "--config", str(tmp_path / "t.json"), "--out", str(tmp_path / "m")]) == 0
    m = load_model(tmp_path / "m")
    assert m.output_shape == (3,)
    log = json.loads((tmp_path / "m" / "train_log.json").read_text())
    assert len(log["epochs"]) == 1
    assert main(["train", "--out", str(tmp_path / "m2")]) == 2


def test_python_dash_m(tmp_path):
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "unit_atlas", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "datagen" in r.stdout
    r = subprocess.run([sys.executable, "-m", "unit_atlas", "run", "--grid", "4x4"], capture_output=True, text=True)
    assert r.returncode != 0
