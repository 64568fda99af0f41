import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import probe_fd_check
from oracles import rank_oracle
from planted import PLANTED, planted_dataset, planted_model
from unit_atlas import engine
from unit_atlas.atlas import build_atlas, capture_activations, partition_grid, UnitStats
from unit_atlas.engine import AblationMask, UnitId
from unit_atlas.errors import ValidationError
from unit_atlas.probe import (
    ProbeConfig,
    ProbeModel,
    baseline_ranks,
    cell_rank_deficit,
    class_rank,
    class_ranks,
    evaluate_probe,
    fit_linear_probe,
    probe_loss_and_grad,
    ranks_from_logits,
    run_all_cells,
)
from unit_atlas.synth import generate_dataset
from unit_atlas.train import build_model


# -- ranks --------------------------------------------------------------------

def test_rank_examples():
    p = [0.1, 0.7, 0.2]
    assert class_rank(p, 1) == 1
    assert class_rank(p, 0) == 3
    assert class_rank([0.4, 0.4, 0.2], 1) == 2
    assert class_rank([0.4, 0.4, 0.2], 0) == 1
    with pytest.raises(ValidationError):
        class_rank(p, 3)


@given(st.lists(st.integers(0, 6), min_size=2, max_size=10), st.data())
def test_rank_matches_sort_oracle(raw, data):
    p = np.array(raw, dtype=float) / max(1, sum(raw))
    c = data.draw(st.integers(0, len(raw) - 1))
    r = class_rank(p, c)
    assert r == rank_oracle(p.tolist(), c)
    assert 1 <= r <= len(raw)
    assert class_ranks(p[None], [c])[0] == r


@given(st.lists(st.integers(-40, 40), min_size=2, max_size=10), st.integers(1, 1000), st.data())
def test_rank_invariant_to_logit_shift(logits, shift, data):
    z = np.array(logits, dtype=float)
    c = data.draw(st.integers(0, len(logits) - 1))
    a = ranks_from_logits(z[None], [c])[0]
    b = ranks_from_logits((z + shift)[None], [c])[0]
    assert a == b


# -- ablation -----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_run():
    model = build_model("default", (3, 16, 16), 4, seed=5)
    ds = generate_dataset(4, 12, (3, 16, 16), 0.4, seed=6)
    acts = capture_activations(model, ds)
    atlas = build_atlas(acts, 2)
    base = baseline_ranks(model, ds)
    return model, ds, acts, atlas, base


def test_empty_cell_scores_zero(small_run):
    model, ds, acts, atlas, base = small_run
    atlas.cells[("fc1", 0, 0)] = []
    try:
        summary, records = cell_rank_deficit(model, ds, atlas, ("fc1", 0, 0), 2, base)
    finally:
        atlas.cells[("fc1", 0, 0)] = sorted(u.index for u, c in atlas.assignment.items()
                                           if u.layer == "fc1" and c == (0, 0))
    assert summary["mean_rank_deficit"] == 0.0
    assert "empty cell" in summary["warnings"]
    assert all(r.deficit == 0 for r in records)


def test_zero_downstream_cell_scores_zero(small_run):
    model, ds, acts, atlas, base = small_run
    cell = ("fc1", 3, 3)
    units = atlas.cell_units(*cell)
    w = np.array(model.weights["fc2.weight"])
    w[:, units] = 0.0
    quiet = model.with_weights({"fc2.weight": w})
    summary, records = cell_rank_deficit(quiet, ds, atlas, cell, 2, baseline_ranks(quiet, ds))
    assert summary["mean_rank_deficit"] == 0.0
    assert summary["n_images_scored"] == 12


def test_deficit_bounds_and_records(small_run):
    model, ds, acts, atlas, base = small_run
    C = ds.n_classes
    for cell in atlas.cell_keys():
        summary, records = cell_rank_deficit(model, ds, atlas, cell, 2, base)
        for r in records:
            assert 1 <= r.baseline_rank <= C and 1 <= r.ablated_rank <= C
            assert 1 - C <= r.deficit <= C - 1
        assert summary["mean_rank_deficit"] == pytest.approx(np.mean([r.deficit for r in records]))


def test_missing_baseline(small_run):
    model, ds, acts, atlas, base = small_run
    with pytest.raises(ValidationError):
        cell_rank_deficit(model, ds, atlas, ("fc1", 0, 0), 2, None)
    with pytest.raises(ValidationError):
        cell_rank_deficit(model, ds, atlas, ("fc1", 0, 0), 2, base[:-1])


def test_all_class_scope(small_run):
    model, ds, acts, atlas, base = small_run
    summary, records = cell_rank_deficit(model, ds, atlas, ("conv2", 3, 3), 2, base, scope="all")
    assert summary["n_images_scored"] == len(ds) == len(records)


def test_planted_indicator_deficit():
    ds = planted_dataset(target=1)
    model = planted_model(target=1)
    base = baseline_ranks(model, ds)
    assert np.all(base[ds.labels == 1] == 1)
    atlas = build_atlas(capture_activations(model, ds), 1)
    cell = ("conv1",) + atlas.assignment[UnitId(*PLANTED)]
    summary, _ = cell_rank_deficit(model, ds, atlas, cell, 1, base)
    assert summary["mean_rank_deficit"] >= 1


def test_ablation_leaves_upstream_untouched(small_run):
    model, ds, acts, atlas, base = small_run
    x = ds.as_float()
    mask = atlas.cell_mask("conv2", 3, 3)
    upstream = model.upstream("conv2") - {"conv2"}
    _, a = engine.forward_batch(model, x, taps=upstream)
    _, b = engine.forward_batch(model, x, mask, taps=upstream)
    for k in upstream:
        assert np.array_equal(a[k], b[k])


# -- probes -------------------------------------------------------------------

def test_probe_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(30, 5))
    y = rng.integers(0, 4, 30)
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    l2 = 1e-2
    worst, _ = probe_fd_check(lambda w_, b_: probe_loss_and_grad(w_, b_, z, y, l2), w, b, 50, seed=0)
    assert worst < 1e-4


def test_perfect_feature_probe():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(5), 20)
    feat = np.c_[(labels == 3).astype(float), rng.normal(size=100)]
    probe = fit_linear_probe(feat, labels, 0.8, seed=0)
    assert evaluate_probe(probe, feat, labels, 3) == 1.0
    assert evaluate_probe(probe, feat, labels, 3, rows=probe.train_rows, allow_train_rows=True) == 1.0


def test_shuffled_labels_give_chance_recall():
    recalls = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(8), 100)
        feats = rng.normal(size=(800, 4))
        shuffled = rng.permutation(labels)
        probe = fit_linear_probe(feats, shuffled, 0.8, seed=seed, iters=200)
        recalls.append(evaluate_probe(probe, feats, shuffled, 0))
    assert abs(np.mean(recalls) - 1 / 8) <= 0.1


def test_probe_deterministic_and_monotone():
    rng = np.random.default_rng(2)
    labels = np.repeat(np.arange(3), 30)
    feats = rng.normal(size=(90, 3)) + labels[:, None]
    a = fit_linear_probe(feats, labels, 0.8, seed=4)
    b = fit_linear_probe(feats, labels, 0.8, seed=4)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
    assert a.meta["monotone"]
    assert np.all(np.isfinite(a.weight))


def test_lr_backoff_on_rising_loss():
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(3), 30)
    feats = rng.normal(size=(90, 3)) * 5 + labels[:, None]
    probe = fit_linear_probe(feats, labels, 0.8, seed=0, lr=50.0, iters=50)
    assert probe.meta["lr_used"] < 50.0


def test_constant_features_degenerate():
    labels = np.repeat(np.arange(3), 10)
    probe = fit_linear_probe(np.ones((30, 2)), labels, 0.8, seed=0)
    assert probe.degenerate and probe.meta["dropped_columns"] == [0, 1]
    assert np.all(probe.weight == 0)


def test_constant_column_dropped():
    labels = np.repeat(np.arange(2), 10)
    feats = np.c_[np.ones(20), labels.astype(float)]
    probe = fit_linear_probe(feats, labels, 0.8, seed=0)
    assert probe.meta["dropped_columns"] == [0]
    assert evaluate_probe(probe, feats, labels, 1) == 1.0


def _fixed_probe(weight, bias, n_units):
    return ProbeModel(np.asarray(weight, float), np.asarray(bias, float), np.zeros(n_units), np.ones(n_units),
                      np.ones(n_units, bool), np.array([0, 1]), np.arange(2, 10))


def test_evaluate_probe_rules():
    labels = np.array([0, 1, 2, 1, 1, 2, 0, 1, 2, 1])
    feats = np.random.default_rng(0).normal(size=(10, 2))
    always_two = _fixed_probe(np.zeros((3, 2)), [0.0, 0.0, 1.0], 2)
    assert evaluate_probe(always_two, feats, labels, 2) == 1.0
    zero = _fixed_probe(np.zeros((3, 2)), np.zeros(3), 2)
    assert evaluate_probe(zero, feats, labels, 0) == 1.0
    assert evaluate_probe(zero, feats, labels, 1) == 0.0
    with pytest.raises(ValidationError):
        evaluate_probe(zero, feats, labels, 1, rows=np.array([0, 5]))
    with pytest.raises(ValidationError):
        evaluate_probe(zero, feats, labels, 1, rows=np.array([2, 5]))


def test_probe_needs_two_classes():
    with pytest.raises(ValidationError):
        fit_linear_probe(np.ones((4, 1)), [1, 1, 1, 1], (np.arange(3), np.array([3])))


# -- all cells ----------------------------------------------------------------

def test_run_all_cells_count_and_determinism(small_run):
    model, ds, acts, atlas, base = small_run
    cfg = ProbeConfig(iters=100)
    a = run_all_cells(model, ds, atlas, 2, cfg, acts=acts, baseline=base)
    assert len(atlas.layers) == 3 and len(a) == 48
    assert [(r.layer, r.strip, r.band) for r in a] == atlas.cell_keys()
    b = run_all_cells(model, ds, atlas, 2, cfg, workers=3)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    for r in a:
        assert r.error is None
        assert 0.0 <= r.probe_accuracy <= 1.0
        summary, _ = cell_rank_deficit(model, ds, atlas, (r.layer, r.strip, r.band), 2, base)
        assert r.mean_rank_deficit == summary["mean_rank_deficit"]
        assert r.n_images_scored == 12
        assert r.n_probe_images == int(round(12 * 0.2))


def test_run_all_cells_rejects_wrong_target(small_run):
    model, ds, acts, atlas, base = small_run
    with pytest.raises(ValidationError):
        run_all_cells(model, ds, atlas, 1, acts=acts, baseline=base)


def test_failed_cell_recorded(small_run):
    model, ds, acts, atlas, base = small_run
    broken = build_atlas(acts, 2)
    broken.cells[("fc1", 1, 1)] = [999]
    res = run_all_cells(model, ds, broken, 2, ProbeConfig(iters=20), acts=acts, baseline=base)
    bad = [r for r in res if r.error]
    assert [(r.layer, r.strip, r.band) for r in bad] == [("fc1", 1, 1)]
    assert len(res) == 48
