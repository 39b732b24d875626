import numpy as np
import pytest

from conftest import tiny_config
from octencoder.errors import ConfigError, DataError
from octencoder.finetune import (build_params, classification_metrics, evaluate, finetune, mean_iou)
from octencoder.mae import pretrain
from octencoder.model import fused_embedding, init_params, prepare_samples
from octencoder.synth import make_shape, random_rotation


def shapes(n, seed=0, divisions=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        kind = "box" if i % 2 else "sphere"
        mesh, seg = make_shape(kind, rng.uniform(0.6, 1.2, size=3), random_rotation(rng),
                               rng.uniform(-0.3, 0.3, size=3), divisions, name=f"s{i}")
        out.append((mesh, i % 2, seg))
    return out


def samples(cfg, items, labels=None):
    meshes = [m for m, _, _ in items]
    labels = [lab for _, lab, _ in items] if labels is None else labels
    return prepare_samples(meshes, cfg, labels=labels, vertex_labels=[s for _, _, s in items])


def test_metrics_examples():
    m = classification_metrics(np.array([1, 0, 1, 1]), np.array([1, 0, 0, 1]))
    assert m == {"accuracy": 0.75, "sensitivity": 1.0, "specificity": 0.5}


def test_one_class_metrics_absent_not_zero():
    m = classification_metrics(np.array([1, 0, 1]), np.ones(3, dtype=int))
    assert m["specificity"] is None and m["sensitivity"] == 2 / 3
    m = classification_metrics(np.zeros(2, dtype=int), np.zeros(2, dtype=int))
    assert m["sensitivity"] is None and m["specificity"] == 1.0


def test_mean_iou():
    pred, lab = np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])
    assert mean_iou(pred, lab, 2) == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-15)
    assert mean_iou(pred, lab, 3) == mean_iou(pred, lab, 2)      # empty union skipped
    assert mean_iou(np.zeros(0), np.zeros(0), 2) is None


def test_frozen_encoder_linearly_separable():
    cfg = tiny_config(finetune={"epochs": 200, "lr": 0.05, "batch_size": 4, "freeze_encoder": True})
    items = shapes(16, seed=3)
    train = samples(cfg, items, labels=[0] * 16)
    # labels: a fixed linear function of the fused features the fresh encoder produces
    store = init_params(cfg, 2, decoder=False, task="classify", num_classes=2)
    z = fused_embedding(store, cfg, train).data
    proj = z @ np.random.default_rng(0).normal(size=z.shape[1])
    labels = (proj > np.median(proj)).astype(int).tolist()
    train = samples(cfg, items, labels=labels)
    res = finetune(None, train, [], cfg)
    assert evaluate(res.params, cfg, "classify", train)["accuracy"] == 1.0
    for name, t in store.items():
        if not name.startswith("head."):
            assert np.array_equal(res.params[name].data, t.data), name


def test_pretrained_weights_are_loaded():
    cfg = tiny_config()
    pre, _ = pretrain([m for m, _, _ in shapes(2)], cfg)
    store = build_params(cfg, 2, "classify", 2, pre, cfg)
    for name, t in store.items():
        if name.startswith("head."):
            assert name not in pre
        else:
            assert np.array_equal(t.data, pre[name].data)


@pytest.mark.parametrize("change", [
    {"model": {"dim": 16}},
    {"branches": [{"kind": "face-centroids", "depth": 3}]},
])
def test_incompatible_checkpoint(change):
    cfg = tiny_config()
    pre = init_params(cfg, 2)
    with pytest.raises(ConfigError):
        build_params(tiny_config(**change), 2, "classify", 2, pre, cfg)


def test_feature_count_mismatch_rejected():
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        build_params(cfg, 3, "classify", 2, init_params(cfg, 2), cfg)


def test_classification_history_and_target():
    cfg = tiny_config(finetune={"epochs": 3, "target_accuracy": 0.0, "stop_at_target": True})
    items = shapes(8)
    res = finetune(None, samples(cfg, items[:6]), samples(cfg, items[6:]), cfg)
    assert res.epochs_to_target == 1 and len(res.history) == 1
    assert set(res.final) == {"epoch", "loss", "accuracy", "sensitivity", "specificity"}


def test_segmentation_reports_iou():
    cfg = tiny_config(finetune={"epochs": 2, "task": "segment"})
    items = shapes(4)
    res = finetune(None, samples(cfg, items[:3]), samples(cfg, items[3:]), cfg)
    row = res.final
    assert 0.0 <= row["iou"] <= 1.0 and 0.0 <= row["accuracy"] <= 1.0


def test_missing_labels():
    cfg = tiny_config()
    items = shapes(2)
    unlabeled = prepare_samples([m for m, _, _ in items], cfg)
    with pytest.raises(DataError):
        finetune(None, unlabeled, [], cfg)
    with pytest.raises(ConfigError):
        finetune(None, samples(cfg, items), [], cfg, task="regress")


def test_finetune_is_deterministic():
    cfg = tiny_config(finetune={"epochs": 2})
    items = shapes(6)
    a = finetune(None, samples(cfg, items[:4]), samples(cfg, items[4:]), cfg)
    b = finetune(None, samples(cfg, items[:4]), samples(cfg, items[4:]), cfg)
    assert a.history == b.history
