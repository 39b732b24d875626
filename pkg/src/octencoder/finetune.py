"""Supervised finetuning of a (pretrained or freshly initialised) encoder.

A task head is attached on top of the encoder: ``classify`` reads the fused,
pooled branch vector and ``segment`` reads branch-0 vertex tokens.  Metrics
are computed on a held-out split after every epoch so that the number of
epochs needed to hit a target accuracy can be compared between inits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .config import RunConfig
from .errors import ConfigError, DataError
from .mae import optimizer_step
from .model import Sample, classify_logits, init_params, segment_logits
from .seeding import rng_for
from .tensorcore import ParamStore

log = logging.getLogger(__name__)

TASKS = ("classify", "segment")


@dataclass
class FinetuneResult:
    params: ParamStore
    history: list[dict] = field(default_factory=list)
    epochs_to_target: int | None = None

    @property
    def final(self) -> dict:
        return self.history[-1] if self.history else {}


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def classification_metrics(pred: np.ndarray, labels: np.ndarray) -> dict:
    """Accuracy plus sensitivity/specificity for class 1 vs class 0 (None when undefined)."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return {"accuracy": None, "sensitivity": None, "specificity": None}
    pos, neg = labels == 1, labels == 0
    return {
        "accuracy": float(np.mean(pred == labels)),
        "sensitivity": _ratio(int(np.sum(pred[pos] == 1)), int(pos.sum())),
        "specificity": _ratio(int(np.sum(pred[neg] == 0)), int(neg.sum())),
    }


def mean_iou(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float | None:
    """Mean over classes with a non-empty union; None if every union is empty."""
    scores = []
    for c in range(num_classes):
        p, t = pred == c, labels == c
        union = int(np.sum(p | t))
        if union:
            scores.append(np.sum(p & t) / union)
    return float(np.mean(scores)) if scores else None


def check_compatible(pretrained: ParamStore, pre_config: RunConfig | None,
                     config: RunConfig, num_features: int) -> None:
    if pre_config is not None:
        a, b = pre_config.encoder_signature(), config.encoder_signature()
        diff = sorted(k for k in a if a[k] != b[k])
        if diff:
            raise ConfigError("checkpoint is incompatible with the finetuning config: "
                              + ", ".join(f"{k} {a[k]!r} != {b[k]!r}" for k in diff))
    if "branch0.proj.W" not in pretrained:
        raise ConfigError("checkpoint holds no encoder parameters")
    F = pretrained["branch0.proj.W"].shape[0] - 3
    if F != num_features:
        raise ConfigError(f"checkpoint expects {F} feature channels, dataset has {num_features}")
    D = pretrained["branch0.proj.W"].shape[1]
    if D != config.model.dim:
        raise ConfigError(f"checkpoint model dim {D} != config dim {config.model.dim}")


def build_params(config: RunConfig, num_features: int, task: str, num_classes: int,
                 pretrained: ParamStore | None = None,
                 pre_config: RunConfig | None = None) -> ParamStore:
    """Fresh encoder + head; encoder tensors are overwritten from ``pretrained`` if given."""
    store = init_params(config, num_features, decoder=False, task=task, num_classes=num_classes)
    if pretrained is None:
        return store
    check_compatible(pretrained, pre_config, config, num_features)
    for name, t in store.items():
        if name.startswith("head."):
            continue
        if name not in pretrained:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        src = pretrained[name].data
        if src.shape != t.data.shape:
            raise ConfigError(f"parameter {name!r}: checkpoint shape {src.shape} != {t.data.shape}")
        t.data[...] = src
    return store


def _targets(task: str, samples: Sequence[Sample]) -> np.ndarray:
    if task == "classify":
        if any(s.label is None for s in samples):
            raise DataError("classification needs a label for every mesh")
        return np.array([s.label for s in samples], dtype=np.int64)
    if any(s.vertex_labels is None for s in samples):
        raise DataError("segmentation needs per-vertex labels for every mesh")
    for s in samples:
        if len(s.vertex_labels) != s.mesh.num_vertices:
            raise DataError(f"{s.mesh.name}: {len(s.vertex_labels)} vertex labels "
                            f"for {s.mesh.num_vertices} vertices")
    return np.concatenate([s.vertex_labels for s in samples]).astype(np.int64)


def _logits(store: ParamStore, config: RunConfig, task: str, samples: Sequence[Sample]):
    fn = classify_logits if task == "classify" else segment_logits
    return fn(store, config, samples)


def predict(store: ParamStore, config: RunConfig, task: str, samples: Sequence[Sample],
            batch_size: int = 32) -> np.ndarray:
    out = []
    for s0 in range(0, len(samples), batch_size):
        out.append(_logits(store, config, task, samples[s0:s0 + batch_size]).data.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(store: ParamStore, config: RunConfig, task: str, samples: Sequence[Sample],
             num_classes: int = 2) -> dict:
    y = _targets(task, samples)
    pred = predict(store, config, task, samples)
    if task == "classify":
        return classification_metrics(pred, y)
    return {"accuracy": float(np.mean(pred == y)), "iou": mean_iou(pred, y, num_classes)}


def finetune(pretrained: ParamStore | None, train: Sequence[Sample], test: Sequence[Sample],
             config: RunConfig, task: str | None = None, pre_config: RunConfig | None = None,
             num_classes: int | None = None) -> FinetuneResult:
    """Train a task head (and the encoder unless frozen) with cross-entropy.

    ``pretrained=None`` is the random-init baseline.  History rows carry the
    train loss and held-out metrics; ``epochs_to_target`` is the first epoch
    whose held-out score (accuracy, or IoU for segmentation) reaches the target.
    """
    ft = config.finetune
    task = task or ft.task
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if not train:
        raise DataError("finetuning needs at least one training mesh")
    feats = {s.mesh.num_features for s in list(train) + list(test)}
    if len(feats) != 1:
        raise DataError(f"inconsistent feature channel counts across dataset: {sorted(feats)}")
    y_train = _targets(task, train)
    if num_classes is None:
        num_classes = max(2, int(y_train.max()) + 1)
    if y_train.min() < 0 or y_train.max() >= num_classes:
        raise DataError(f"labels must lie in [0, {num_classes})")

    store = build_params(config, feats.pop(), task, num_classes, pretrained, pre_config)
    if ft.freeze_encoder:
        store.freeze(n for n in store.names() if not n.startswith("head."))

    result = FinetuneResult(store)
    n = len(train)
    for epoch in range(1, ft.epochs + 1):
        order = rng_for(config.seed, "shuffle", 1, epoch).permutation(n)
        losses = []
        for s0 in range(0, n, ft.batch_size):
            batch = [train[i] for i in order[s0:s0 + ft.batch_size]]
            store.zero_grad()
            loss = tc.cross_entropy(_logits(store, config, task, batch), _targets(task, batch))
            tc.backward(loss)
            optimizer_step(store, config, ft.lr)
            losses.append(float(loss.data))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if test:
            row.update(evaluate(store, config, task, test, num_classes))
        result.history.append(row)
        score = row.get("accuracy" if task == "classify" else "iou")
        log.info("finetune epoch %d loss=%.5f score=%s", epoch, row["loss"], score)
        if result.epochs_to_target is None and score is not None and score >= ft.target_accuracy:
            result.epochs_to_target = epoch
            if ft.stop_at_target:
                break
    return result
