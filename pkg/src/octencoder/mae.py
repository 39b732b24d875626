"""Masked-autoencoder pretraining on octree tokens.

The reconstruction target of a masked token is its leaf's mean normalised
coordinate and mean feature vector.  The loss is

    chamfer({x_hat}, {x}) + lam * mean_i ||f_hat_i - f_i||^2

with the Chamfer term summed (not averaged) in both directions unless
``chamfer_normalize`` is set.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, save_resolved
from .errors import ConfigError, DataError
from .mesh_io import Mesh
from .model import Sample, decode_branch, encode_branch, init_params, prepare_samples
from .octree import Octree, OctreeCache
from .seeding import rng_for
from .tensorcore import ParamStore, Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "total", "chamfer", "feat")


@dataclass(frozen=True)
class MaskSpec:
    length: int
    ratio: float
    masked: np.ndarray
    visible: np.ndarray
    seed: tuple


def mask_count(L: int, ratio: float) -> int:
    # round() is round-half-to-even; at least one token stays visible
    return min(round(ratio * L), L - 1)


def make_mask(L: int, ratio: float, seed) -> MaskSpec:
    if L < 1:
        raise ValueError("cannot mask an empty sequence")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    m = mask_count(L, ratio)
    masked = np.sort(rng.choice(L, size=m, replace=False)).astype(np.int64)
    keep = np.ones(L, dtype=bool)
    keep[masked] = False
    return MaskSpec(L, ratio, masked, np.flatnonzero(keep).astype(np.int64), seed)


# ---------------------------------------------------------------- chamfer


def _sqdist(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    dx = P[:, None, 0] - Q[None, :, 0]
    dy = P[:, None, 1] - Q[None, :, 1]
    dz = P[:, None, 2] - Q[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def nearest(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index in Q of each point's nearest neighbour (lowest index on ties) and its squared distance."""
    d = _sqdist(P, Q)
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(P)), idx]


def _seq_sum(v: np.ndarray) -> float:
    return float(np.cumsum(v)[-1]) if len(v) else 0.0


def chamfer(P, Q, normalize: bool = False) -> float:
    """Two-directional sum of squared nearest-neighbour distances (left-to-right sums)."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("chamfer distance of an empty point set")
    fwd = _seq_sum(nearest(P, Q)[1])
    bwd = _seq_sum(nearest(Q, P)[1])
    if normalize:
        return fwd / len(P) + bwd / len(Q)
    return fwd + bwd


@dataclass
class ReconTarget:
    coords: np.ndarray      # (m, 3)
    features: np.ndarray    # (m, F)


def recon_target(octree: Octree, mask: MaskSpec) -> ReconTarget:
    return ReconTarget(octree.coords[mask.masked], octree.features[mask.masked])


def mae_loss(predictions: Sequence[Tensor] | Tensor, targets: Sequence[ReconTarget] | ReconTarget,
             lam: float = 1.0, normalize: bool = False) -> tuple[Tensor, list[tuple[float, float, float]]]:
    """Mean over samples of ``chamfer + lam * feature MSE``.

    ``predictions`` is one ``(sum m_i, 3 + F)`` tensor (rows grouped by sample)
    or a single sample's tensor.  Returns the differentiable total and a
    ``(total, chamfer, feat)`` triple per sample; empty samples count as 0.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if isinstance(targets, ReconTarget):
        targets = [targets]
    pred = predictions if isinstance(predictions, Tensor) else tc.concat(list(predictions), axis=0)
    sizes = [len(t.coords) for t in targets]
    if sum(sizes) != pred.shape[0]:
        raise ValueError(f"{pred.shape[0]} predictions for {sum(sizes)} targets")
    B = len(targets)
    stats = []
    rows, tgt, wts = [], [], []
    frows, ftgt, fw = [], [], []
    off = 0
    P_all = pred.data[:, :3]
    for t, m in zip(targets, sizes):
        if m == 0:
            stats.append((0.0, 0.0, 0.0))
            continue
        P = P_all[off:off + m]
        Q = t.coords
        nn_pq, d_pq = nearest(P, Q)
        nn_qp, d_qp = nearest(Q, P)
        wf = 1.0 / (B * m) if normalize else 1.0 / B
        rows += [off + np.arange(m), off + nn_qp]
        tgt += [Q[nn_pq], Q]
        wts.append(np.full(2 * m, wf))
        ch = (_seq_sum(d_pq) + _seq_sum(d_qp)) / (m if normalize else 1.0)
        F = t.features.shape[1]
        feat = 0.0
        if F:
            err = pred.data[off:off + m, 3:] - t.features
            feat = float(np.mean((err * err).sum(axis=1)))
            frows.append(off + np.arange(m))
            ftgt.append(t.features)
            fw.append(np.full(m, lam / (B * m)))
        stats.append((ch + lam * feat, ch, feat))
        off += m
    if not rows:
        return tc.scale(tc.tsum(pred), 0.0), stats
    xyz = pred[:, :3]
    d = tc.sub(tc.gather(xyz, np.concatenate(rows)), np.concatenate(tgt, axis=0))
    total = tc.tsum(tc.mul(tc.tsum(tc.square(d), axis=1), np.concatenate(wts)))
    if frows:
        f = pred[:, 3:]
        e = tc.sub(tc.gather(f, np.concatenate(frows)), np.concatenate(ftgt, axis=0))
        total = tc.add(total, tc.tsum(tc.mul(tc.tsum(tc.square(e), axis=1), np.concatenate(fw))))
    return total, stats


# ---------------------------------------------------------------- forward


def mae_forward(octree: Octree, params: ParamStore, mask: MaskSpec, config: RunConfig,
                branch: int = 0) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(xyz_hat (m, 3), feat_hat (m, F), visible latents)``."""
    if mask.length != len(octree):
        raise ValueError(f"mask built for {mask.length} tokens, octree has {len(octree)}")
    latents, _ = encode_branch(params, config, [octree], branch, [mask.visible])
    F = octree.num_features
    if len(mask.masked) == 0:
        return Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, F))), latents
    pred = decode_branch(params, config, [octree], latents, [mask.visible], [mask.masked])
    return pred[:, :3], pred[:, 3:], latents


def batch_loss(params: ParamStore, config: RunConfig, samples: Sequence[Sample],
               masks: Sequence[Sequence[MaskSpec]]) -> tuple[Tensor, np.ndarray]:
    """Loss averaged over samples and branches; ``masks[i][b]`` masks sample i, branch b.

    Returns the loss and a (B, 3) array of per-sample (total, chamfer, feat).
    """
    nb = len(config.branches)
    lam = config.mae.lam
    total = None
    per_sample = np.zeros((len(samples), 3))
    for b in range(nb):
        trees = [s.trees[b] for s in samples]
        mks = [m[b] for m in masks]
        latents, _ = encode_branch(params, config, trees, b, [m.visible for m in mks])
        targets = [recon_target(t, m) for t, m in zip(trees, mks)]
        if sum(len(m.masked) for m in mks) == 0:
            continue
        pred = decode_branch(params, config, trees, latents, [m.visible for m in mks],
                             [m.masked for m in mks])
        loss_b, stats = mae_loss(pred, targets, lam, config.mae.chamfer_normalize)
        per_sample += np.array(stats) / nb
        loss_b = tc.scale(loss_b, 1.0 / nb)
        total = loss_b if total is None else tc.add(total, loss_b)
    if total is None:
        total = Tensor(0.0)
    return total, per_sample


def epoch_masks(config: RunConfig, samples: Sequence[Sample], indices: Sequence[int],
                epoch: int) -> list[list[MaskSpec]]:
    salt = epoch if config.mae.resample_masks else 0
    r = config.mae.mask_ratio
    return [[make_mask(len(s.trees[b]), r, (config.seed, 1, salt, i, b))
             for b in range(len(config.branches))]
            for i, s in zip(indices, samples)]


# ---------------------------------------------------------------- training loop


def lr_at(config: RunConfig, epoch: int, base: float | None = None, epochs: int | None = None) -> float:
    lr = config.optim.lr if base is None else base
    E = config.optim.epochs if epochs is None else epochs
    if config.optim.lr_schedule == "cosine" and E > 0:
        return lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / E))
    return lr


def optimizer_step(params: ParamStore, config: RunConfig, lr: float) -> None:
    o = config.optim
    if o.optimizer == "adam":
        tc.adam_step(params, lr, o.beta1, o.beta2, o.eps, o.weight_decay)
    else:
        tc.sgd_step(params, lr, o.weight_decay)


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if k != "epoch" else row[k]) for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_FIELDS[1:]}}
                for r in csv.DictReader(fh)]


def check_dataset(meshes: Sequence[Mesh]) -> int:
    if not meshes:
        raise DataError("dataset is empty")
    feats = {m.num_features for m in meshes}
    if len(feats) != 1:
        raise DataError(f"inconsistent feature channel counts across dataset: {sorted(feats)}")
    return feats.pop()


def pretrain(meshes: Sequence[Mesh] | Sequence[Sample], config: RunConfig, out_dir=None,
             resume=None, params: ParamStore | None = None,
             cache: OctreeCache | None = None) -> tuple[ParamStore, list[dict]]:
    """Masked-reconstruction pretraining; returns parameters and per-epoch mean losses."""
    if meshes and isinstance(meshes[0], Sample):
        samples = list(meshes)
        F = check_dataset([s.mesh for s in samples])
    else:
        F = check_dataset(meshes)
        samples = prepare_samples(meshes, config, cache)
    history: list[dict] = []
    start = 0
    if resume is not None:
        params, ck_config, manifest = load_checkpoint(resume)
        if ck_config.digest() != config.digest():
            raise ConfigError("resume checkpoint was written with a different config")
        start = manifest["epoch"]
        history = [dict(h) for h in manifest["extra"].get("history", [])]
    elif params is None:
        params = init_params(config, F, decoder=True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        save_resolved(config, out)
    n = len(samples)
    bs = config.optim.batch_size
    for epoch in range(start + 1, config.optim.epochs + 1):
        order = rng_for(config.seed, "shuffle", epoch).permutation(n)
        lr = lr_at(config, epoch)
        stats = np.zeros((n, 3))
        for s0 in range(0, n, bs):
            idx = order[s0:s0 + bs]
            batch = [samples[i] for i in idx]
            masks = epoch_masks(config, batch, idx, epoch)
            params.zero_grad()
            loss, per = batch_loss(params, config, batch, masks)
            stats[idx] = per
            if loss.requires_grad:
                tc.backward(loss)
                optimizer_step(params, config, lr)
        # sum in sample-index order so the epoch mean ignores shuffling
        mean = [_seq_sum(stats[:, j]) / n for j in range(3)]
        row = {"epoch": epoch, "total": mean[0], "chamfer": mean[1], "feat": mean[2]}
        history.append(row)
        log.info("epoch %d total=%.6f chamfer=%.6f feat=%.6f", epoch, *mean)
        if out is not None:
            write_history(out / "history.csv", history)
            every = config.optim.checkpoint_every
            if (every and epoch % every == 0) or epoch == config.optim.epochs:
                save_checkpoint(out / f"epoch-{epoch:05d}", params, config, epoch,
                                rng_state=rng_for(config.seed, "shuffle", epoch + 1).bit_generator.state,
                                extra={"history": history})
    return params, history
