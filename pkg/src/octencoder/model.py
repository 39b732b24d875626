"""Parameter layout and batched forward passes shared by pretraining and finetuning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .config import RunConfig
from .embedding import CpeParams, payload, project, subset_neighbors
from .encoder import (BlockParams, fuse, init_block, masked_mean_pool, run_blocks)
from .errors import ConfigError, DataError
from .mesh_io import Mesh
from .octree import Octree, OctreeCache
from .seeding import rng_for
from .simplex import rep_points
from .tensorcore import ParamStore, Tensor


@dataclass
class Sample:
    mesh: Mesh
    trees: list[Octree]
    label: int | None = None
    vertex_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def prepare_samples(meshes: Sequence[Mesh], config: RunConfig, cache: OctreeCache | None = None,
                    labels: Sequence[int] | None = None,
                    vertex_labels: Sequence[np.ndarray] | None = None) -> list[Sample]:
    cache = cache or OctreeCache()
    samples = []
    feats = {m.num_features for m in meshes}
    if len(feats) > 1:
        raise DataError(f"inconsistent feature channel counts across dataset: {sorted(feats)}")
    for i, mesh in enumerate(meshes):
        trees = []
        for spec in config.branches:
            pts = rep_points(mesh, spec.kind)
            trees.append(cache.get(pts, spec.depth, spec.curve))
        samples.append(Sample(mesh, trees,
                              None if labels is None else int(labels[i]),
                              None if vertex_labels is None else np.asarray(vertex_labels[i])))
    return samples


# ---------------------------------------------------------------- parameters


def _cpe_taps(config: RunConfig) -> int:
    if not config.model.cpe:
        return 0
    return len(config.model.schedule) if config.model.cpe_per_block else 1


def init_params(config: RunConfig, num_features: int, decoder: bool = True,
                task: str | None = None, num_classes: int = 2) -> ParamStore:
    m = config.model
    D = m.dim
    rng = rng_for(config.seed, "init")
    store = ParamStore()
    for k, _ in enumerate(config.branches):
        store.add(f"branch{k}.proj.W", tc.xavier_uniform(rng, 3 + num_features, D))
        store.add(f"branch{k}.proj.b", np.zeros(D))
        for i in range(_cpe_taps(config)):
            bound = 1.0 / np.sqrt(27.0)
            store.add(f"branch{k}.cpe{i}.kernel", rng.uniform(-bound, bound, size=(27, D)))
            store.add(f"branch{k}.cpe{i}.bias", np.zeros(D))
    for i in range(len(m.schedule)):
        init_block(store, f"encoder.block{i}", D, rng, m.mlp_ratio)
    store.add("encoder.norm.g", np.ones(D))
    store.add("encoder.norm.b", np.zeros(D))
    if m.fusion:
        store.add("fusion.logits", np.zeros(len(config.branches)))
    if decoder:
        add_decoder(store, config, num_features, rng)
    if task is not None:
        add_head(store, config, task, num_classes)
    return store


def add_decoder(store: ParamStore, config: RunConfig, num_features: int,
                rng: np.random.Generator) -> None:
    m = config.model
    D = m.dim
    store.add("decoder.mask_token", rng.normal(0.0, 0.02, size=D))
    store.add("decoder.pos.W", tc.xavier_uniform(rng, 3, D))
    store.add("decoder.pos.b", np.zeros(D))
    for i in range(len(m.decoder_schedule)):
        init_block(store, f"decoder.block{i}", D, rng, m.mlp_ratio)
    store.add("decoder.norm.g", np.ones(D))
    store.add("decoder.norm.b", np.zeros(D))
    store.add("decoder.head.W", tc.xavier_uniform(rng, D, 3 + num_features))
    store.add("decoder.head.b", np.zeros(3 + num_features))


def add_head(store: ParamStore, config: RunConfig, task: str, num_classes: int) -> None:
    rng = rng_for(config.seed, "head")
    D = config.model.dim
    store.add(f"head.{task}.W", tc.xavier_uniform(rng, D, num_classes))
    store.add(f"head.{task}.b", np.zeros(num_classes))


def num_features_of(store: ParamStore) -> int:
    return store["branch0.proj.W"].shape[0] - 3


def encoder_blocks(store: ParamStore, config: RunConfig) -> list[BlockParams]:
    return [BlockParams.from_store(store, f"encoder.block{i}", config.model.heads)
            for i in range(len(config.model.schedule))]


def decoder_blocks(store: ParamStore, config: RunConfig) -> list[BlockParams]:
    return [BlockParams.from_store(store, f"decoder.block{i}", config.model.heads)
            for i in range(len(config.model.decoder_schedule))]


def cpe_params(store: ParamStore, config: RunConfig, branch: int) -> list[CpeParams]:
    return [CpeParams(store[f"branch{branch}.cpe{i}.kernel"], store[f"branch{branch}.cpe{i}.bias"])
            for i in range(_cpe_taps(config))]


# ---------------------------------------------------------------- forward passes


def encode_branch(store: ParamStore, config: RunConfig, trees: Sequence[Octree], branch: int,
                  ranks: Sequence[np.ndarray] | None = None) -> tuple[Tensor, list[int]]:
    """Encode the tokens ``ranks[i]`` (default: all) of each tree; returns flat latents."""
    if ranks is None:
        ranks = [np.arange(len(t)) for t in trees]
    lengths = [len(r) for r in ranks]
    if any(n == 0 for n in lengths):
        raise DataError("cannot encode an empty token sequence")
    x_np = np.concatenate([payload(t, r) for t, r in zip(trees, ranks)], axis=0)
    x = project(x_np, store[f"branch{branch}.proj.W"], store[f"branch{branch}.proj.b"])
    taps = []
    cpes = cpe_params(store, config, branch)
    if cpes:
        nbrs, off = [], 0
        for t, r, n in zip(trees, ranks, lengths):
            sub = subset_neighbors(t, r)
            nbrs.append(np.where(sub < 0, -1, sub + off))
            off += n
        nbr = np.concatenate(nbrs, axis=0)
        taps = [(nbr, c) for c in cpes]
    x = run_blocks(x, lengths, config.schedule(), encoder_blocks(store, config), taps)
    return tc.layer_norm(x, store["encoder.norm.g"], store["encoder.norm.b"]), lengths


def coarse_positions(tree: Octree, coarsen: int) -> np.ndarray:
    """Centre of each leaf's ancestor cell ``coarsen`` levels up, in [0, 1]^3."""
    level = max(tree.depth - coarsen, 0)
    g = tree.grid >> (tree.depth - level)
    return (g + 0.5) / float(1 << level)


def decode_branch(store: ParamStore, config: RunConfig, trees: Sequence[Octree],
                  latents: Tensor, visible: Sequence[np.ndarray],
                  masked: Sequence[np.ndarray]) -> Tensor:
    """Predict ``[xyz, features]`` for every masked rank, concatenated in sample order."""
    D = config.model.dim
    nv = latents.shape[0]
    table = tc.concat([latents, store["decoder.mask_token"].reshape(1, D)], axis=0)
    rows, pos, lengths, targets = [], [], [], []
    v_off = a_off = 0
    for tree, vis, msk in zip(trees, visible, masked):
        L = len(tree)
        idx = np.full(L, nv, dtype=np.int64)
        idx[vis] = v_off + np.arange(len(vis))
        rows.append(idx)
        pos.append(coarse_positions(tree, config.mae.pos_coarsen))
        targets.append(a_off + np.asarray(msk, dtype=np.int64))
        lengths.append(L)
        v_off += len(vis)
        a_off += L
    x = tc.gather(table, np.concatenate(rows))
    x = tc.add(x, tc.linear(Tensor(np.concatenate(pos, axis=0)),
                            store["decoder.pos.W"], store["decoder.pos.b"]))
    x = run_blocks(x, lengths, config.decoder_schedule(), decoder_blocks(store, config))
    x = tc.layer_norm(x, store["decoder.norm.g"], store["decoder.norm.b"])
    x = tc.gather(x, np.concatenate(targets), unique=True)
    return tc.linear(x, store["decoder.head.W"], store["decoder.head.b"])


def fused_embedding(store: ParamStore, config: RunConfig, samples: Sequence[Sample]) -> Tensor:
    pooled = []
    for b in range(len(config.branches)):
        x, lengths = encode_branch(store, config, [s.trees[b] for s in samples], b)
        pooled.append(masked_mean_pool(x, lengths))
    logits = store["fusion.logits"] if config.model.fusion else None
    return fuse(pooled, logits)


def classify_logits(store: ParamStore, config: RunConfig, samples: Sequence[Sample]) -> Tensor:
    fused = fused_embedding(store, config, samples)
    return tc.linear(fused, store["head.classify.W"], store["head.classify.b"])


def segment_logits(store: ParamStore, config: RunConfig, samples: Sequence[Sample]) -> Tensor:
    """Per-vertex logits (concatenated over samples) from branch 0's leaf tokens."""
    if config.branches[0].kind != "vertices":
        raise ConfigError("segmentation requires branch 0 to use kind='vertices'")
    trees = [s.trees[0] for s in samples]
    x, lengths = encode_branch(store, config, trees, 0)
    offs = np.cumsum([0] + lengths[:-1])
    p2l = np.concatenate([t.point_to_leaf + o for t, o in zip(trees, offs)])
    leaf_logits = tc.linear(x, store["head.segment.W"], store["head.segment.b"])
    return tc.gather(leaf_logits, p2l)
