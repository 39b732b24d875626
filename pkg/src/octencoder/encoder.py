"""Windowed multi-head attention blocks, branch fusion and task heads.

Tokens of several meshes are processed as one flat ``(N, D)`` array; a window
index of shape ``(W, K)`` (``-1`` marks padding) selects the rows that attend
to each other, so windows never straddle meshes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .embedding import CpeParams, TokenSequence, cpe_conv
from .errors import ShapeError
from .octree import Octree, WindowPartition, dilated_grouping, partition_windows
from .tensorcore import ParamStore, Tensor

BLOCK_PARAMS = ("ln1.g", "ln1.b", "attn.Wq", "attn.bq", "attn.Wk", "attn.bk", "attn.Wv", "attn.bv",
                "attn.Wo", "attn.bo", "ln2.g", "ln2.b", "mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2")


@dataclass
class BlockParams:
    tensors: dict[str, Tensor]
    heads: int

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    @property
    def dim(self) -> int:
        return self.tensors["attn.Wq"].shape[0]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, heads: int) -> "BlockParams":
        return cls({k: store[f"{prefix}.{k}"] for k in BLOCK_PARAMS}, heads)


def init_block(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator,
               mlp_ratio: int = 4) -> None:
    hidden = mlp_ratio * dim
    for name in BLOCK_PARAMS:
        full = f"{prefix}.{name}"
        if name.endswith(".g"):
            store.add(full, np.ones(dim))
        elif name.startswith("attn.W"):
            store.add(full, tc.xavier_uniform(rng, dim, dim))
        elif name.startswith("attn.b") or name in ("ln1.b", "ln2.b", "mlp.b2"):
            store.add(full, np.zeros(dim))
        elif name == "mlp.W1":
            store.add(full, tc.xavier_uniform(rng, dim, hidden))
        elif name == "mlp.b1":
            store.add(full, np.zeros(hidden))
        elif name == "mlp.W2":
            store.add(full, tc.xavier_uniform(rng, hidden, dim))


@dataclass(frozen=True)
class ScheduleEntry:
    type: str = "local"
    window: int = 32
    stride: int = 1

    def partition(self, L: int) -> WindowPartition:
        if self.type == "local":
            return partition_windows(L, self.window)
        if self.type == "dilated":
            return dilated_grouping(L, self.window, self.stride)
        raise ValueError(f"unknown schedule entry type {self.type!r}")


def combined_index(lengths: Sequence[int], entry: ScheduleEntry) -> np.ndarray:
    """Window index over concatenated sequences; each sequence is partitioned alone."""
    rows = []
    offset = 0
    for L in lengths:
        idx = entry.partition(L).index
        rows.append(np.where(idx < 0, -1, idx + offset))
        offset += L
    if not rows:
        return np.zeros((0, entry.window), dtype=np.int64)
    return np.concatenate(rows, axis=0)


def attention_block(x: Tensor, index: np.ndarray, block: BlockParams) -> Tensor:
    """Pre-norm windowed MHSA + GELU MLP, both residual."""
    N, D = x.shape
    H = block.heads
    if D % H:
        raise ShapeError(f"model dim {D} not divisible by {H} heads")
    dh = D // H
    W, K = index.shape
    valid = index >= 0
    if valid.sum() != N:
        raise ShapeError(f"partition covers {int(valid.sum())} slots for {N} tokens")
    pos = np.full(N, -1, dtype=np.int64)
    pos[index[valid]] = np.flatnonzero(valid.ravel())
    if (pos < 0).any():
        raise ShapeError("partition does not cover every token exactly once")

    h = tc.layer_norm(x, block["ln1.g"], block["ln1.b"])
    w_qkv = tc.concat([block["attn.Wq"], block["attn.Wk"], block["attn.Wv"]], axis=1)
    b_qkv = tc.concat([block["attn.bq"], block["attn.bk"], block["attn.bv"]], axis=0)
    qkv = tc.linear(h, w_qkv, b_qkv)
    g = tc.gather(qkv, index, unique=True).reshape(W, K, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = g[0], g[1], g[2]
    scores = tc.scale(tc.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    attn = tc.softmax(scores, mask=valid[:, None, None, :])
    out = tc.matmul(attn, v).transpose(0, 2, 1, 3).reshape(W * K, D)
    out = tc.gather(out, pos, unique=True)
    x = tc.add(x, tc.linear(out, block["attn.Wo"], block["attn.bo"]))

    h = tc.layer_norm(x, block["ln2.g"], block["ln2.b"])
    h = tc.gelu(tc.linear(h, block["mlp.W1"], block["mlp.b1"]))
    return tc.add(x, tc.linear(h, block["mlp.W2"], block["mlp.b2"]))


def windowed_attention(tokens: TokenSequence, partition: WindowPartition,
                       block: BlockParams) -> TokenSequence:
    if partition.num_tokens != len(tokens):
        raise ShapeError(f"partition covers {partition.num_tokens} tokens, sequence has {len(tokens)}")
    out = attention_block(tokens.embeddings, partition.index, block)
    return TokenSequence(out, tokens.leaf_ranks, tokens.branch_id)


def run_blocks(x: Tensor, lengths: Sequence[int], schedule: Sequence[ScheduleEntry],
               blocks: Sequence[BlockParams], cpes: Sequence[tuple[np.ndarray, CpeParams] | None] = ()) -> Tensor:
    """Apply ``blocks`` in order; ``cpes[i]`` (if given) runs before block ``i``."""
    if not schedule:
        raise ValueError("empty block schedule")
    if len(schedule) != len(blocks):
        raise ValueError(f"schedule has {len(schedule)} entries for {len(blocks)} blocks")
    for i, (entry, block) in enumerate(zip(schedule, blocks)):
        if i < len(cpes) and cpes[i] is not None:
            nbrs, cpe = cpes[i]
            x = cpe_conv(x, nbrs, cpe.kernel, cpe.bias)
        x = attention_block(x, combined_index(lengths, entry), block)
    return x


def encode(branch_tokens: Sequence[TokenSequence], octrees: Sequence[Octree],
           blocks: Sequence[BlockParams], schedule: Sequence[ScheduleEntry],
           cpe: Sequence[Sequence[CpeParams | None]] | None = None) -> list[TokenSequence]:
    """Per branch: optional CPE taps (``cpe[branch][block]``), then the block schedule."""
    outs = []
    for b, (tok, tree) in enumerate(zip(branch_tokens, octrees)):
        taps = []
        if cpe is not None:
            taps = [None if p is None else (tree.neighbor_table, p) for p in cpe[b]]
        x = run_blocks(tok.embeddings, [len(tok)], schedule, blocks, taps)
        outs.append(TokenSequence(x, tok.leaf_ranks, tok.branch_id))
    return outs


# ---------------------------------------------------------------- pooling, fusion, heads


def segment_mean_matrix(lengths: Sequence[int]) -> np.ndarray:
    """(B, N) averaging matrix for concatenated sequences."""
    N = int(sum(lengths))
    A = np.zeros((len(lengths), N))
    off = 0
    for i, L in enumerate(lengths):
        A[i, off:off + L] = 1.0 / L
        off += L
    return A


def masked_mean_pool(x: Tensor, lengths: Sequence[int]) -> Tensor:
    return tc.matmul(Tensor(segment_mean_matrix(lengths)), x)


def fusion_weights(logits: Tensor | None, k: int) -> Tensor:
    if logits is None:
        return Tensor(np.full(k, 1.0 / k))
    if logits.shape != (k,):
        raise ShapeError(f"fusion logits {logits.shape} for {k} branches")
    return tc.softmax(logits.reshape(1, k)).reshape(k)


def fuse(branch_vectors: Sequence[Tensor], logits: Tensor | None) -> Tensor:
    """Softmax(logits)-weighted sum of per-branch pooled vectors (each (D,) or (B, D))."""
    k = len(branch_vectors)
    dims = {v.shape[-1] for v in branch_vectors}
    if len(dims) != 1:
        raise ShapeError(f"branch vectors have mismatched dims {sorted(dims)}")
    w = fusion_weights(logits, k)
    stacked = tc.stack(list(branch_vectors))
    w = w.reshape((k,) + (1,) * (stacked.ndim - 1))
    return tc.tsum(tc.mul(stacked, w), axis=0)


def classify(fused: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return tc.linear(fused if fused.ndim == 2 else fused.reshape(1, -1), W, b)


def segment(tokens: Tensor, point_to_leaf: np.ndarray, W: Tensor, b: Tensor) -> Tensor:
    """Per-leaf logits, broadcast to points through ``point_to_leaf``."""
    return tc.gather(tc.linear(tokens, W, b), point_to_leaf)
