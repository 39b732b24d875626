"""Token projection and conditional positional encoding (CPE).

CPE is a 3x3x3 depthwise convolution over occupied leaves at token depth with
zero padding for empty or out-of-grid cells, added residually to its input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ShapeError
from .octree import Octree
from .tensorcore import Tensor


@dataclass
class TokenSequence:
    embeddings: Tensor          # (L, D)
    leaf_ranks: np.ndarray      # (L,)
    branch_id: int = 0

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class CpeParams:
    kernel: Tensor              # (27, D)
    bias: Tensor                # (D,)


def payload(octree: Octree, ranks: np.ndarray | None = None) -> np.ndarray:
    """``[coord; feature]`` rows, coordinates first."""
    x = np.concatenate([octree.coords, octree.features], axis=1)
    return x if ranks is None else x[ranks]


def project(x: np.ndarray | Tensor, W: Tensor, b: Tensor) -> Tensor:
    if W.shape[0] != x.shape[1]:
        raise ShapeError(f"projection expects {W.shape[0] - 3} feature channels, "
                         f"payload has {x.shape[1] - 3}")
    return tc.linear(tc.as_tensor(x), W, b)


def project_tokens(octree: Octree, W: Tensor, b: Tensor, branch_id: int = 0) -> TokenSequence:
    emb = project(payload(octree), W, b)
    return TokenSequence(emb, np.arange(len(octree)), branch_id)


def cpe_conv(x: Tensor, neighbors: np.ndarray, kernel: Tensor, bias: Tensor) -> Tensor:
    """``x + sum_o kernel[o] * x[nbr(o)] + bias`` with ``neighbors`` (L, 27), -1 = absent."""
    L, D = x.shape
    if neighbors.shape != (L, 27):
        raise ShapeError(f"neighbour table {neighbors.shape} does not match {L} tokens")
    gathered = tc.gather(x, neighbors)                     # (L, 27, D), zeros where absent
    conv = tc.tsum(tc.mul(gathered, kernel), axis=1)
    return tc.add(tc.add(x, conv), bias)


def apply_cpe(tokens: TokenSequence, octree: Octree, cpe: CpeParams) -> TokenSequence:
    if len(tokens) != len(octree) or not np.array_equal(tokens.leaf_ranks, np.arange(len(octree))):
        raise ShapeError("tokens are not aligned with the octree leaves")
    out = cpe_conv(tokens.embeddings, octree.neighbor_table, cpe.kernel, cpe.bias)
    return TokenSequence(out, tokens.leaf_ranks, tokens.branch_id)


def subset_neighbors(octree: Octree, ranks: np.ndarray) -> np.ndarray:
    """Neighbour table restricted to ``ranks``; entries point into ``ranks`` order."""
    where = np.full(len(octree) + 1, -1, dtype=np.int64)
    where[ranks] = np.arange(len(ranks))
    table = octree.neighbor_table[ranks]
    return where[np.where(table < 0, len(octree), table)]
