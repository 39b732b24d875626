import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import GRAD_FLOOR, finite_diff, max_rel_error, tiny_config
from octencoder import tensorcore as tc
from octencoder.embedding import CpeParams, TokenSequence
from octencoder.encoder import (BLOCK_PARAMS, BlockParams, ScheduleEntry, attention_block,
                                classify, combined_index, encode, fuse, init_block,
                                masked_mean_pool, run_blocks, segment, windowed_attention)
from octencoder.errors import ShapeError
from octencoder.model import encode_branch, init_params, prepare_samples
from octencoder.octree import dilated_grouping, partition_windows
from octencoder.synth import make_shape
from octencoder.tensorcore import ParamStore, Tensor


def make_block(D=8, H=2, seed=0, scale=1.0, ratio=2):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_block(store, "b", D, rng, ratio)
    for name, t in store.items():          # non-trivial biases and norms too
        t.data[...] = t.data * scale + (0.1 * rng.normal(size=t.shape) if scale else 0.0)
    return BlockParams.from_store(store, "b", H), store


# ---------------------------------------------------------------- numpy reference


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def ref_block(x, index, block):
    """Loop-per-window reference: only real slots ever enter the softmax."""
    p = {k: block[k].data for k in BLOCK_PARAMS}
    H = block.heads
    N, D = x.shape
    dh = D // H
    h = _ln(x, p["ln1.g"], p["ln1.b"])
    q, k, v = h @ p["attn.Wq"] + p["attn.bq"], h @ p["attn.Wk"] + p["attn.bk"], h @ p["attn.Wv"] + p["attn.bv"]
    att = np.zeros_like(x)
    for row in index:
        ids = row[row >= 0]
        for hd in range(H):
            sl = slice(hd * dh, (hd + 1) * dh)
            s = q[ids, sl] @ k[ids, sl].T / math.sqrt(dh)
            w = np.exp(s - s.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            att[ids, sl] = w @ v[ids, sl]
    x = x + att @ p["attn.Wo"] + p["attn.bo"]
    h = _ln(x, p["ln2.g"], p["ln2.b"])
    return x + _gelu(h @ p["mlp.W1"] + p["mlp.b1"]) @ p["mlp.W2"] + p["mlp.b2"]


@given(st.integers(1, 40), st.integers(1, 9), st.integers(1, 4), st.integers(0, 10**6))
def test_block_matches_reference(L, K, s, seed):
    block, _ = make_block(seed=seed % 7)
    x = np.random.default_rng(seed).normal(size=(L, 8))
    index = dilated_grouping(L, K, s).index
    out = attention_block(Tensor(x), index, block).data
    assert np.allclose(out, ref_block(x, index, block), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- examples


def test_single_token_attends_to_itself():
    block, _ = make_block()
    x = np.random.default_rng(1).normal(size=(1, 8))
    out = attention_block(Tensor(x), np.array([[0, -1, -1]]), block).data
    p = {k: block[k].data for k in BLOCK_PARAMS}
    h = _ln(x, p["ln1.g"], p["ln1.b"])
    y = x + (h @ p["attn.Wv"] + p["attn.bv"]) @ p["attn.Wo"] + p["attn.bo"]
    y = y + _gelu(_ln(y, p["ln2.g"], p["ln2.b"]) @ p["mlp.W1"] + p["mlp.b1"]) @ p["mlp.W2"] + p["mlp.b2"]
    assert np.allclose(out, y, rtol=1e-13, atol=1e-13)


def test_identical_tokens_identical_outputs():
    block, _ = make_block()
    row = np.random.default_rng(2).normal(size=(1, 8))
    out = attention_block(Tensor(np.repeat(row, 2, axis=0)), np.array([[0, 1]]), block).data
    assert np.array_equal(out[0], out[1])


def test_zero_weights_are_identity():
    block, store = make_block(scale=0.0)
    for name, t in store.items():
        t.data[...] = 0.0
    x = np.random.default_rng(3).normal(size=(7, 8))
    tok = TokenSequence(Tensor(x), np.arange(7))
    assert np.array_equal(windowed_attention(tok, partition_windows(7, 3), block).embeddings.data, x)
    outs = encode([tok], [None], [block], [ScheduleEntry("local", 3)])
    assert np.array_equal(outs[0].embeddings.data, x)


def test_partition_length_mismatch():
    block, _ = make_block()
    tok = TokenSequence(Tensor(np.zeros((5, 8))), np.arange(5))
    with pytest.raises(ShapeError):
        windowed_attention(tok, partition_windows(6, 3), block)


def test_dim_not_divisible_by_heads():
    block, _ = make_block()
    with pytest.raises(ShapeError):
        attention_block(Tensor(np.zeros((3, 8))), partition_windows(3, 3).index, BlockParams(block.tensors, 3))


def test_empty_schedule_rejected():
    with pytest.raises(ValueError):
        run_blocks(Tensor(np.zeros((3, 8))), [3], [], [])


def test_schedule_uses_dilated_enumeration():
    entries = [ScheduleEntry("local", 3), ScheduleEntry("dilated", 3, 2)]
    assert np.array_equal(combined_index([12], entries[1]), dilated_grouping(12, 3, 2).index)
    assert np.array_equal(combined_index([12], entries[0]), partition_windows(12, 3).index)


def test_combined_index_offsets_sequences():
    idx = combined_index([3, 2], ScheduleEntry("local", 2))
    assert idx.tolist() == [[0, 1], [2, -1], [3, 4]]


def test_batched_sequences_match_individual_runs():
    blocks = [make_block(seed=i)[0] for i in range(2)]
    sched = [ScheduleEntry("local", 4), ScheduleEntry("dilated", 4, 2)]
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(9, 8)), rng.normal(size=(5, 8))
    both = run_blocks(Tensor(np.concatenate([a, b])), [9, 5], sched, blocks).data
    assert np.allclose(both[:9], run_blocks(Tensor(a), [9], sched, blocks).data, rtol=0, atol=1e-13)
    assert np.allclose(both[9:], run_blocks(Tensor(b), [5], sched, blocks).data, rtol=0, atol=1e-13)


# ---------------------------------------------------------------- properties


@given(st.integers(1, 30), st.integers(1, 8), st.integers(1, 3), st.integers(1, 6), st.integers(0, 10**6))
def test_pad_slots_change_nothing(L, K, s, extra, seed):
    block, _ = make_block(seed=seed % 5)
    x = Tensor(np.random.default_rng(seed).normal(size=(L, 8)))
    index = dilated_grouping(L, K, s).index
    padded = np.concatenate([index, np.full((len(index), extra), -1)], axis=1)
    a = attention_block(x, index, block).data
    b = attention_block(x, padded, block).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_window_locality():
    block, _ = make_block(seed=5)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 8))
    part = partition_windows(20, 6)
    base = attention_block(Tensor(x), part.index, block).data
    x2 = x.copy()
    x2[8] += 3.0                                   # window 1 holds ranks 6..11
    moved = attention_block(Tensor(x2), part.index, block).data
    changed = np.flatnonzero(np.any(moved != base, axis=1))
    assert set(changed.tolist()) <= set(range(6, 12)) and 8 in changed


def test_within_window_permutation_equivariance():
    block, _ = make_block(seed=6)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 8))
    index = np.array([[0, 1, 2, 3], [4, 5, 6, 7]])
    perm = np.array([2, 0, 3, 1, 4, 5, 6, 7])
    out = attention_block(Tensor(x), index, block).data
    out_p = attention_block(Tensor(x[perm]), index, block).data
    assert np.allclose(out_p, out[perm], rtol=0, atol=1e-13)


def test_two_block_encoder_gradcheck():
    blocks, stores = zip(*(make_block(D=4, H=2, seed=10 + i) for i in range(2)))
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    sched = [ScheduleEntry("local", 3), ScheduleEntry("dilated", 3, 2)]
    nbr = np.tile(np.arange(7)[:, None], (1, 27))
    nbr[:, ::2] = -1
    cpe = CpeParams(Tensor(rng.normal(size=(27, 4)) * 0.3, requires_grad=True),
                    Tensor(rng.normal(size=4), requires_grad=True))
    R = rng.normal(size=(7, 4))

    def loss():
        return tc.tsum(tc.mul(run_blocks(x, [7], sched, blocks, [(nbr, cpe)]), R))

    tc.backward(loss())
    tensors = [x, cpe.kernel, cpe.bias] + [t for s in stores for _, t in s.items()]
    worst = 0.0
    for t in tensors:
        num = finite_diff(lambda: float(loss().data), t.data)
        # key biases have an exactly-zero gradient (softmax shift invariance), so
        # near-zero entries are held to 1e-8 absolute via the denominator floor
        worst = max(worst, max_rel_error(t.grad, num, floor=GRAD_FLOOR))
    assert worst < 1e-5


# ---------------------------------------------------------------- fusion and heads


def test_fuse_single_branch_ignores_logits():
    v = Tensor(np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(fuse([v], Tensor(np.array([5.0]))).data, v.data)


def test_fuse_uniform_and_peaked():
    v1, v2 = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, -4.0]))
    assert np.allclose(fuse([v1, v2], Tensor(np.zeros(2))).data, [2.0, -1.0], rtol=0, atol=1e-15)
    assert np.allclose(fuse([v1, v2], Tensor(np.array([10.0, -10.0]))).data, v1.data, atol=1e-4)


def test_fuse_dim_mismatch():
    with pytest.raises(ShapeError):
        fuse([Tensor(np.zeros(2)), Tensor(np.zeros(3))], None)


def test_classify_examples():
    D = 4
    zero = classify(Tensor(np.ones(D)), Tensor(np.zeros((D, 3))), Tensor(np.zeros(3))).data
    assert np.all(zero == zero[0, 0])
    W = np.zeros((D, 2))
    W[0] = [1.0, -1.0]
    e1 = np.eye(D)[0]
    assert classify(Tensor(e1), Tensor(W), Tensor(np.zeros(2))).data.tolist() == [[1.0, -1.0]]


def test_segment_single_leaf_shared_logits():
    rng = np.random.default_rng(12)
    logits = segment(Tensor(rng.normal(size=(1, 4))), np.zeros(5, dtype=int),
                     Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))).data
    assert logits.shape == (5, 3) and np.all(logits == logits[0])


def test_masked_mean_pool():
    x = Tensor(np.arange(10.0).reshape(5, 2))
    assert np.allclose(masked_mean_pool(x, [2, 3]).data, [[1.0, 2.0], [6.0, 7.0]], rtol=0, atol=1e-14)


def test_single_branch_pipeline_equals_single_octree():
    mesh, _ = make_shape("ellipsoid", [1.0, 0.7, 0.5], divisions=4)
    one = tiny_config(branches=[{"kind": "vertices", "depth": 3}])
    two = tiny_config(branches=[{"kind": "vertices", "depth": 3}, {"kind": "face-centroids", "depth": 3}])
    p1, p2 = init_params(one, 2, decoder=False), init_params(two, 2, decoder=False)
    for name, t in p1.items():
        if name in p2:
            p2[name].data[...] = t.data
    s1, s2 = prepare_samples([mesh], one), prepare_samples([mesh], two)
    a, _ = encode_branch(p1, one, [s1[0].trees[0]], 0)
    b, _ = encode_branch(p2, two, [s2[0].trees[0]], 0)
    assert np.array_equal(a.data, b.data)
