import math

import numpy as np
import pytest

from molmix.attention import (
    MultiHeadAttention,
    PackedBatch,
    ScoreDump,
    attn_scores_dump,
    measure_stats,
    mha_naive,
    mha_naive_packed,
    mha_tiled,
)
from molmix.config import Precision
from molmix.errors import ConfigError, ContractError, IndexRangeError
from molmix.tensor import Parameter, Tensor, rows
from molmix.transformer import TransformerEncoder


def reference_mha(x: np.ndarray, params: MultiHeadAttention) -> np.ndarray:
    Q = x @ params.wq.weight.data + params.wq.bias.data
    K = x @ params.wk.weight.data + params.wk.bias.data
    V = x @ params.wv.weight.data + params.wv.bias.data
    d_h = params.d // params.heads
    heads = []
    for h in range(params.heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        s = Q[:, sl] @ K[:, sl].T / math.sqrt(d_h)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        heads.append(p @ V[:, sl])
    return np.concatenate(heads, axis=1) @ params.wo.weight.data + params.wo.bias.data


def random_packed(rng, lengths, d, precision=Precision.F64):
    x = rng.normal(size=(sum(lengths), d))
    return PackedBatch(Tensor(x, precision=precision), np.concatenate([[0], np.cumsum(lengths)]).tolist())


def test_packed_batch_rejects_empty_segment():
    with pytest.raises(ContractError):
        PackedBatch(Tensor(np.zeros((3, 2))), [0, 2, 2, 3])
    with pytest.raises(ContractError):
        PackedBatch(Tensor(np.zeros((3, 2))), [0, 2])


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigError):
        MultiHeadAttention(10, 3, rng, Precision.F64)


def test_single_token_is_value_then_output_projection(rng):
    params = MultiHeadAttention(8, 2, rng, Precision.F64)
    x = Tensor(rng.normal(size=(1, 8)))
    out = mha_naive(x, x, x, 2, params)
    np.testing.assert_allclose(out.data, params.wo(params.wv(x)).data, atol=1e-12)


def test_identical_tokens_give_identical_rows(rng):
    params = MultiHeadAttention(8, 2, rng, Precision.F64)
    x = Tensor(np.tile(rng.normal(size=(1, 8)), (4, 1)))
    out = mha_naive(x, x, x, 2, params).data
    np.testing.assert_allclose(out, np.tile(out[:1], (4, 1)), atol=1e-12)


def test_naive_matches_loop_reference(rng):
    params = MultiHeadAttention(8, 4, rng, Precision.F64)
    x = rng.normal(size=(7, 8))
    out = mha_naive(Tensor(x), Tensor(x), Tensor(x), 4, params)
    np.testing.assert_allclose(out.data, reference_mha(x, params), atol=1e-12)


@pytest.mark.parametrize("heads,d", [(1, 8), (2, 8), (4, 16)])
def test_tiled_matches_naive(heads, d, rng):
    params32 = MultiHeadAttention(d, heads, np.random.default_rng(heads), Precision.F32)
    params64 = MultiHeadAttention(d, heads, np.random.default_rng(heads), Precision.F64)
    for _ in range(100):
        lengths = rng.integers(1, 17, size=rng.integers(1, 5)).tolist()
        block = int(rng.integers(1, 6))
        packed64 = random_packed(rng, lengths, d)
        np.testing.assert_allclose(mha_tiled(packed64, heads, block, params64).data,
                                   mha_naive_packed(packed64, heads, params64).data, atol=1e-10)
        packed32 = PackedBatch(Tensor(packed64.tokens.data, precision=Precision.F32), packed64.seq_offsets)
        np.testing.assert_allclose(mha_tiled(packed32, heads, block, params32).data,
                                   mha_naive_packed(packed32, heads, params32).data, atol=1e-5)


def test_block_larger_than_sequence(rng):
    params = MultiHeadAttention(8, 2, rng, Precision.F64)
    packed = random_packed(rng, [5, 3], 8)
    np.testing.assert_allclose(mha_tiled(packed, 2, 64, params).data,
                               mha_naive_packed(packed, 2, params).data, atol=1e-6)


def test_no_leakage_between_segments(rng):
    params = MultiHeadAttention(8, 2, rng, Precision.F64)
    packed = random_packed(rng, [6, 5], 8)
    before = mha_tiled(packed, 2, 4, params).data[:6]
    x = packed.tokens.data.copy()
    x[6:] = 0.0
    after = mha_tiled(PackedBatch(Tensor(x), packed.seq_offsets), 2, 4, params).data[:6]
    np.testing.assert_array_equal(before, after)


def test_tiled_gradients_match_naive(rng):
    d, heads = 8, 2
    x0 = rng.normal(size=(9, d))
    w = rng.normal(size=(9, d))
    grads = {}
    for impl in ("tiled", "naive"):
        params = MultiHeadAttention(d, heads, np.random.default_rng(3), Precision.F64)
        x = Parameter(x0.copy())
        packed = PackedBatch(x, [0, 4, 9])
        out = mha_tiled(packed, heads, 3, params) if impl == "tiled" else mha_naive_packed(packed, heads, params)
        (out * Tensor(w)).sum().backward()
        grads[impl] = [x.grad] + [p.grad for p in params.parameters()]
    for a, b in zip(grads["tiled"], grads["naive"]):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-10)


def test_tiled_gradient_of_single_segment_slice(rng):
    params = MultiHeadAttention(8, 2, rng, Precision.F64)
    x = Parameter(rng.normal(size=(5, 8)))
    rows(mha_tiled(PackedBatch(x, [0, 2, 5]), 2, 2, params), 0, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[2:], np.zeros((3, 8)))


# ---- scratch accounting ----
def single(rng, L, d=64):
    return random_packed(rng, [L], d)


def test_naive_scratch_is_quadratic(rng):
    H = 8
    naive = measure_stats("naive", single(rng, 64), H).peak_scratch_elements
    assert naive >= H * 64 * 64
    assert measure_stats("naive", single(rng, 128), H).peak_scratch_elements == 4 * naive


def test_tiled_scratch_is_linear_and_bounded(rng):
    H, B, d = 8, 32, 64
    c = H * (d // H + 3)
    for L in (64, 128, 256):
        tiled = measure_stats("tiled", single(rng, L, d), H, B).peak_scratch_elements
        assert tiled <= H * L * B + c * L
        assert measure_stats("tiled", single(rng, 2 * L, d), H, B).peak_scratch_elements == 2 * tiled


def test_tiled_scratch_well_below_naive_at_512(rng):
    packed = single(rng, 512)
    naive = measure_stats("naive", packed, 8, 32).peak_scratch_elements
    tiled = measure_stats("tiled", packed, 8, 32).peak_scratch_elements
    assert tiled < naive / 4


# ---- transformer and score dumps ----
@pytest.fixture
def encoder(rng):
    return TransformerEncoder(16, 2, 2, 2, rng, Precision.F64, block=4)


def labelled(rng, d=16):
    labels = ["CLS", "1D", "1D", "SEP", "2D", "2D", "SEP"]
    return PackedBatch(Tensor(rng.normal(size=(7, d))), [0, 7], labels)


def test_encoder_tiled_matches_naive(encoder, rng):
    packed = random_packed(rng, [5, 9], 16)
    tiled = encoder(packed).data
    for blk in encoder.blocks:
        blk.impl = "naive"
    np.testing.assert_allclose(encoder(packed).data, tiled, atol=1e-10)


def test_attention_inputs_one_per_layer(encoder, rng):
    inputs = encoder.attention_inputs(labelled(rng))
    assert len(inputs) == 2
    assert all(a.shape == (7, 16) for a in inputs)


def test_dump_shape_boundaries_and_clip(encoder, rng):
    for blk in encoder.blocks:
        blk.attn.wq.weight.data *= 50.0
    dump = attn_scores_dump(encoder, labelled(rng), layer=1, head=0)
    assert dump.scores.shape == (7, 7)
    assert dump.boundaries == [3, 6]
    assert np.abs(dump.scores).max() <= 10.0


def test_dump_of_zeroed_query_key_is_zero(encoder, rng):
    for blk in encoder.blocks:
        for lin in (blk.attn.wq, blk.attn.wk):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0
    dump = attn_scores_dump(encoder, labelled(rng), layer=0, head=1)
    np.testing.assert_array_equal(dump.scores, np.zeros((7, 7)))


def test_dump_rejects_bad_layer_and_head(encoder, rng):
    with pytest.raises(IndexRangeError):
        attn_scores_dump(encoder, labelled(rng), layer=2, head=0)
    with pytest.raises(IndexRangeError):
        attn_scores_dump(encoder, labelled(rng), layer=0, head=2)


def test_dump_file_round_trip(encoder, rng, tmp_path):
    dump = attn_scores_dump(encoder, labelled(rng), layer=0, head=0)
    path = tmp_path / "layer0_head0.txt"
    dump.write(path)
    assert path.read_text().splitlines()[0] == "# 7 7 boundaries=3,6"
    back = ScoreDump.read(path)
    assert back.boundaries == [3, 6]
    np.testing.assert_allclose(back.scores, dump.scores, atol=1e-6)
