import numpy as np
import pytest

from molmix.config import Precision
from molmix.errors import CheckpointError, IndexRangeError
from molmix.layers import MLP, Embedding, FieldEmbedding, Linear, Module


class Pair(Module):
    def __init__(self, rng):
        self.first = Linear(3, 4, rng, Precision.F64)
        self.stack = MLP([4, 5, 2], rng, Precision.F64)


def test_parameter_names_follow_attribute_order(rng):
    names = [n for n, _ in Pair(rng).named_parameters()]
    assert names == ["first.weight", "first.bias", "stack.layers.0.weight", "stack.layers.0.bias",
                     "stack.layers.1.weight", "stack.layers.1.bias"]


def test_num_parameters(rng):
    assert Pair(rng).num_parameters() == 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2


def test_state_dict_round_trip_with_flat_arrays(rng):
    src, dst = Pair(rng), Pair(np.random.default_rng(99))
    dst.load_state_dict({k: v.reshape(-1) for k, v in src.state_dict().items()})
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_load_state_dict_skip_prefix(rng, caplog):
    src, dst = Pair(rng), Pair(np.random.default_rng(99))
    kept = dst.stack.layers[1].weight.data.copy()
    arrays = {k: v for k, v in src.state_dict().items() if not k.startswith("stack.layers.1")}
    dst.load_state_dict(arrays, skip=["stack.layers.1"])
    np.testing.assert_array_equal(dst.stack.layers[1].weight.data, kept)
    np.testing.assert_array_equal(dst.first.weight.data, src.first.weight.data)
    with caplog.at_level("DEBUG", logger="molmix.layers"):
        dst.load_state_dict(arrays, skip=["stack.layers.1"])
    assert "Loaded 4 parameter arrays (2 skipped)" in caplog.text


def test_load_state_dict_architecture_mismatch(rng):
    arrays = Pair(rng).state_dict()
    arrays["first.weight"] = np.zeros(5)
    with pytest.raises(CheckpointError, match="first.weight"):
        Pair(rng).load_state_dict(arrays)
    del arrays["first.weight"]
    with pytest.raises(CheckpointError, match="lacks"):
        Pair(rng).load_state_dict(arrays)


def test_embedding_out_of_range(rng):
    emb = Embedding(4, 3, rng, Precision.F32)
    assert emb([0, 3]).shape == (2, 3)
    with pytest.raises(IndexRangeError, match="position 1"):
        emb([0, 4])


def test_field_embedding_sums_columns(rng):
    emb = FieldEmbedding([3, 2], 4, rng, Precision.F64)
    out = emb(np.array([[2, 1]]))
    expected = emb.fields[0].table.data[2] + emb.fields[1].table.data[1]
    np.testing.assert_allclose(out.data[0], expected)
    with pytest.raises(IndexRangeError):
        emb(np.array([[1, 1, 1]]))
