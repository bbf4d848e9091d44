import numpy as np
import pytest

from molmix.config import ModelConfig, Precision
from molmix.errors import IndexRangeError, InputError
from molmix.smiles_encoder import (
    UNK,
    SmilesEncoder,
    SmilesTokens,
    SmilesVocab,
    build_vocab,
    decode,
    encode_smiles,
    sinusoidal_encoding,
    tokenize,
)
from molmix.tensor import Tensor


@pytest.fixture
def encoder(rng):
    cfg = ModelConfig(d_enc=16, smiles_heads=2, smiles_layers=2, block_size=4,
                      smiles_vocab=list(build_vocab(["CCO", "c1ccccc1", "N=C(O)S"]).chars))
    return SmilesEncoder(cfg, rng, Precision.F64)


def test_vocab_from_single_string():
    vocab = build_vocab(["CCO"])
    assert vocab.size == 4
    assert set(vocab.char_to_id.values()) == {2, 3}


def test_vocab_rejects_empty_corpus():
    with pytest.raises(InputError):
        build_vocab([])


def test_tokenize_one_token_per_character():
    vocab = build_vocab(["c1ccccc1"])
    assert len(tokenize("CCO", build_vocab(["CCO"]))) == 3
    assert len(tokenize("c1ccccc1", vocab)) == 8
    assert tokenize("cX", vocab).ids[1] == UNK


def test_tokenize_rejects_empty_string():
    with pytest.raises(InputError):
        tokenize("", build_vocab(["C"]))


def test_decode_round_trip(synthetic_ds):
    corpus = [m.smiles for m in synthetic_ds.molecules]
    vocab = build_vocab(corpus)
    for s in corpus:
        assert decode(tokenize(s, vocab), vocab) == s


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["N=C(O)S", "c1ccccc1"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert SmilesVocab.load(path) == vocab
    assert path.read_text().splitlines().index("C") + 2 == vocab.char_to_id["C"]


def test_sinusoidal_encoding_rows_differ():
    pe = sinusoidal_encoding(5, 8)
    assert pe.shape == (5, 8)
    np.testing.assert_allclose(pe[0], [0, 1] * 4)
    assert len({row.tobytes() for row in pe}) == 5


def test_encode_shape_and_positions(encoder):
    out = encode_smiles(encoder.tokenize("CCO"), encoder)
    assert out.shape == (3, 16)
    assert not np.allclose(out.data[0], out.data[1])


def test_character_order_matters(encoder):
    a = encoder(encoder.tokenize("CO")).data
    b = encoder(encoder.tokenize("OC")).data
    assert not np.allclose(a, b[::-1])


def test_encoding_is_deterministic(encoder):
    t = encoder.tokenize("N=C(O)S")
    np.testing.assert_array_equal(encoder(t).data, encoder(t).data)


def test_batch_matches_single(encoder):
    toks = [encoder.tokenize(s) for s in ("CCO", "c1ccccc1", "S")]
    for t, h in zip(toks, encoder.encode_batch(toks)):
        np.testing.assert_allclose(h.data, encoder(t).data, atol=1e-10)


def test_out_of_vocabulary_id(encoder):
    with pytest.raises(IndexRangeError):
        encoder(SmilesTokens(np.array([99])))


def test_gradient_reaches_embedding_table(encoder, rng):
    t = encoder.tokenize("CCO")
    out = encoder(t)
    (out * Tensor(rng.normal(size=out.shape))).sum().backward()
    grad = encoder.embedding.table.grad
    used = sorted(set(t.ids.tolist()))
    assert np.abs(grad[used]).max() > 0
    unused = [i for i in range(encoder.vocab.size) if i not in used]
    np.testing.assert_array_equal(grad[unused], 0.0)
