import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from masafusion.errors import ContractError, EncodingError
from masafusion.text import (EOT, SHADES, SHAPES, POSITIONS, PromptEmbedding, TextEncoder, TokenSequence,
                             Vocabulary, differing_positions, splice_embedding)

ENC = TextEncoder()
WORDS = list(SHAPES + POSITIONS + SHADES)


def test_tokenize_pads_with_end_of_text():
    seq = ENC.tokenize("square left dark")
    assert len(seq) == 8 and seq.content_length == 4
    assert all(i == ENC.vocab.index[EOT] for i in seq.ids[4:])
    assert ENC.vocab.decode(seq) == "square left dark"


def test_tokenize_rejects_unknown_and_long_prompts():
    with pytest.raises(EncodingError):
        ENC.tokenize("hexagon")
    with pytest.raises(EncodingError):
        ENC.tokenize(" ".join(["square"] * 8))


def test_encode_rejects_out_of_vocabulary_ids():
    with pytest.raises(EncodingError):
        ENC.encode(TokenSequence((0, 99, 1, 1, 1, 1, 1, 1), 2))
    with pytest.raises(EncodingError):
        TokenSequence((0, 1), 0)


def test_empty_prompt_is_stable():
    a, b = ENC.empty().matrix, ENC.empty().matrix
    assert torch.equal(a, b)
    assert torch.equal(a, TextEncoder().empty().matrix)
    a.add_(1.0)  # callers get a copy
    assert torch.equal(ENC.empty().matrix, b)


def test_encode_shape_and_determinism():
    e1 = ENC.encode("circle right light").matrix
    e2 = ENC.encode("circle right light").matrix
    assert e1.shape == (8, 16) and e1.dtype == torch.float64
    assert torch.equal(e1, e2)


def test_change_propagates_to_later_rows():
    # over several encoder seeds, a one-word change alters its own row and
    # at least one later row
    for seed in range(5):
        enc = TextEncoder(seed=seed)
        a = enc.encode("square left dark").matrix
        b = enc.encode("circle left dark").matrix
        assert torch.equal(a[:1], b[:1])
        assert not torch.equal(a[1], b[1])
        assert any(not torch.equal(a[j], b[j]) for j in range(2, 8))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=6),
       st.lists(st.sampled_from(WORDS), min_size=1, max_size=6))
def test_causality(p, q):
    a, b = ENC.tokenize(" ".join(p)), ENC.tokenize(" ".join(q))
    diff = differing_positions(a, b)
    first = diff[0] if diff else 8
    ea, eb = ENC.encode(a).matrix, ENC.encode(b).matrix
    assert torch.equal(ea[:first], eb[:first])


def test_vocabulary_file_round_trip(tmp_path):
    path = tmp_path / "vocab.txt"
    ENC.vocab.to_file(path)
    back = Vocabulary.from_file(path)
    assert back.words == ENC.vocab.words
    assert back.index["square"] == 2


def test_vocabulary_validation():
    with pytest.raises(EncodingError):
        Vocabulary(["a", "a"])
    with pytest.raises(EncodingError):
        Vocabulary(["a", "b"])


def test_splice_trivial_cases():
    s, t = ENC.encode("square left dark"), ENC.encode("circle left dark")
    assert torch.equal(splice_embedding(s, t, []).matrix, s.matrix)
    assert torch.equal(splice_embedding(s, t, range(8)).matrix, t.matrix)


def test_splice_single_row():
    s, t = ENC.encode("square left dark"), ENC.encode("circle left dark")
    out = splice_embedding(s, t, {3}).matrix
    for i in range(8):
        ref = t.matrix[i] if i == 3 else s.matrix[i]
        assert torch.equal(out[i], ref)


def test_splice_rejects_bad_index_and_shape():
    s = ENC.encode("square")
    with pytest.raises(ContractError):
        splice_embedding(s, s, [8])
    with pytest.raises(ContractError):
        splice_embedding(s, PromptEmbedding(torch.zeros(4, 16, dtype=torch.float64)), [0])


@settings(max_examples=30, deadline=None)
@given(st.sets(st.integers(0, 7)))
def test_splice_identical_inputs_is_identity(rows):
    s = ENC.encode("triangle right light")
    assert torch.equal(splice_embedding(s, s, rows).matrix, s.matrix)


def test_differing_positions_requires_equal_length():
    with pytest.raises(ContractError):
        differing_positions(TokenSequence((0, 1), 1), TokenSequence((0, 1, 1), 1))
