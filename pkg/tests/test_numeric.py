import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from masafusion.errors import ContractError, InputError, ShapeError
from masafusion.numeric import (GradientTape, RngStream, attention, format_tdump, grad, load_tdump,
                                parse_tdump, save_tdump, softmax_rows)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


# -- softmax ------------------------------------------------------------------

def test_softmax_zero_row_is_uniform():
    out = softmax_rows(torch.zeros(1, 3, dtype=torch.float64))
    assert torch.allclose(out, torch.full((1, 3), 1 / 3, dtype=torch.float64), atol=1e-15)


def test_softmax_large_logit_does_not_overflow():
    out = softmax_rows(t64([[1000.0, 0.0, 0.0]]))
    assert torch.isfinite(out).all()
    assert out[0, 0] == 1.0 and out[0, 1] < 1e-300


def test_softmax_matches_high_precision_oracle():
    # mpmath at 50 digits (tests/oracles/derive.py)
    expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
    out = softmax_rows(t64([[1.0, 2.0, 3.0]]))[0]
    assert out.tolist() == pytest.approx(expected, abs=1e-15)


def test_softmax_rejects_non_matrix():
    with pytest.raises(ShapeError):
        softmax_rows(torch.zeros(3, dtype=torch.float64))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(m):
    out = softmax_rows(torch.from_numpy(m))
    assert torch.all((out.sum(dim=1) - 1).abs() <= 1e-12)
    assert torch.all(out > 0) and torch.all(out <= 1)


# -- attention --------------------------------------------------------------

def brute_attention(q, k, v):
    N, M, d = q.shape[0], k.shape[0], q.shape[1]
    P = np.zeros((N, M))
    for i in range(N):
        s = [sum(q[i, a] * k[j, a] for a in range(d)) / math.sqrt(d) for j in range(M)]
        mx = max(s)
        e = [math.exp(x - mx) for x in s]
        P[i] = [x / sum(e) for x in e]
    out = np.zeros((N, v.shape[1]))
    for i in range(N):
        for j in range(M):
            out[i] += P[i, j] * v[j]
    return out, P


def test_attention_single_key():
    q, k, v = t64([[0.3, -2.0]]), t64([[1.5, 0.2]]), t64([[4.0, 5.0, 6.0]])
    out, p = attention(q, k, v)
    assert p.tolist() == [[1.0]]
    assert torch.equal(out, v)


def test_attention_orthogonal_query_gives_value_mean():
    q = t64([[1.0, 0.0]])
    k = t64([[0.0, 1.0], [0.0, -2.0], [0.0, 3.0]])
    v = t64([[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]])
    out, _ = attention(q, k, v)
    assert torch.allclose(out, v.mean(dim=0, keepdim=True), atol=1e-15)


def test_attention_matches_double_loop():
    rng = np.random.default_rng(3)
    q, k, v = rng.normal(size=(2, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    out, p = attention(torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(v))
    ref_out, ref_p = brute_attention(q, k, v)
    assert np.allclose(p.numpy(), ref_p, atol=1e-14)
    assert np.allclose(out.numpy(), ref_out, atol=1e-14)


def test_attention_width_mismatch():
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64),
                  torch.zeros(2, 1, dtype=torch.float64))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_attention_equals_explicit_weighted_sum(N, M, d, dv, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(N, d, generator=g, dtype=torch.float64)
    k = torch.randn(M, d, generator=g, dtype=torch.float64)
    v = torch.randn(M, dv, generator=g, dtype=torch.float64)
    out, p = attention(q, k, v)
    explicit = torch.stack([sum(p[i, j] * v[j] for j in range(M)) for i in range(N)])
    assert torch.allclose(out, explicit, atol=1e-12, rtol=0)
    assert torch.all((p.sum(dim=1) - 1).abs() <= 1e-12)


# -- RNG --------------------------------------------------------------------

def test_rng_matches_documented_transform():
    # Box-Muller over raw Philox words, evaluated with mpmath
    expected = [-0.14712792838022432, 0.5021121543773327, -1.0911010252731355,
                0.7375870161465814, -0.7344628705483297, -2.1076498535202832]
    assert RngStream(7).normal(6).tolist() == pytest.approx(expected, abs=1e-14)


def test_rng_is_reproducible_and_counter_based():
    a = RngStream(11, 5).normal(3, 4)
    b = RngStream(11, 5).normal(3, 4)
    assert torch.equal(a, b)
    r = RngStream(11)
    first = r.normal(8)
    assert r.counter == 2  # 8 normals = 8 uniforms = 2 blocks of 4 words
    assert torch.equal(RngStream(11, 2).normal(8), r.normal(8))
    assert not torch.equal(first, RngStream(12).normal(8))


def test_rng_uniform_range_and_permutation():
    r = RngStream(3)
    u = r.uniform(1000)
    assert u.min() > 0 and u.max() < 1
    assert sorted(RngStream(3).permutation(10).tolist()) == list(range(10))


# -- gradients ----------------------------------------------------------------

def test_grad_of_sum_is_ones():
    with GradientTape() as tape:
        x = tape.watch(t64([1.0, -2.0, 3.0]))
        (g,) = grad(tape, x.sum())
    assert torch.equal(g, torch.ones(3, dtype=torch.float64))


def test_grad_of_squared_norm():
    with GradientTape() as tape:
        x = tape.watch(t64([1.0, 2.0]))
        (g,) = grad(tape, (x ** 2).sum())
    assert g.tolist() == [2.0, 4.0]


def test_grad_rejects_vector_output():
    with GradientTape() as tape:
        x = tape.watch(t64([1.0, 2.0]))
        with pytest.raises(ContractError):
            grad(tape, x * 2)


def test_grad_unused_input_is_zero():
    with GradientTape() as tape:
        x = tape.watch(t64([1.0]))
        y = tape.watch(t64([[1.0, 2.0]]))
        gx, gy = grad(tape, (x * 3).sum())
    assert gx.tolist() == [3.0] and torch.equal(gy, torch.zeros(1, 2, dtype=torch.float64))


def central_difference(f, x, h=1e-4):
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        e = torch.zeros_like(flat)
        e[i] = h
        g.reshape(-1)[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * h)
    return g


def _composition(a, b, x):
    q = torch.tanh(x @ a)
    out, p = attention(q, x @ b, x)
    return (softmax_rows(out @ a.T) * p.sum(dim=1, keepdim=True)).pow(2).sum() + (out * x).mean()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(2, 4))
def test_grad_matches_finite_differences(seed, n, d):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(d, d, generator=g, dtype=torch.float64)
    b = torch.randn(d, d, generator=g, dtype=torch.float64)
    x = torch.randn(n, d, generator=g, dtype=torch.float64)
    with GradientTape() as tape:
        xw = tape.watch(x)
        (gx,) = grad(tape, _composition(a, b, xw))
    with torch.no_grad():
        fd = central_difference(lambda z: float(_composition(a, b, z)), x)
    err = float(torch.linalg.norm(gx - fd) / max(float(torch.linalg.norm(fd)), 1e-8))
    assert err < 1e-4


# -- TDUMP --------------------------------------------------------------------

def test_tdump_header_and_precision(tmp_path):
    x = t64([[1.0, 2.0, 3.0], [4.0, 5.0, 1 / 3]])
    text = format_tdump(x)
    assert text.splitlines()[0] == "TDUMP v1 2 2 3"
    assert "0.333333333" in text
    path = tmp_path / "x.tdump"
    save_tdump(x, path)
    back = load_tdump(path)
    assert back.shape == x.shape
    assert torch.allclose(back, x, rtol=1e-9, atol=0)


def test_tdump_rejects_bad_streams():
    with pytest.raises(InputError):
        parse_tdump("NOPE 1 2\n1 2\n")
    with pytest.raises(InputError):
        parse_tdump("TDUMP v1 1 3\n1 2\n")
    with pytest.raises(InputError):
        parse_tdump("TDUMP v1 2 3\n1 2 3\n")
