from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dcpcn import autograd as ag
from dcpcn.autograd import GradientTape, Tensor
from dcpcn.codebook import Codebook, init_codebook, quantize, usage_histogram, vq_losses


def test_init_law_and_determinism():
    a, b = init_codebook(4, 2, seed=7), init_codebook(4, 2, seed=7)
    assert np.array_equal(a.vectors.data, b.vectors.data)
    big = init_codebook(16, 32, seed=1)
    assert np.all(np.abs(big.vectors.data) <= 1 / 16)
    assert not np.array_equal(big.vectors.data, init_codebook(16, 32, seed=2).vectors.data)
    with pytest.raises(ValueError):
        init_codebook(0, 3, seed=0)


def test_quantize_examples():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert quantize(np.array([[0.2, 0.1]]), cb).indices.tolist() == [0]
    assert quantize(np.array([[0.5, 0.5]]), cb).indices.tolist() == [0]
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 3)), cb)


def test_quantize_codes_and_usage_counter():
    cb = init_codebook(8, 4, seed=0)
    feats = np.random.default_rng(1).normal(scale=0.1, size=(5, 4))
    q = quantize(feats, cb)
    assert np.array_equal(q.codes.data, cb.vectors.data[q.indices])
    assert cb.usage.sum() == 5
    stats = usage_histogram(cb)
    assert 0 <= stats.dead_fraction <= 1
    cb.reset_usage()
    assert usage_histogram(cb).dead_fraction == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 32), st.integers(1, 32), st.booleans())
def test_quantize_matches_full_scan(seed, K, M, on_grid):
    rng = np.random.default_rng(seed)
    if on_grid:  # exact ties are common on a coarse integer grid
        codes = rng.integers(-2, 3, size=(K, 3)).astype(float)
        feats = rng.integers(-2, 3, size=(M, 3)).astype(float)
    else:
        codes, feats = rng.normal(size=(K, 3)), rng.normal(size=(M, 3))
    cb = Codebook(codes)
    q = quantize(feats, cb)
    assert q.indices.tolist() == oracles.quantize(feats, codes)
    # idempotent on its own output
    assert quantize(q.codes.data, cb).indices.tolist() == oracles.quantize(q.codes.data, codes)


def test_vq_losses_examples():
    cb = Codebook(np.array([[0.0, 0.0], [3.0, 0.0]]))
    f = Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
    code_term, commit = vq_losses(f, quantize(f, cb))
    assert float(code_term.data) == 1.0 and float(commit.data) == 1.0
    exact = Tensor(cb.vectors.data.copy())
    zero = vq_losses(exact, quantize(exact, cb))
    assert [float(t.data) for t in zero] == [0.0, 0.0]


def test_vq_losses_manual_sum_and_gradient_routing():
    rng = np.random.default_rng(0)
    cb = Codebook(rng.normal(size=(4, 3)))
    f = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    with GradientTape() as tape:
        q = quantize(f, cb)
        code_term, commit = vq_losses(f, q)
    manual = sum(sum((f.data[i, j] - cb.vectors.data[q.indices[i], j]) ** 2 for j in range(3)) for i in range(8)) / 8
    assert abs(float(code_term.data) - manual) <= 1e-12
    assert abs(float(commit.data) - manual) <= 1e-12
    ag.backward(tape, code_term)
    assert f.grad is None and cb.vectors.grad is not None
    cb.vectors.grad = None
    with GradientTape() as tape:
        _, commit = vq_losses(f, quantize(f, cb))
    ag.backward(tape, commit)
    assert cb.vectors.grad is None and f.grad is not None
