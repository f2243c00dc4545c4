import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import autograd_of, central_difference, relative_error
from createrec.alignment import (
    AlignmentConfig,
    alignment_loss,
    barlow_loss,
    barlow_twins,
    contrastive_loss,
    cross_correlation,
    standardize,
)


def whitened(b, d, seed=0):
    """``b x d`` matrix with zero-mean, unit-variance, mutually uncorrelated columns."""
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(b), rng.standard_normal((b, d))])
    q, _ = np.linalg.qr(x)
    return torch.from_numpy(q[:, 1:] * math.sqrt(b))


def test_standardize_cases():
    z = standardize(torch.tensor([[1.0], [3.0]], dtype=torch.float64), eps=0.0)
    assert torch.allclose(z, torch.tensor([[-1.0], [1.0]], dtype=torch.float64))
    const = standardize(torch.full((4, 2), 7.0, dtype=torch.float64))
    assert torch.isfinite(const).all() and torch.count_nonzero(const) == 0
    with pytest.raises(ValueError):
        standardize(torch.ones(1, 3))
    x = torch.randn(50, 4, dtype=torch.float64) * 5 + 2
    z = standardize(x, eps=0.0)
    assert torch.allclose(z.mean(0), torch.zeros(4, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(z.var(0, unbiased=False), torch.ones(4, dtype=torch.float64), atol=1e-12)


def test_whitened_identical_views_give_identity():
    z = whitened(64, 8)
    c = cross_correlation(standardize(z, eps=1e-12), standardize(z, eps=1e-12))
    assert (c - torch.eye(8, dtype=torch.float64)).abs().max().item() < 1e-6
    # the default eps shrinks the diagonal by ~1e-5, still far inside the loss tolerance
    assert barlow_twins(z, z).item() < 1e-6


def test_sign_flip_gives_minus_identity():
    z = whitened(64, 8)
    c = cross_correlation(standardize(z), standardize(-z))
    assert torch.allclose(c, -torch.eye(8, dtype=torch.float64), atol=1e-4)
    assert math.isclose(barlow_twins(z, -z).item(), 4 * 8, rel_tol=1e-4)


def test_hand_two_by_one():
    a = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    assert torch.allclose(cross_correlation(a, a), torch.tensor([[1.0]], dtype=torch.float64))
    assert cross_correlation(a, -a).item() == -1.0


def test_barlow_examples():
    d = 5
    assert barlow_loss(torch.zeros(d, d)).item() == d
    assert barlow_loss(torch.eye(d)).item() == 0.0
    ones = torch.ones(d, d, dtype=torch.float64)
    assert math.isclose(barlow_loss(ones, 0.1).item(), 0.1 * d * (d - 1), rel_tol=1e-12)


def test_barlow_gradient_finite_difference():
    torch.manual_seed(0)
    a = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    b = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    fn = lambda: barlow_twins(a, b, lambda_bt=0.3)
    for p in (a, b):
        assert relative_error(autograd_of(fn, p), central_difference(fn, p)) < 1e-4


def test_contrastive_gradient_finite_difference():
    torch.manual_seed(1)
    a = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    fn = lambda: contrastive_loss(a, b, 0.5)
    for p in (a, b):
        assert relative_error(autograd_of(fn, p), central_difference(fn, p)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 10_000))
def test_barlow_symmetric_under_view_swap(b, d, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, d, generator=g, dtype=torch.float64)
    y = torch.randn(b, d, generator=g, dtype=torch.float64)
    c_xy = cross_correlation(standardize(x), standardize(y))
    c_yx = cross_correlation(standardize(y), standardize(x))
    assert torch.allclose(c_xy, c_yx.T)
    assert math.isclose(barlow_twins(x, y).item(), barlow_twins(y, x).item(), rel_tol=1e-10, abs_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_barlow_affine_invariance(seed, scale, shift):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(16, 4, generator=g, dtype=torch.float64)
    y = torch.randn(16, 4, generator=g, dtype=torch.float64)
    base = barlow_twins(x, y, eps=1e-12).item()
    moved = barlow_twins(x * scale + shift, y, eps=1e-12).item()
    assert math.isclose(base, moved, rel_tol=1e-6, abs_tol=1e-9)


def test_contrastive_cases():
    z = torch.eye(4, dtype=torch.float64) * 3
    # perfectly matched orthogonal views: loss is the softmax CE of a scaled identity
    t = 0.1
    expected = -math.log(math.exp(1 / t) / (math.exp(1 / t) + 3))
    assert math.isclose(contrastive_loss(z, z, t).item(), expected, rel_tol=1e-10)
    same = torch.ones(4, 3, dtype=torch.float64)
    assert math.isclose(contrastive_loss(same, same, t).item(), math.log(4), rel_tol=1e-12)
    with pytest.raises(ValueError):
        contrastive_loss(torch.ones(1, 3), torch.ones(1, 3))


def test_alignment_dispatch_and_gradient_flow():
    a = torch.randn(6, 4, requires_grad=True)
    b = torch.randn(6, 4, requires_grad=True)
    for kind in ("barlow", "contrastive"):
        a.grad = b.grad = None
        alignment_loss(AlignmentConfig(kind=kind), a, b).backward()
        assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0
    assert alignment_loss(AlignmentConfig(kind="none"), a, b).item() == 0.0
    with pytest.raises(ValueError):
        AlignmentConfig(kind="cca").validate()
    with pytest.raises(ValueError):
        cross_correlation(torch.ones(3, 2), torch.ones(3, 4))
