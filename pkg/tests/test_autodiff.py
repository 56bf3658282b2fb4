"""Finite-difference checks for every autodiff operator."""

import numpy as np
import pytest

from attnguide import autodiff as ad

RNG = np.random.default_rng(42)


def to_scalar(x):
    """Reduce any tensor to a scalar with a known-good op (masked Frobenius
    against a zero target reduces to the plain Frobenius norm)."""
    flat = ad.reshape(x, (1, 1, 1, int(np.prod(x.shape))))
    return ad.guiding_frobenius(
        flat,
        np.zeros_like(flat.data),
        np.ones((1, 1, 1), dtype=bool),
        np.ones((1, flat.shape[-1]), dtype=bool),
        np.ones(1, dtype=bool),
    )


def finite_diff_check(build, *arrays, eps=1e-6, tol=1e-6):
    tensors = [ad.Tensor(a.copy()) for a in arrays]
    out = build(*tensors)
    out.backward()
    worst = 0.0
    for t in tensors:
        for idx in range(min(t.data.size, 16)):
            orig = t.data.flat[idx]
            t.data.flat[idx] = orig + eps
            f_plus = build(*tensors).item()
            t.data.flat[idx] = orig - eps
            f_minus = build(*tensors).item()
            t.data.flat[idx] = orig
            finite = (f_plus - f_minus) / (2 * eps)
            exact = t.grad.flat[idx] if t.grad is not None else 0.0
            worst = max(worst, abs(exact - finite) / max(abs(exact), abs(finite), 1e-6))
    assert worst < tol, worst


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.Tensor(np.ones(3)).backward()


def test_matmul_grad():
    finite_diff_check(
        lambda a, b: to_scalar(ad.matmul(a, b)),
        RNG.normal(size=(3, 4)),
        RNG.normal(size=(4, 5)),
    )


def test_batched_matmul_with_shared_weight():
    finite_diff_check(
        lambda a, b: to_scalar(ad.matmul(a, b)),
        RNG.normal(size=(2, 3, 4)),
        RNG.normal(size=(4, 5)),
    )


def test_add_broadcast_bias():
    finite_diff_check(
        lambda a, b: to_scalar(ad.add(a, b)),
        RNG.normal(size=(2, 3, 5)),
        RNG.normal(size=(5,)),
    )


def test_relu_grad_away_from_kink():
    a = RNG.normal(size=(4, 4))
    a[np.abs(a) < 0.05] += 0.1  # keep clear of the nondifferentiable point
    finite_diff_check(lambda x: to_scalar(ad.relu(x)), a)


def test_layer_norm_grad():
    finite_diff_check(
        lambda x, g, b: to_scalar(ad.layer_norm(x, g, b)),
        RNG.normal(size=(3, 6)),
        RNG.normal(size=(6,)),
        RNG.normal(size=(6,)),
    )


def test_masked_softmax_grad_and_zeros():
    valid = np.array([[True, True, True, False], [True, True, True, True]])
    x = ad.Tensor(RNG.normal(size=(2, 4)))
    probs = ad.masked_softmax(x, valid)
    assert probs.data[0, 3] == 0.0
    assert probs.data.sum(axis=-1) == pytest.approx([1.0, 1.0])
    finite_diff_check(lambda t: to_scalar(ad.masked_softmax(t, valid)), x.data)


def test_embedding_grad():
    ids = np.array([0, 2, 1, 1])
    finite_diff_check(lambda t: to_scalar(ad.embedding(t, ids)), RNG.normal(size=(3, 3)))


def test_transpose_reshape_select():
    finite_diff_check(
        lambda a: to_scalar(ad.transpose(a, (1, 0, 2))), RNG.normal(size=(2, 3, 4))
    )
    finite_diff_check(
        lambda a: to_scalar(ad.reshape(a, (6, 2))), RNG.normal(size=(3, 4))
    )
    finite_diff_check(
        lambda a: to_scalar(ad.select_position(a, 1)), RNG.normal(size=(2, 3, 4))
    )


def test_cross_entropy_masked_grad():
    targets = RNG.integers(0, 5, size=(2, 3))
    sel = np.array([[True, False, True], [False, True, False]])
    finite_diff_check(
        lambda l: ad.cross_entropy_masked(l, targets, sel), RNG.normal(size=(2, 3, 5))
    )


def test_bce_grad():
    labels = np.array([1.0, 0.0, 1.0, 0.0])
    finite_diff_check(lambda z: ad.bce_with_logits(z, labels), RNG.normal(size=(4,)))


def test_guiding_frobenius_grad_and_masks():
    targets = RNG.normal(size=(2, 2, 4, 4))
    rows = RNG.random((2, 2, 4)) > 0.3
    cols = RNG.random((2, 4)) > 0.2
    guided = np.array([True, False])
    finite_diff_check(
        lambda a: ad.guiding_frobenius(a, targets, rows, cols, guided),
        RNG.normal(size=(2, 2, 4, 4)),
    )
    # unguided heads contribute nothing
    att = ad.Tensor(RNG.normal(size=(2, 2, 4, 4)))
    out = ad.guiding_frobenius(att, targets, rows, cols, np.array([False, False]))
    assert out.item() == 0.0


def test_shared_subexpression_accumulates():
    # y = frob(x) + frob(x): gradient doubles relative to a single use
    x = ad.Tensor(RNG.normal(size=(2, 2)))
    single = to_scalar(x)
    single.backward()
    grad_single = x.grad.copy()

    x2 = ad.Tensor(x.data.copy())
    both = ad.add_scalars([to_scalar(x2), to_scalar(x2)])
    both.backward()
    assert np.allclose(x2.grad, 2 * grad_single)


def test_scale_and_add_const():
    x = ad.Tensor(np.array([[1.0, 2.0]]))
    y = ad.scale(ad.add_const(x, 1.0), 3.0)
    assert np.array_equal(y.data, [[6.0, 9.0]])
    to_scalar(y).backward()
    assert x.grad is not None
