"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operator set the encoder needs: matmul, add, reshape,
transpose, relu, masked softmax, layer norm, embedding lookup, position
selection, and the loss heads (masked cross-entropy, logit BCE, masked
Frobenius guiding loss). Everything runs in float64 so finite-difference
gradient checks are meaningful.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A graph node holding a float64 array and, after backward(), its gradient."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, parents=(), backward=None, op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.shape != ():
            raise ValueError("backward() is only defined for scalar outputs")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to the given shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def add_const(a: Tensor, c) -> Tensor:
    def backward(g):
        _accum(a, g)

    return Tensor(a.data + c, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g * c)

    return Tensor(a.data * c, (a,), backward)


def add_scalars(terms: list[Tensor]) -> Tensor:
    out_data = np.float64(0.0)
    for t in terms:
        out_data = out_data + t.data

    def backward(g):
        for t in terms:
            _accum(t, g)

    return Tensor(out_data, tuple(terms), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return Tensor(a.data * mask, (a,), backward, op="relu")


def relu_activation_signature(root: Tensor) -> list[np.ndarray]:
    """Sign patterns of every relu in the graph, in traversal order.

    Finite differences are only valid where the loss is locally smooth;
    comparing signatures between perturbed evaluations detects coordinates
    whose perturbation crosses a relu kink.
    """
    masks: list[np.ndarray] = []
    stack = [root]
    seen: set[int] = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._op == "relu":
            masks.append(node.data > 0)
        stack.extend(node._parents)
    return masks


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return Tensor(a.data.transpose(axes), (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return Tensor(table.data[ids], (table,), backward)


def select_position(a: Tensor, position: int) -> Tensor:
    """a[:, position, :] for (B, n, d) inputs."""

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, position, :] = g
        _accum(a, ga)

    return Tensor(a.data[:, position, :], (a,), backward)


def masked_softmax(scores: Tensor, valid: np.ndarray) -> Tensor:
    """Softmax over the last axis with invalid columns forced to exactly zero.

    Every row must have at least one valid column. valid broadcasts against
    the scores shape.
    """
    neg = np.where(valid, scores.data, -np.inf)
    peak = neg.max(axis=-1, keepdims=True)
    expd = np.exp(neg - peak)
    probs = expd / expd.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        _accum(scores, probs * (g - inner))

    return Tensor(probs, (scores,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out_data = gamma.data * normed + beta.data
    dim = x.data.shape[-1]

    def backward(g):
        gnormed = g * gamma.data
        gsum = gnormed.sum(axis=-1, keepdims=True)
        gdot = (gnormed * normed).sum(axis=-1, keepdims=True)
        gx = (inv / dim) * (dim * gnormed - gsum - normed * gdot)
        _accum(x, gx)
        _accum(gamma, _unbroadcast(g * normed, gamma.data.shape))
        _accum(beta, _unbroadcast(g, beta.data.shape))

    return Tensor(out_data, (x, gamma, beta), backward)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, selected: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the selected positions.

    logits: (B, n, V); targets: (B, n) int ids; selected: (B, n) bool.
    """
    count = int(selected.sum())
    if count == 0:
        raise ValueError("cross entropy needs at least one selected position")
    peak = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - peak
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + peak
    b_idx, n_idx = np.nonzero(selected)
    target_logit = logits.data[b_idx, n_idx, targets[b_idx, n_idx]]
    loss = -(target_logit - logz[b_idx, n_idx, 0]).sum() / count

    def backward(g):
        probs = np.exp(logits.data - logz)
        gl = np.zeros_like(logits.data)
        gl[b_idx, n_idx, :] = probs[b_idx, n_idx, :]
        gl[b_idx, n_idx, targets[b_idx, n_idx]] -= 1.0
        _accum(logits, gl * (g / count))

    return Tensor(loss, (logits,), backward)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits, numerically stable form."""
    z = logits.data
    y = np.asarray(labels, dtype=np.float64)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = per.mean()
    count = z.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        _accum(logits, (sig - y) * (g / count))

    return Tensor(loss, (logits,), backward)


def guiding_frobenius(
    attention: Tensor,
    targets: np.ndarray,
    row_mask: np.ndarray,
    col_mask: np.ndarray,
    head_guided: np.ndarray,
) -> Tensor:
    """Sum over batch items and guided heads of masked Frobenius distances.

    attention: (B, h, n, n); targets: same; row_mask: (B, h, n) bool of
    included rows; col_mask: (B, n) bool of real columns; head_guided: (h,)
    bool. Heads or rows outside the masks contribute nothing, matching the
    excluded-row convention of PatternMatrix.
    """
    mask = (
        row_mask[:, :, :, None]
        & col_mask[:, None, None, :]
        & head_guided[None, :, None, None]
    )
    diff = (attention.data - targets) * mask
    norms = np.sqrt((diff * diff).sum(axis=(-1, -2)))  # (B, h)
    out = norms.sum()

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        _accum(attention, diff / safe[:, :, None, None] * g)

    return Tensor(out, (attention,), backward)
