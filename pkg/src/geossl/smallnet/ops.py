"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects; plain arrays are
wrapped as constants. Only the operations the point-cloud network needs are
provided.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, constant


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return Tensor(a.data - b.data, (a, b), back, "sub")


def scale(x, c: float) -> Tensor:
    x = constant(x)
    c = float(c)

    def back(g):
        x._accumulate(g * c)

    return Tensor(x.data * c, (x,), back, "scale")


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m) and a 2-D ``b`` of shape (m, n)."""
    a, b = constant(a), constant(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            lhs = a.data.reshape(-1, a.shape[-1])
            b._accumulate(lhs.T @ g.reshape(-1, b.shape[1]))

    return Tensor(a.data @ b.data, (a, b), back, "matmul")


def add_bias(x, bias) -> Tensor:
    x, bias = constant(x), constant(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")

    def back(g):
        if x.requires_grad:
            x._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, bias.shape[0]).sum(axis=0))

    return Tensor(x.data + bias.data, (x, bias), back, "add_bias")


def relu(x) -> Tensor:
    x = constant(x)
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return Tensor(np.where(mask, x.data, 0.0), (x,), back, "relu")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [constant(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
            if x.requires_grad:
                x._accumulate(piece)

    return Tensor(out, xs, back, "concat")


def reshape(x, shape) -> Tensor:
    x = constant(x)

    def back(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), (x,), back, "reshape")


def unsqueeze(x, axis: int) -> Tensor:
    x = constant(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def gather_rows(x, indices) -> Tensor:
    """Row lookup.

    ``x`` of shape (n, d) with integer ``indices`` of any shape gives
    ``indices.shape + (d,)``. ``x`` of shape (b, n, d) with ``indices`` of shape
    (b, ...) gathers per batch element.
    """
    x = constant(x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_rows: indices must be integers, got {idx.dtype}")
    if x.data.ndim == 2:
        flat = idx
    elif x.data.ndim == 3 and idx.ndim >= 1 and idx.shape[0] == x.shape[0]:
        offsets = (np.arange(x.shape[0]) * x.shape[1]).reshape((-1,) + (1,) * (idx.ndim - 1))
        flat = idx + offsets
    else:
        raise ShapeError(f"gather_rows: incompatible shapes {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise IndexError("gather_rows: index out of range")
    d = x.shape[-1]
    table = x.data.reshape(-1, d)

    def back(g):
        cells = (flat.reshape(-1, 1) * d + np.arange(d)).ravel()
        gx = np.bincount(cells, weights=g.reshape(-1), minlength=table.size)
        x._accumulate(gx.reshape(x.shape))

    return Tensor(table[flat], (x,), back, "gather_rows")


def gather_max(x, indices):
    """``max_j x[indices[..., j]]`` per channel: a fused gather + max.

    ``x`` is (b, n, d) and ``indices`` (b, m, k); the result is (b, m, d).
    Only the winning row of each channel receives gradient; ties go to the
    first neighbour in ``indices`` order. Returns ``(result, winner_rows)``.
    """
    x = constant(x)
    idx = np.asarray(indices)
    if x.data.ndim != 3 or idx.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_max: incompatible shapes {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError("gather_max: index out of range")
    b, n, d = x.shape
    flat = idx + (np.arange(b) * n)[:, None, None]
    table = x.data.reshape(-1, d)
    gathered = table[flat]                                   # (b, m, k, d)
    arg = np.argmax(gathered, axis=2)                        # first maximum wins ties
    rows = np.take_along_axis(flat[..., None], arg[:, :, None, :], axis=2)[:, :, 0, :]
    out = table[rows, np.arange(d)]

    def back(g):
        cells = (rows * d + np.arange(d)).ravel()
        gx = np.bincount(cells, weights=g.ravel(), minlength=b * n * d)
        x._accumulate(gx.reshape(x.shape))

    return Tensor(out, (x,), back, "gather_max"), rows - (np.arange(b) * n)[:, None, None]


def max_over_axis(x, axis: int):
    """Maximum along ``axis`` plus the arg-max used for routing gradients.

    Ties resolve to the smallest index along the axis.
    """
    x = constant(x)
    axis = axis % x.data.ndim
    arg = np.argmax(x.data, axis=axis)
    picked = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, picked, axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, picked, np.expand_dims(g, axis), axis=axis)
        x._accumulate(gx)

    return Tensor(out, (x,), back, "max_over_axis"), arg


def mean_over_axis(x, axis: int) -> Tensor:
    x = constant(x)
    axis = axis % x.data.ndim
    n = x.shape[axis]

    def back(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, x.shape))

    return Tensor(x.data.mean(axis=axis), (x,), back, "mean_over_axis")


def sum_all(x) -> Tensor:
    x = constant(x)

    def back(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor(x.data.sum(), (x,), back, "sum_all")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of rows of ``logits`` (m, c) against integer labels."""
    logits = constant(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: incompatible shapes {logits.shape} and {labels.shape}")
    m = logits.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {logits.shape[1]})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    loss = (logsumexp - shifted[rows, labels]).mean()

    def back(g):
        p = np.exp(shifted - logsumexp[:, None])
        p[rows, labels] -= 1.0
        logits._accumulate(p * (g / m))

    return Tensor(loss, (logits,), back, "softmax_cross_entropy")


def mse(pred, target, mask=None) -> Tensor:
    """Squared error summed over the last axis, averaged over unmasked rows.

    ``pred`` and ``target`` are (m, f); ``mask`` is a boolean (m,) selecting the
    rows that count. Returns 0 when no row is selected.
    """
    pred, target = constant(pred), constant(target)
    if pred.shape != target.shape or pred.data.ndim != 2:
        raise ShapeError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    keep = np.ones(pred.shape[0], bool) if mask is None else np.asarray(mask, bool)
    if keep.shape != (pred.shape[0],):
        raise ShapeError(f"mse: mask shape {keep.shape} does not match {pred.shape}")
    m = int(keep.sum())
    diff = np.where(keep[:, None], pred.data - target.data, 0.0)
    value = (diff * diff).sum() / m if m else 0.0

    def back(g):
        if m == 0:
            return
        scaled = diff * (2.0 * g / m)
        if pred.requires_grad:
            pred._accumulate(scaled)
        if target.requires_grad:
            target._accumulate(-scaled)

    return Tensor(value, (pred, target), back, "mse")
