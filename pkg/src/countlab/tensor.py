"""Dense float32 tensors and the few primitives the rest of the system needs.

Tensors are plain numpy float32 ndarrays in row-major (C) order; this module
pins down construction, matmul and reductions with the exact shape/error
contracts the higher layers rely on. No broadcasting, views or autograd.
"""

import numpy as np

from .errors import ShapeError

# Carrier type for images, feature maps and weights throughout the package.
Tensor = np.ndarray


def tensor_new(shape, fill: float = 0.0) -> Tensor:
    """New row-major float32 tensor of `shape`, every element == fill."""
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("tensor must have at least one dimension")
    for d in shape:
        if d < 1:
            raise ShapeError(f"invalid dimension size {d} in shape {shape}")
    return np.full(shape, fill, dtype=np.float32)


def as_tensor(values) -> Tensor:
    """Convert nested lists / arrays to a contiguous float32 tensor."""
    return np.ascontiguousarray(values, dtype=np.float32)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product c[i,j] = sum_t a[i,t] * b[t,j]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a.astype(np.float32, copy=False), b.astype(np.float32, copy=False))


def reduce(t: Tensor, kind: str, axis=None):
    """Reduction over one axis or over all elements.

    kind: "sum" | "max" | "argmax". argmax ties break to the lowest index
    (numpy's convention) so downstream predictions are deterministic.
    Returns a tensor for sum/max, an integer index (or index tensor) for argmax.
    """
    if axis is not None:
        axis = int(axis)
        if axis < 0 or axis >= t.ndim:
            raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    if kind == "sum":
        out = t.sum(axis=axis, dtype=np.float32)
    elif kind == "max":
        out = t.max(axis=axis)
    elif kind == "argmax":
        if axis is None:
            return int(np.argmax(t))
        return np.argmax(t, axis=axis)
    else:
        raise ValueError(f"unknown reduction kind {kind!r}")
    if np.isscalar(out) or out.ndim == 0:
        return np.float32(out)
    return out.astype(np.float32, copy=False)
