# src/linalg.py: dense float64 kernels shared by every other module
#
# A Matrix is a 2-D C-ordered numpy float64 array. Products go through
# np.einsum without the BLAS path so each output entry is reduced over the
# shared dimension in a fixed order, independent of how many rows sit next
# to it. That keeps packed and separate gate products bit-identical.

import numpy as np
from scipy.special import expit

from src.errors import DomainError, ParameterError, ShapeError


def as_matrix(values, cols=None):
    m = np.array(values, dtype=np.float64, order="C", ndmin=2)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got shape {m.shape}")
    return m


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def matmul_t(a, w):
    """a @ w.T, the layout used for every layer (rows of `a` are frames)."""
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[1]:
        raise ShapeError(f"cannot multiply {a.shape} by transpose of {w.shape}")
    return np.einsum("ij,kj->ik", a, w, optimize=False)


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def sigmoid(a):
    # expit branches on the sign of x, so exp never overflows
    return expit(a)


def multiply(a, b):
    _same_shape(a, b)
    return a * b


def add(a, b):
    _same_shape(a, b)
    return a + b


def subtract(a, b):
    _same_shape(a, b)
    return a - b


def scale(a, factor):
    return a * float(factor)


def log(a):
    if np.any(a <= 0):
        raise DomainError("log of a non-positive entry")
    return np.log(a)


def exp(a):
    return np.exp(a)


_UNARY = {"sigmoid": sigmoid, "log": log, "exp": exp}
_BINARY = {"multiply": multiply, "add": add, "subtract": subtract}


def map_elementwise(a, f, operand=None):
    """Apply a named elementwise kernel; binary kernels take `operand`."""
    if f in _UNARY:
        return _UNARY[f](a)
    if f in _BINARY:
        if operand is None:
            raise ShapeError(f"{f} needs a second operand")
        return _BINARY[f](a, operand)
    if f == "scale":
        return scale(a, operand)
    raise ParameterError(f"unknown elementwise function: {f}")
