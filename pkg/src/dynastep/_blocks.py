"""Dual scalar/array representation for per-level state blocks.

Every per-level quantity (state block, vector-field value, Jacobian,
gain) is a plain Python float when the level dimension m is 1 and a
numpy array ((m,) vectors, (m, m) matrices) otherwise.  The control
laws are written once against the helpers below; the scalar path keeps
the inner simulation loop free of numpy call overhead, which dominates
at m = 1.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "to_block", "to_matrix", "from_block", "zeros", "mv", "mtv", "dot",
    "solve", "solve_t", "det", "inf_norm", "fd_jacobian_block",
]


def to_block(x, m):
    """Normalize an array-like to the internal block form (float or (m,))."""
    if m == 1:
        if isinstance(x, float):
            return x
        if np.ndim(x) == 0:
            return float(x)
        a = np.asarray(x, dtype=float).reshape(-1)
        if a.size != 1:
            raise ValueError(f"expected a length-1 block, got shape {np.shape(x)}")
        return float(a[0])
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.size != m:
        raise ValueError(f"expected a length-{m} block, got shape {np.shape(x)}")
    return a


def to_matrix(a, m):
    """Normalize an array-like to the internal matrix form (float or (m, m))."""
    if m == 1:
        if isinstance(a, float):
            return a
        if np.ndim(a) == 0:
            return float(a)
        arr = np.asarray(a, dtype=float).reshape(-1)
        if arr.size != 1:
            raise ValueError(f"expected a 1x1 matrix, got shape {np.shape(a)}")
        return float(arr[0])
    arr = np.asarray(a, dtype=float)
    if arr.shape != (m, m):
        raise ValueError(f"expected a {m}x{m} matrix, got shape {np.shape(a)}")
    return arr


def from_block(x):
    """Return the public numpy view of an internal block."""
    if isinstance(x, float):
        return np.array([x])
    return np.asarray(x, dtype=float)


def zeros(m):
    return 0.0 if m == 1 else np.zeros(m)


def mv(a_mat, x):
    """Matrix-vector product A x."""
    if isinstance(a_mat, float):
        return a_mat * x
    return a_mat @ x


def mtv(a_mat, x):
    """Transposed matrix-vector product A^T x."""
    if isinstance(a_mat, float):
        return a_mat * x
    return a_mat.T @ x


def dot(a, b):
    if isinstance(a, float):
        return a * b
    return float(a @ b)


def solve(a_mat, b):
    """Solve A y = b for y."""
    if isinstance(a_mat, float):
        return b / a_mat
    return np.linalg.solve(a_mat, b)


def solve_t(a_mat, b):
    """Solve A^T y = b for y."""
    if isinstance(a_mat, float):
        return b / a_mat
    return np.linalg.solve(a_mat.T, b)


def det(a_mat):
    if isinstance(a_mat, float):
        return a_mat
    return float(np.linalg.det(a_mat))


def inf_norm(x):
    if isinstance(x, float):
        return abs(x)
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def fd_jacobian_block(fun, args, wrt, h, m):
    """Central-difference Jacobian of ``fun(*args)`` w.r.t. block ``wrt``.

    ``fun`` maps blocks to a block; the result is a block matrix
    (float for m = 1, (m, m) array otherwise).  The truncation error is
    O(h^2) for smooth fields.
    """
    if h <= 0.0:
        raise ValueError("finite-difference step must be positive")
    args = list(args)
    x = args[wrt]
    if m == 1:
        args[wrt] = x + h
        fp = fun(*args)
        args[wrt] = x - h
        fm = fun(*args)
        args[wrt] = x
        return (fp - fm) / (2.0 * h)
    jac = np.empty((m, m))
    base = np.asarray(x, dtype=float)
    for j in range(m):
        step = np.zeros(m)
        step[j] = h
        args[wrt] = base + step
        fp = np.asarray(fun(*args), dtype=float)
        args[wrt] = base - step
        fm = np.asarray(fun(*args), dtype=float)
        jac[:, j] = (fp - fm) / (2.0 * h)
    args[wrt] = x
    return jac
