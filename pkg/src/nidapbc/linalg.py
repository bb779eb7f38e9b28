"""Small dense linear algebra: symmetric eigenproblems, smallest eigenvalue, spectral norm.

The Jacobi sweep runs in a compiled extension when it was built; otherwise a
numpy implementation of the same algorithm (vectorised over the batch) is
used.  Set ``NIDAPBC_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from .diffengine import tensor as _t
from .diffengine.dual import Dual
from .diffengine.tensor import Tensor

JACOBI_TOL = 1e-12


def jacobi_eigh_numpy(A, tol: float = JACOBI_TOL, max_sweeps: int = 64):
    """Cyclic Jacobi on a stack ``(B, n, n)``; ascending eigenvalues, column eigenvectors."""
    a = np.array(A, dtype=np.float64, copy=True)
    B, n, _ = a.shape
    v = np.broadcast_to(np.eye(n), (B, n, n)).copy()
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        total = np.einsum("bij,bij->b", a, a)
        off = np.sum(a * a * offmask, axis=(1, 2))
        active = (off > tol * tol * total) & (off > 0.0)
        if not active.any():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                rot = active & (apq != 0.0)
                if not rot.any():
                    continue
                safe = np.where(rot, apq, 1.0)
                tau = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                sgn = np.where(tau >= 0.0, 1.0, -1.0)
                t = np.where(rot, sgn / (np.abs(tau) + np.hypot(1.0, tau)), 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                c_, s_ = c[:, None], s[:, None]
                ap, aq = a[:, :, p].copy(), a[:, :, q].copy()
                a[:, :, p] = c_ * ap - s_ * aq
                a[:, :, q] = s_ * ap + c_ * aq
                ap, aq = a[:, p, :].copy(), a[:, q, :].copy()
                a[:, p, :] = c_ * ap - s_ * aq
                a[:, q, :] = s_ * ap + c_ * aq
                vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
                v[:, :, p] = c_ * vp - s_ * vq
                v[:, :, q] = s_ * vp + c_ * vq
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    return np.take_along_axis(w, order, axis=1), np.take_along_axis(v, order[:, None, :], axis=2)


try:
    from ._jacobi import jacobi_eigh as jacobi_eigh_compiled
except ImportError:  # extension not built
    jacobi_eigh_compiled = None

if jacobi_eigh_compiled is not None and not os.environ.get("NIDAPBC_PURE_PYTHON"):
    BACKEND = "compiled"
    _eigh = jacobi_eigh_compiled
else:
    BACKEND = "numpy"
    _eigh = jacobi_eigh_numpy


def eigh(A, tol: float = JACOBI_TOL):
    """Symmetric eigen-decomposition of ``(..., n, n)``."""
    A = np.asarray(A, dtype=np.float64)
    lead = A.shape[:-2]
    n = A.shape[-1]
    w, v = _eigh(A.reshape(-1, n, n), tol)
    return w.reshape(lead + (n,)), v.reshape(lead + (n, n))


def min_eig(A):
    """Smallest eigenvalue of a symmetric stack, differentiable in reverse mode.

    The cotangent is pushed back through ``v v^T`` for the unit eigenvector
    ``v`` of the smallest eigenvalue.  At a repeated smallest eigenvalue this is
    one valid element of the subdifferential.
    """
    if isinstance(A, Dual):
        raise TypeError("min_eig has no forward-mode rule")
    data = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    w, v = eigh(data)
    vmin = v[..., :, 0]
    out = w[..., 0]
    if not isinstance(A, Tensor):
        return out

    def backward(g):
        return (g[..., None, None] * (vmin[..., :, None] * vmin[..., None, :]),)

    return _t._make(out, (A,), backward)


def spectral_norm(A):
    """Largest singular value via the eigenvalues of ``A^T A``."""
    A = np.asarray(A, dtype=np.float64)
    w, _ = eigh(np.swapaxes(A, -1, -2) @ A)
    return np.sqrt(np.maximum(w[..., -1], 0.0))
