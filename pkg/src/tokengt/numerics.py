"""Dense linear algebra and optimisation primitives.

Everything here works on plain float64 numpy arrays. Randomness is always
driven by an explicit integer seed so results are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RankDeficientError",
    "AsymmetricMatrixError",
    "make_rng",
    "gaussian_matrix",
    "qr_orthonormal",
    "sym_eig",
    "canonicalize_signs",
    "softmax_rows",
    "AdamWState",
    "adamw_step",
]


class RankDeficientError(ValueError):
    """Raised when a matrix that must have full rank does not."""


class AsymmetricMatrixError(ValueError):
    """Raised when a symmetric matrix was required."""


def make_rng(seed) -> np.random.Generator:
    """Return a PCG64 generator; accepts an int, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_matrix(rows: int, cols: int, seed) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian_matrix needs rows, cols >= 1, got ({rows}, {cols})")
    return make_rng(seed).standard_normal((rows, cols))


def qr_orthonormal(m: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal factor Q of a square full-rank matrix.

    Column signs are fixed so that diag(R) is positive, which makes the
    factor unique (identity maps to identity).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"qr_orthonormal expects a square matrix, got shape {m.shape}")
    q, r = np.linalg.qr(m)
    diag = np.diag(r)
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.any(np.abs(diag) <= rank_tol * scale):
        raise RankDeficientError("matrix is rank deficient; QR factor is not unique")
    return q * np.sign(diag)[None, :]


def canonicalize_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each column so its first entry with |x| > tol is positive."""
    out = np.array(vectors, dtype=np.float64, copy=True)
    for c in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, c]) > tol)
        if nz.size and out[nz[0], c] < 0:
            out[:, c] = -out[:, c]
    return out


def sym_eig(s: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as orthonormal columns, signs canonicalised (first nonzero
    component positive).
    """
    a = np.array(s, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig expects a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise AsymmetricMatrixError("sym_eig requires a symmetric matrix")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2) * 2.0)
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # A <- J^T A J with J the (p, q) Givens rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], canonicalize_signs(v[:, order])


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise (last axis) softmax with max subtraction."""
    m = np.asarray(m)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float | None = None):
    """One decoupled-weight-decay Adam update.

    ``params`` and ``grads`` map names to arrays of equal shape. Returns the
    updated parameter dict and state; inputs are not modified in place.
    """
    lr = state.lr if lr is None else lr
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**step)
        v_hat = v / (1.0 - state.beta2**step)
        new_params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)
        new_m[name] = m
        new_v[name] = v
    new_state = AdamWState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        weight_decay=state.weight_decay,
        eps=state.eps,
        step=step,
        m=new_m,
        v=new_v,
    )
    return new_params, new_state
