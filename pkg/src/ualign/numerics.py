"""Dense numeric primitives shared by the rest of the package.

Matrices are plain 2-D ``float64`` numpy arrays. Randomness always flows
through :func:`make_rng`, which derives an independent Philox stream per
label so draws in one module never shift draws in another.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

EPS = 1e-8


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


def make_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and a label path.

    The key is a SHA-256 digest of the seed and labels, so the same
    ``(seed, labels)`` gives the same stream on every platform.
    """
    h = hashlib.sha256(str(int(seed)).encode())
    for label in labels:
        h.update(b"/" + str(label).encode())
    key = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def _norms(x: np.ndarray, epsilon: float) -> np.ndarray:
    return np.maximum(np.sqrt(np.sum(x * x, axis=-1)), epsilon)


def cosine_distance_matrix(H: np.ndarray, E: np.ndarray, epsilon: float = EPS) -> np.ndarray:
    """``C[i, j] = 1 - cos(H[i], E[j])`` with norms floored at ``epsilon``."""
    H = np.asarray(H, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if H.ndim != 2 or E.ndim != 2 or H.shape[1] != E.shape[1]:
        raise ShapeError(f"cannot compare H{H.shape} with E{E.shape}: feature dims differ")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    Hn = H / _norms(H, epsilon)[:, None]
    En = E / _norms(E, epsilon)[:, None]
    return 1.0 - Hn @ En.T


def cosine_distance(h: np.ndarray, e: np.ndarray, epsilon: float = EPS) -> float:
    h = np.asarray(h, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    return float(1.0 - h @ e / (_norms(h, epsilon) * _norms(e, epsilon)))


def cosine_distance_grad(h: np.ndarray, e: np.ndarray, epsilon: float = EPS) -> np.ndarray:
    """Gradient of ``1 - cos(h, e)`` with respect to ``h``."""
    return cosine_distance_grad_rows(np.asarray(h)[None, :], np.asarray(e)[None, :], epsilon)[0]


def cosine_distance_grad_rows(H: np.ndarray, E: np.ndarray, epsilon: float = EPS) -> np.ndarray:
    """Row-wise version of :func:`cosine_distance_grad` for paired rows."""
    H = np.asarray(H, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    nh = _norms(H, epsilon)[:, None]
    ne = _norms(E, epsilon)[:, None]
    dot = np.sum(H * E, axis=1, keepdims=True)
    return -(E / (nh * ne) - dot * H / (nh**3 * ne))


def log_sum_exp(values: Sequence[float] | np.ndarray) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = np.max(v)
    if np.isneginf(m):
        return float("-inf")
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    a = list(a)
    b = list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


_GELU_C = float(np.sqrt(2.0 / np.pi))


def pca_project(points: np.ndarray, out_dims: int = 2, iterations: int = 100, seed: int = 0) -> np.ndarray:
    """Project mean-centred points onto their top principal directions.

    Uses orthogonal (block power) iteration on the covariance with a
    fixed iteration count and seeded start, so the output is
    reproducible. Each component is signed so that its first nonzero
    loading is positive.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca_project needs at least two points")
    X = X - X.mean(axis=0)
    d = X.shape[1]
    k = min(out_dims, d)
    cov = X.T @ X / X.shape[0]
    if not np.any(cov):
        return np.zeros((X.shape[0], out_dims))
    V = make_rng(seed, "pca").standard_normal((d, k))
    V, _ = np.linalg.qr(V)
    for _ in range(iterations):
        V, _ = np.linalg.qr(cov @ V)
    # order by Rayleigh quotient, then fix signs
    rq = np.einsum("ik,ij,jk->k", V, cov, V)
    V = V[:, np.argsort(-rq, kind="stable")]
    for c in range(k):
        nz = np.flatnonzero(np.abs(V[:, c]) > 1e-12)
        if nz.size and V[nz[0], c] < 0:
            V[:, c] = -V[:, c]
    out = np.zeros((X.shape[0], out_dims))
    out[:, :k] = X @ V
    return out
