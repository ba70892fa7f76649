"""Alignment objectives: length-normalised hard DTW, CTC, and cross-entropy.

Index pairs on warping paths are 0-based.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import EPS, ShapeError, cosine_distance_grad_rows, log_softmax, softmax

# predecessor offsets in tie-break priority order: diagonal, vertical (i+1), horizontal (j+1)
_MOVES = ((1, 1), (1, 0), (0, 1))


@dataclass(frozen=True)
class WarpingPath:
    steps: tuple[tuple[int, int], ...]

    @property
    def length(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def validate(self, I: int, J: int) -> None:
        if not self.steps or self.steps[0] != (0, 0) or self.steps[-1] != (I - 1, J - 1):
            raise ValueError("warping path must run from (0, 0) to (I-1, J-1)")
        for (a, b), (c, d) in zip(self.steps, self.steps[1:]):
            if (c - a, d - b) not in _MOVES:
                raise ValueError(f"illegal step {(a, b)} -> {(c, d)}")


@dataclass
class DtwResult:
    loss: float
    path: WarpingPath
    path_sum: float
    cost_grad: np.ndarray = field(repr=False)


def _result(C: np.ndarray, steps: list[tuple[int, int]], total: float) -> DtwResult:
    path = WarpingPath(tuple(steps))
    grad = np.zeros_like(C)
    for i, j in steps:
        grad[i, j] = 1.0 / path.length
    return DtwResult(loss=total / path.length, path=path, path_sum=total, cost_grad=grad)


def _check_cost(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 1 or C.shape[1] < 1:
        raise ValueError(f"DTW needs a non-empty 2-D cost matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("DTW cost matrix contains non-finite entries")
    return C


def dtw_forward(C) -> DtwResult:
    """Minimum-sum monotonic path over ``C``, divided by the path's length."""
    C = _check_cost(C)
    I, J = C.shape
    c = C.tolist()
    inf = float("inf")
    D = [[inf] * J for _ in range(I)]
    for i in range(I):
        row, prev = D[i], D[i - 1] if i else None
        ci = c[i]
        for j in range(J):
            if i == 0 and j == 0:
                row[j] = ci[0]
                continue
            best = inf
            if i and j:
                best = prev[j - 1]
            if i and prev[j] < best:
                best = prev[j]
            if j and row[j - 1] < best:
                best = row[j - 1]
            row[j] = ci[j] + best
    i, j = I - 1, J - 1
    steps = [(i, j)]
    while i or j:
        cands = [(i - di, j - dj) for di, dj in _MOVES if i - di >= 0 and j - dj >= 0]
        i, j = min(cands, key=lambda p: D[p[0]][p[1]])  # min keeps first on ties
        steps.append((i, j))
    steps.reverse()
    return _result(C, steps, D[I - 1][J - 1])


def count_paths(I: int, J: int) -> int:
    """Number of monotonic paths (Delannoy number D(I-1, J-1))."""
    m, n = I - 1, J - 1
    return sum(
        _binom(m, k) * _binom(n, k) * 2**k for k in range(min(m, n) + 1)
    )


def _binom(n: int, k: int) -> int:
    from math import comb

    return comb(n, k)


def dtw_bruteforce(C, max_paths: int = 10**6) -> DtwResult:
    """Exhaustive enumeration of every monotonic path; oracle for :func:`dtw_forward`.

    Among equal-sum paths, keeps the one whose reversed move sequence is
    smallest under the priority diagonal < vertical < horizontal, which
    is the path a greedy backtrace with the same priority recovers.
    """
    C = _check_cost(C)
    I, J = C.shape
    n = count_paths(I, J)
    if n > max_paths:
        raise ValueError(f"{n} monotonic paths for a {I}x{J} matrix exceeds the guard {max_paths}")
    c = C.tolist()
    best: tuple[float, tuple[int, ...], list] | None = None

    def walk(i: int, j: int, total: float, steps: list, moves: list) -> None:
        nonlocal best
        if (i, j) == (I - 1, J - 1):
            key = (total, tuple(reversed(moves)))
            if best is None or key < best[:2]:
                best = (total, key[1], list(steps))
            return
        for rank, (di, dj) in enumerate(_MOVES):
            a, b = i + di, j + dj
            if a < I and b < J:
                steps.append((a, b))
                moves.append(rank)
                walk(a, b, total + c[a][b], steps, moves)
                steps.pop()
                moves.pop()

    walk(0, 0, c[0][0], [(0, 0)], [])
    assert best is not None
    return _result(C, best[2], best[0])


def dtw_backward(result: DtwResult, H, E, epsilon: float = EPS) -> np.ndarray:
    """Gradient of the DTW loss with respect to ``H``; path and length held fixed."""
    H = np.asarray(H, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if result.cost_grad.shape != (H.shape[0], E.shape[0]) or H.shape[1] != E.shape[1]:
        raise ShapeError(
            f"DTW result over {result.cost_grad.shape} does not match H{H.shape}, E{E.shape}"
        )
    ii = np.array([s[0] for s in result.path.steps])
    jj = np.array([s[1] for s in result.path.steps])
    g = cosine_distance_grad_rows(H[ii], E[jj], epsilon) / result.path.length
    grad = np.zeros_like(H)
    np.add.at(grad, ii, g)
    return grad


# ---------------------------------------------------------------- CTC


class CtcLengthError(ValueError):
    pass


@dataclass
class CtcSetup:
    log_probs: np.ndarray
    blank_id: int

    def __post_init__(self) -> None:
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if not 0 <= self.blank_id < self.vocab_size:
            raise ValueError(f"blank_id {self.blank_id} outside vocab of {self.vocab_size}")

    @classmethod
    def from_logits(cls, logits, blank_id: int) -> "CtcSetup":
        return cls(log_softmax(np.asarray(logits, dtype=np.float64), axis=1), blank_id)

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[1]

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]


def ctc_min_length(labels: Sequence[int]) -> int:
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _ctc_check(setup: CtcSetup, labels: Sequence[int]) -> list[int]:
    labels = [int(x) for x in labels]
    if setup.blank_id in labels:
        raise ValueError("labels must not contain the blank id")
    need = ctc_min_length(labels)
    if setup.T < need:
        raise CtcLengthError(f"labels need at least T={need} frames, got T={setup.T}")
    return labels


def _extend(labels: list[int], blank: int) -> list[int]:
    ext = [blank]
    for x in labels:
        ext += [x, blank]
    return ext


def _ctc_alpha(lp: np.ndarray, ext: list[int]) -> np.ndarray:
    T, S = lp.shape[0], len(ext)
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    skip = np.array([s >= 2 and ext[s] != ext[s - 2] for s in range(S)])
    emit = lp[:, ext]
    for t in range(1, T):
        a = alpha[t - 1]
        stay = a
        step = np.concatenate(([-np.inf], a[:-1]))
        jump = np.where(skip, np.concatenate(([-np.inf, -np.inf], a[:-2])), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + emit[t]
    return alpha


def _ctc_beta(lp: np.ndarray, ext: list[int]) -> np.ndarray:
    T, S = lp.shape[0], len(ext)
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    skip_from = np.array([s + 2 < S and ext[s] != ext[s + 2] for s in range(S)])
    emit = lp[:, ext]
    for t in range(T - 2, -1, -1):
        b = beta[t + 1]
        stay = b
        step = np.concatenate((b[1:], [-np.inf]))
        jump = np.where(skip_from, np.concatenate((b[2:], [-np.inf, -np.inf])), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), jump) + emit[t]
    return beta


def _logaddexp2(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def ctc_forward(setup: CtcSetup, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """CTC negative log-likelihood and the log-alpha lattice (T x (2L+1))."""
    labels = _ctc_check(setup, labels)
    ext = _extend(labels, setup.blank_id)
    alpha = _ctc_alpha(setup.log_probs, ext)
    ll = alpha[-1, -1] if len(ext) == 1 else _logaddexp2(alpha[-1, -1], alpha[-1, -2])
    return max(0.0, -float(ll)), alpha


def ctc_backward(setup: CtcSetup, labels: Sequence[int]) -> np.ndarray:
    """Gradient of the CTC loss with respect to the logits behind ``log_probs``."""
    labels = _ctc_check(setup, labels)
    ext = _extend(labels, setup.blank_id)
    lp = setup.log_probs
    alpha = _ctc_alpha(lp, ext)
    beta = _ctc_beta(lp, ext)
    ll = alpha[-1, -1] if len(ext) == 1 else _logaddexp2(alpha[-1, -1], alpha[-1, -2])
    # alpha and beta both include the emission at t
    occ = np.exp(alpha + beta - lp[:, ext] - ll)
    post = np.zeros_like(lp)
    for s, k in enumerate(ext):
        post[:, k] += occ[:, s]
    return np.exp(lp) - post


def ctc_collapse(seq: Sequence[int], blank_id: int) -> list[int]:
    out: list[int] = []
    prev = None
    for x in seq:
        if x != prev and x != blank_id:
            out.append(int(x))
        prev = x
    return out


def ctc_bruteforce(setup: CtcSetup, labels: Sequence[int], max_strings: int = 10**6) -> float:
    """Sum probabilities of every length-T string that collapses to ``labels``."""
    V, T = setup.vocab_size, setup.T
    if V**T > max_strings:
        raise ValueError(f"{V}^{T} strings exceeds the guard {max_strings}")
    labels = _ctc_check(setup, labels)
    lp = setup.log_probs
    total = -np.inf
    for s in itertools.product(range(V), repeat=T):
        if ctc_collapse(s, setup.blank_id) == labels:
            total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(s)))
    return max(0.0, -float(total))


# ---------------------------------------------------------------- cross-entropy


def cross_entropy(logits, targets: Sequence[int], ignore_id: int = -100) -> tuple[float, np.ndarray]:
    """Mean token NLL over non-ignored positions and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"targets of shape {targets.shape} for logits {logits.shape}")
    keep = targets != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("every target position is ignored")
    rows = np.flatnonzero(keep)
    lp = log_softmax(logits[rows], axis=1)
    loss = -float(np.sum(lp[np.arange(n), targets[rows]])) / n
    grad = np.zeros_like(logits)
    g = softmax(logits[rows], axis=1)
    g[np.arange(n), targets[rows]] -= 1.0
    grad[rows] = g / n
    return loss, grad
