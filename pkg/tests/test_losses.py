import itertools
import math

import numpy as np
import pytest

from helpers import central_diff, rel_err
from ualign.losses import (
    CtcLengthError,
    CtcSetup,
    cross_entropy,
    ctc_backward,
    ctc_bruteforce,
    ctc_forward,
    dtw_backward,
    dtw_bruteforce,
    dtw_forward,
)
from ualign.numerics import cosine_distance_matrix, log_softmax, make_rng, softmax


def test_dtw_single_cell():
    r = dtw_forward([[0.37]])
    assert r.loss == 0.37 and r.path.steps == ((0, 0),) and r.path.length == 1


def test_dtw_all_zero():
    assert dtw_forward(np.zeros((2, 3))).loss == 0


def test_dtw_two_by_two_enumerated():
    C = np.array([[0.2, 0.9], [0.8, 0.1]])
    # the three monotonic paths, summed by hand
    sums = {"diag": 0.2 + 0.1, "down-right": 0.2 + 0.8 + 0.1, "right-down": 0.2 + 0.9 + 0.1}
    assert min(sums, key=sums.get) == "diag"
    r = dtw_forward(C)
    assert r.path.steps == ((0, 0), (1, 1))
    assert r.path_sum == pytest.approx(0.3)
    assert r.loss == pytest.approx(0.15)


def test_dtw_bruteforce_examples():
    r = dtw_bruteforce([[0, 1], [1, 0]])
    assert r.loss == 0 and r.path.steps == ((0, 0), (1, 1))
    row = np.array([[0.1, 0.5, 0.3, 0.9, 0.2]])
    r = dtw_bruteforce(row)
    assert r.path.length == 5 and r.loss == pytest.approx(row.mean())
    with pytest.raises(ValueError, match="guard"):
        dtw_bruteforce(np.zeros((12, 12)))


def test_dtw_result_invariants():
    C = make_rng(0, "inv").uniform(size=(4, 5))
    r = dtw_forward(C)
    r.path.validate(4, 5)
    on = np.zeros_like(C, dtype=bool)
    for i, j in r.path.steps:
        on[i, j] = True
    assert np.all(r.cost_grad[on] == 1 / r.path.length)
    assert np.all(r.cost_grad[~on] == 0)
    assert r.loss == r.path_sum / r.path.length


def test_dtw_matches_bruteforce_200_small_trials():
    rng = make_rng(5, "dtw-small")
    for _ in range(200):
        I, J = rng.integers(1, 5, size=2)
        C = rng.uniform(size=(I, J))
        a, b = dtw_forward(C), dtw_bruteforce(C)
        assert a.loss == b.loss and a.path == b.path


def test_dtw_tie_break_prefers_diagonal_then_vertical():
    r = dtw_forward(np.zeros((3, 3)))
    assert r.path.steps == ((0, 0), (1, 1), (2, 2))
    r = dtw_forward(np.zeros((3, 2)))
    # backtrace from (2,1): diagonal to (1,0), then vertical to (0,0)
    assert r.path.steps == ((0, 0), (1, 0), (2, 1))
    assert dtw_bruteforce(np.zeros((3, 2))).path == r.path


def test_dtw_diagonal_zero_cost():
    C = 0.5 + make_rng(3, "dd").uniform(size=(5, 5))
    np.fill_diagonal(C, 0.0)
    r = dtw_forward(C)
    assert r.loss == 0 and r.path.steps == tuple((i, i) for i in range(5))


def test_dtw_single_pair_equals_cosine_distance():
    h, e = np.array([[1.0, 2.0, 0.5]]), np.array([[0.3, -1.0, 2.0]])
    C = cosine_distance_matrix(h, e)
    assert dtw_forward(C).loss == C[0, 0]


def test_dtw_scale_invariance():
    rng = make_rng(4, "scale")
    H, E = rng.standard_normal((5, 6)), rng.standard_normal((4, 6))
    a = dtw_forward(cosine_distance_matrix(H, E))
    s = rng.uniform(0.5, 3.0, size=(5, 1))
    t = rng.uniform(0.5, 3.0, size=(4, 1))
    b = dtw_forward(cosine_distance_matrix(H * s, E * t))
    assert b.path == a.path and abs(a.loss - b.loss) < 1e-12


def test_dtw_backward_zero_at_alignment():
    E = make_rng(1, "e").standard_normal((3, 4))
    H = E[[0, 1, 1, 2]].copy()
    r = dtw_forward(cosine_distance_matrix(H, E))
    assert r.loss == pytest.approx(0, abs=1e-15)
    assert np.max(np.abs(dtw_backward(r, H, E))) < 1e-12


def _tie_gap(C):
    """Smallest accumulated-cost gap between competing predecessors."""
    I, J = C.shape
    D = np.full((I, J), np.inf)
    gap = np.inf
    for i in range(I):
        for j in range(J):
            if i == j == 0:
                D[0, 0] = C[0, 0]
                continue
            prev = sorted(D[a, b] for a, b in ((i - 1, j - 1), (i - 1, j), (i, j - 1)) if a >= 0 and b >= 0)
            if len(prev) > 1:
                gap = min(gap, prev[1] - prev[0])
            D[i, j] = C[i, j] + prev[0]
    return gap


def test_dtw_backward_finite_differences():
    seed = 0
    while True:
        rng = make_rng(seed, "dtw-fd")
        H, E = rng.standard_normal((4, 8)), rng.standard_normal((3, 8))
        if _tie_gap(cosine_distance_matrix(H, E)) > 1e-4:
            break
        seed += 1
    r = dtw_forward(cosine_distance_matrix(H, E))
    g = dtw_backward(r, H, E)
    X = H.copy()
    fd = central_diff(lambda: dtw_forward(cosine_distance_matrix(X, E)).loss, X)
    assert rel_err(g, fd) < 1e-5


def test_dtw_backward_row_scaling_halves_gradient():
    rng = make_rng(9, "half")
    H, E = rng.standard_normal((4, 5)), rng.standard_normal((3, 5))
    r = dtw_forward(cosine_distance_matrix(H, E))
    g1 = dtw_backward(r, H, E)
    H2 = H.copy()
    H2[1] *= 2
    g2 = dtw_backward(dtw_forward(cosine_distance_matrix(H2, E)), H2, E)
    assert np.allclose(g2[1], g1[1] / 2, atol=1e-14)
    assert abs(g1[1] @ H[1]) < 1e-12  # gradient is tangent to the sphere


# ---------------------------------------------------------------- CTC


def test_ctc_single_frame():
    lp = log_softmax(make_rng(0, "c1").standard_normal((1, 3)))
    loss, _ = ctc_forward(CtcSetup(lp, blank_id=0), [2])
    assert loss == pytest.approx(-lp[0, 2], abs=1e-15)


def test_ctc_uniform_two_frames():
    lp = np.full((2, 3), -math.log(3))
    # valid alignments of [a]: "aa", "a_", "_a"
    loss, _ = ctc_forward(CtcSetup(lp, 0), [1])
    assert loss == pytest.approx(-math.log(3 / 9), abs=1e-12)


def test_ctc_repeat_matches_bruteforce():
    lp = log_softmax(make_rng(1, "c4").standard_normal((4, 3)))
    s = CtcSetup(lp, 0)
    assert abs(ctc_forward(s, [1, 1])[0] - ctc_bruteforce(s, [1, 1])) < 1e-9


def test_ctc_length_errors_agree():
    s = CtcSetup(np.full((2, 3), -math.log(3)), 0)
    with pytest.raises(CtcLengthError, match="T=3"):
        ctc_forward(s, [1, 1])
    with pytest.raises(CtcLengthError, match="T=3"):
        ctc_bruteforce(s, [1, 1])


def test_ctc_t3_binary_enumeration():
    lp = log_softmax(make_rng(2, "bin").standard_normal((3, 2)))
    s = CtcSetup(lp, 0)
    nonblank = [x for x in itertools.product(range(2), repeat=3) if any(x)]
    assert len(nonblank) == 7
    # of those 7, "101" collapses to [1, 1]; the other 6 collapse to [1]
    strings = [x for x in nonblank if [k for k, _ in itertools.groupby(x) if k] == [1]]
    assert len(strings) == 6
    p = sum(math.exp(sum(lp[t, k] for t, k in enumerate(x))) for x in strings)
    assert ctc_forward(s, [1])[0] == pytest.approx(-math.log(p), abs=1e-12)
    assert ctc_bruteforce(s, [1]) == pytest.approx(-math.log(p), abs=1e-12)


def test_ctc_unique_alignment():
    logits = make_rng(3, "u").standard_normal((2, 4))
    s = CtcSetup.from_logits(logits, 0)
    loss, _ = ctc_forward(s, [1, 2])
    assert loss == pytest.approx(-(s.log_probs[0, 1] + s.log_probs[1, 2]), abs=1e-12)
    g = ctc_backward(s, [1, 2])
    expected = softmax(logits)
    expected[0, 1] -= 1
    expected[1, 2] -= 1
    assert np.max(np.abs(g - expected)) < 1e-12


def test_ctc_backward_finite_differences():
    logits = make_rng(4, "cfd").standard_normal((4, 4))
    labels = [1, 3]
    g = ctc_backward(CtcSetup.from_logits(logits, 0), labels)
    X = logits.copy()
    fd = central_diff(lambda: ctc_forward(CtcSetup.from_logits(X, 0), labels)[0], X)
    assert rel_err(g, fd) < 1e-5
    assert np.max(np.abs(g.sum(axis=1))) < 1e-9


def test_ctc_rows_of_setup_normalised():
    s = CtcSetup.from_logits(make_rng(5, "n").standard_normal((6, 5)) * 3, blank_id=4)
    assert np.max(np.abs(np.log(np.exp(s.log_probs).sum(axis=1)))) < 1e-9
    with pytest.raises(ValueError):
        CtcSetup(s.log_probs, blank_id=5)


# ---------------------------------------------------------------- CE


def test_cross_entropy_examples():
    V = 7
    loss, _ = cross_entropy(np.zeros((3, V)), [1, 2, 3])
    assert loss == pytest.approx(math.log(V))
    big = np.zeros((2, V))
    big[0, 1] = big[1, 4] = 60.0
    assert cross_entropy(big, [1, 4])[0] < 1e-20
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, V)), [-100, -100])


def test_cross_entropy_grad_and_ignore():
    logits = make_rng(6, "ce").standard_normal((5, 7))
    targets = [1, -100, 3, 6, 0]
    _, g = cross_entropy(logits, targets)
    assert not np.any(g[1])
    X = logits.copy()
    fd = central_diff(lambda: cross_entropy(X, targets)[0], X)
    assert rel_err(g, fd) < 1e-5
