"""Seeded verification suites: dynamic programs against exhaustive search,
analytic gradients against central finite differences.

Each suite returns a :class:`SuiteResult`; the CLI and the acceptance tests
both call these.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adapter import (
    AdapterConfig,
    adapter_backward,
    adapter_forward,
    adapter_init,
    ctc_logits,
    ctc_logits_backward,
)
from .losses import (
    CtcSetup,
    cross_entropy,
    ctc_backward,
    ctc_bruteforce,
    ctc_forward,
    ctc_min_length,
    dtw_backward,
    dtw_bruteforce,
    dtw_forward,
)
from .numerics import cosine_distance, cosine_distance_grad, cosine_distance_matrix, make_rng
from .toyllm import LlmConfig, llm_backward_to_inputs, llm_forward, llm_init


@dataclass
class SuiteResult:
    name: str
    trials: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.trials > 0 and not self.failures

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{self.name}: {status} {self.trials - len(self.failures)}/{self.trials}"


def central_diff(f: Callable[[], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Numerical gradient of ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        up = f()
        flat[k] = old - step
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


# ---------------------------------------------------------------- DTW


def dtw_suite(trials: int = 500, seed: int = 0, max_side: int = 6) -> SuiteResult:
    """DP loss must equal the exhaustive loss bit for bit, and paths must agree.

    One trial in five uses a cost matrix on a coarse grid so that ties are
    common and the tie-break order is exercised.
    """
    res = SuiteResult("dtw")
    for k in range(trials):
        rng = make_rng(seed, "oracle-dtw", k)
        I, J = (int(v) for v in rng.integers(1, max_side + 1, size=2))
        C = rng.uniform(0, 2, size=(I, J))
        if k % 5 == 0:
            C = np.round(C * 2) / 2
        a, b = dtw_forward(C), dtw_bruteforce(C)
        res.trials += 1
        if a.loss != b.loss or a.path_sum != b.path_sum or a.path != b.path:
            res.failures.append(f"trial {k} ({I}x{J}): dp {a.loss!r} vs brute {b.loss!r}")
    return res


# ---------------------------------------------------------------- CTC


def ctc_suite(trials: int = 200, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Forward lattice against enumeration of every string, on instances
    whose string count stays below the enumeration guard."""
    res = SuiteResult("ctc")
    k = 0
    while res.trials < trials:
        rng = make_rng(seed, "oracle-ctc", k)
        k += 1
        V = int(rng.integers(2, 5))
        T = int(rng.integers(1, 7))
        L = int(rng.integers(1, T + 1))
        labels = [int(v) for v in rng.integers(0, V - 1, size=L)]
        if ctc_min_length(labels) > T or V**T > 10**5:
            continue
        setup = CtcSetup.from_logits(rng.standard_normal((T, V)) * 2, blank_id=V - 1)
        a = ctc_forward(setup, labels)[0]
        b = ctc_bruteforce(setup, labels)
        res.trials += 1
        if not abs(a - b) <= tol:
            res.failures.append(f"instance {k - 1} (T={T}, V={V}, labels={labels}): {a!r} vs {b!r}")
    return res


# ---------------------------------------------------------------- gradients


def _tie_gap(C: np.ndarray) -> float:
    """Smallest gap between the best and second-best predecessor over all cells."""
    I, J = C.shape
    D = np.full((I, J), np.inf)
    gap = np.inf
    for i, j in itertools.product(range(I), range(J)):
        if i == j == 0:
            D[0, 0] = C[0, 0]
            continue
        prev = sorted(D[a, b] for a, b in ((i - 1, j - 1), (i - 1, j), (i, j - 1)) if a >= 0 and b >= 0)
        if len(prev) > 1 and np.isfinite(prev[1]):
            gap = min(gap, prev[1] - prev[0])
        D[i, j] = C[i, j] + prev[0]
    return gap


def grad_suite(seed: int = 0, standalone_tol: float = 1e-5, composite_tol: float = 1e-4) -> SuiteResult:
    res = SuiteResult("grad")

    def check(name: str, err: float, tol: float) -> None:
        res.trials += 1
        if not err < tol:
            res.failures.append(f"{name}: relative error {err:.3g} >= {tol:g}")

    # cosine distance, standalone
    for k in range(5):
        rng = make_rng(seed, "oracle-cos", k)
        h, e = rng.standard_normal(7), rng.standard_normal(7)
        check(f"cosine[{k}]", rel_err(cosine_distance_grad(h, e), central_diff(lambda: cosine_distance(h, e), h)),
              standalone_tol)

    # DTW through the adapter, composite; draws whose optimal path is
    # nearly tied are skipped because the loss is not differentiable there
    acfg = AdapterConfig(in_dim=5, hidden_dim=6, out_dim=8, mlp_hidden=7)
    done = 0
    for k in itertools.count():
        if done == 3:
            break
        rng = make_rng(seed, "oracle-dtw-adapter", k)
        ad = adapter_init(acfg, k)
        x = rng.standard_normal((11, 5))
        E = rng.standard_normal((4, 8))
        H, tape = adapter_forward(ad, x)
        if _tie_gap(cosine_distance_matrix(H, E)) < 1e-3:
            continue
        r = dtw_forward(cosine_distance_matrix(H, E))
        adapter_backward(ad, tape, dtw_backward(r, H, E))

        def loss() -> float:
            return dtw_forward(cosine_distance_matrix(adapter_forward(ad, x)[0], E)).loss

        for name in ("conv0_w", "mlp1_w", "mlp2_w", "ln_gain", "ln_bias"):
            check(f"dtw-adapter[{k}].{name}", rel_err(ad.grads[name], central_diff(loss, ad.tensors[name])),
                  composite_tol)
        done += 1

    # CTC head on a fixed H, standalone
    for k in range(3):
        rng = make_rng(seed, "oracle-ctc-head", k)
        ad = adapter_init(acfg, k)
        H = rng.standard_normal((6, 8))
        table = rng.standard_normal((4, 8))
        labels = [int(v) for v in rng.integers(0, 4, size=2)]
        setup = CtcSetup.from_logits(ctc_logits(ad, H, table), 4)
        gH = ctc_logits_backward(ad, H, table, ctc_backward(setup, labels))

        def closs() -> float:
            return ctc_forward(CtcSetup.from_logits(ctc_logits(ad, H, table), 4), labels)[0]

        check(f"ctc-head[{k}].H", rel_err(gH, central_diff(closs, H)), standalone_tol)
        for name in ("blank_vector", "logit_scale"):
            check(f"ctc-head[{k}].{name}", rel_err(ad.grads[name], central_diff(closs, ad.tensors[name])),
                  standalone_tol)

    # cross-entropy through the decoder and the adapter, composite
    lcfg = LlmConfig(vocab_size=11, d_model=8, layers=2, heads=2, ffn_mult=2, max_len=32, seed=seed)
    llm = llm_init(lcfg)
    for k in range(2):
        rng = make_rng(seed, "oracle-ce", k)
        ad = adapter_init(acfg, 10 + k)
        x = rng.standard_normal((9, 5))
        n_h = acfg.output_length(9)
        prefix, suffix = llm.embed[[1, 2]], llm.embed[[3, 4, 5]]
        labels = np.full(2 + n_h + 3, -100)
        labels[2 + n_h:] = rng.integers(0, 11, size=3)

        def celoss() -> float:
            X = np.vstack([prefix, adapter_forward(ad, x)[0], suffix])
            return cross_entropy(llm_forward(llm, X)[0], labels)[0]

        H, tape = adapter_forward(ad, x)
        logits, ltape = llm_forward(llm, np.vstack([prefix, H, suffix]))
        gX = llm_backward_to_inputs(llm, ltape, cross_entropy(logits, labels)[1])
        gx = adapter_backward(ad, tape, gX[2: 2 + n_h])
        for name in ("conv0_w", "mlp1_w", "mlp2_b"):
            check(f"ce-llm-adapter[{k}].{name}", rel_err(ad.grads[name], central_diff(celoss, ad.tensors[name])),
                  composite_tol)
        check(f"ce-llm-adapter[{k}].speech", rel_err(gx, central_diff(celoss, x)), composite_tol)
    return res


SUITES = {"dtw": dtw_suite, "ctc": ctc_suite, "grad": grad_suite}


def run_suites(names: list[str]) -> list[SuiteResult]:
    return [SUITES[n]() for n in names]
