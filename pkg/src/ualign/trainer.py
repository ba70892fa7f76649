"""Training regimes, optimizer, FLOP ledger and evaluation.

Sequence layout fed to the frozen decoder for every LLM-side regime::

    [prompt_0, prompt_1, h_1 .. h_I, BOS, y_1 .. y_n]   -> predicts y_1 .. y_n, EOS

The cross-entropy covers the positions from BOS onward; each utterance's
loss is averaged over its target positions and the batch loss is the
mean over utterances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import corpus as C
from .adapter import (
    AdapterParams,
    adapter_backward,
    adapter_flops,
    adapter_forward,
    ctc_logits,
    ctc_logits_backward,
)
from .losses import CtcSetup, cross_entropy, ctc_backward, ctc_forward, dtw_backward, dtw_forward
from .numerics import cosine_distance_matrix, edit_distance, make_rng
from .toyllm import LlmParams, embed_tokens, llm_backward, llm_flops, llm_forward

log = logging.getLogger(__name__)

REGIMES = ("ualign_dtw", "ualign_ctc", "asr_based", "directly_mt")
IGNORE = -100


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "ualign_dtw"
    stage1_epochs: int = 3
    stage2_epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 0
    stage2_tasks: tuple[str, ...] = C.TASKS

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(x) for k, x in tensors.items()},
                   {k: np.zeros_like(x) for k, x in tensors.items()})


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in tensor {name!r}")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip: float | None = 1.0) -> float:
    """Clip, then one bias-corrected Adam update in place. Returns the pre-clip norm."""
    norm = clip_grads(grads, clip or 0.0)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, x in tensors.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        x -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


# ---------------------------------------------------------------- FLOP ledger

PHASES = ("adapter_fwd", "adapter_bwd", "loss", "llm_fwd", "llm_bwd")


@dataclass
class FlopLedger:
    """Cumulative FLOPs (2 per multiply-accumulate) per phase.

    Closed forms charged per utterance:
      adapter_fwd  = adapter_flops(T); adapter_bwd = 2 * adapter_fwd
      loss (DTW)   = 3 * 2*I*J*d     cosine cost matrix, forward plus backward
      loss (CTC)   = 3 * 2*I*(V+1)*d similarity head, forward plus backward
      llm_fwd/bwd  = llm_flops(S, forward/backward) on the utterance's own length S
    Embedding-table lookups cost nothing.
    """

    totals: dict[str, int] = field(default_factory=lambda: {p: 0 for p in PHASES})

    def charge(self, phase: str, flops: int) -> None:
        if flops < 0:
            raise ValueError("negative FLOP charge")
        self.totals[phase] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.totals.values())

    def snapshot(self) -> dict[str, int]:
        return dict(self.totals, total=self.total)


# ---------------------------------------------------------------- sequence assembly


def llm_target(sample: C.Sample, task: str) -> list[int]:
    return list(sample.tokens) if task == "asr" else list(sample.target)


def build_inputs(llm: LlmParams, task: str, H: np.ndarray, target: Sequence[int]) -> tuple[np.ndarray, np.ndarray, int]:
    """Input embeddings, per-position targets, and the row offset of ``H``."""
    prompt = embed_tokens(llm, C.PROMPTS[task])
    tgt = embed_tokens(llm, [C.BOS, *target])
    X = np.vstack([prompt, H, tgt])
    labels = np.full(X.shape[0], IGNORE, dtype=np.int64)
    start = len(prompt) + H.shape[0]
    labels[start:] = [*target, C.EOS]
    return X, labels, len(prompt)


def _pad(seqs: list[np.ndarray]) -> np.ndarray:
    S = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), S, seqs[0].shape[1]))
    for b, s in enumerate(seqs):
        out[b, : s.shape[0]] = s
    return out


# ---------------------------------------------------------------- epochs


@dataclass
class Trainer:
    """Holds the adapter, optimizer state, ledger and curve for one run."""

    adapter: AdapterParams
    llm: LlmParams
    config: TrainConfig
    ledger: FlopLedger = field(default_factory=FlopLedger)
    adam: AdamState | None = None
    step: int = 0
    curve: list[dict] = field(default_factory=list)
    skipped: dict[str, int] = field(default_factory=dict)
    phase: str = ""
    on_step: Callable[["Trainer", float], None] | None = None

    def __post_init__(self) -> None:
        if self.adam is None:
            self.adam = AdamState.zeros_like(self.adapter.tensors)

    def _skip(self, why: str) -> None:
        self.skipped[why] = self.skipped.get(why, 0) + 1

    def _update(self, loss: float) -> None:
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at step {self.step}")
        c = self.config
        adam_step(self.adapter.tensors, self.adapter.grads, self.adam, c.lr, c.beta1, c.beta2, c.eps, c.grad_clip_norm)
        self.adapter.zero_grad()
        self.step += 1
        if self.on_step is not None:
            self.on_step(self, loss)

    def _forward(self, s: C.Sample):
        H, tape = adapter_forward(self.adapter, s.speech)
        if not np.all(np.isfinite(H)):
            raise NonFiniteError(f"non-finite adapter output for sample {s.id!r} at step {self.step}")
        self.ledger.charge("adapter_fwd", adapter_flops(self.adapter.config, s.T))
        return H, tape

    def _batches(self, n: int, epoch_key: str) -> Iterable[np.ndarray]:
        order = make_rng(self.config.seed, "order", epoch_key).permutation(n)
        bs = self.config.batch_size
        for k in range(0, n, bs):
            yield order[k: k + bs]

    # -- stage 1, U-Align --------------------------------------------------

    def ualign_epoch(self, samples: list[C.Sample], epoch_key: str, loss_kind: str = "dtw") -> float:
        cfg = self.adapter.config
        E_all = self.llm.embed
        d = cfg.out_dim
        V = E_all.shape[0]
        losses = []
        for batch in self._batches(len(samples), epoch_key):
            self.adapter.zero_grad()
            total, n = 0.0, 0
            work = []
            for k in batch:
                s = samples[k]
                if cfg.output_length(s.T) < 1:
                    self._skip("too_short")
                    continue
                if loss_kind == "ctc" and cfg.output_length(s.T) < len(s.tokens):
                    self._skip("ctc_too_short")
                    continue
                work.append(s)
            for s in work:
                H, tape = self._forward(s)
                I = H.shape[0]
                if loss_kind == "dtw":
                    E = embed_tokens(self.llm, s.tokens)
                    r = dtw_forward(cosine_distance_matrix(H, E))
                    gH = dtw_backward(r, H, E) / len(work)
                    loss = r.loss
                    self.ledger.charge("loss", 3 * 2 * I * len(s.tokens) * d)
                else:
                    logits = ctc_logits(self.adapter, H, E_all)
                    setup = CtcSetup.from_logits(logits, blank_id=V)
                    loss, _ = ctc_forward(setup, s.tokens)
                    loss /= len(s.tokens)
                    gl = ctc_backward(setup, s.tokens) / (len(s.tokens) * len(work))
                    gH = ctc_logits_backward(self.adapter, H, E_all, gl)
                    self.ledger.charge("loss", 3 * 2 * I * (V + 1) * d)
                adapter_backward(self.adapter, tape, gH)
                self.ledger.charge("adapter_bwd", 2 * adapter_flops(cfg, s.T))
                total += loss
                n += 1
            if n == 0:
                continue
            losses.append(total / n)
            self._update(total / n)
        return float(np.mean(losses)) if losses else float("nan")

    # -- LLM-side epochs (ASR-based alignment, multitask) -------------------

    def llm_epoch(self, samples: list[C.Sample], epoch_key: str, tasks: Sequence[str] | None = None) -> float:
        """One pass of next-token training through the frozen decoder.

        ``tasks`` restricts the task mix; samples whose task is excluded are
        trained on their transcript with the ASR prompt when ``tasks`` is
        ``("asr",)`` and skipped otherwise.
        """
        cfg = self.adapter.config
        lc = self.llm.config
        asr_only = tasks is not None and tuple(tasks) == ("asr",)
        losses = []
        for batch in self._batches(len(samples), epoch_key):
            self.adapter.zero_grad()
            items = []
            for k in batch:
                s = samples[k]
                task = "asr" if asr_only else s.task
                if tasks is not None and task not in tasks:
                    self._skip("task_excluded")
                    continue
                if cfg.output_length(s.T) < 1:
                    self._skip("too_short")
                    continue
                target = llm_target(s, task)
                if 2 + cfg.output_length(s.T) + 1 + len(target) > lc.max_len:
                    self._skip("too_long")
                    continue
                H, tape = self._forward(s)
                X, labels, off = build_inputs(self.llm, task, H, target)
                items.append((s, H, tape, X, labels, off))
            if not items:
                continue
            logits, ltape = llm_forward(self.llm, _pad([it[3] for it in items]))
            G = np.zeros_like(logits)
            total = 0.0
            for b, (s, H, tape, X, labels, off) in enumerate(items):
                S = X.shape[0]
                loss, g = cross_entropy(logits[b, :S], labels, IGNORE)
                G[b, :S] = g / len(items)
                total += loss
                self.ledger.charge("llm_fwd", llm_flops(lc, S, "forward"))
                self.ledger.charge("llm_bwd", llm_flops(lc, S, "backward"))
            gX = llm_backward(self.llm, ltape, G)
            for b, (s, H, tape, X, labels, off) in enumerate(items):
                adapter_backward(self.adapter, tape, gX[b, off: off + H.shape[0]])
                self.ledger.charge("adapter_bwd", 2 * adapter_flops(cfg, s.T))
            losses.append(total / len(items))
            self._update(total / len(items))
        return float(np.mean(losses)) if losses else float("nan")


def stage1_ualign_epoch(trainer: Trainer, samples: list[C.Sample], epoch: int = 0) -> float:
    kind = "ctc" if trainer.config.regime == "ualign_ctc" else "dtw"
    return trainer.ualign_epoch(samples, f"stage1-{epoch}", kind)


def stage1_asr_epoch(trainer: Trainer, samples: list[C.Sample], epoch: int = 0) -> float:
    return trainer.llm_epoch(samples, f"stage1-{epoch}", tasks=("asr",))


def stage2_multitask_epoch(trainer: Trainer, samples: list[C.Sample], epoch: int = 0,
                           tasks: Sequence[str] | None = None) -> float:
    return trainer.llm_epoch(samples, f"stage2-{epoch}", tasks=tasks)


# ---------------------------------------------------------------- evaluation


def greedy_decode(adapter: AdapterParams, llm: LlmParams, samples: Sequence[C.Sample],
                  tasks: Sequence[str] | None = None, max_len: int = 32) -> list[list[int]]:
    """Batched greedy decoding; stops per sample at EOS or ``max_len`` tokens."""
    tasks = list(tasks) if tasks is not None else [s.task for s in samples]
    seqs = []
    for s, task in zip(samples, tasks):
        H, _ = adapter_forward(adapter, s.speech)
        seqs.append(np.vstack([embed_tokens(llm, C.PROMPTS[task]), H, embed_tokens(llm, [C.BOS])]))
    outs: list[list[int]] = [[] for _ in samples]
    active = list(range(len(samples)))
    for _ in range(max_len + 1):
        if not active:
            break
        logits, _ = llm_forward(llm, _pad([seqs[k] for k in active]))
        still = []
        for row, k in enumerate(active):
            nxt = int(np.argmax(logits[row, seqs[k].shape[0] - 1]))
            if nxt == C.EOS or len(outs[k]) >= max_len:
                continue
            outs[k].append(nxt)
            seqs[k] = np.vstack([seqs[k], llm.embed[nxt][None, :]])
            still.append(k)
        active = still
    return outs


def alignment_metrics(adapter: AdapterParams, llm: LlmParams, samples: Sequence[C.Sample]) -> tuple[float, float]:
    """Mean along-path cosine similarity and mean DTW loss over ``samples``."""
    cos, losses = [], []
    for s in samples:
        H, _ = adapter_forward(adapter, s.speech)
        Cm = cosine_distance_matrix(H, embed_tokens(llm, s.tokens))
        r = dtw_forward(Cm)
        cos.append(float(np.mean([1.0 - Cm[i, j] for i, j in r.path.steps])))
        losses.append(r.loss)
    return float(np.mean(cos)), float(np.mean(losses))


def score(samples: Sequence[C.Sample], predictions: Sequence[Sequence[int]],
          tasks: Sequence[str] | None = None) -> dict[str, float]:
    """Task metrics from predictions. Metrics for absent tasks are omitted."""
    tasks = list(tasks) if tasks is not None else [s.task for s in samples]
    errs = ref_len = 0
    ic = []
    sr = []
    ner_hits = {c: [] for c in C.ENTITY_CLASSES}
    for s, pred, task in zip(samples, predictions, tasks):
        gold = llm_target(s, task)
        if task == "asr":
            errs += edit_distance(pred, gold)
            ref_len += len(gold)
        elif task == "ic":
            ic.append(len(pred) > 0 and pred[0] == gold[0])
        elif task == "sr":
            sr.append(list(pred) == list(gold))
        elif task == "ner":
            for k, g in enumerate(gold):
                if g == C.TAG_O:
                    continue
                cls = C.TAG_NAMES[g - C.TAG0][2:]
                ner_hits[cls].append(k < len(pred) and pred[k] == g)
    out: dict[str, float] = {}
    if ref_len:
        out["ASR"] = errs / ref_len
    if ic:
        out["IC"] = float(np.mean(ic))
    allhits = [h for v in ner_hits.values() for h in v]
    if allhits:
        out["NER-ALL"] = float(np.mean(allhits))
        for c in C.ENTITY_CLASSES:
            out[f"NER-{c}"] = float(np.mean(ner_hits[c])) if ner_hits[c] else 0.0
    if sr:
        out["SR"] = float(np.mean(sr))
    return out


def evaluate(adapter: AdapterParams, llm: LlmParams, samples: Sequence[C.Sample],
             tasks: Sequence[str] | None = None, flops: int | None = None) -> dict:
    """MetricsReport: task metrics, alignment metrics, and the FLOP count."""
    if not samples:
        raise ValueError("empty evaluation set")
    preds = greedy_decode(adapter, llm, samples, tasks)
    report = score(samples, preds, tasks)
    report["align_cos"], report["dtw_loss"] = alignment_metrics(adapter, llm, samples)
    if flops is not None:
        report["flops"] = int(flops)
    return report


# ---------------------------------------------------------------- LLM text pretraining


def stretch(tokens: Sequence[int], rng: np.random.Generator, max_repeat: int = 3) -> list[int]:
    reps = rng.integers(1, max_repeat + 1, size=len(tokens))
    return [t for t, r in zip(tokens, reps) for _ in range(r)]


def pretrain_llm(llm: LlmParams, spec: C.LanguageSpec, steps: int = 3000, batch_size: int = 32,
                 lr: float = 3e-3, seed: int = 0, max_repeat: int = 3,
                 progress: Callable[[int, float], None] | None = None) -> list[float]:
    """Teach the decoder the four tasks from text, then leave it frozen.

    Inputs are the transcript's own embedding rows with each token repeated
    1..``max_repeat`` times, so the decoder also reads stretched text.
    Embedding rows are re-normalised to unit norm after every update.
    """
    t = llm.tensors
    state = AdamState.zeros_like(t)
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    losses = []
    for step in range(steps):
        rng = make_rng(seed, "pretrain", step)
        seqs, labels, toks_in = [], [], []
        for b in range(batch_size):
            task = C.TASKS[int(rng.integers(len(C.TASKS)))]
            tokens = C.draw_tokens(spec, task, rng)
            target = tokens if task == "asr" else C.task_target(spec, task, tokens)
            ids = [*C.PROMPTS[task], *stretch(tokens, rng, max_repeat), C.BOS, *target]
            lab = np.full(len(ids), IGNORE, dtype=np.int64)
            start = len(ids) - len(target) - 1
            lab[start:] = [*target, C.EOS]
            toks_in.append(ids)
            seqs.append(t["embed"][ids])
            labels.append(lab)
        logits, tape = llm_forward(llm, _pad(seqs))
        G = np.zeros_like(logits)
        total = 0.0
        for b, lab in enumerate(labels):
            S = len(lab)
            loss, g = cross_entropy(logits[b, :S], lab, IGNORE)
            G[b, :S] = g / batch_size
            total += loss
        for g in grads.values():
            g[...] = 0.0
        gX = llm_backward(llm, tape, G, grads)
        for b, ids in enumerate(toks_in):
            np.add.at(grads["embed"], ids, gX[b, : len(ids)])
        step_lr = lr * min(1.0, (step + 1) / 100) * (0.5 * (1 + np.cos(np.pi * step / steps)))
        adam_step(t, grads, state, lr=step_lr, clip=1.0)
        t["embed"] /= np.linalg.norm(t["embed"], axis=1, keepdims=True)
        losses.append(total / batch_size)
        if progress is not None:
            progress(step, total / batch_size)
    return losses


def text_eval(llm: LlmParams, spec: C.LanguageSpec, n: int = 200, seed: int = 1, max_repeat: int = 1) -> dict:
    """Task metrics when the decoder reads (optionally stretched) text directly."""
    samples, seqs = [], []
    for k in range(n):
        rng = make_rng(seed, "text-eval", k)
        task = C.TASKS[k % len(C.TASKS)]
        tokens = C.draw_tokens(spec, task, rng)
        samples.append(C.Sample(f"t{k}", task, tokens, np.zeros((0, 1)), [], C.task_target(spec, task, tokens)))
        ids = [*C.PROMPTS[task], *stretch(tokens, rng, max_repeat), C.BOS]
        seqs.append(llm.embed[ids])
    outs: list[list[int]] = [[] for _ in samples]
    active = list(range(n))
    for _ in range(33):
        if not active:
            break
        logits, _ = llm_forward(llm, _pad([seqs[k] for k in active]))
        still = []
        for row, k in enumerate(active):
            nxt = int(np.argmax(logits[row, seqs[k].shape[0] - 1]))
            if nxt == C.EOS or len(outs[k]) >= 32:
                continue
            outs[k].append(nxt)
            seqs[k] = np.vstack([seqs[k], llm.embed[nxt][None, :]])
            still.append(k)
        active = still
    return score(samples, outs)
