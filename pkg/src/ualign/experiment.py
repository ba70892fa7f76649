"""Regime composition: frozen decoder preparation, two-stage runs, curves.

A run is fully described by an :class:`ExperimentConfig` and a
:class:`~ualign.trainer.TrainConfig`; every random draw is keyed by the
seeds in those two objects.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import corpus as C
from . import toyllm
from .adapter import AdapterConfig, AdapterParams, adapter_init
from .adapter import params_from_sections as adapter_params_from_sections
from .toyllm import LlmConfig, LlmParams, llm_init
from .trainer import (
    AdamState,
    FlopLedger,
    TrainConfig,
    Trainer,
    evaluate,
    pretrain_llm,
    stage1_asr_epoch,
    stage1_ualign_epoch,
    stage2_multitask_epoch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    spec_seed: int = 0
    in_dim: int = 32
    noise_sigma: float = 0.1
    train_samples: int = 2000
    train_seed: int = 1
    eval_samples: int = 400
    eval_seed: int = 2
    curve_samples: int = 100
    llm_seed: int = 0
    pretrain_steps: int = 3000
    pretrain_batch: int = 32


def llm_key(spec: C.LanguageSpec, config: LlmConfig, steps: int, batch: int) -> str:
    blob = json.dumps({"spec": spec.digest(), "llm": asdict(config), "steps": steps, "batch": batch},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def frozen_llm(spec: C.LanguageSpec, seed: int = 0, steps: int = 3000, batch: int = 32,
               cache_dir: str | Path | None = None,
               progress: Callable[[int, float], None] | None = None) -> LlmParams:
    """The decoder every regime shares: seeded init, text pretraining, then frozen.

    Pretraining is deterministic, so the cache only saves time; a cached
    file is used when its key (spec digest, decoder config, schedule) matches.
    """
    config = LlmConfig(vocab_size=C.VOCAB_SIZE, seed=seed)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"llm-{llm_key(spec, config, steps, batch)}.ualn"
        if path.exists():
            return toyllm.checkpoint_load(path)
    llm = llm_init(config)
    if steps:
        pretrain_llm(llm, spec, steps=steps, batch_size=batch, seed=seed, progress=progress)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write(path, checkpoint.dumps({toyllm.SECTION: llm.tensors}, {"llm_config": asdict(llm.config)}))
    return llm


def make_corpora(ex: ExperimentConfig, weights: dict[str, float] | None = None
                 ) -> tuple[C.LanguageSpec, list[C.Sample], list[C.Sample]]:
    spec = C.language_init(ex.spec_seed, ex.in_dim, ex.noise_sigma)
    train = C.generate_corpus(spec, ex.train_samples, ex.train_seed, weights, prefix="tr")
    held = C.generate_corpus(spec, ex.eval_samples, ex.eval_seed, weights, prefix="ev")
    return spec, train, held


@dataclass
class RunResult:
    regime: str
    adapter: AdapterParams
    trainer: Trainer
    report: dict
    stage1_report: dict | None = None
    epoch_losses: list[list] = field(default_factory=list)


def curve_hook(llm: LlmParams, samples: Sequence[C.Sample], every: int, record_all: bool = False,
               tasks: Sequence[str] | None = None) -> Callable[[Trainer, float], None]:
    """on_step callback appending learning-curve rows to ``trainer.curve``.

    Every ``every`` optimizer steps the held-out ``samples`` are evaluated;
    with ``record_all`` the other steps get a row too, without metrics.
    With ``tasks=None`` each sample is decoded as ASR, so the curve tracks
    CER on every sample regardless of its own task.
    """
    samples = list(samples)
    tasks = list(tasks) if tasks is not None else ["asr"] * len(samples)

    def hook(tr: Trainer, loss: float) -> None:
        due = every > 0 and samples and tr.step % every == 0
        if not (due or record_all):
            return
        row = {"step": tr.step, "stage": tr.phase, "cumulative_flops": tr.ledger.total, "loss": loss}
        if due:
            rep = evaluate(tr.adapter, llm, samples, tasks)
            row.update({k: v for k, v in rep.items() if k != "flops"})
        tr.curve.append(row)

    return hook


def epoch_plan(regime: str, config: TrainConfig, stages: str = "both") -> list[tuple[str, int]]:
    """Ordered (stage, epoch) units a run executes.

    Directly-MT has no alignment stage; it spends the same total number of
    epochs on multitask training instead.
    """
    if stages not in ("stage1", "stage2", "both"):
        raise ValueError(f"stages must be stage1, stage2 or both, got {stages!r}")
    if regime == "directly_mt":
        return [("stage2", e) for e in range(config.stage1_epochs + config.stage2_epochs)]
    plan = []
    if stages in ("stage1", "both"):
        plan += [("stage1", e) for e in range(config.stage1_epochs)]
    if stages in ("stage2", "both"):
        plan += [("stage2", e) for e in range(config.stage2_epochs)]
    return plan


def run_regime(regime: str, llm: LlmParams, train: Sequence[C.Sample], held: Sequence[C.Sample],
               config: TrainConfig | None = None, adapter_config: AdapterConfig | None = None,
               curve_samples: Sequence[C.Sample] = (), init: AdapterParams | None = None,
               stages: str = "both", record_all: bool = False,
               after_epoch: Callable[[RunResult, str, int], None] | None = None,
               resume: dict | None = None) -> RunResult:
    """One regime end to end.

    ``stages`` selects ``"stage1"``, ``"stage2"`` or ``"both"``. ``init``
    starts from a given adapter instead of a fresh one (ignored by
    Directly-MT). ``after_epoch`` runs after every epoch, e.g. to write a
    checkpoint; ``resume`` is a state from :func:`load_state`, and the run
    continues with the epoch after the one it recorded.
    """
    config = config or TrainConfig(regime=regime)
    if config.regime != regime:
        config = TrainConfig(**{**asdict(config), "regime": regime})
    cfg = adapter_config or AdapterConfig(in_dim=train[0].speech.shape[1], out_dim=llm.config.d_model)
    if init is not None and regime != "directly_mt":
        adapter = init.copy()
    else:
        if init is not None:
            log.warning("directly_mt trains from a fresh adapter; ignoring the initial checkpoint")
        adapter = adapter_init(cfg, config.seed)
    tr = Trainer(adapter, llm, config)
    result = RunResult(regime, adapter, tr, {})
    plan = epoch_plan(regime, config, stages)
    if resume is not None:
        tr = resume["trainer"]
        tr.llm = llm
        result = RunResult(regime, tr.adapter, tr, {}, resume["stage1_report"], resume["epoch_losses"])
        plan = plan[plan.index((resume["stage"], resume["epoch"])) + 1:]
    if config.eval_every and curve_samples or record_all:
        tr.on_step = curve_hook(llm, curve_samples, config.eval_every, record_all)
    train = list(train)
    for stage, ep in plan:
        tr.phase = stage
        if stage == "stage1":
            if regime == "asr_based":
                loss = stage1_asr_epoch(tr, train, ep)
            else:
                loss = stage1_ualign_epoch(tr, train, ep)
            if stages == "both" and ep == config.stage1_epochs - 1:
                result.stage1_report = evaluate(tr.adapter, llm, list(held), flops=tr.ledger.total)
        else:
            if ep == 0:
                # stage 2 is its own fine-tuning run: fresh optimizer moments
                tr.adam = AdamState.zeros_like(tr.adapter.tensors)
            loss = stage2_multitask_epoch(tr, train, ep, config.stage2_tasks)
        result.epoch_losses.append([stage, ep, loss])
        log.info("%s %s epoch %d loss %.4f", regime, stage, ep, loss)
        if after_epoch is not None:
            after_epoch(result, stage, ep)
    result.report = evaluate(tr.adapter, llm, list(held), flops=tr.ledger.total)
    return result


# ---------------------------------------------------------------- resumable state


def save_state(path: str | Path, result: RunResult, stage: str, epoch: int) -> None:
    """Adapter, optimizer moments and run bookkeeping after one epoch."""
    tr = result.trainer
    meta = {
        "adapter_config": asdict(tr.adapter.config),
        "regime": result.regime,
        "stage": stage,
        "epoch": epoch,
        "train_config": asdict(tr.config),
        "step": tr.step,
        "adam_t": tr.adam.t,
        "ledger": tr.ledger.totals,
        "skipped": tr.skipped,
        "curve": tr.curve,
        "stage1_report": result.stage1_report,
        "epoch_losses": result.epoch_losses,
        "llm_digest": tr.llm.digest(),
    }
    sections = {"adapter": tr.adapter.tensors,
                "adam_m": tr.adam.m,
                "adam_v": tr.adam.v}
    atomic_write(path, checkpoint.dumps(sections, meta))


def load_state(path: str | Path, llm: LlmParams) -> dict:
    sections, meta = checkpoint.load(path)
    adapter = adapter_params_from_sections({"adapter": sections["adapter"]}, meta)
    if meta.get("llm_digest") not in (None, llm.digest()):
        raise checkpoint.CheckpointError(f"{path}: trained against a different frozen decoder "
                                         f"(expected digest {meta['llm_digest'][:12]}, found {llm.digest()[:12]})")
    tc = meta["train_config"]
    config = TrainConfig(**{**tc, "stage2_tasks": tuple(tc["stage2_tasks"])})
    adam = AdamState(dict(sections["adam_m"]), dict(sections["adam_v"]), meta["adam_t"])
    tr = Trainer(adapter, llm, config, FlopLedger(dict(meta["ledger"])), adam, meta["step"],
                 list(meta["curve"]), dict(meta["skipped"]))
    return {"trainer": tr, "stage": meta["stage"], "epoch": meta["epoch"], "regime": meta["regime"],
            "stage1_report": meta["stage1_report"], "epoch_losses": meta["epoch_losses"]}


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".incomplete")
    tmp.write_bytes(data)
    tmp.replace(path)


def curve_at(curve: Sequence[dict], flops: float, key: str = "ASR") -> float:
    """Step-wise value of a learning curve: the latest row at or before ``flops``."""
    best = None
    for row in curve:
        if row["cumulative_flops"] <= flops:
            best = row[key]
    if best is None:
        raise ValueError(f"curve has no point at or before {flops} FLOPs")
    return float(best)


def regime_report_row(result: RunResult) -> dict:
    keys = ("IC", "NER-ALL", "NER-PER", "NER-LOC", "NER-ORG", "SR", "ASR", "align_cos", "dtw_loss", "flops")
    return {"regime": result.regime, **{k: result.report.get(k) for k in keys}}


def summarize(results: Sequence[RunResult]) -> str:
    rows = [regime_report_row(r) for r in results]
    cols = ["regime", "IC", "NER-ALL", "SR", "ASR", "align_cos", "flops"]
    lines = ["  ".join(f"{c:>11}" for c in cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:>11}" if isinstance(v, str) else f"{v:>11.4g}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def digest_adapter(params: AdapterParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()
