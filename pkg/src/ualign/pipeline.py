"""Staged data-generation pipeline: augment -> filter -> translate -> synthesize.

Stages are pluggable providers. The mock providers here are deterministic
stand-ins for an LLM augmenter, a quality filter, a translator and a TTS
engine; network-backed clients only need to implement the same
``process`` contract.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Protocol

from . import corpus
from .numerics import make_rng

STAGE_ORDER = ("augment", "filter", "translate", "synthesize")


@dataclass(frozen=True)
class Record:
    id: str
    task: str
    tokens: tuple[int, ...]
    target: tuple[int, ...] = ()
    speech: object = None
    alignment: tuple[int, ...] = ()
    provenance: tuple[dict, ...] = ()


class Drop(Exception):
    """Raised by a provider to drop a record on purpose, with a reason."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Provider(Protocol):
    kind: str

    def process(self, record: Record) -> list[Record]: ...


@dataclass
class StageStats:
    input: int = 0
    output: int = 0
    dropped: int = 0
    failed: int = 0
    reasons: Counter = field(default_factory=Counter)

    def to_json(self) -> dict:
        return {"in": self.input, "out": self.output, "dropped": self.dropped,
                "failed": self.failed, "reasons": dict(sorted(self.reasons.items()))}


def _stamp(rec: Record, parent: Record, stage: str, seed: int, **changes) -> Record:
    prov = parent.provenance + ({"stage": stage, "source_id": parent.id, "seed": seed},)
    return replace(rec, provenance=prov, **changes)


class Pipeline:
    """Streams records through the stages; ``manifest`` fills in as records flow."""

    def __init__(self, stages: list[Provider]):
        kinds = [s.kind for s in stages]
        if any(k not in STAGE_ORDER for k in kinds) or kinds != sorted(kinds, key=STAGE_ORDER.index):
            raise ValueError(f"stages must follow the order {STAGE_ORDER}, got {kinds}")
        self.stages = stages
        self.stats = [StageStats() for _ in stages]
        self.failures: list[tuple[str, str, str]] = []

    def _apply(self, k: int, records: Iterable[Record]) -> Iterator[Record]:
        stage, st = self.stages[k], self.stats[k]
        for rec in records:
            st.input += 1
            try:
                outs = stage.process(rec)
            except Drop as d:
                st.dropped += 1
                st.reasons[d.reason] += 1
                continue
            except Exception as exc:  # provider failure: record it, keep going
                st.failed += 1
                reason = f"failed:{type(exc).__name__}"
                st.reasons[reason] += 1
                self.failures.append((rec.id, stage.kind, str(exc)))
                continue
            st.output += len(outs)
            yield from outs

    def run(self, records: Iterable[Record]) -> Iterator[Record]:
        stream: Iterable[Record] = records
        for k in range(len(self.stages)):
            stream = self._apply(k, stream)
        return iter(stream)

    @property
    def manifest(self) -> dict:
        return {"stages": [dict(stage=s.kind, **st.to_json()) for s, st in zip(self.stages, self.stats)],
                "failures": len(self.failures)}


def pipeline_run(stages: list[Provider], records: Iterable[Record]) -> tuple[list[Record], dict]:
    p = Pipeline(stages)
    out = list(p.run(records))
    return out, p.manifest


# ---------------------------------------------------------------- mock providers


@dataclass
class IdentityStage:
    kind: str

    def process(self, record: Record) -> list[Record]:
        return [record]


@dataclass
class MockAugmenter:
    """Emits ``fan_out`` variants per record by shuffling the order of
    non-entity tokens; entity spans and triggers keep their slots."""

    seed: int = 0
    fan_out: int = 10
    kind: str = "augment"

    def process(self, record: Record) -> list[Record]:
        out = []
        for v in range(self.fan_out):
            rng = make_rng(self.seed, "augment", record.id, v)
            toks = list(record.tokens)
            if v and len(toks) > 1:
                free = [i for i in range(len(toks)) if i % 2 == 0]
                vals = [toks[i] for i in free]
                for i, t in zip(free, rng.permutation(vals).tolist()):
                    toks[i] = t
            new = Record(f"{record.id}.a{v}", record.task, tuple(toks))
            out.append(_stamp(new, record, self.kind, self.seed))
        return out


@dataclass
class MockFilter:
    """Placeholder quality filter: drops records longer than ``max_tokens`` or
    matching an optional extra predicate."""

    max_tokens: int = corpus.MAX_TOKENS
    predicate: Callable[[Record], str | None] | None = None
    kind: str = "filter"

    def process(self, record: Record) -> list[Record]:
        if len(record.tokens) > self.max_tokens:
            raise Drop("too_long")
        if self.predicate is not None:
            reason = self.predicate(record)
            if reason:
                raise Drop(reason)
        return [_stamp(record, record, self.kind, 0)]


@dataclass
class MockTranslator:
    """Maps source-language token ids onto target-language ids with a fixed
    seeded permutation, then recomputes the task target in the target language."""

    spec: corpus.LanguageSpec
    seed: int = 0
    kind: str = "translate"

    def __post_init__(self) -> None:
        self.table = make_rng(self.seed, "translate").permutation(corpus.N_LANG).tolist()

    def process(self, record: Record) -> list[Record]:
        toks = tuple(self.table[t] for t in record.tokens)
        if record.task == "ic" and corpus.intent_of(self.spec, toks) is None:
            raise Drop("lost_intent")
        target = tuple(corpus.task_target(self.spec, record.task, toks))
        new = Record(f"{record.id}.t", record.task, toks, target)
        return [_stamp(new, record, self.kind, self.seed)]


@dataclass
class MockSynthesizer:
    """Renders speech frames for each token from the language prototypes."""

    spec: corpus.LanguageSpec
    seed: int = 0
    kind: str = "synthesize"

    def process(self, record: Record) -> list[Record]:
        speech, alignment = corpus.render_speech(self.spec, record.tokens, make_rng(self.seed, "tts", record.id))
        new = replace(record, id=f"{record.id}.s", speech=speech, alignment=tuple(alignment))
        return [_stamp(new, record, self.kind, self.seed)]


def record_to_sample(rec: Record) -> corpus.Sample:
    return corpus.Sample(rec.id, rec.task, list(rec.tokens), rec.speech, list(rec.alignment), list(rec.target))
