"""Synthetic paired speech/text language with gold alignments and task targets.

Token ids are shared with the toy LLM vocabulary::

    0..63   language tokens
    64..67  PAD, BOS, EOS, BLANK
    68..75  task prompts, two tokens per task (ASR, IC, NER, SR)
    76..83  intent classes
    84..90  BIO tags: O, B-PER, I-PER, B-LOC, I-LOC, B-ORG, I-ORG
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numerics import make_rng

N_LANG = 64
PAD, BOS, EOS, BLANK = 64, 65, 66, 67
TASKS = ("asr", "ic", "ner", "sr")
PROMPTS = {"asr": (68, 69), "ic": (70, 71), "ner": (72, 73), "sr": (74, 75)}
N_INTENTS = 8
INTENT0 = 76
TAG_NAMES = ("O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG")
TAG0 = 84
TAG_O = TAG0
ENTITY_CLASSES = ("PER", "LOC", "ORG")
VOCAB_SIZE = TAG0 + len(TAG_NAMES)

MIN_TOKENS, MAX_TOKENS = 4, 16
MIN_FRAMES, MAX_FRAMES = 2, 5


def tag_id(name: str) -> int:
    return TAG0 + TAG_NAMES.index(name)


@dataclass
class LanguageSpec:
    seed: int
    in_dim: int
    prototypes: np.ndarray
    intent_triggers: dict[int, int]
    entity_sets: dict[str, tuple[int, ...]]
    synonym_map: dict[int, int]
    noise_sigma: float = 0.1

    def __post_init__(self) -> None:
        self._entity = {t: cls for cls, members in self.entity_sets.items() for t in members}

    def entity_of(self, tok: int) -> str | None:
        return self._entity.get(tok)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "in_dim": self.in_dim,
            "noise_sigma": self.noise_sigma,
            "prototypes_hex": _hex(self.prototypes),
            "intent_triggers": {str(k): v for k, v in self.intent_triggers.items()},
            "entity_sets": {k: list(v) for k, v in self.entity_sets.items()},
            "synonym_map": {str(k): v for k, v in self.synonym_map.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "LanguageSpec":
        return cls(
            seed=d["seed"],
            in_dim=d["in_dim"],
            prototypes=_unhex(d["prototypes_hex"], N_LANG, d["in_dim"]),
            intent_triggers={int(k): v for k, v in d["intent_triggers"].items()},
            entity_sets={k: tuple(v) for k, v in d["entity_sets"].items()},
            synonym_map={int(k): v for k, v in d["synonym_map"].items()},
            noise_sigma=d["noise_sigma"],
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def language_init(seed: int, in_dim: int = 32, noise_sigma: float = 0.1) -> LanguageSpec:
    rng = make_rng(seed, "language", "prototypes")
    protos = np.zeros((N_LANG, in_dim))
    for k in range(N_LANG):
        while True:
            v = rng.standard_normal(in_dim)
            v /= np.linalg.norm(v)
            if k == 0 or np.max(np.abs(protos[:k] @ v)) < 0.9:
                break
        protos[k] = v
    perm = make_rng(seed, "language", "roles").permutation(N_LANG).tolist()
    triggers = {perm[i]: i for i in range(N_INTENTS)}
    entity_sets = {cls: tuple(sorted(perm[8 + 6 * c: 14 + 6 * c])) for c, cls in enumerate(ENTITY_CLASSES)}
    syn = perm[26:42]
    synonym_map: dict[int, int] = {}
    for a, b in zip(syn[0::2], syn[1::2]):
        synonym_map[a] = b
        synonym_map[b] = a
    return LanguageSpec(seed, in_dim, protos, triggers, entity_sets, synonym_map, noise_sigma)


# ---------------------------------------------------------------- task rules


def intent_of(spec: LanguageSpec, tokens: Sequence[int]) -> int | None:
    for t in tokens:
        if t in spec.intent_triggers:
            return spec.intent_triggers[t]
    return None


def ner_tags(spec: LanguageSpec, tokens: Sequence[int]) -> list[int]:
    out = []
    prev = None
    for t in tokens:
        cls = spec.entity_of(t)
        if cls is None:
            out.append(TAG_O)
        else:
            out.append(tag_id(("I-" if prev == cls else "B-") + cls))
        prev = cls
    return out


def rephrase(spec: LanguageSpec, tokens: Sequence[int]) -> list[int]:
    return [spec.synonym_map.get(t, t) for t in tokens]


def task_target(spec: LanguageSpec, task: str, tokens: Sequence[int]) -> list[int]:
    if task == "asr":
        return list(tokens)
    if task == "ic":
        intent = intent_of(spec, tokens)
        if intent is None:
            raise ValueError("IC sample has no trigger token")
        return [INTENT0 + intent]
    if task == "ner":
        return ner_tags(spec, tokens)
    if task == "sr":
        return rephrase(spec, tokens)
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------- samples


@dataclass
class Sample:
    id: str
    task: str
    tokens: list[int]
    speech: np.ndarray = field(repr=False)
    alignment: list[int]
    target: list[int]

    @property
    def T(self) -> int:
        return self.speech.shape[0]


def draw_tokens(spec: LanguageSpec, task: str, rng: np.random.Generator) -> list[int]:
    """Distinct tokens; entity spans of 1-3 same-class tokens appear with some
    probability; IC utterances carry exactly one intent trigger."""
    n = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
    triggers = set(spec.intent_triggers)
    pool = [t for t in range(N_LANG) if t not in triggers]
    used: set[int] = set()
    toks: list[int] = []
    while len(toks) < n:
        if rng.uniform() < 0.3:
            cls = ENTITY_CLASSES[int(rng.integers(len(ENTITY_CLASSES)))]
            free = [t for t in spec.entity_sets[cls] if t not in used]
            span = int(rng.integers(1, 4))
            for t in rng.permutation(free)[:span].tolist():
                if len(toks) < n:
                    toks.append(t)
                    used.add(t)
        else:
            free = [t for t in pool if t not in used and spec.entity_of(t) is None]
            t = free[int(rng.integers(len(free)))]
            toks.append(t)
            used.add(t)
    if task == "ic":
        trig = sorted(triggers)[int(rng.integers(len(triggers)))]
        toks[int(rng.integers(n))] = trig
    return toks


def render_speech(spec: LanguageSpec, tokens: Sequence[int], rng: np.random.Generator,
                  sigma: float | None = None) -> tuple[np.ndarray, list[int]]:
    sigma = spec.noise_sigma if sigma is None else sigma
    counts = rng.integers(MIN_FRAMES, MAX_FRAMES + 1, size=len(tokens))
    alignment = np.repeat(np.arange(len(tokens)), counts)
    frames = spec.prototypes[np.asarray(tokens)[alignment]]
    noise = rng.standard_normal(frames.shape)
    if sigma:
        frames = frames + sigma * noise
    return frames, alignment.tolist()


def synth_sample(spec: LanguageSpec, task: str, rng: np.random.Generator, sample_id: str = "s",
                 sigma: float | None = None) -> Sample:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    tokens = draw_tokens(spec, task, rng)
    speech, alignment = render_speech(spec, tokens, rng, sigma)
    return Sample(sample_id, task, tokens, speech, alignment, task_target(spec, task, tokens))


def allocate(n: int, weights: dict[str, float]) -> dict[str, int]:
    """Largest-remainder split of ``n`` items by ``weights``."""
    total = sum(weights.values())
    raw = {k: n * w / total for k, w in weights.items()}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), k))[:left]:
        counts[k] += 1
    return counts


def generate_corpus(spec: LanguageSpec, n: int, seed: int, weights: dict[str, float] | None = None,
                    sigma: float | None = None, prefix: str = "s") -> list[Sample]:
    """``n`` samples; sample ``k`` draws from its own stream, so any subset can be
    regenerated independently of the others."""
    weights = weights or {t: 1.0 for t in TASKS}
    counts = allocate(n, weights)
    tasks = [t for t in weights for _ in range(counts[t])]
    order = make_rng(seed, "corpus", "tasks").permutation(n)
    return [
        synth_sample(spec, tasks[order[k]], make_rng(seed, "corpus", "sample", k), f"{prefix}{k:06d}", sigma)
        for k in range(n)
    ]


def sample_digest(samples: Iterable[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(sample_to_json(s), sort_keys=True).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- JSONL


class CorpusFormatError(ValueError):
    pass


def _hex(a: np.ndarray) -> str:
    return np.ascontiguousarray(a, dtype="<f8").tobytes().hex()


def _unhex(s: str, rows: int, cols: int) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(s), dtype="<f8").reshape(rows, cols).astype(np.float64)


def sample_to_json(s: Sample) -> dict:
    return {
        "id": s.id,
        "task": s.task,
        "tokens": [int(t) for t in s.tokens],
        "speech_hex": _hex(s.speech),
        "T": int(s.speech.shape[0]),
        "in_dim": int(s.speech.shape[1]),
        "alignment": [int(a) for a in s.alignment],
        "target": [int(t) for t in s.target],
    }


_FIELDS = {"id": str, "task": str, "tokens": list, "speech_hex": str, "T": int, "in_dim": int,
           "alignment": list, "target": list}


def sample_from_json(d: dict, line: int = 0) -> Sample:
    for name, typ in _FIELDS.items():
        if name not in d:
            raise CorpusFormatError(f"line {line}: missing field {name!r}")
        if not isinstance(d[name], typ):
            raise CorpusFormatError(f"line {line}: field {name!r} should be {typ.__name__}")
    if d["task"] not in TASKS:
        raise CorpusFormatError(f"line {line}: field 'task' has unknown value {d['task']!r}")
    try:
        speech = _unhex(d["speech_hex"], d["T"], d["in_dim"])
    except ValueError as exc:
        raise CorpusFormatError(f"line {line}: field 'speech_hex' does not decode to "
                                f"{d['T']}x{d['in_dim']} float64: {exc}") from None
    if len(d["alignment"]) != d["T"]:
        raise CorpusFormatError(f"line {line}: field 'alignment' has {len(d['alignment'])} entries for T={d['T']}")
    return Sample(d["id"], d["task"], d["tokens"], speech, d["alignment"], d["target"])


def corpus_write(samples: Iterable[Sample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(sample_to_json(s), sort_keys=True, separators=(",", ":")) + "\n")
            n += 1
    return n


def iter_corpus(path: str | Path) -> Iterator[Sample]:
    """Stream samples one line at a time."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(d, dict):
                raise CorpusFormatError(f"line {lineno}: expected a JSON object")
            yield sample_from_json(d, lineno)


def corpus_read(path: str | Path) -> list[Sample]:
    return list(iter_corpus(path))
