from collections import Counter

import numpy as np
import pytest

from ualign import corpus as C
from ualign.numerics import make_rng
from ualign.pipeline import (
    Drop,
    IdentityStage,
    MockAugmenter,
    MockFilter,
    MockSynthesizer,
    MockTranslator,
    Pipeline,
    Record,
    pipeline_run,
    record_to_sample,
)


@pytest.fixture(scope="module")
def spec():
    return C.language_init(0)


def seeds(spec, n=7, lengths=None):
    out = []
    for k in range(n):
        s = C.synth_sample(spec, C.TASKS[k % 4], make_rng(k, "seed-records"), f"r{k}")
        toks = tuple(s.tokens)
        if lengths:
            toks = tuple((list(toks) * 3)[: lengths[k]])
        out.append(Record(s.id, s.task, toks, tuple(s.target)))
    return out


def test_identity_stages(spec):
    recs = seeds(spec)
    stages = [IdentityStage(k) for k in ("augment", "filter", "translate", "synthesize")]
    out, manifest = pipeline_run(stages, recs)
    assert out == recs
    for st in manifest["stages"]:
        assert st["in"] == st["out"] == 7 and st["dropped"] == st["failed"] == 0


def test_stage_order_enforced():
    with pytest.raises(ValueError, match="order"):
        Pipeline([IdentityStage("filter"), IdentityStage("augment")])
    with pytest.raises(ValueError):
        Pipeline([IdentityStage("dub")])


def test_fan_out_ten(spec):
    out, manifest = pipeline_run([MockAugmenter(seed=1)], seeds(spec))
    assert len(out) == 70
    assert manifest["stages"][0]["out"] == 70
    assert len({r.id for r in out}) == 70


def test_filter_recount_oracle(spec):
    lengths = [4, 17, 16, 30, 9, 18, 12]
    recs = seeds(spec, lengths=lengths)
    aug = list(Pipeline([MockAugmenter(seed=2)]).run(recs))
    expect_out = sum(len(r.tokens) <= 16 for r in aug)
    out, manifest = pipeline_run([MockAugmenter(seed=2), MockFilter(max_tokens=16)], recs)
    f = manifest["stages"][1]
    assert f["in"] == 70
    assert f["out"] == len(out) == expect_out == 40
    assert f["dropped"] == 30 and f["reasons"] == {"too_long": 30}


def test_provider_failure_is_counted_and_run_continues(spec):
    class Flaky:
        kind = "translate"

        def process(self, r):
            if r.id.endswith("a3"):
                raise RuntimeError("upstream timeout")
            return [r]

    out, manifest = pipeline_run([MockAugmenter(), Flaky()], seeds(spec))
    st = manifest["stages"][1]
    assert st["failed"] == 7 and st["reasons"] == {"failed:RuntimeError": 7}
    assert len(out) == 63 and manifest["failures"] == 7


def test_streaming_is_lazy(spec):
    seen = []

    def source():
        for r in seeds(spec):
            seen.append(r.id)
            yield r

    it = Pipeline([MockAugmenter()]).run(source())
    next(it)
    assert seen == ["r0"]


def full_pipeline(spec):
    return [MockAugmenter(seed=3), MockFilter(max_tokens=16), MockTranslator(spec, seed=4),
            MockSynthesizer(spec, seed=5)]


def test_full_pipeline_provenance_and_targets(spec):
    out, manifest = pipeline_run(full_pipeline(spec), seeds(spec))
    counts = [(s["in"], s["out"]) for s in manifest["stages"]]
    assert counts[0] == (7, 70)
    for (i1, o1), (i2, _) in zip(counts, counts[1:]):
        assert o1 == i2
    assert counts[-1][1] == len(out)
    for st in manifest["stages"]:
        assert st["in"] == st["out"] + st["dropped"] + st["failed"] or st["stage"] == "augment"
        assert sum(st["reasons"].values()) == st["dropped"] + st["failed"]
    for r in out:
        assert [p["stage"] for p in r.provenance] == ["augment", "filter", "translate", "synthesize"]
        assert r.provenance[0]["source_id"] in {f"r{k}" for k in range(7)}
        s = record_to_sample(r)
        assert s.target == C.task_target(spec, s.task, s.tokens)
        assert s.speech.shape == (len(s.alignment), spec.in_dim)


def test_full_pipeline_deterministic(spec):
    a, ma = pipeline_run(full_pipeline(spec), seeds(spec))
    b, mb = pipeline_run(full_pipeline(spec), seeds(spec))
    assert ma == mb
    assert [r.id for r in a] == [r.id for r in b]
    assert all(np.array_equal(x.speech, y.speech) for x, y in zip(a, b))


def test_translator_drops_lost_intent(spec):
    recs = [r for r in seeds(spec, 40) if r.task == "ic"]
    tr = MockTranslator(spec, seed=4)
    expect = Counter()
    for r in recs:
        toks = tuple(tr.table[t] for t in r.tokens)
        expect["lost_intent" if C.intent_of(spec, toks) is None else "kept"] += 1
    out, manifest = pipeline_run([tr], recs)
    assert len(out) == expect["kept"]
    assert manifest["stages"][0]["reasons"].get("lost_intent", 0) == expect["lost_intent"]


def test_drop_predicate(spec):
    flt = MockFilter(predicate=lambda r: "no_entities" if r.task == "ner" else None)
    out, manifest = pipeline_run([flt], seeds(spec))
    assert all(r.task != "ner" for r in out)
    assert manifest["stages"][0]["reasons"] == {"no_entities": 2}
    assert isinstance(Drop("x"), Exception)
