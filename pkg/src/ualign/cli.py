"""Command-line entry point.

Exit codes: 0 success, 1 oracle mismatch, 2 invalid flags or config,
3 I/O, schema or checkpoint errors, 4 non-finite loss.

Every command accepts ``--config FILE``: either an INI file whose section
named after the command supplies defaults for its flags, or a
``config.echo.json`` written by an earlier run. Flags given on the command
line override the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import fcntl
import io
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from . import __version__, checkpoint, toyllm
from . import corpus as C
from .adapter import adapter_forward
from .adapter import params_from_sections as adapter_params_from_sections
from .experiment import (
    atomic_write,
    frozen_llm,
    load_state,
    run_regime,
    save_state,
    summarize,
)
from .losses import dtw_forward
from .numerics import cosine_distance_matrix, make_rng, pca_project
from .oracles import SUITES
from .pipeline import MockAugmenter, MockFilter, MockSynthesizer, MockTranslator, Pipeline, Record, record_to_sample
from .toyllm import embed_tokens
from .trainer import REGIMES, NonFiniteError, TrainConfig, evaluate

log = logging.getLogger("ualign")

DEFAULT_MIX = "175:648:250:927"


class UsageError(ValueError):
    """Bad flag values or config contents (exit 2)."""


# ---------------------------------------------------------------- flags


def _add(p: argparse.ArgumentParser, *names: str, default: Any = None, **kw: Any) -> None:
    """Flags default to ``None`` so that a config file can fill the gaps; the
    real default is kept on the parser for the final merge."""
    action = p.add_argument(*names, default=None, **kw)
    p.set_defaults(**{f"_default_{action.dest}": default})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ualign", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add(p, "--spec-seed", type=int, default=0)
    _add(p, "--samples", type=int, default=2000)
    _add(p, "--tasks", default="ic,ner,sr,asr")
    _add(p, "--ratios", default=DEFAULT_MIX, help="per-task mixture, colon separated, same order as --tasks")
    _add(p, "--seed", type=int, default=1)
    _add(p, "--eval-samples", type=int, default=0)
    _add(p, "--eval-seed", type=int, default=2)
    _add(p, "--sigma", type=float, default=0.1)
    _add(p, "--in-dim", type=int, default=32)
    _add(p, "--out", required=False)

    p = sub.add_parser("pipeline", help="run the mock augment/filter/translate/synthesize pipeline")
    _add(p, "--spec-seed", type=int, default=0)
    _add(p, "--inputs", type=int, default=7)
    _add(p, "--fan-out", type=int, default=10)
    _add(p, "--max-tokens", type=int, default=C.MAX_TOKENS)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--out")

    p = sub.add_parser("train", help="train one regime")
    _add(p, "--regime", choices=[*REGIMES, "stage2"])
    _add(p, "--corpus")
    _add(p, "--eval-corpus")
    _add(p, "--spec", help="language spec JSON (default: spec.json beside the corpus)")
    _add(p, "--init-checkpoint")
    _add(p, "--stages", choices=["stage1", "both"], default="both",
         help="for two-stage regimes, stop after stage 1 or run both")
    _add(p, "--stage1-epochs", type=int, default=3)
    _add(p, "--stage2-epochs", type=int, default=3)
    _add(p, "--stage2-tasks", default=",".join(C.TASKS))
    _add(p, "--batch-size", type=int, default=16)
    _add(p, "--lr", type=float, default=1e-3)
    _add(p, "--grad-clip-norm", type=float, default=1.0)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--eval-every", type=int, default=0)
    _add(p, "--curve-samples", type=int, default=100)
    _add(p, "--llm-seed", type=int, default=0)
    _add(p, "--pretrain-steps", type=int, default=3000)
    _add(p, "--pretrain-batch", type=int, default=32)
    _add(p, "--llm-cache", default=os.environ.get("UALIGN_CACHE", str(Path.home() / ".cache" / "ualign")))
    _add(p, "--resume", action="store_const", const=True, default=False,
         help="continue from the latest epoch checkpoint in --out")
    _add(p, "--out")

    p = sub.add_parser("eval", help="evaluate an adapter checkpoint")
    _add(p, "--checkpoint")
    _add(p, "--corpus")
    _add(p, "--llm", help="frozen decoder checkpoint (default: llm.ualn beside --checkpoint)")
    _add(p, "--out", help="report path (default: stdout only)")

    p = sub.add_parser("oracle", help="run the brute-force and finite-difference suites")
    _add(p, "--suite", choices=[*SUITES, "all"], default="all")

    p = sub.add_parser("project", help="2-D PCA of text and adapted speech embeddings")
    _add(p, "--checkpoints")
    _add(p, "--labels", help="comma-separated names, one per checkpoint (default: file stems)")
    _add(p, "--corpus")
    _add(p, "--llm")
    _add(p, "--samples", type=int, default=50)
    _add(p, "--out")

    for name, sp in sub.choices.items():
        sp.add_argument("--config", default=None, help="INI or config.echo.json supplying defaults")
    return ap


def _load_config(path: str, command: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".json"):
        try:
            echo = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc.msg})") from None
        if echo.get("command") != command:
            raise UsageError(f"{path} echoes a {echo.get('command')!r} run, not {command!r}")
        return dict(echo["settings"])
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in cp[command].items()} if cp.has_section(command) else {}


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge hard defaults < config file < explicit flags."""
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}  # noqa: SLF001
    file_vals = _load_config(args.config, args.command) if args.config else {}
    unknown = set(file_vals) - set(actions)
    if unknown:
        raise UsageError(f"unknown setting(s) in {args.config}: {sorted(unknown)}")
    out = {}
    for dest, action in actions.items():
        val = getattr(args, dest)
        if val is None and dest in file_vals:
            val = file_vals[dest]
            if isinstance(val, str) and action.type is not None:
                try:
                    val = action.type(val)
                except ValueError:
                    raise UsageError(f"setting {dest!r}: cannot parse {val!r}") from None
            elif isinstance(val, str) and action.const is True:
                val = val.lower() in ("1", "true", "yes", "on")
            if action.choices and val not in action.choices:
                raise UsageError(f"setting {dest!r}: {val!r} is not one of {list(action.choices)}")
        if val is None:
            val = getattr(args, f"_default_{dest}")
        out[dest] = val
    return out


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ---------------------------------------------------------------- output directory


@contextmanager
def run_dir(out: str | Path, command: str, settings: dict) -> Iterator[Path]:
    """Lock ``out``, echo the config, and mark the directory incomplete
    until the body finishes."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = open(out / ".lock", "w")
    try:
        fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        lock.close()
        raise OSError(f"{out} is locked by another run") from None
    marker = out / ".incomplete"
    try:
        marker.write_text(command + "\n")
        echo = {"command": command, "version": __version__, "settings": settings}
        atomic_write(out / "config.echo.json", _json_bytes(echo))
        yield out
        marker.unlink()
    finally:
        fcntl.flock(lock, fcntl.LOCK_UN)
        lock.close()


def _json_bytes(obj: Any) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _read_spec(path: str | Path) -> C.LanguageSpec:
    try:
        return C.LanguageSpec.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except (KeyError, ValueError) as exc:
        raise C.CorpusFormatError(f"{path}: not a language spec ({exc})") from None


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: dict) -> int:
    _need(cfg, "out")
    tasks = [t.strip() for t in cfg["tasks"].split(",") if t.strip()]
    bad = [t for t in tasks if t not in C.TASKS]
    if bad or not tasks:
        raise UsageError(f"--tasks must be drawn from {list(C.TASKS)}, got {cfg['tasks']!r}")
    try:
        ratios = [float(r) for r in cfg["ratios"].split(":")]
    except ValueError:
        raise UsageError(f"--ratios must be colon-separated numbers, got {cfg['ratios']!r}") from None
    if cfg["ratios"] == DEFAULT_MIX and tasks != ["ic", "ner", "sr", "asr"]:
        ratios = [1.0] * len(tasks)
    if len(ratios) != len(tasks) or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise UsageError("--ratios needs one non-negative weight per task")
    if cfg["samples"] < 1 or cfg["eval_samples"] < 0:
        raise UsageError("--samples must be >= 1 and --eval-samples >= 0")
    weights = dict(zip(tasks, ratios))
    spec = C.language_init(cfg["spec_seed"], cfg["in_dim"], cfg["sigma"])
    with run_dir(cfg["out"], "synth", cfg) as out:
        atomic_write(out / "spec.json", _json_bytes(spec.to_json()))
        manifest = {"spec_digest": spec.digest(), "files": {}}
        sets = [("corpus.jsonl", cfg["samples"], cfg["seed"], "tr")]
        if cfg["eval_samples"]:
            sets.append(("eval.jsonl", cfg["eval_samples"], cfg["eval_seed"], "ev"))
        for name, n, seed, prefix in sets:
            samples = C.generate_corpus(spec, n, seed, weights, prefix=prefix)
            tmp = out / (name + ".incomplete")
            C.corpus_write(samples, tmp)
            tmp.replace(out / name)
            counts = {t: sum(s.task == t for s in samples) for t in tasks}
            manifest["files"][name] = {"samples": n, "seed": seed, "task_counts": counts,
                                       "digest": C.sample_digest(samples)}
        atomic_write(out / "manifest.json", _json_bytes(manifest))
    print(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_pipeline(cfg: dict) -> int:
    _need(cfg, "out")
    if cfg["inputs"] < 1 or cfg["fan_out"] < 1:
        raise UsageError("--inputs and --fan-out must be >= 1")
    spec = C.language_init(cfg["spec_seed"])
    seeds = []
    for k in range(cfg["inputs"]):
        s = C.synth_sample(spec, C.TASKS[k % len(C.TASKS)], make_rng(cfg["seed"], "pipeline-input", k), f"in{k}")
        seeds.append(Record(s.id, s.task, tuple(s.tokens), tuple(s.target)))
    pipe = Pipeline([MockAugmenter(cfg["seed"], cfg["fan_out"]), MockFilter(cfg["max_tokens"]),
                     MockTranslator(spec, cfg["seed"]), MockSynthesizer(spec, cfg["seed"])])
    with run_dir(cfg["out"], "pipeline", cfg) as out:
        atomic_write(out / "spec.json", _json_bytes(spec.to_json()))
        records = list(pipe.run(seeds))
        tmp = out / "corpus.jsonl.incomplete"
        C.corpus_write((record_to_sample(r) for r in records), tmp)
        tmp.replace(out / "corpus.jsonl")
        prov = "".join(json.dumps({"id": r.id, "provenance": list(r.provenance)}, sort_keys=True) + "\n"
                       for r in records)
        atomic_write(out / "provenance.jsonl", prov.encode())
        atomic_write(out / "manifest.json", _json_bytes(pipe.manifest))
    print(json.dumps(pipe.manifest, sort_keys=True))
    return 0


def _curves_csv(curve: list[dict]) -> bytes:
    base = ["step", "stage", "cumulative_flops", "loss"]
    extra = sorted({k for row in curve for k in row} - set(base))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=base + extra, lineterminator="\n")
    w.writeheader()
    for row in curve:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue().encode()


def _latest_state(ckdir: Path) -> Path | None:
    found = sorted(ckdir.glob("stage*-epoch*.ualn"),
                   key=lambda p: (p.name.split("-")[0], int(p.stem.split("epoch")[1])))
    return found[-1] if found else None


def cmd_train(cfg: dict) -> int:
    _need(cfg, "regime", "corpus", "out")
    tasks = tuple(t.strip() for t in cfg["stage2_tasks"].split(",") if t.strip())
    if not tasks or any(t not in C.TASKS for t in tasks):
        raise UsageError(f"--stage2-tasks must be drawn from {list(C.TASKS)}")
    regime = cfg["regime"]
    init = None
    if regime == "directly_mt" and cfg["init_checkpoint"]:
        log.warning("--regime directly_mt trains without pre-alignment; ignoring --init-checkpoint")
    elif cfg["init_checkpoint"]:
        init = adapter_params_from_sections(*checkpoint.load(cfg["init_checkpoint"]))
    if regime == "stage2":
        if init is None:
            raise UsageError("--regime stage2 needs --init-checkpoint (use directly_mt for a fresh adapter)")
        meta = checkpoint.load(cfg["init_checkpoint"])[1]
        stages, regime = "stage2", meta.get("regime", "ualign_dtw")
    else:
        stages = cfg["stages"] if regime != "directly_mt" else "stage2"
    try:
        tc = TrainConfig(regime=regime, stage1_epochs=cfg["stage1_epochs"], stage2_epochs=cfg["stage2_epochs"],
                         batch_size=cfg["batch_size"], lr=cfg["lr"], grad_clip_norm=cfg["grad_clip_norm"],
                         seed=cfg["seed"], eval_every=cfg["eval_every"], stage2_tasks=tasks)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    train = C.corpus_read(cfg["corpus"])
    held = C.corpus_read(cfg["eval_corpus"]) if cfg["eval_corpus"] else train
    if not train:
        raise C.CorpusFormatError(f"{cfg['corpus']}: empty corpus")
    spec = _read_spec(cfg["spec"] or Path(cfg["corpus"]).with_name("spec.json"))
    llm = frozen_llm(spec, cfg["llm_seed"], cfg["pretrain_steps"], cfg["pretrain_batch"], cfg["llm_cache"])
    digest = llm.digest()

    with run_dir(cfg["out"], "train", cfg) as out:
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        llm_path = ckdir / "llm.ualn"
        atomic_write(llm_path, checkpoint.dumps({toyllm.SECTION: llm.tensors}, {"llm_config": asdict(llm.config)}))
        resume = None
        if cfg["resume"]:
            last = _latest_state(ckdir)
            if last is not None:
                resume = load_state(last, llm)
                log.info("resuming after %s", last.name)

        def after_epoch(result, stage, ep):
            save_state(ckdir / f"{stage}-epoch{ep}.ualn", result, stage, ep)

        result = run_regime(regime, llm, train, held, tc, init=init, stages=stages,
                            curve_samples=held[: cfg["curve_samples"]], record_all=True,
                            after_epoch=after_epoch, resume=resume)
        if llm.digest() != digest:
            raise RuntimeError("frozen decoder changed during training")
        final_meta = {"regime": result.regime, "llm_digest": digest}
        atomic_write(ckdir / "final.ualn", checkpoint.dumps(
            {"adapter": result.adapter.tensors}, {"adapter_config": asdict(result.adapter.config), **final_meta}))
        atomic_write(out / "curves.csv", _curves_csv(result.trainer.curve))
        report = {"regime": result.regime, "stages": stages, "eval_set": "eval" if cfg["eval_corpus"] else "train",
                  "final": result.report, "stage1": result.stage1_report}
        atomic_write(out / "report.json", _json_bytes(report))
        manifest = {"llm_digest": digest, "spec_digest": spec.digest(), "steps": result.trainer.step,
                    "ledger": result.trainer.ledger.snapshot(), "skipped": result.trainer.skipped,
                    "epoch_losses": result.epoch_losses, "train_corpus_digest": C.sample_digest(train)}
        atomic_write(out / "manifest.json", _json_bytes(manifest))
    print(summarize([result]))
    return 0


def _load_llm_beside(checkpoint_path: str, explicit: str | None) -> toyllm.LlmParams:
    path = explicit or str(Path(checkpoint_path).with_name("llm.ualn"))
    return toyllm.checkpoint_load(path)


def cmd_eval(cfg: dict) -> int:
    _need(cfg, "checkpoint", "corpus")
    sections, meta = checkpoint.load(cfg["checkpoint"])
    adapter = adapter_params_from_sections({"adapter": sections.get("adapter", {})}, meta)
    llm = _load_llm_beside(cfg["checkpoint"], cfg["llm"])
    if meta.get("llm_digest") not in (None, llm.digest()):
        raise checkpoint.CheckpointError("adapter was trained against a different frozen decoder")
    samples = C.corpus_read(cfg["corpus"])
    report = evaluate(adapter, llm, samples)
    report["regime"] = meta.get("regime")
    blob = _json_bytes(report)
    if cfg["out"]:
        atomic_write(cfg["out"], blob)
    sys.stdout.write(blob.decode())
    return 0


def cmd_oracle(cfg: dict) -> int:
    names = list(SUITES) if cfg["suite"] == "all" else [cfg["suite"]]
    ok = True
    for name in names:
        res = SUITES[name]()
        print(res.line())
        for f in res.failures[:10]:
            print("  " + f)
        ok &= res.ok
    return 0 if ok else 1


def cmd_project(cfg: dict) -> int:
    _need(cfg, "checkpoints", "corpus", "out")
    paths = [p for p in cfg["checkpoints"].split(",") if p]
    labels = cfg["labels"].split(",") if cfg["labels"] else [Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise UsageError("--labels needs one name per checkpoint")
    llm = _load_llm_beside(paths[0], cfg["llm"])
    adapters = []
    for p in paths:
        sections, meta = checkpoint.load(p)
        adapters.append(adapter_params_from_sections({"adapter": sections.get("adapter", {})}, meta))
    samples = C.corpus_read(cfg["corpus"])[: cfg["samples"]]
    rows: list[tuple[str, str, int, int]] = []  # label, sample id, row, matched token position
    points = []
    for s in samples:
        E = embed_tokens(llm, s.tokens)
        for j in range(len(s.tokens)):
            rows.append(("text", s.id, j, j))
            points.append(E[j])
    for label, ad in zip(labels, adapters):
        for s in samples:
            if ad.config.output_length(s.T) < 1:
                continue
            H, _ = adapter_forward(ad, s.speech)
            path = dtw_forward(cosine_distance_matrix(H, embed_tokens(llm, s.tokens))).path.steps
            match = {}
            for i, j in path:
                match.setdefault(i, j)
            for i in range(H.shape[0]):
                rows.append((f"{label}_speech", s.id, i, match[i]))
                points.append(H[i])
    # speech rows may have any norm; project directions so both modalities share a scale
    P = np.asarray(points)
    P = P / np.maximum(np.linalg.norm(P, axis=1, keepdims=True), 1e-12)
    xy = pca_project(P, 2)
    text_at = {(sid, j): xy[k] for k, (lab, sid, _, j) in enumerate(rows) if lab == "text"}
    summary: dict[str, list[float]] = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "sample_id", "row", "matched_token", "x", "y"])
    for k, (lab, sid, r, j) in enumerate(rows):
        w.writerow([lab, sid, r, j, repr(float(xy[k, 0])), repr(float(xy[k, 1]))])
        if lab != "text":
            summary.setdefault(lab, []).append(float(np.linalg.norm(xy[k] - text_at[(sid, j)])))
    with run_dir(Path(cfg["out"]), "project", cfg) as out:
        atomic_write(out / "points.csv", buf.getvalue().encode())
        stats = {lab: {"points": len(d), "mean_distance_to_matched_text": float(np.mean(d))}
                 for lab, d in summary.items()}
        stats["text"] = {"points": sum(1 for r in rows if r[0] == "text")}
        atomic_write(out / "manifest.json", _json_bytes(stats))
    print(json.dumps(stats, sort_keys=True))
    return 0


COMMANDS = {"synth": cmd_synth, "pipeline": cmd_pipeline, "train": cmd_train, "eval": cmd_eval,
            "oracle": cmd_oracle, "project": cmd_project}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args, parser)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"ualign {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"ualign {args.command}: non-finite value: {exc}", file=sys.stderr)
        return 4
    except (OSError, C.CorpusFormatError, checkpoint.CheckpointError) as exc:
        print(f"ualign {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
