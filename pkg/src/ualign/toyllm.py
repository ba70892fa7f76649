"""A small pre-norm causal decoder standing in for the frozen LLM.

Everything operates on right-padded batches ``(B, S, d)``; a single
``(S, d)`` sequence is accepted and treated as a batch of one. Padding
sits after the real tokens, so the causal mask alone keeps it from
influencing real positions.

Input vectors are rescaled to norm ``sqrt(d_model)`` before positions are
added, so the decoder reads directions only. Text embedding rows are
unit-norm; adapted speech vectors may have any norm.

FLOP closed form (2 FLOPs per multiply-accumulate), sequence length S,
width d, ffn multiplier f, vocabulary V, L layers::

    forward  = 2 * ( L * (4*S*d^2 + 2*S^2*d + 2*f*S*d^2) + S*d*V )
    backward = 2 * forward
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .adapter import TapeError
from .numerics import EPS, gelu, gelu_grad, make_rng

LN_EPS = 1e-5


@dataclass(frozen=True)
class LlmConfig:
    vocab_size: int = 91
    d_model: int = 48
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, V, f = self.d_model, self.vocab_size, self.ffn_mult * self.d_model
        s: dict[str, tuple[int, ...]] = {"embed": (V, d)}
        for l in range(self.layers):
            s.update({
                f"l{l}.ln1_g": (d,), f"l{l}.ln1_b": (d,),
                f"l{l}.wq": (d, d), f"l{l}.bq": (d,),
                f"l{l}.wk": (d, d), f"l{l}.bk": (d,),
                f"l{l}.wv": (d, d), f"l{l}.bv": (d,),
                f"l{l}.wo": (d, d), f"l{l}.bo": (d,),
                f"l{l}.ln2_g": (d,), f"l{l}.ln2_b": (d,),
                f"l{l}.w1": (d, f), f"l{l}.b1": (f,),
                f"l{l}.w2": (f, d), f"l{l}.b2": (d,),
            })
        s.update({"lnf_g": (d,), "lnf_b": (d,), "wout": (d, V), "bout": (V,)})
        return s


@dataclass
class LlmParams:
    config: LlmConfig
    tensors: dict[str, np.ndarray]

    @property
    def embed(self) -> np.ndarray:
        return self.tensors["embed"]

    def digest(self) -> str:
        return hashlib.sha256(checkpoint.dumps({SECTION: self.tensors})).hexdigest()


def llm_init(config: LlmConfig) -> LlmParams:
    t: dict[str, np.ndarray] = {}
    for name, shape in config.shapes().items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            t[name] = np.ones(shape)
        elif len(shape) == 1:
            t[name] = np.zeros(shape)
        else:
            rng = make_rng(config.seed, "llm", name)
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            t[name] = rng.uniform(-a, a, size=shape)
    E = t["embed"]
    t["embed"] = E / np.linalg.norm(E, axis=1, keepdims=True)
    return LlmParams(config, t)


def embed_tokens(params: LlmParams, tokens) -> np.ndarray:
    ids = np.asarray(list(tokens), dtype=np.int64)
    V = params.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {V}")
    return params.embed[ids].reshape(len(ids), params.config.d_model)


def positions(S: int, d: int) -> np.ndarray:
    pos = np.arange(S)[:, None]
    i = np.arange(0, d, 2)[None, :]
    ang = pos / np.power(10000.0, i / d)
    pe = np.zeros((S, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


@dataclass
class LlmTape:
    batched: bool
    cache: dict = field(default_factory=dict)
    used: bool = False


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def _ln_back(dy, g, saved, grads, gname, bname):
    xh, rstd = saved
    if grads is not None:
        grads[gname] += np.sum(dy * xh, axis=tuple(range(dy.ndim - 1)))
        grads[bname] += np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxh = dy * g
    return rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * np.mean(dxh * xh, axis=-1, keepdims=True))


def llm_forward(params: LlmParams, input_embeds: np.ndarray, causal: bool = True) -> tuple[np.ndarray, LlmTape]:
    """Logits for every position. ``input_embeds`` is ``(S, d)`` or ``(B, S, d)``."""
    cfg = params.config
    p = params.tensors
    X = np.asarray(input_embeds, dtype=np.float64)
    batched = X.ndim == 3
    if not batched:
        X = X[None]
    B, S, d = X.shape
    if d != cfg.d_model:
        raise ValueError(f"input width {d} does not match d_model {cfg.d_model}")
    if S > cfg.max_len:
        raise ValueError(f"sequence length {S} exceeds max_len {cfg.max_len}")
    tape = LlmTape(batched=batched)
    c = tape.cache
    h, dh = cfg.heads, d // cfg.heads
    norm = np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), EPS)
    c["in"] = (X, norm)
    x = X * (np.sqrt(d) / norm) + positions(S, d)
    mask = np.triu(np.ones((S, S), dtype=bool), k=1) if causal else np.zeros((S, S), dtype=bool)
    c["mask"] = mask
    for l in range(cfg.layers):
        pre = f"l{l}."
        a, ln1 = _ln(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = (a @ p[pre + "wq"] + p[pre + "bq"]).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        k = (a @ p[pre + "wk"] + p[pre + "bk"]).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        v = (a @ p[pre + "wv"] + p[pre + "bv"]).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores = np.where(mask, -np.inf, scores)
        P = np.exp(scores - scores.max(axis=-1, keepdims=True))
        P /= P.sum(axis=-1, keepdims=True)
        o = (P @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + o @ p[pre + "wo"] + p[pre + "bo"]
        f, ln2 = _ln(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        u = f @ p[pre + "w1"] + p[pre + "b1"]
        gu = gelu(u)
        x = x + gu @ p[pre + "w2"] + p[pre + "b2"]
        c[l] = (a, ln1, q, k, v, P, o, f, ln2, u, gu)
    y, lnf = _ln(x, p["lnf_g"], p["lnf_b"])
    c["final"] = (y, lnf)
    logits = y @ p["wout"] + p["bout"]
    return (logits if batched else logits[0]), tape


def llm_backward(params: LlmParams, tape: LlmTape, grad_logits: np.ndarray,
                 param_grads: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Reverse pass. Returns the gradient w.r.t. the input embeddings and, when
    ``param_grads`` is given, accumulates parameter gradients into it."""
    if tape.used:
        raise TapeError("LLM tape already consumed by a backward pass")
    tape.used = True
    cfg = params.config
    p = params.tensors
    c = tape.cache
    G = np.asarray(grad_logits, dtype=np.float64)
    if not tape.batched:
        G = G[None]
    B, S, _ = G.shape
    d, h = cfg.d_model, cfg.heads
    dh = d // h
    pg = param_grads
    y, lnf = c["final"]
    if pg is not None:
        pg["wout"] += y.reshape(-1, d).T @ G.reshape(-1, G.shape[-1])
        pg["bout"] += G.sum(axis=(0, 1))
    dx = _ln_back(G @ p["wout"].T, p["lnf_g"], lnf, pg, "lnf_g", "lnf_b")
    for l in reversed(range(cfg.layers)):
        pre = f"l{l}."
        a, ln1, q, k, v, P, o, f, ln2, u, gu = c[l]
        if pg is not None:
            pg[pre + "w2"] += gu.reshape(-1, gu.shape[-1]).T @ dx.reshape(-1, d)
            pg[pre + "b2"] += dx.sum(axis=(0, 1))
        du = (dx @ p[pre + "w2"].T) * gelu_grad(u)
        if pg is not None:
            pg[pre + "w1"] += f.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
            pg[pre + "b1"] += du.sum(axis=(0, 1))
        dx = dx + _ln_back(du @ p[pre + "w1"].T, p[pre + "ln2_g"], ln2, pg, pre + "ln2_g", pre + "ln2_b")
        # attention
        if pg is not None:
            pg[pre + "wo"] += o.reshape(-1, d).T @ dx.reshape(-1, d)
            pg[pre + "bo"] += dx.sum(axis=(0, 1))
        do = (dx @ p[pre + "wo"].T).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        dP = do @ v.transpose(0, 1, 3, 2)
        dv = P.transpose(0, 1, 3, 2) @ do
        ds = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) / np.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq, dk, dv = (t.transpose(0, 2, 1, 3).reshape(B, S, d) for t in (dq, dk, dv))
        if pg is not None:
            a2 = a.reshape(-1, d)
            for name, gt in (("q", dq), ("k", dk), ("v", dv)):
                pg[pre + "w" + name] += a2.T @ gt.reshape(-1, d)
                pg[pre + "b" + name] += gt.sum(axis=(0, 1))
        da = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
        dx = dx + _ln_back(da, p[pre + "ln1_g"], ln1, pg, pre + "ln1_g", pre + "ln1_b")
    X, norm = c["in"]
    s = np.sqrt(d)
    unit = X / norm
    dX = s * (dx - unit * np.sum(dx * unit, axis=-1, keepdims=True)) / norm
    dX = np.where(norm > EPS, dX, s * dx / norm)
    return dX if tape.batched else dX[0]


def llm_backward_to_inputs(params: LlmParams, tape: LlmTape, grad_logits: np.ndarray) -> np.ndarray:
    return llm_backward(params, tape, grad_logits, None)


def llm_flops(config: LlmConfig, S: int, direction: str = "forward") -> int:
    d, V, L, f = config.d_model, config.vocab_size, config.layers, config.ffn_mult
    macs = L * (4 * S * d * d + 2 * S * S * d + 2 * f * S * d * d) + S * d * V
    fwd = 2 * macs
    if direction == "forward":
        return fwd
    if direction == "backward":
        return 2 * fwd
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


# ---------------------------------------------------------------- checkpoints

SECTION = "llm"


def checkpoint_save(params: LlmParams, path: str | Path) -> None:
    checkpoint.save(path, {SECTION: params.tensors}, {"llm_config": asdict(params.config)})


def params_from_sections(sections: dict, meta: dict) -> LlmParams:
    if SECTION not in sections or "llm_config" not in meta:
        raise checkpoint.CheckpointError(f"expected an {SECTION!r} section, found {sorted(sections)}")
    cfg = LlmConfig(**meta["llm_config"])
    checkpoint.check_shapes(SECTION, sections[SECTION], cfg.shapes())
    return LlmParams(cfg, dict(sections[SECTION]))


def checkpoint_load(path: str | Path) -> LlmParams:
    return params_from_sections(*checkpoint.load(path))
