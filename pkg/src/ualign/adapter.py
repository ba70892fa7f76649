"""Speech-to-LLM modality adapter: LayerNorm -> strided conv stack -> MLP.

Forward and backward are written out by hand. ``adapter_backward``
accumulates into ``params.grads``; callers zero them between steps.
The CTC head (scaled cosine against the LLM embedding table plus a
learned blank vector) lives here because its parameters belong to the
adapter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .numerics import EPS, gelu, gelu_grad, make_rng

LN_VAR_FLOOR = 1e-5


@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int = 32
    hidden_dim: int = 64
    out_dim: int = 48
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_layers: int = 1
    mlp_hidden: int = 96
    activation: str = "gelu"

    def __post_init__(self) -> None:
        for name in ("in_dim", "hidden_dim", "out_dim", "conv_kernel", "conv_stride", "conv_layers", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def output_length(self, T: int) -> int:
        """Subsampled length for ``T`` input frames (0 if too short)."""
        n = T
        for _ in range(self.conv_layers):
            if n < self.conv_kernel:
                return 0
            n = (n - self.conv_kernel) // self.conv_stride + 1
        return n

    def min_input_length(self) -> int:
        n = 1
        for _ in range(self.conv_layers):
            n = (n - 1) * self.conv_stride + self.conv_kernel
        return n

    def shapes(self) -> dict[str, tuple[int, ...]]:
        s: dict[str, tuple[int, ...]] = {"ln_gain": (self.in_dim,), "ln_bias": (self.in_dim,)}
        c_in = self.in_dim
        for k in range(self.conv_layers):
            s[f"conv{k}_w"] = (self.hidden_dim, c_in, self.conv_kernel)
            s[f"conv{k}_b"] = (self.hidden_dim,)
            c_in = self.hidden_dim
        s["mlp1_w"] = (self.hidden_dim, self.mlp_hidden)
        s["mlp1_b"] = (self.mlp_hidden,)
        s["mlp2_w"] = (self.mlp_hidden, self.out_dim)
        s["mlp2_b"] = (self.out_dim,)
        s["blank_vector"] = (self.out_dim,)
        s["logit_scale"] = ()
        return s


@dataclass
class AdapterParams:
    config: AdapterConfig
    tensors: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.grads:
            self.grads = {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


class TapeError(RuntimeError):
    pass


@dataclass
class AdapterTape:
    T: int
    x: np.ndarray
    xhat: np.ndarray
    std: np.ndarray
    floored: np.ndarray
    conv_in: list = field(default_factory=list)  # (patch index, patches, pre-activation)
    mlp_in: np.ndarray | None = None
    mlp_pre: np.ndarray | None = None
    used: bool = False


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def adapter_init(config: AdapterConfig, seed: int) -> AdapterParams:
    t: dict[str, np.ndarray] = {}
    t["ln_gain"] = np.ones(config.in_dim)
    t["ln_bias"] = np.zeros(config.in_dim)
    c_in = config.in_dim
    for k in range(config.conv_layers):
        rng = make_rng(seed, "adapter", f"conv{k}")
        K = config.conv_kernel
        t[f"conv{k}_w"] = _glorot(rng, (config.hidden_dim, c_in, K), c_in * K, config.hidden_dim * K)
        t[f"conv{k}_b"] = np.zeros(config.hidden_dim)
        c_in = config.hidden_dim
    t["mlp1_w"] = _glorot(make_rng(seed, "adapter", "mlp1"), (config.hidden_dim, config.mlp_hidden),
                          config.hidden_dim, config.mlp_hidden)
    t["mlp1_b"] = np.zeros(config.mlp_hidden)
    t["mlp2_w"] = _glorot(make_rng(seed, "adapter", "mlp2"), (config.mlp_hidden, config.out_dim),
                          config.mlp_hidden, config.out_dim)
    t["mlp2_b"] = np.zeros(config.out_dim)
    blank = make_rng(seed, "adapter", "blank").standard_normal(config.out_dim)
    t["blank_vector"] = blank / np.linalg.norm(blank)
    t["logit_scale"] = np.array(10.0)
    return AdapterParams(config, t)


def _patch_index(L: int, kernel: int, stride: int) -> np.ndarray:
    n = (L - kernel) // stride + 1
    return np.arange(n)[:, None] * stride + np.arange(kernel)[None, :]


def adapter_forward(params: AdapterParams, speech: np.ndarray) -> tuple[np.ndarray, AdapterTape]:
    cfg = params.config
    p = params.tensors
    x = np.asarray(speech, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ValueError(f"speech must be T x {cfg.in_dim}, got {x.shape}")
    T = x.shape[0]
    if cfg.output_length(T) < 1:
        raise ValueError(f"input of {T} frames is too short; need at least T={cfg.min_input_length()}")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    floored = var < LN_VAR_FLOOR
    std = np.sqrt(np.maximum(var, LN_VAR_FLOOR))
    xhat = (x - mu) / std
    z = xhat * p["ln_gain"] + p["ln_bias"]
    tape = AdapterTape(T=T, x=x, xhat=xhat, std=std, floored=floored)
    for k in range(cfg.conv_layers):
        W = p[f"conv{k}_w"]  # out, in, kernel
        idx = _patch_index(z.shape[0], cfg.conv_kernel, cfg.conv_stride)
        patches = z[idx].reshape(idx.shape[0], -1)  # (L, kernel*in), kernel-major
        W2 = W.transpose(2, 1, 0).reshape(-1, W.shape[0])
        pre = patches @ W2 + p[f"conv{k}_b"]
        tape.conv_in.append((idx, patches, pre, z.shape[0]))
        z = gelu(pre)
    tape.mlp_in = z
    a = z @ p["mlp1_w"] + p["mlp1_b"]
    tape.mlp_pre = a
    H = gelu(a) @ p["mlp2_w"] + p["mlp2_b"]
    return H, tape


def adapter_backward(params: AdapterParams, tape: AdapterTape, grad_H: np.ndarray) -> np.ndarray:
    if tape.used:
        raise TapeError("adapter tape already consumed by a backward pass")
    tape.used = True
    cfg = params.config
    p, g = params.tensors, params.grads
    gH = np.asarray(grad_H, dtype=np.float64)
    a = tape.mlp_pre
    ga = gelu(a)
    g["mlp2_w"] += ga.T @ gH
    g["mlp2_b"] += gH.sum(axis=0)
    da = (gH @ p["mlp2_w"].T) * gelu_grad(a)
    g["mlp1_w"] += tape.mlp_in.T @ da
    g["mlp1_b"] += da.sum(axis=0)
    dz = da @ p["mlp1_w"].T
    for k in reversed(range(cfg.conv_layers)):
        idx, patches, pre, L_in = tape.conv_in[k]
        W = p[f"conv{k}_w"]
        dpre = dz * gelu_grad(pre)
        gW2 = patches.T @ dpre  # (kernel*in, out)
        g[f"conv{k}_w"] += gW2.reshape(cfg.conv_kernel, W.shape[1], W.shape[0]).transpose(2, 1, 0)
        g[f"conv{k}_b"] += dpre.sum(axis=0)
        W2 = W.transpose(2, 1, 0).reshape(-1, W.shape[0])
        dpatch = (dpre @ W2.T).reshape(idx.shape[0], cfg.conv_kernel, W.shape[1])
        dz = np.zeros((L_in, W.shape[1]))
        np.add.at(dz, idx, dpatch)
    g["ln_gain"] += np.sum(dz * tape.xhat, axis=0)
    g["ln_bias"] += dz.sum(axis=0)
    dxhat = dz * p["ln_gain"]
    xhat, std = tape.xhat, tape.std
    full = (dxhat - dxhat.mean(axis=1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)) / std
    # floored rows: std is a constant, so only the mean subtraction remains
    const = (dxhat - dxhat.mean(axis=1, keepdims=True)) / std
    return np.where(tape.floored, const, full)


def adapter_flops(config: AdapterConfig, T: int) -> int:
    """Forward FLOPs (2 per multiply-accumulate) for a ``T``-frame input."""
    macs = 0
    L, c_in = T, config.in_dim
    for _ in range(config.conv_layers):
        L = (L - config.conv_kernel) // config.conv_stride + 1
        macs += L * config.conv_kernel * c_in * config.hidden_dim
        c_in = config.hidden_dim
    macs += L * (config.hidden_dim * config.mlp_hidden + config.mlp_hidden * config.out_dim)
    return 2 * macs


# ---------------------------------------------------------------- CTC head


def ctc_logits(params: AdapterParams, H: np.ndarray, embed_table: np.ndarray, epsilon: float = EPS) -> np.ndarray:
    """``I x (V+1)`` logits: scaled cosine to each table row, blank in the last column."""
    H = np.asarray(H, dtype=np.float64)
    if embed_table.shape[1] != H.shape[1]:
        raise ValueError(f"embedding table rows have dim {embed_table.shape[1]}, H has {H.shape[1]}")
    R = np.vstack([embed_table, params.tensors["blank_vector"][None, :]])
    Hn = H / np.maximum(np.linalg.norm(H, axis=1, keepdims=True), epsilon)
    Rn = R / np.maximum(np.linalg.norm(R, axis=1, keepdims=True), epsilon)
    return params.tensors["logit_scale"] * (Hn @ Rn.T)


def ctc_logits_backward(params: AdapterParams, H: np.ndarray, embed_table: np.ndarray,
                        grad_logits: np.ndarray, epsilon: float = EPS) -> np.ndarray:
    """Backward of :func:`ctc_logits`: returns grad w.r.t. ``H``; accumulates the
    blank-vector and logit-scale gradients into ``params.grads``."""
    H = np.asarray(H, dtype=np.float64)
    blank = params.tensors["blank_vector"]
    R = np.vstack([embed_table, blank[None, :]])
    nh = np.maximum(np.linalg.norm(H, axis=1, keepdims=True), epsilon)
    nr = np.maximum(np.linalg.norm(R, axis=1, keepdims=True), epsilon)
    Hn, Rn = H / nh, R / nr
    cos = Hn @ Rn.T
    s = params.tensors["logit_scale"]
    params.grads["logit_scale"] += np.sum(grad_logits * cos)
    gcos = s * grad_logits
    gHn = gcos @ Rn
    gRn_blank = gcos[:, -1] @ Hn
    # d(x/|x|) = (I - xx^T/|x|^2)/|x|, valid where the norm is not clamped
    gH = (gHn - Hn * np.sum(gHn * Hn, axis=1, keepdims=True)) / nh
    gH = np.where(np.linalg.norm(H, axis=1, keepdims=True) > epsilon, gH, gHn / nh)
    bn = Rn[-1]
    params.grads["blank_vector"] += (gRn_blank - bn * (gRn_blank @ bn)) / nr[-1, 0]
    return gH


# ---------------------------------------------------------------- checkpoints

SECTION = "adapter"


def checkpoint_save(params: AdapterParams, path: str | Path, extra: dict | None = None) -> None:
    meta = {"adapter_config": asdict(params.config)}
    if extra:
        meta.update(extra)
    checkpoint.save(path, {SECTION: params.tensors}, meta)


def checkpoint_load(path: str | Path) -> AdapterParams:
    sections, meta = checkpoint.load(path)
    return params_from_sections(sections, meta)


def params_from_sections(sections: dict, meta: dict) -> AdapterParams:
    if SECTION not in sections or "adapter_config" not in meta:
        raise checkpoint.CheckpointError(f"expected an {SECTION!r} section, found {sorted(sections)}")
    cfg = AdapterConfig(**meta["adapter_config"])
    checkpoint.check_shapes(SECTION, sections[SECTION], cfg.shapes())
    return AdapterParams(cfg, dict(sections[SECTION]))
