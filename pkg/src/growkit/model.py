"""Dense-tensor decoder-only transformer with exact reverse-mode gradients.

The architecture is the usual pre-norm Llama-style block: RMSNorm ->
multi-head attention with rotary embeddings -> residual, RMSNorm -> SwiGLU
-> residual, with a final RMSNorm before the untied output head. Causal
masking throughout, no biases, no dropout.

Everything is plain numpy. Parameters and activations live in float32 by
default; the reductions that decide tight function-preservation tolerances
(RMSNorm mean-square, softmax normalizer, loss) accumulate in float64.
Passing float64 parameters runs the whole stack in float64, which is what
the finite-difference gradient checks rely on.

Two attention implementations sit behind one block/glue implementation: a
numpy reference (any dtype) and fused numba kernels (float32, used by the
trainer). See kernels.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import InputError

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    d_ffn: int
    n_heads: int
    head_dim: int
    n_layers: int
    max_seq_len: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InputError(f"{f.name} must be a positive integer, got {v!r}")
        if self.vocab_size < 2:
            raise InputError("vocab_size must be >= 2")
        if self.n_heads * self.head_dim != self.d_model:
            raise InputError(
                f"n_heads * head_dim must equal d_model "
                f"({self.n_heads} * {self.head_dim} != {self.d_model})"
            )
        if self.head_dim % 2 != 0:
            raise InputError("head_dim must be even (rotary embedding works on pairs)")

    def scaled(self, width_factor: int = 1, depth_factor: int = 1) -> "ModelConfig":
        """Config with width and/or depth multiplied (head count grows, head_dim fixed)."""
        return replace(
            self,
            d_model=self.d_model * width_factor,
            d_ffn=self.d_ffn * width_factor,
            n_heads=self.n_heads * width_factor,
            n_layers=self.n_layers * depth_factor,
        )


@dataclass
class LayerParams:
    wq: np.ndarray  # (d_model, d_model)
    wk: np.ndarray  # (d_model, d_model)
    wv: np.ndarray  # (d_model, d_model)
    wo: np.ndarray  # (d_model, d_model)
    w_up: np.ndarray  # (d_ffn, d_model)
    w_gate: np.ndarray  # (d_ffn, d_model)
    w_down: np.ndarray  # (d_model, d_ffn)
    norm_attn: np.ndarray  # (d_model,)
    norm_mlp: np.ndarray  # (d_model,)

    TENSOR_NAMES = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down", "norm_attn", "norm_mlp")

    def copy(self) -> "LayerParams":
        return LayerParams(*(getattr(self, n).copy() for n in self.TENSOR_NAMES))


@dataclass
class ParameterSet:
    """Named dense tensors of one model. Also reused as the gradient container."""

    embedding: np.ndarray  # (V, d_model)
    layers: list  # list[LayerParams]
    final_norm: np.ndarray  # (d_model,)
    head: np.ndarray  # (V, d_model)

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "embedding", self.embedding
        for i, layer in enumerate(self.layers):
            for n in LayerParams.TENSOR_NAMES:
                yield f"layers.{i}.{n}", getattr(layer, n)
        yield "final_norm", self.final_norm
        yield "head", self.head

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.embedding.copy(),
            [l.copy() for l in self.layers],
            self.final_norm.copy(),
            self.head.copy(),
        )

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            self.embedding.astype(dtype),
            [LayerParams(*(getattr(l, n).astype(dtype) for n in LayerParams.TENSOR_NAMES)) for l in self.layers],
            self.final_norm.astype(dtype),
            self.head.astype(dtype),
        )

    @property
    def dtype(self):
        return self.embedding.dtype

    def n_params(self) -> int:
        return sum(int(t.size) for _, t in self.named_tensors())

    def all_finite(self) -> bool:
        return all(bool(np.isfinite(t).all()) for _, t in self.named_tensors())

    def validate_shapes(self, config: ModelConfig) -> None:
        d, f, v = config.d_model, config.d_ffn, config.vocab_size
        expect = {"embedding": (v, d), "final_norm": (d,), "head": (v, d)}
        per_layer = {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w_up": (f, d), "w_gate": (f, d), "w_down": (d, f),
            "norm_attn": (d,), "norm_mlp": (d,),
        }
        if len(self.layers) != config.n_layers:
            raise InputError(f"expected {config.n_layers} layers, found {len(self.layers)}")
        for name, t in self.named_tensors():
            key = name.split(".")[-1]
            want = expect.get(name) or per_layer[key]
            if t.shape != want:
                raise InputError(f"tensor {name} has shape {t.shape}, expected {want}")

    @staticmethod
    def from_named(tensors: dict, config: ModelConfig) -> "ParameterSet":
        layers = [
            LayerParams(*(tensors[f"layers.{i}.{n}"] for n in LayerParams.TENSOR_NAMES))
            for i in range(config.n_layers)
        ]
        ps = ParameterSet(tensors["embedding"], layers, tensors["final_norm"], tensors["head"])
        ps.validate_shapes(config)
        return ps


# Gradients are shape-congruent with the parameters; reuse the container.
Gradients = ParameterSet

INIT_STD = 0.02


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParameterSet:
    """Seeded normal init, std 0.02; residual-branch outputs (wo, w_down) get 1/sqrt(2*l)."""
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    resid_std = INIT_STD / math.sqrt(2 * config.n_layers)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape).astype(dtype)

    embedding = normal((v, d), INIT_STD)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                wq=normal((d, d), INIT_STD),
                wk=normal((d, d), INIT_STD),
                wv=normal((d, d), INIT_STD),
                wo=normal((d, d), resid_std),
                w_up=normal((f, d), INIT_STD),
                w_gate=normal((f, d), INIT_STD),
                w_down=normal((d, f), resid_std),
                norm_attn=np.ones(d, dtype=dtype),
                norm_mlp=np.ones(d, dtype=dtype),
            )
        )
    head = normal((v, d), INIT_STD)
    return ParameterSet(embedding, layers, np.ones(d, dtype=dtype), head)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """x / sqrt(mean(x^2)) * gain over the last axis; mean accumulated in float64."""
    y, _ = _rmsnorm_fwd(x, gain)
    return y


def _rmsnorm_fwd(x, gain):
    d = x.shape[-1]
    ms = np.einsum("...d,...d->...", x, x, dtype=np.float64) / d
    inv = (1.0 / np.sqrt(ms)).astype(x.dtype)[..., None]
    return x * inv * gain, inv


def _rmsnorm_bwd(dy, x, gain, inv):
    d = x.shape[-1]
    w = dy * gain
    s = np.einsum("...d,...d->...", w, x, dtype=np.float64)[..., None]
    coef = ((inv.astype(np.float64) ** 3) * (s / d)).astype(x.dtype)
    dx = w * inv - x * coef
    normed = (x * inv).reshape(-1, d)
    dgain = np.einsum("nd,nd->d", dy.reshape(-1, d), normed, dtype=np.float64).astype(x.dtype)
    return dx, dgain


def _rope_tables(seq_len: int, head_dim: int, dtype):
    """Per-position rotations as a complex phase table (seq_len, head_dim/2)."""
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    rot = np.cos(angles) + 1j * np.sin(angles)
    return rot.astype(np.complex64 if dtype == np.float32 else np.complex128)


def _rope_apply(x, rot, inverse=False):
    # x: (B, S, H, head_dim); consecutive pairs (2i, 2i+1) form complex numbers
    # rotated by pos*freq_i; one complex multiply per pair
    if inverse:
        rot = rot.conj()
    shape = x.shape
    xc = np.ascontiguousarray(x).view(rot.dtype).reshape(shape[0], shape[1], shape[2], -1)
    return (xc * rot[None, :, None, :]).view(x.dtype).reshape(shape)


def _sigmoid(x):
    # branchless and overflow-free: sigmoid(x) = (1 + tanh(x/2)) / 2
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + x.dtype.type(1.0))


def _silu(x):
    return x * _sigmoid(x)


# ---------------------------------------------------------------------------
# attention backends
# ---------------------------------------------------------------------------


class NumpyAttention:
    """Reference softmax attention; works for any float dtype."""

    def forward(self, q, k, v, cache: dict):
        # q, k, v: (B, S, H, head_dim), rotary already applied to q and k
        B, S, H, hd = q.shape
        scale = q.dtype.type(1.0 / math.sqrt(hd))
        qt = q.transpose(0, 2, 1, 3)
        kt = k.transpose(0, 2, 1, 3)
        vt = v.transpose(0, 2, 1, 3)
        scores = qt @ kt.transpose(0, 1, 3, 2)
        scores *= scale
        upper = np.triu(np.ones((S, S), dtype=bool), k=1)
        scores[:, :, upper] = -np.inf
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        ssum = e.sum(axis=-1, keepdims=True, dtype=np.float64)
        probs = (e / ssum).astype(q.dtype)
        ctx = probs @ vt
        cache["qt"], cache["kt"], cache["vt"], cache["probs"] = qt, kt, vt, probs
        return ctx.transpose(0, 2, 1, 3)

    def backward(self, cache: dict, dctx):
        qt, kt, vt, probs = cache["qt"], cache["kt"], cache["vt"], cache["probs"]
        hd = qt.shape[-1]
        scale = qt.dtype.type(1.0 / math.sqrt(hd))
        dctx_t = dctx.transpose(0, 2, 1, 3)
        dprobs = dctx_t @ vt.transpose(0, 1, 3, 2)
        dvt = probs.transpose(0, 1, 3, 2) @ dctx_t
        rs = np.einsum("bhij,bhij->bhi", dprobs, probs, dtype=np.float64)
        ds = probs * (dprobs - rs[..., None].astype(probs.dtype))
        ds *= scale
        dqt = ds @ kt
        dkt = ds.transpose(0, 1, 3, 2) @ qt
        return (
            dqt.transpose(0, 2, 1, 3),
            dkt.transpose(0, 2, 1, 3),
            dvt.transpose(0, 2, 1, 3),
        )


class KernelAttention:
    """Fused numba attention (float32 only); used by the trainer's hot loop.

    The sequence axis is zero-padded up to a multiple of 8 so the kernels'
    inner loops stay SIMD-aligned; padded query rows produce garbage rows
    that are sliced away, and zero padded gradients keep the backward exact.
    """

    def __init__(self, pool=None):
        from . import kernels  # deferred: first import JIT-compiles

        self._k = kernels
        self._pool = pool

    def _buf(self, tag, shape):
        if self._pool is None:
            return np.empty(shape, np.float32)
        return self._pool.get(tag, shape, np.float32)

    def forward(self, q, k, v, cache: dict):
        B, S, H, hd = q.shape
        if q.dtype != np.float32:
            raise InputError("kernel attention requires float32 tensors")
        tag = cache.get("tag", "")
        sp = -(-S // 8) * 8
        q3 = self._buf(f"{tag}q3", (B * H, sp, hd))
        kt3 = self._buf(f"{tag}kt3", (B * H, hd, sp))
        vt3 = self._buf(f"{tag}vt3", (B * H, hd, sp))
        q4 = q3.reshape(B, H, sp, hd)
        q4[:, :, :S] = q.transpose(0, 2, 1, 3)
        q4[:, :, S:] = 0.0
        kt4 = kt3.reshape(B, H, hd, sp)
        kt4[:, :, :, :S] = k.transpose(0, 2, 3, 1)
        kt4[:, :, :, S:] = 0.0
        vt4 = vt3.reshape(B, H, hd, sp)
        vt4[:, :, :, :S] = v.transpose(0, 2, 3, 1)
        vt4[:, :, :, S:] = 0.0
        probs = self._buf(f"{tag}probs", (B * H, sp, sp))
        ctx3 = self._buf(f"{tag}ctx", (B * H, sp, hd))
        scale = np.float32(1.0 / math.sqrt(hd))
        self._k.attn_scores(q3, kt3, probs, scale)
        np.exp(probs, out=probs)
        self._k.attn_normalize_pv(probs, vt3, ctx3)
        cache["q3"], cache["kt3"], cache["vt3"], cache["probs"] = q3, kt3, vt3, probs
        cache["shape"] = (B, S, H, hd, sp)
        return ctx3.reshape(B, H, sp, hd)[:, :, :S].transpose(0, 2, 1, 3)

    def backward(self, cache: dict, dctx):
        B, S, H, hd, sp = cache["shape"]
        tag = cache.get("tag", "")
        dc3 = self._buf(f"{tag}dctx", (B * H, sp, hd))
        dc4 = dc3.reshape(B, H, sp, hd)
        dc4[:, :, :S] = dctx.transpose(0, 2, 1, 3)
        dc4[:, :, S:] = 0.0
        dq3 = self._buf(f"{tag}dq", (B * H, sp, hd))
        dkt3 = self._buf(f"{tag}dkt", (B * H, hd, sp))
        dvt3 = self._buf(f"{tag}dvt", (B * H, hd, sp))
        scale = np.float32(1.0 / math.sqrt(hd))
        self._k.attn_backward(
            cache["q3"], cache["kt3"], cache["vt3"], cache["probs"], dc3, dq3, dkt3, dvt3, scale
        )
        dq = dq3.reshape(B, H, sp, hd)[:, :, :S].transpose(0, 2, 1, 3)
        dk = dkt3.reshape(B, H, hd, sp)[:, :, :, :S].transpose(0, 3, 1, 2)
        dv = dvt3.reshape(B, H, hd, sp)[:, :, :, :S].transpose(0, 3, 1, 2)
        return dq, dk, dv


_REFERENCE_ATTENTION = NumpyAttention()


# ---------------------------------------------------------------------------
# mask plumbing (gate objects come from growth.MaskSet; duck-typed here)
# ---------------------------------------------------------------------------


def _gate_model_slices(arr, masks):
    db = masks.base_d_model
    for i, gate in enumerate(masks.width_gates):
        arr[..., (i + 1) * db : (i + 2) * db] *= arr.dtype.type(gate)


def _gate_ffn_slices(arr, masks):
    fb = masks.base_d_ffn
    for i, gate in enumerate(masks.width_gates):
        arr[..., (i + 1) * fb : (i + 2) * fb] *= arr.dtype.type(gate)


def _layer_gate(masks, layer_idx):
    if masks is None:
        return None
    return masks.layer_gates.get(layer_idx)


def _has_width_gates(masks):
    return masks is not None and len(masks.width_gates) > 0


# ---------------------------------------------------------------------------
# forward / loss / backward
# ---------------------------------------------------------------------------


def _validate_tokens(tokens, config: ModelConfig, name="tokens"):
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a one-dimensional sequence of token ids")
    if not np.issubdtype(arr.dtype, np.integer):
        if arr.size and not np.all(arr == arr.astype(np.int64)):
            raise InputError(f"{name} must contain integers")
        arr = arr.astype(np.int64)
    if arr.size:
        if arr.min() < 0 or arr.max() >= config.vocab_size:
            raise InputError(f"{name} contain ids outside [0, {config.vocab_size})")
    if arr.shape[0] > config.max_seq_len:
        raise InputError(
            f"sequence length {arr.shape[0]} exceeds max_seq_len {config.max_seq_len}"
        )
    return arr


def _forward_batch(params, config, tokens2d, masks=None, cache=None, attention=None):
    """Batched forward pass. tokens2d: (B, S) int array. Returns (B, S, V) logits.

    When ``cache`` is a dict, the activations needed by the backward pass are
    stored into it.
    """
    attn = attention or _REFERENCE_ATTENTION
    B, S = tokens2d.shape
    H, hd = config.n_heads, config.head_dim
    x = params.embedding[tokens2d]
    if masks is not None:
        _gate_model_slices(x, masks)
    rot = _rope_tables(S, hd, params.dtype)
    saving = cache is not None
    layer_caches = [] if saving else None

    for i, L in enumerate(params.layers):
        lc = {"tag": f"L{i}."} if saving else {"tag": f"L{i}."}
        x_in = x
        h1, inv1 = _rmsnorm_fwd(x, L.norm_attn)
        q = h1 @ L.wq.T
        k = h1 @ L.wk.T
        v = h1 @ L.wv.T
        if _has_width_gates(masks):
            _gate_model_slices(q, masks)
            _gate_model_slices(k, masks)
            _gate_model_slices(v, masks)
        q4 = _rope_apply(q.reshape(B, S, H, hd), rot)
        k4 = _rope_apply(k.reshape(B, S, H, hd), rot)
        v4 = v.reshape(B, S, H, hd)
        ctx = attn.forward(q4, k4, v4, lc)
        ctx_flat = np.ascontiguousarray(ctx).reshape(B, S, config.d_model)
        o = ctx_flat @ L.wo.T
        gate = _layer_gate(masks, i)
        if _has_width_gates(masks):
            _gate_model_slices(o, masks)
        if gate is not None:
            o *= o.dtype.type(gate)
        x = x_in + o
        x_mid = x
        h2, inv2 = _rmsnorm_fwd(x, L.norm_mlp)
        u = h2 @ L.w_up.T
        g = h2 @ L.w_gate.T
        if _has_width_gates(masks):
            _gate_ffn_slices(u, masks)
            _gate_ffn_slices(g, masks)
        sig = _sigmoid(u)
        a = g * (u * sig)
        y = a @ L.w_down.T
        if _has_width_gates(masks):
            _gate_model_slices(y, masks)
        if gate is not None:
            y *= y.dtype.type(gate)
        x = x_mid + y
        if saving:
            lc.update(
                x_in=x_in, h1=h1, inv1=inv1, ctx_flat=ctx_flat,
                x_mid=x_mid, h2=h2, inv2=inv2, u=u, g=g, sig=sig,
            )
            layer_caches.append(lc)

    hf, invf = _rmsnorm_fwd(x, params.final_norm)
    logits = hf @ params.head.T
    if saving:
        cache["layers"] = layer_caches
        cache["x_f"] = x
        cache["hf"] = hf
        cache["invf"] = invf
        cache["tokens"] = tokens2d
        cache["rope"] = rot
    return logits


def forward(params: ParameterSet, config: ModelConfig, tokens, masks=None) -> np.ndarray:
    """Logits (seq_len x vocab) for one token sequence."""
    arr = _validate_tokens(tokens, config)
    if arr.size == 0:
        return np.zeros((0, config.vocab_size), dtype=params.dtype)
    return _forward_batch(params, config, arr[None, :], masks=masks)[0]


def lm_loss(logits: np.ndarray, targets) -> float:
    """Mean next-token cross entropy in nats; row i of logits scores targets[i]."""
    logits = np.asarray(logits)
    tgt = np.asarray(targets)
    if logits.ndim != 2:
        raise InputError("logits must be a (positions x vocab) matrix")
    if tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise InputError(
            f"targets length {tgt.shape} does not match logits rows {logits.shape[0]}"
        )
    if tgt.size == 0:
        return 0.0
    if tgt.min() < 0 or tgt.max() >= logits.shape[1]:
        raise InputError("targets contain ids outside the vocabulary")
    x = logits.astype(np.float64)
    m = x.max(axis=1)
    lse = m + np.log(np.exp(x - m[:, None]).sum(axis=1))
    nll = lse - x[np.arange(tgt.shape[0]), tgt]
    return float(nll.mean())


def _loss_and_dlogits(logits, targets2d):
    """Batched loss plus d(loss)/d(logits); reductions in float64."""
    B, S, V = logits.shape
    n_pos = B * S
    flat = logits.reshape(n_pos, V)
    tgt = targets2d.reshape(n_pos)
    x = flat.astype(np.float64)
    m = x.max(axis=1)
    e = np.exp(x - m[:, None])
    z = e.sum(axis=1)
    lse = m + np.log(z)
    idx = np.arange(n_pos)
    loss = float((lse - x[idx, tgt]).mean())
    p = (e / z[:, None]).astype(logits.dtype)
    p[idx, tgt] -= 1.0
    p *= logits.dtype.type(1.0 / n_pos)
    return loss, p.reshape(B, S, V)


def _zero_grads_like(params: ParameterSet) -> Gradients:
    return ParameterSet(
        np.zeros_like(params.embedding),
        [
            LayerParams(*(np.zeros_like(getattr(l, n)) for n in LayerParams.TENSOR_NAMES))
            for l in params.layers
        ],
        np.zeros_like(params.final_norm),
        np.zeros_like(params.head),
    )


def _scatter_add_rows(dE, idx_flat, rows_flat):
    # deterministic scatter-add via bincount (float64 accumulation)
    d = rows_flat.shape[1]
    pos = idx_flat.astype(np.int64)[:, None] * d + np.arange(d, dtype=np.int64)[None, :]
    acc = np.bincount(pos.ravel(), weights=rows_flat.ravel().astype(np.float64), minlength=dE.size)
    dE += acc.reshape(dE.shape).astype(dE.dtype)


def _backward_batch(params, config, cache, dlogits, masks=None, attention=None, grads_out=None):
    """Reverse pass matching _forward_batch; returns Gradients."""
    attn = attention or _REFERENCE_ATTENTION
    B, S, V = dlogits.shape
    d = config.d_model
    H, hd = config.n_heads, config.head_dim
    rot = cache["rope"]
    grads = grads_out if grads_out is not None else _zero_grads_like(params)
    if grads_out is not None:
        for _, t in grads.named_tensors():
            t[...] = 0

    dl_flat = dlogits.reshape(B * S, V)
    hf_flat = cache["hf"].reshape(B * S, d)
    grads.head += dl_flat.T @ hf_flat
    dhf = (dl_flat @ params.head).reshape(B, S, d)
    dx, dgf = _rmsnorm_bwd(dhf, cache["x_f"], params.final_norm, cache["invf"])
    grads.final_norm += dgf

    for i in reversed(range(config.n_layers)):
        L = params.layers[i]
        G = grads.layers[i]
        lc = cache["layers"][i]
        gate = _layer_gate(masks, i)

        # SwiGLU branch
        if gate is not None or _has_width_gates(masks):
            dy = dx.copy()
            if gate is not None:
                dy *= dy.dtype.type(gate)
            if _has_width_gates(masks):
                _gate_model_slices(dy, masks)
        else:
            dy = dx  # read-only below
        u, g_arr, sig = lc["u"], lc["g"], lc["sig"]
        su = u * sig
        dy_flat = dy.reshape(B * S, d)
        a_flat = (g_arr * su).reshape(B * S, config.d_ffn)
        G.w_down += dy_flat.T @ a_flat
        da = (dy_flat @ L.w_down).reshape(B, S, config.d_ffn)
        dg = da * su
        du = da * g_arr * (sig * (1.0 + u * (1.0 - sig)))
        if _has_width_gates(masks):
            _gate_ffn_slices(du, masks)
            _gate_ffn_slices(dg, masks)
        du_flat = du.reshape(B * S, config.d_ffn)
        dg_flat = dg.reshape(B * S, config.d_ffn)
        h2_flat = lc["h2"].reshape(B * S, d)
        G.w_up += du_flat.T @ h2_flat
        G.w_gate += dg_flat.T @ h2_flat
        dh2 = (du_flat @ L.w_up + dg_flat @ L.w_gate).reshape(B, S, d)
        dx2, dg2 = _rmsnorm_bwd(dh2, lc["x_mid"], L.norm_mlp, lc["inv2"])
        G.norm_mlp += dg2
        dx = dx + dx2

        # attention branch
        if gate is not None or _has_width_gates(masks):
            do = dx.copy()
            if gate is not None:
                do *= do.dtype.type(gate)
            if _has_width_gates(masks):
                _gate_model_slices(do, masks)
        else:
            do = dx  # read-only below
        do_flat = do.reshape(B * S, d)
        ctx_flat = lc["ctx_flat"].reshape(B * S, d)
        G.wo += do_flat.T @ ctx_flat
        dctx = (do_flat @ L.wo).reshape(B, S, H, hd)
        dq4, dk4, dv4 = attn.backward(lc, dctx)
        dq = _rope_apply(dq4, rot, inverse=True).reshape(B, S, d)
        dk = _rope_apply(dk4, rot, inverse=True).reshape(B, S, d)
        dv = np.ascontiguousarray(dv4).reshape(B, S, d)
        if _has_width_gates(masks):
            _gate_model_slices(dq, masks)
            _gate_model_slices(dk, masks)
            _gate_model_slices(dv, masks)
        dq_flat = dq.reshape(B * S, d)
        dk_flat = dk.reshape(B * S, d)
        dv_flat = dv.reshape(B * S, d)
        h1_flat = lc["h1"].reshape(B * S, d)
        G.wq += dq_flat.T @ h1_flat
        G.wk += dk_flat.T @ h1_flat
        G.wv += dv_flat.T @ h1_flat
        dh1 = (dq_flat @ L.wq + dk_flat @ L.wk + dv_flat @ L.wv).reshape(B, S, d)
        dx1, dg1 = _rmsnorm_bwd(dh1, lc["x_in"], L.norm_attn, lc["inv1"])
        G.norm_attn += dg1
        dx = dx + dx1

    if masks is not None:
        _gate_model_slices(dx, masks)
    _scatter_add_rows(grads.embedding, cache["tokens"].ravel(), dx.reshape(B * S, d))
    return grads


def loss_and_grads_batch(params, config, tokens2d, targets2d, masks=None, attention=None, grads_out=None):
    """Fused forward + loss + backward over a (B, S) batch."""
    cache = {}
    logits = _forward_batch(params, config, tokens2d, masks=masks, cache=cache, attention=attention)
    loss, dlogits = _loss_and_dlogits(logits, targets2d)
    grads = _backward_batch(
        params, config, cache, dlogits, masks=masks, attention=attention, grads_out=grads_out
    )
    return loss, grads


def backward(params: ParameterSet, config: ModelConfig, tokens, targets, masks=None):
    """Loss and exact parameter gradients for one sequence.

    Gradients are reverse-mode derivatives of lm_loss(forward(tokens))[targets].
    """
    arr = _validate_tokens(tokens, config)
    tgt = np.asarray(targets)
    if tgt.ndim != 1 or tgt.shape[0] != arr.shape[0]:
        raise InputError("targets must match tokens in length")
    if arr.size == 0:
        return 0.0, _zero_grads_like(params)
    if tgt.min() < 0 or tgt.max() >= config.vocab_size:
        raise InputError("targets contain ids outside the vocabulary")
    loss, grads = loss_and_grads_batch(params, config, arr[None, :], tgt[None, :], masks=masks)
    return loss, grads
