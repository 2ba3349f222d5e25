"""Growth operators: stacking, splitting, zero and masked-random expansion.

Depth operators copy whole transformer blocks; width operators expand the
model dimension by whole attention heads (head_dim untouched, so rotary
frequencies are preserved) and the SwiGLU inner dimension by whole slices.

Width expansion follows one block convention everywhere: for factor g the
grown coordinate space is the base space repeated g times, so slice k
covers coordinates [k*base, (k+1)*base).

The dual role of fan-in/fan-out in a weight matrix:
  - fan-in expansion handles duplicated *input* coordinates; direct growth
    splits each column among the duplicates with uneven weights summing to
    one, zero growth leaves old columns and adds random ones, masked-random
    growth adds random ones behind a gate;
  - fan-out expansion creates new *output* coordinates; direct growth
    duplicates rows, zero growth writes zero rows (the residual path then
    carries the function unchanged), masked-random growth writes random
    rows whose outputs are gated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, PatternError
from .model import (
    LayerParams,
    ModelConfig,
    ParameterSet,
    loss_and_grads_batch,
)

OPERATORS = ("direct", "learn", "zero", "random")
DIRECTIONS = ("width", "depth")

NEW_PARAM_STD = 0.02


@dataclass
class GrowthPlan:
    operator: str
    direction: str
    growth_factor: int = 1
    stack_pattern: Optional[str] = None
    noise_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise InputError(f"operator must be one of {OPERATORS}, got {self.operator!r}")
        if self.direction not in DIRECTIONS:
            raise InputError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not isinstance(self.growth_factor, (int, np.integer)) or self.growth_factor < 1:
            raise InputError(f"growth_factor must be a positive integer, got {self.growth_factor!r}")
        if self.stack_pattern is not None and (self.operator, self.direction) != ("direct", "depth"):
            raise InputError("stack_pattern applies only to depthwise direct growth")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise InputError(f"noise_ratio must be in [0, 1], got {self.noise_ratio}")


@dataclass
class MaskSet:
    """Gates over grown regions: one per new width slice, one per new layer.

    Gates start at zero (grown model computes the base function) and are
    ramped toward one over ``horizon`` optimizer steps.
    """

    base_d_model: int
    base_d_ffn: int
    width_gates: np.ndarray
    layer_gates: dict
    horizon: int = 0

    def advance(self, step: int) -> None:
        g = mask_schedule(step, self.horizon)
        self.set_all(g)

    def set_all(self, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise InputError(f"gate value must be in [0, 1], got {value}")
        self.width_gates[:] = value
        for k in self.layer_gates:
            self.layer_gates[k] = value


def mask_schedule(step: int, horizon: int) -> float:
    """Linear ramp from 0 to 1 over ``horizon`` steps, clamped at 1."""
    if horizon < 0:
        raise InputError("horizon must be non-negative")
    if horizon == 0:
        return 1.0
    return min(step / horizon, 1.0)


# ---------------------------------------------------------------------------
# origin maps and stacking
# ---------------------------------------------------------------------------


def validate_origin(origin: Sequence[int], base_layers: int) -> tuple:
    out = tuple(int(o) for o in origin)
    for o in out:
        if not 1 <= o <= base_layers:
            raise InputError(f"origin entry {o} outside [1, {base_layers}]")
    return out


def parse_stack_pattern(pattern: str, base_layers: int) -> tuple:
    """Parse dash-separated stacking groups into a 1-based origin sequence.

    A group is a run of base-layer indices, optionally suffixed ``*k`` to
    repeat the run k times. Runs are single digits 1-9 for bases of at most
    nine layers; deeper bases must spell indices comma-separated, e.g.
    ``1,2-3,4*5-10,11,12``.
    """
    if not pattern:
        raise PatternError("empty pattern", 0)
    origins: list = []
    pos = 0
    for group in pattern.split("-"):
        if not group:
            raise PatternError("empty group", pos)
        body, star, count_s = group.partition("*")
        if star:
            if not count_s.isdigit() or "," in count_s:
                raise PatternError(f"bad repeat count {count_s!r}", pos + len(body) + 1)
            repeat = int(count_s)
            if repeat < 1:
                raise PatternError("repeat count must be >= 1", pos + len(body) + 1)
        else:
            repeat = 1
        if not body:
            raise PatternError("empty layer run", pos)
        if base_layers > 9 or "," in body:
            run = []
            for tok in body.split(","):
                if not tok.isdigit():
                    raise PatternError(f"invalid layer index {tok!r}", pos)
                run.append(int(tok))
        else:
            if not body.isdigit():
                raise PatternError(f"invalid layer digits {body!r}", pos)
            run = [int(ch) for ch in body]
        for layer in run:
            if not 1 <= layer <= base_layers:
                raise PatternError(f"layer {layer} outside 1..{base_layers}", pos)
        origins.extend(run * repeat)
        pos += len(group) + 1
    return tuple(origins)


def connection_rate(origin: Sequence[int]) -> float:
    """Fraction of adjacent grown-layer pairs whose origins are consecutive.

    A pair (j, j+1) counts as retained iff origin[j+1] == origin[j] + 1;
    the denominator is the number of adjacent pairs.
    """
    origin = tuple(int(o) for o in origin)
    if len(origin) < 2:
        raise InputError("origin map must have at least two layers")
    retained = sum(1 for a, b in zip(origin, origin[1:]) if b == a + 1)
    return retained / (len(origin) - 1)


def stack_by_pattern(params: ParameterSet, config: ModelConfig, origin: Sequence[int]):
    """Grown layer j is a deep copy of base layer origin[j]; everything else copied once."""
    origin = validate_origin(origin, config.n_layers)
    layers = [params.layers[o - 1].copy() for o in origin]
    grown = ParameterSet(params.embedding.copy(), layers, params.final_norm.copy(), params.head.copy())
    grown_config = ModelConfig(
        config.vocab_size, config.d_model, config.d_ffn, config.n_heads,
        config.head_dim, len(origin), config.max_seq_len,
    )
    return grown, grown_config


def grow_depth_stack(params: ParameterSet, config: ModelConfig, g: int):
    """Repeat the whole block stack g times (block order 1..l, 1..l, ...)."""
    if g < 1:
        raise InputError("growth factor must be >= 1")
    origin = tuple(range(1, config.n_layers + 1)) * g
    grown, grown_config = stack_by_pattern(params, config, origin)
    return grown, grown_config, origin


def interleaved_origin(base_layers: int, g: int) -> tuple:
    """Each base layer immediately followed by its g-1 copies: 1,1,..,2,2,.."""
    return tuple(o for o in range(1, base_layers + 1) for _ in range(g))


def grow_depth_zero(params: ParameterSet, config: ModelConfig, g: int):
    """Interleave g-1 copies of each layer, zeroing their output projections.

    The copies' attention output and SwiGLU down projections are zero, so
    each new block is the identity on the residual stream and the grown
    model computes the base function.
    """
    if g < 1:
        raise InputError("growth factor must be >= 1")
    layers = []
    for base_layer in params.layers:
        layers.append(base_layer.copy())
        for _ in range(g - 1):
            copy = base_layer.copy()
            copy.wo[...] = 0.0
            copy.w_down[...] = 0.0
            layers.append(copy)
    grown = ParameterSet(params.embedding.copy(), layers, params.final_norm.copy(), params.head.copy())
    grown_config = ModelConfig(
        config.vocab_size, config.d_model, config.d_ffn, config.n_heads,
        config.head_dim, len(layers), config.max_seq_len,
    )
    return grown, grown_config


# ---------------------------------------------------------------------------
# width expansion primitives
# ---------------------------------------------------------------------------


def _split_weights(rng, n_cols: int, g: int, dtype):
    """Per-column convex split weights, shape (g, n_cols), columns sum to 1.

    Pairs use alpha ~ U(0.2, 0.8), beta = 1 - alpha; larger factors draw g
    values from the same range and normalize (uneven by construction).
    """
    if g == 1:
        return np.ones((1, n_cols), dtype=dtype)
    if g == 2:
        a = rng.uniform(0.2, 0.8, size=n_cols)
        return np.stack([a, 1.0 - a]).astype(dtype)
    raw = rng.uniform(0.2, 0.8, size=(g, n_cols))
    return (raw / raw.sum(axis=0, keepdims=True)).astype(dtype)


def _split_fanin(w: np.ndarray, g: int, rng) -> np.ndarray:
    """(out, in) -> (out, g*in); duplicate column block k scaled by split weight k."""
    if g == 1:
        return w.copy()
    alpha = _split_weights(rng, w.shape[1], g, w.dtype)
    return np.concatenate([w * alpha[k][None, :] for k in range(g)], axis=1)


def _dup_fanout(w: np.ndarray, g: int) -> np.ndarray:
    """(out, in) -> (g*out, in); rows tiled, copies identical."""
    return np.tile(w, (g, 1))


def _random_block(rng, shape, dtype):
    return rng.normal(0.0, NEW_PARAM_STD, size=shape).astype(dtype)


def grow_width_direct(params: ParameterSet, config: ModelConfig, g_w: int, seed: int):
    """Split/duplicate width growth. Linear paths are preserved exactly
    (column splits sum to one); RMSNorm is not: gains are copied and scaled
    by sqrt(d/D), which rescales normalized activations by the same factor,
    so the full model is deliberately not function preserving.
    """
    if g_w < 1:
        raise InputError("width factor must be >= 1")
    rng = np.random.default_rng(seed)
    norm_scale = params.dtype.type(math.sqrt(1.0 / g_w))

    def grow_norm(mu):
        return np.tile(mu, g_w) * norm_scale

    layers = []
    for L in params.layers:
        layers.append(
            LayerParams(
                wq=_dup_fanout(_split_fanin(L.wq, g_w, rng), g_w),
                wk=_dup_fanout(_split_fanin(L.wk, g_w, rng), g_w),
                wv=_dup_fanout(_split_fanin(L.wv, g_w, rng), g_w),
                wo=_dup_fanout(_split_fanin(L.wo, g_w, rng), g_w),
                w_up=_dup_fanout(_split_fanin(L.w_up, g_w, rng), g_w),
                w_gate=_dup_fanout(_split_fanin(L.w_gate, g_w, rng), g_w),
                w_down=_dup_fanout(_split_fanin(L.w_down, g_w, rng), g_w),
                norm_attn=grow_norm(L.norm_attn),
                norm_mlp=grow_norm(L.norm_mlp),
            )
        )
    grown = ParameterSet(
        embedding=np.tile(params.embedding, (1, g_w)),
        layers=layers,
        final_norm=grow_norm(params.final_norm),
        head=_split_fanin(params.head, g_w, rng),
    )
    return grown, config.scaled(width_factor=g_w)


def _zero_or_random_linear(w, g, rng, zero_new_out: bool):
    """Block expansion [[W, A], [B, C]]: A and C random; B zero for the zero
    operator (new outputs stay zero on old inputs), random for masked growth."""
    out_d, in_d = w.shape
    if g == 1:
        return w.copy()
    top = [w] + [_random_block(rng, (out_d, in_d), w.dtype) for _ in range(g - 1)]
    rows = [np.concatenate(top, axis=1)]
    for _ in range(g - 1):
        if zero_new_out:
            first = np.zeros((out_d, in_d), w.dtype)
        else:
            first = _random_block(rng, (out_d, in_d), w.dtype)
        rest = [_random_block(rng, (out_d, in_d), w.dtype) for _ in range(g - 1)]
        rows.append(np.concatenate([first] + rest, axis=1))
    return np.concatenate(rows, axis=0)


def _grow_width_blocks(params, config, g_w, seed, zero_variant: bool):
    rng = np.random.default_rng(seed)
    dtype = params.dtype
    norm_scale = dtype.type(math.sqrt(1.0 / g_w))

    def grow_norm(mu):
        ext_len = (g_w - 1) * mu.shape[0]
        if zero_variant:
            # new coordinates are exactly zero, any gain works; keep neutral 1
            ext = np.ones(ext_len, dtype)
        else:
            ext = _random_block(rng, (ext_len,), dtype)
        return np.concatenate([mu * norm_scale, ext])

    def grow_linear(w):
        return _zero_or_random_linear(w, g_w, rng, zero_new_out=zero_variant)

    layers = [
        LayerParams(
            wq=grow_linear(L.wq), wk=grow_linear(L.wk), wv=grow_linear(L.wv), wo=grow_linear(L.wo),
            w_up=grow_linear(L.w_up), w_gate=grow_linear(L.w_gate), w_down=grow_linear(L.w_down),
            norm_attn=grow_norm(L.norm_attn), norm_mlp=grow_norm(L.norm_mlp),
        )
        for L in params.layers
    ]
    if zero_variant:
        emb_ext = np.zeros((params.embedding.shape[0], (g_w - 1) * config.d_model), dtype)
    else:
        emb_ext = _random_block(rng, (params.embedding.shape[0], (g_w - 1) * config.d_model), dtype)
    grown = ParameterSet(
        embedding=np.concatenate([params.embedding, emb_ext], axis=1),
        layers=layers,
        final_norm=grow_norm(params.final_norm),
        head=np.concatenate(
            [params.head]
            + [_random_block(rng, params.head.shape, dtype) for _ in range(g_w - 1)],
            axis=1,
        ),
    )
    return grown, config.scaled(width_factor=g_w)


def grow_width_zero(params: ParameterSet, config: ModelConfig, g_w: int, seed: int):
    """Widen with zero fan-out for new coordinates; function preserving.

    New residual coordinates carry exact zeros through every block (zero
    embedding columns, zero rows on old inputs, RMSNorm gains on old
    coordinates scaled by sqrt(d/D) to cancel the widened mean square), so
    grown logits equal base logits.
    """
    if g_w < 1:
        raise InputError("width factor must be >= 1")
    return _grow_width_blocks(params, config, g_w, seed, zero_variant=True)


def grow_random_masked(params: ParameterSet, config: ModelConfig, plan: GrowthPlan):
    """Random new parameters behind multiplicative gates (one per grown region).

    With all gates at zero the grown model computes the base function; gates
    are ramped during continued training via mask_schedule.
    """
    g = plan.growth_factor
    if plan.direction == "width":
        grown, grown_config = _grow_width_blocks(params, config, g, plan.seed, zero_variant=False)
        masks = MaskSet(
            base_d_model=config.d_model,
            base_d_ffn=config.d_ffn,
            width_gates=np.zeros(g - 1),
            layer_gates={},
        )
        return grown, grown_config, masks
    # depth: fresh random blocks interleaved after their source layer, whole-block gated
    rng = np.random.default_rng(plan.seed)
    dtype = params.dtype
    d, f = config.d_model, config.d_ffn
    layers = []
    layer_gates = {}
    for base_layer in params.layers:
        layers.append(base_layer.copy())
        for _ in range(g - 1):
            layer_gates[len(layers)] = 0.0
            layers.append(
                LayerParams(
                    wq=_random_block(rng, (d, d), dtype), wk=_random_block(rng, (d, d), dtype),
                    wv=_random_block(rng, (d, d), dtype), wo=_random_block(rng, (d, d), dtype),
                    w_up=_random_block(rng, (f, d), dtype), w_gate=_random_block(rng, (f, d), dtype),
                    w_down=_random_block(rng, (d, f), dtype),
                    norm_attn=np.ones(d, dtype), norm_mlp=np.ones(d, dtype),
                )
            )
    grown = ParameterSet(params.embedding.copy(), layers, params.final_norm.copy(), params.head.copy())
    grown_config = ModelConfig(
        config.vocab_size, d, f, config.n_heads, config.head_dim, len(layers), config.max_seq_len
    )
    masks = MaskSet(base_d_model=d, base_d_ffn=f, width_gates=np.zeros(0), layer_gates=layer_gates)
    return grown, grown_config, masks


# ---------------------------------------------------------------------------
# learned mapping growth
# ---------------------------------------------------------------------------

_DEPTH_KEYS = ("q", "k", "v", "o", "ln1", "up", "down", "gate", "ln2")


@dataclass
class LearnMapping:
    """Linear maps from small-model tensors to large-model tensors.

    Width maps b_emb/b_q/b_k/b_v (D x d) and b_mlp (F x f) expand within a
    layer; depth maps (one L2 x L1 matrix per tensor kind) mix base layers
    into each grown layer.
    """

    b_emb: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_mlp: np.ndarray
    depth: dict  # key in _DEPTH_KEYS -> (L2, L1)

    def named_arrays(self):
        yield "b_emb", self.b_emb
        yield "b_q", self.b_q
        yield "b_k", self.b_k
        yield "b_v", self.b_v
        yield "b_mlp", self.b_mlp
        for k in _DEPTH_KEYS:
            yield f"depth.{k}", self.depth[k]


def make_warm_start_mapping(config_small: ModelConfig, config_large: ModelConfig, dtype=np.float32) -> LearnMapping:
    """Mapping whose reconstruction mirrors the direct operators.

    Depth maps are one-hot whole-stack repetition (reconstruction equals
    depthwise stacking exactly). Width maps are identity blocks tiled and
    scaled by 1/sqrt(g); an exact width warm start is impossible because
    b_emb is shared between the embedding expansion and every fan-in
    expansion, so the scaled duplication keeps activation magnitudes stable
    and reproduces the direct operator's norm-gain scaling.
    """
    if config_large.d_model % config_small.d_model or config_large.d_ffn % config_small.d_ffn:
        raise InputError("large width must be a multiple of small width")
    if config_large.n_layers % config_small.n_layers:
        raise InputError("large depth must be a multiple of small depth")
    gw = config_large.d_model // config_small.d_model
    gf = config_large.d_ffn // config_small.d_ffn
    l1, l2 = config_small.n_layers, config_large.n_layers

    def tiled_eye(n, g):
        m = np.tile(np.eye(n, dtype=dtype), (g, 1))
        if g > 1:
            m *= dtype(1.0) / dtype(math.sqrt(g))
        return m

    depth = {}
    for key in _DEPTH_KEYS:
        m = np.zeros((l2, l1), dtype=dtype)
        m[np.arange(l2), np.arange(l2) % l1] = 1.0
        depth[key] = m
    return LearnMapping(
        b_emb=tiled_eye(config_small.d_model, gw),
        b_q=tiled_eye(config_small.d_model, gw),
        b_k=tiled_eye(config_small.d_model, gw),
        b_v=tiled_eye(config_small.d_model, gw),
        b_mlp=tiled_eye(config_small.d_ffn, gf),
        depth=depth,
    )


def reconstruct_from_mapping(mapping: LearnMapping, params: ParameterSet,
                             config_small: ModelConfig, config_large: ModelConfig) -> ParameterSet:
    """Assemble the large model's tensors from the small model and the mapping."""
    be = mapping.b_emb
    width_mapped = {k: [] for k in _DEPTH_KEYS}
    for L in params.layers:
        width_mapped["q"].append(mapping.b_q @ L.wq @ be.T)
        width_mapped["k"].append(mapping.b_k @ L.wk @ be.T)
        width_mapped["v"].append(mapping.b_v @ L.wv @ be.T)
        width_mapped["o"].append(be @ L.wo @ mapping.b_v.T)
        width_mapped["up"].append(mapping.b_mlp @ L.w_up @ be.T)
        width_mapped["down"].append(be @ L.w_down @ mapping.b_mlp.T)
        width_mapped["gate"].append(mapping.b_mlp @ L.w_gate @ be.T)
        width_mapped["ln1"].append(be @ L.norm_attn)
        width_mapped["ln2"].append(be @ L.norm_mlp)
    stacked = {k: np.stack(v) for k, v in width_mapped.items()}
    mixed = {k: np.tensordot(mapping.depth[k], stacked[k], axes=(1, 0)) for k in _DEPTH_KEYS}
    layers = [
        LayerParams(
            wq=mixed["q"][l], wk=mixed["k"][l], wv=mixed["v"][l], wo=mixed["o"][l],
            w_up=mixed["up"][l], w_gate=mixed["gate"][l], w_down=mixed["down"][l],
            norm_attn=mixed["ln1"][l], norm_mlp=mixed["ln2"][l],
        )
        for l in range(config_large.n_layers)
    ]
    return ParameterSet(
        embedding=params.embedding @ be.T,
        layers=layers,
        final_norm=be @ params.final_norm,
        head=params.head @ be.T,
    )


def _mapping_grads(mapping: LearnMapping, params: ParameterSet, grads: ParameterSet,
                   config_small: ModelConfig) -> dict:
    """Chain large-model tensor gradients back onto the mapping arrays."""
    be = mapping.b_emb
    out = {name: np.zeros_like(arr) for name, arr in mapping.named_arrays()}

    out["b_emb"] += grads.embedding.T @ params.embedding
    out["b_emb"] += grads.head.T @ params.head
    out["b_emb"] += np.outer(grads.final_norm, params.final_norm)

    small = params.layers
    l1 = config_small.n_layers
    for l, GL in enumerate(grads.layers):
        for j in range(l1):
            Lj = small[j]
            # attention: W' = D * (B_x W B_emb^T) for q/k/v, W' = D * (B_emb W B_v^T) for o
            for key, bname, w in (("q", "b_q", Lj.wq), ("k", "b_k", Lj.wk), ("v", "b_v", Lj.wv)):
                b = getattr(mapping, bname)
                G = getattr(GL, {"q": "wq", "k": "wk", "v": "wv"}[key])
                d_lj = mapping.depth[key][l, j]
                out[f"depth.{key}"][l, j] += float(np.tensordot(G, b @ w @ be.T, axes=2))
                out[bname] += d_lj * (G @ be @ w.T)
                out["b_emb"] += d_lj * (G.T @ b @ w)
            d_lj = mapping.depth["o"][l, j]
            out["depth.o"][l, j] += float(np.tensordot(GL.wo, be @ Lj.wo @ mapping.b_v.T, axes=2))
            out["b_emb"] += d_lj * (GL.wo @ mapping.b_v @ Lj.wo.T)
            out["b_v"] += d_lj * (GL.wo.T @ be @ Lj.wo)
            # mlp
            d_lj = mapping.depth["up"][l, j]
            out["depth.up"][l, j] += float(np.tensordot(GL.w_up, mapping.b_mlp @ Lj.w_up @ be.T, axes=2))
            out["b_mlp"] += d_lj * (GL.w_up @ be @ Lj.w_up.T)
            out["b_emb"] += d_lj * (GL.w_up.T @ mapping.b_mlp @ Lj.w_up)
            d_lj = mapping.depth["gate"][l, j]
            out["depth.gate"][l, j] += float(np.tensordot(GL.w_gate, mapping.b_mlp @ Lj.w_gate @ be.T, axes=2))
            out["b_mlp"] += d_lj * (GL.w_gate @ be @ Lj.w_gate.T)
            out["b_emb"] += d_lj * (GL.w_gate.T @ mapping.b_mlp @ Lj.w_gate)
            d_lj = mapping.depth["down"][l, j]
            out["depth.down"][l, j] += float(np.tensordot(GL.w_down, be @ Lj.w_down @ mapping.b_mlp.T, axes=2))
            out["b_emb"] += d_lj * (GL.w_down @ mapping.b_mlp @ Lj.w_down.T)
            out["b_mlp"] += d_lj * (GL.w_down.T @ be @ Lj.w_down)
            # norms
            d_lj = mapping.depth["ln1"][l, j]
            out["depth.ln1"][l, j] += float(GL.norm_attn @ (be @ Lj.norm_attn))
            out["b_emb"] += d_lj * np.outer(GL.norm_attn, Lj.norm_attn)
            d_lj = mapping.depth["ln2"][l, j]
            out["depth.ln2"][l, j] += float(GL.norm_mlp @ (be @ Lj.norm_mlp))
            out["b_emb"] += d_lj * np.outer(GL.norm_mlp, Lj.norm_mlp)
    return out


def grow_learn(params_small: ParameterSet, config_small: ModelConfig, config_large: ModelConfig,
               corpus, meta_steps: int, meta_lr: float, seed: int,
               batch_windows: int = 4, seq_len: Optional[int] = None,
               loss_trace: Optional[list] = None) -> ParameterSet:
    """Fit the tensor mapping by gradient descent on the large model's LM loss.

    Starts from the warm-start mapping (meta_steps=0 returns its
    reconstruction unchanged) and takes plain gradient steps on the mapping
    arrays; per-batch losses are appended to ``loss_trace`` when given.
    """
    mapping = make_warm_start_mapping(config_small, config_large, dtype=params_small.dtype)
    if meta_steps > 0:
        if seq_len is None:
            seq_len = min(64, config_large.max_seq_len)
        batches = corpus.window_batches(seq_len, batch_windows, seed)
        for _ in range(meta_steps):
            window = next(batches)
            tokens, targets = window[:, :-1], window[:, 1:]
            large = reconstruct_from_mapping(mapping, params_small, config_small, config_large)
            loss, grads = loss_and_grads_batch(large, config_large, tokens, targets)
            if loss_trace is not None:
                loss_trace.append(loss)
            mgrads = _mapping_grads(mapping, params_small, grads, config_small)
            for name, arr in mapping.named_arrays():
                arr -= arr.dtype.type(meta_lr) * mgrads[name].astype(arr.dtype)
    return reconstruct_from_mapping(mapping, params_small, config_small, config_large)


# ---------------------------------------------------------------------------
# noise and gradual schedules
# ---------------------------------------------------------------------------


def inject_noise(params: ParameterSet, config: ModelConfig, alpha: float, seed: int) -> ParameterSet:
    """Blend every weight matrix with seeded gaussian noise: (1-a)*W + a*eps.

    Output projections (attention out, SwiGLU down) use variance
    1/(d_model*n_layers^2); the embedding and all other linear layers use
    2/(5*d_model). Norm gains are left untouched.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"noise ratio must be in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    d, l = config.d_model, config.n_layers
    std_out = math.sqrt(1.0 / (d * l * l))
    std_other = math.sqrt(2.0 / (5.0 * d))
    out = params.copy()
    a = params.dtype.type(alpha)
    one_minus = params.dtype.type(1.0 - alpha)
    for name, tensor in out.named_tensors():
        if tensor.ndim == 1:
            continue  # RMSNorm gains keep their values
        std = std_out if name.endswith(("wo", "w_down")) else std_other
        eps = rng.normal(0.0, std, size=tensor.shape).astype(tensor.dtype)
        tensor[...] = one_minus * tensor + a * eps
    return out


def gradual_plan(base_layers: int, target_layers: int, tokens_per_stage: int) -> list:
    """Stages of (train tokens, stack factor 2) reaching target depth by doubling."""
    if base_layers < 1 or target_layers < base_layers:
        raise InputError("target depth must be at least the base depth")
    if target_layers % base_layers:
        raise InputError(f"depth ratio {target_layers / base_layers} is not a power of two")
    k = 0
    r = target_layers // base_layers
    while r > 1:
        if r % 2:
            raise InputError(f"depth ratio {target_layers // base_layers} is not a power of two")
        r //= 2
        k += 1
    if k < 1:
        raise InputError("gradual growth needs at least one doubling")
    return [(tokens_per_stage, 2)] * k


# ---------------------------------------------------------------------------
# plan dispatch
# ---------------------------------------------------------------------------


@dataclass
class GrowthResult:
    params: ParameterSet
    config: ModelConfig
    origin_map: Optional[tuple] = None
    masks: Optional[MaskSet] = None


def apply_plan(params: ParameterSet, config: ModelConfig, plan: GrowthPlan,
               corpus=None, meta_steps: int = 0, meta_lr: float = 1e-2) -> GrowthResult:
    """Run one growth plan; noise_ratio > 0 blends noise in afterwards."""
    op, direction, g = plan.operator, plan.direction, plan.growth_factor
    origin = None
    masks = None
    if op == "direct" and direction == "depth":
        if plan.stack_pattern:
            origin = parse_stack_pattern(plan.stack_pattern, config.n_layers)
            grown, grown_config = stack_by_pattern(params, config, origin)
        else:
            grown, grown_config, origin = grow_depth_stack(params, config, g)
    elif op == "direct" and direction == "width":
        grown, grown_config = grow_width_direct(params, config, g, plan.seed)
    elif op == "zero" and direction == "depth":
        grown, grown_config = grow_depth_zero(params, config, g)
        origin = interleaved_origin(config.n_layers, g)
    elif op == "zero" and direction == "width":
        grown, grown_config = grow_width_zero(params, config, g, plan.seed)
    elif op == "random":
        grown, grown_config, masks = grow_random_masked(params, config, plan)
        if direction == "depth":
            origin = interleaved_origin(config.n_layers, g)
    elif op == "learn":
        if direction == "width":
            config_large = config.scaled(width_factor=g)
        else:
            config_large = config.scaled(depth_factor=g)
        if corpus is None and meta_steps > 0:
            raise InputError("learned growth with meta_steps > 0 needs a corpus")
        grown = grow_learn(params, config, config_large, corpus, meta_steps, meta_lr, plan.seed)
        grown_config = config_large
        if direction == "depth":
            origin = tuple(range(1, config.n_layers + 1)) * g
    else:  # pragma: no cover - guarded by GrowthPlan validation
        raise InputError(f"unsupported plan {op}/{direction}")
    if plan.noise_ratio > 0.0:
        grown = inject_noise(grown, grown_config, plan.noise_ratio, plan.seed + 1)
    return GrowthResult(grown, grown_config, origin, masks)
