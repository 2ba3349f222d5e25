"""Desk-scale pre-training: corpus ingestion, AdamW loop, FLOPs ledger,
loss-curve emission, and grow-then-continue orchestration.

Cost model: one training token costs 6*N floating point operations, with N
the non-embedding parameter count. A grown run's ledger continues from the
base run's cost, so its curve starts where the small model's budget ended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import CorpusReadError, InputError, TrainingDiverged
from .growth import GrowthPlan, MaskSet, apply_plan, gradual_plan, grow_depth_stack
from .model import (
    KernelAttention,
    ModelConfig,
    ParameterSet,
    init_params,
    loss_and_grads_batch,
    _zero_grads_like,
)

FLOPS_PER_PARAM_TOKEN = 6.0


@dataclass(frozen=True)
class TrainConfig:
    tokens_per_batch: int = 16384
    seq_len: int = 256
    max_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 100
    total_tokens: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 2:
            raise InputError("seq_len must be at least 2 (windows are split into input/target)")
        if self.tokens_per_batch < self.seq_len or self.tokens_per_batch % self.seq_len:
            raise InputError("tokens_per_batch must be a positive multiple of seq_len")
        if self.min_lr > self.max_lr:
            raise InputError("min_lr must not exceed max_lr")
        if self.max_lr <= 0:
            raise InputError("max_lr must be positive")
        if self.warmup_steps < 1:
            raise InputError("warmup_steps must be >= 1")
        if self.total_tokens < 0:
            raise InputError("total_tokens must be non-negative")

    @property
    def batch_windows(self) -> int:
        return self.tokens_per_batch // self.seq_len

    @property
    def total_steps(self) -> int:
        return self.total_tokens // self.tokens_per_batch


@dataclass
class LossSample:
    step: int
    tokens: int
    flops: float
    loss: float
    lr: float


@dataclass
class LossCurve:
    samples: list = field(default_factory=list)

    def append(self, step, tokens, flops, loss, lr):
        if self.samples:
            last = self.samples[-1]
            if step <= last.step or tokens < last.tokens or flops < last.flops:
                raise InputError("loss-curve axes must be increasing")
        self.samples.append(LossSample(int(step), int(tokens), float(flops), float(loss), float(lr)))

    def __len__(self):
        return len(self.samples)

    @property
    def steps(self):
        return np.array([s.step for s in self.samples], dtype=np.int64)

    @property
    def tokens(self):
        return np.array([s.tokens for s in self.samples], dtype=np.int64)

    @property
    def flops(self):
        return np.array([s.flops for s in self.samples], dtype=np.float64)

    @property
    def losses(self):
        return np.array([s.loss for s in self.samples], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("step,tokens,flops,loss,lr\n")
            for s in self.samples:
                fh.write(f"{s.step},{s.tokens},{s.flops!r},{s.loss!r},{s.lr!r}\n")

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, "r", encoding="ascii") as fh:
            header = fh.readline().strip()
            if header != "step,tokens,flops,loss,lr":
                raise InputError(f"unexpected loss-curve header {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                step, tokens, flops, loss, lr = line.split(",")
                curve.append(int(step), int(tokens), float(flops), float(loss), float(lr))
        return curve


# ---------------------------------------------------------------------------
# cost model and schedule
# ---------------------------------------------------------------------------


def nonembed_params(config: ModelConfig) -> int:
    """Parameters excluding the token embedding and output head."""
    d, f = config.d_model, config.d_ffn
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return config.n_layers * per_layer + d


def flops(n_params: int, tokens) -> float:
    """Training cost: 6 * N * tokens."""
    return FLOPS_PER_PARAM_TOKEN * n_params * tokens


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to max_lr, then cosine decay to min_lr at the final step."""
    total = config.total_steps
    warm = config.warmup_steps
    if step <= warm:
        return config.max_lr * step / warm
    decay_steps = max(total - warm, 1)
    t = min((step - warm) / decay_steps, 1.0)
    return config.min_lr + 0.5 * (config.max_lr - config.min_lr) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


BYTE_VOCAB = 256


@dataclass
class TokenStream:
    """Byte-level token stream (vocab 256) with seeded epoch shuffling."""

    tokens: np.ndarray

    def __len__(self):
        return int(self.tokens.shape[0])

    def num_windows(self, seq_len: int) -> int:
        if seq_len < 1:
            raise InputError("seq_len must be positive")
        return len(self) // seq_len

    def window_batches(self, seq_len: int, batch_windows: int, seed: int):
        """Infinite iterator of (batch_windows, seq_len) int batches.

        Windows are consecutive non-overlapping chunks; their order is
        reshuffled each epoch with a seed derived from (seed, epoch). Ragged
        tail batches are dropped.
        """
        n = self.num_windows(seq_len)
        if n == 0:
            raise InputError(f"corpus shorter than one {seq_len}-token window")
        if n < batch_windows:
            raise InputError(
                f"corpus has {n} windows of {seq_len} tokens; need at least {batch_windows}"
            )
        tokens = self.tokens
        epoch = 0
        while True:
            rng = np.random.default_rng([seed, epoch])
            perm = rng.permutation(n)
            for start in range(0, n - batch_windows + 1, batch_windows):
                idx = perm[start : start + batch_windows]
                batch = np.empty((batch_windows, seq_len), dtype=np.int64)
                for row, w in enumerate(idx):
                    batch[row] = tokens[w * seq_len : (w + 1) * seq_len]
                yield batch
            epoch += 1


def load_corpus(path) -> TokenStream:
    """Byte-level tokenization of any file: one token per byte."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorpusReadError(f"cannot read corpus {path}: {exc}") from exc
    return TokenStream(np.frombuffer(data, dtype=np.uint8))


def make_synthetic_corpus(path, n_bytes: int, seed: int = 0) -> None:
    """Write a deterministic word-like byte corpus with learnable structure.

    Words are random lowercase strings with Zipf-ish frequencies chained by
    a sparse successor table; sentences get capitalization and punctuation.
    Gives a byte-level LM plenty of sub-word and word-order structure.
    """
    rng = np.random.default_rng(seed)
    n_words = 512
    letters = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    words = []
    for _ in range(n_words):
        length = int(rng.integers(2, 9))
        words.append(bytes(letters[rng.integers(0, 26, size=length)]))
    n_succ = 8
    successors = rng.integers(0, n_words, size=(n_words, n_succ))
    zipf = 1.0 / np.arange(1, n_words + 1)
    zipf /= zipf.sum()

    approx_words = max(n_bytes // 5, 16)
    pick = rng.integers(0, n_succ, size=approx_words)
    jump = rng.random(approx_words) < 0.15
    jump_word = rng.choice(n_words, size=approx_words, p=zipf)
    sent_len = rng.integers(4, 15, size=approx_words // 4 + 2)

    out = bytearray()
    state = int(jump_word[0])
    sent_i = 0
    words_in_sent = 0
    target = int(sent_len[0])
    i = 0
    while len(out) < n_bytes:
        w = words[state]
        if words_in_sent == 0:
            w = w[:1].upper() + w[1:]
        out += w
        words_in_sent += 1
        if words_in_sent >= target:
            out += b". " if sent_i % 8 else b".\n"
            sent_i += 1
            words_in_sent = 0
            target = int(sent_len[sent_i % len(sent_len)])
        else:
            out += b" "
        if jump[i % approx_words]:
            state = int(jump_word[i % approx_words])
        else:
            state = int(successors[state, pick[i % approx_words]])
        i += 1
    with open(path, "wb") as fh:
        fh.write(bytes(out[:n_bytes]))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam; decay applies to matrices, not gains."""

    def __init__(self, params: ParameterSet, config: TrainConfig):
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.weight_decay = config.weight_decay
        self.grad_clip = config.grad_clip
        self.eps = 1e-8
        self.t = 0
        self.m = _zero_grads_like(params)
        self.v = _zero_grads_like(params)

    def step(self, params: ParameterSet, grads: ParameterSet, lr: float) -> None:
        if self.grad_clip > 0:
            sq = 0.0
            for _, g in grads.named_tensors():
                flat = g.ravel()
                sq += float(np.dot(flat, flat))
            gnorm = math.sqrt(sq)
            if gnorm > self.grad_clip:
                scale = np.float32(self.grad_clip / gnorm)
                for _, g in grads.named_tensors():
                    g *= scale
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        ms = dict(self.m.named_tensors())
        vs = dict(self.v.named_tensors())
        for (name, p), (_, g) in zip(params.named_tensors(), grads.named_tensors()):
            m = ms[name]
            v = vs[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay > 0 and p.ndim == 2:
                update = update + self.weight_decay * p
            p -= p.dtype.type(lr) * update


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParameterSet
    curve: LossCurve
    checkpoints: dict = field(default_factory=dict)


def train(
    params: ParameterSet,
    model_config: ModelConfig,
    config: TrainConfig,
    corpus: TokenStream,
    emit_every: int = 50,
    masks: Optional[MaskSet] = None,
    flops_offset: float = 0.0,
    tokens_offset: int = 0,
    step_offset: int = 0,
    curve: Optional[LossCurve] = None,
    data_seed: Optional[int] = None,
    snapshot_steps=(),
    fast: bool = True,
) -> TrainResult:
    """Run config.total_tokens of AdamW pre-training; emits one curve sample
    per emit interval (plus the first and last step). The input ParameterSet
    is not mutated.

    Raises TrainingDiverged (carrying the last emitted-good parameters) if
    the loss stops being finite.
    """
    if config.seq_len > model_config.max_seq_len:
        raise InputError("train seq_len exceeds the model's max_seq_len")
    params = params.copy()
    curve = curve if curve is not None else LossCurve()
    total_steps = config.total_steps
    if total_steps == 0:
        return TrainResult(params, curve)

    if masks is not None and masks.horizon == 0:
        masks.horizon = config.warmup_steps

    n_nonembed = nonembed_params(model_config)
    optimizer = AdamW(params, config)
    batches = corpus.window_batches(
        config.seq_len, config.batch_windows, config.seed if data_seed is None else data_seed
    )
    attention = None
    if fast and params.dtype == np.float32:
        from .kernels import BufferPool

        attention = KernelAttention(BufferPool())
    grads_buf = _zero_grads_like(params)
    checkpoints = {}
    last_good = params.copy()

    for step in range(1, total_steps + 1):
        window = next(batches)
        tokens, targets = window[:, :-1], window[:, 1:]
        loss, grads = loss_and_grads_batch(
            params, model_config, tokens, targets, masks=masks,
            attention=attention, grads_out=grads_buf,
        )
        if not math.isfinite(loss):
            raise TrainingDiverged(step + step_offset, last_good, curve)
        lr = lr_at(step, config)
        optimizer.step(params, grads, lr)
        if masks is not None:
            masks.advance(step)
        if step == 1 or step == total_steps or step % emit_every == 0:
            curve.append(
                step + step_offset,
                tokens_offset + step * config.tokens_per_batch,
                flops_offset + flops(n_nonembed, step * config.tokens_per_batch),
                loss,
                lr,
            )
            last_good = params.copy()
        if step in snapshot_steps:
            checkpoints[step + step_offset] = params.copy()

    return TrainResult(params, curve, checkpoints)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    base_curve: LossCurve
    grown_curve: LossCurve
    scratch_curve: LossCurve
    base_params: ParameterSet
    grown_params: ParameterSet
    scratch_params: ParameterSet
    base_config: ModelConfig
    grown_config: ModelConfig
    origin_map: Optional[tuple]
    masks: Optional[MaskSet]
    combined_flops: float


def _tokens_floor(tokens: int, config: TrainConfig) -> int:
    return (tokens // config.tokens_per_batch) * config.tokens_per_batch


def run_growth_experiment(
    base_config: ModelConfig,
    plan: GrowthPlan,
    d_tokens: int,
    big_tokens: int,
    config: TrainConfig,
    corpus: TokenStream,
    emit_every: int = 50,
    meta_steps: int = 0,
    meta_lr: float = 1e-2,
) -> ExperimentResult:
    """Train a base model on d_tokens, grow it, continue for big_tokens, and
    train a scratch target model matched on combined FLOPs.

    The grown curve's cost axis includes the base model's training cost.
    """
    base_params = init_params(base_config, config.seed)
    base_cfg = replace(config, total_tokens=_tokens_floor(d_tokens, config))
    base_res = train(base_params, base_config, base_cfg, corpus, emit_every=emit_every)
    base_cost = flops(nonembed_params(base_config), base_cfg.total_tokens)

    growth = apply_plan(base_res.params, base_config, plan, corpus=corpus,
                        meta_steps=meta_steps, meta_lr=meta_lr)
    grown_cfg = replace(config, total_tokens=_tokens_floor(big_tokens, config))
    grown_res = train(
        growth.params, growth.config, grown_cfg, corpus, emit_every=emit_every,
        masks=growth.masks, flops_offset=base_cost, tokens_offset=base_cfg.total_tokens,
        data_seed=config.seed + 1,
    )

    n_target = nonembed_params(growth.config)
    combined = base_cost + flops(n_target, grown_cfg.total_tokens)
    scratch_tokens = _tokens_floor(int(combined / (FLOPS_PER_PARAM_TOKEN * n_target)), config)
    scratch_cfg = replace(config, total_tokens=scratch_tokens)
    scratch_params = init_params(growth.config, config.seed)
    scratch_res = train(scratch_params, growth.config, scratch_cfg, corpus, emit_every=emit_every)

    return ExperimentResult(
        base_curve=base_res.curve,
        grown_curve=grown_res.curve,
        scratch_curve=scratch_res.curve,
        base_params=base_res.params,
        grown_params=grown_res.params,
        scratch_params=scratch_res.params,
        base_config=base_config,
        grown_config=growth.config,
        origin_map=growth.origin_map,
        masks=growth.masks,
        combined_flops=base_cost + flops(n_target, grown_cfg.total_tokens),
    )


@dataclass
class GradualResult:
    grown_curve: LossCurve
    scratch_curve: LossCurve
    final_params: ParameterSet
    scratch_params: ParameterSet
    final_config: ModelConfig
    stage_boundaries: list
    combined_flops: float


def run_gradual_experiment(
    base_config: ModelConfig,
    target_layers: int,
    tokens_per_stage: int,
    final_tokens: int,
    config: TrainConfig,
    corpus: TokenStream,
    emit_every: int = 50,
) -> GradualResult:
    """Alternate training and depth doubling until target depth, then train
    the target for final_tokens; scratch run matched on the combined cost."""
    stages = gradual_plan(base_config.n_layers, target_layers, tokens_per_stage)
    params = init_params(base_config, config.seed)
    model_cfg = base_config
    curve = LossCurve()
    cost = 0.0
    tokens_seen = 0
    step_offset = 0
    boundaries = []
    for i, (stage_tokens, factor) in enumerate(stages):
        stage_cfg = replace(config, total_tokens=_tokens_floor(stage_tokens, config))
        res = train(
            params, model_cfg, stage_cfg, corpus, emit_every=emit_every,
            flops_offset=cost, tokens_offset=tokens_seen, step_offset=step_offset,
            curve=curve, data_seed=config.seed + i,
        )
        params = res.params
        cost += flops(nonembed_params(model_cfg), stage_cfg.total_tokens)
        tokens_seen += stage_cfg.total_tokens
        step_offset += stage_cfg.total_steps
        params, model_cfg, _ = grow_depth_stack(params, model_cfg, factor)
        boundaries.append(step_offset)
    final_cfg = replace(config, total_tokens=_tokens_floor(final_tokens, config))
    res = train(
        params, model_cfg, final_cfg, corpus, emit_every=emit_every,
        flops_offset=cost, tokens_offset=tokens_seen, step_offset=step_offset,
        curve=curve, data_seed=config.seed + len(stages),
    )
    n_target = nonembed_params(model_cfg)
    combined = cost + flops(n_target, final_cfg.total_tokens)
    scratch_tokens = _tokens_floor(int(combined / (FLOPS_PER_PARAM_TOKEN * n_target)), config)
    scratch_res = train(
        init_params(model_cfg, config.seed), model_cfg,
        replace(config, total_tokens=scratch_tokens), corpus, emit_every=emit_every,
    )
    return GradualResult(
        grown_curve=curve,
        scratch_curve=scratch_res.curve,
        final_params=res.params,
        scratch_params=scratch_res.params,
        final_config=model_cfg,
        stage_boundaries=boundaries,
        combined_flops=combined,
    )
