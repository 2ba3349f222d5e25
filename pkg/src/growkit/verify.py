"""Function-preservation and gradient verification harness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError, SizeRefusalError
from .model import ModelConfig, ParameterSet, _forward_batch, backward, forward, lm_loss

GRAD_CHECK_MAX_PARAMS = 100_000


@dataclass
class FpReport:
    """Deviation summary between a base model and a grown model."""

    operator: str
    n_batches: int
    max_deviation: float
    mean_deviation: float
    tolerance: float

    @property
    def verdict(self) -> str:
        return "preserving" if self.max_deviation <= self.tolerance else "non-preserving"

    def to_record(self) -> str:
        return (
            f"operator={self.operator} n_batches={self.n_batches} "
            f"max_dev={self.max_deviation:.6e} mean_dev={self.mean_deviation:.6e} "
            f"tolerance={self.tolerance:.1e} verdict={self.verdict}"
        )


def _position_deviations(base_logits, grown_logits):
    # per-position logits are a vocab vector; deviation is the max-abs
    # difference scaled by the position's own logit magnitude (scale-free,
    # robust to individual logits crossing zero)
    diff = np.abs(grown_logits.astype(np.float64) - base_logits.astype(np.float64)).max(axis=-1)
    scale = np.abs(base_logits.astype(np.float64)).max(axis=-1)
    return diff / (scale + 1e-8)


def fp_deviation(
    base_params: ParameterSet,
    base_config: ModelConfig,
    grown_params: ParameterSet,
    grown_config: ModelConfig,
    n_batches: int,
    seed: int,
    grown_masks=None,
    tolerance: float = 1e-4,
    operator: str = "unknown",
    batch_windows: int = 4,
) -> FpReport:
    """Compare logits of two models on seeded random token batches.

    Sequence length is the smaller of the two context limits; deviation is
    the per-position relative difference (see _position_deviations).
    """
    if base_config.vocab_size != grown_config.vocab_size:
        raise InputError(
            f"vocab mismatch: {base_config.vocab_size} vs {grown_config.vocab_size}"
        )
    if n_batches < 1:
        raise InputError("n_batches must be >= 1")
    rng = np.random.default_rng(seed)
    seq_len = min(base_config.max_seq_len, grown_config.max_seq_len)
    devs = []
    for _ in range(n_batches):
        tokens = rng.integers(0, base_config.vocab_size, size=(batch_windows, seq_len))
        base_logits = _forward_batch(base_params, base_config, tokens)
        grown_logits = _forward_batch(grown_params, grown_config, tokens, masks=grown_masks)
        devs.append(_position_deviations(base_logits, grown_logits))
    all_devs = np.concatenate([d.ravel() for d in devs])
    return FpReport(
        operator=operator,
        n_batches=n_batches,
        max_deviation=float(all_devs.max()),
        mean_deviation=float(all_devs.mean()),
        tolerance=tolerance,
    )


def grad_check(params: ParameterSet, config: ModelConfig, batch, epsilon: float) -> float:
    """Max relative error between backward() and central differences.

    Every parameter entry is perturbed by +/- epsilon (two forwards each),
    so this refuses models above GRAD_CHECK_MAX_PARAMS parameters. All
    arithmetic runs in float64. The relative-error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0.0:
        raise InputError("epsilon must be positive")
    n = params.n_params()
    if n > GRAD_CHECK_MAX_PARAMS:
        raise SizeRefusalError(
            f"model has {n} parameters; grad_check runs 2 forwards per parameter "
            f"and refuses above {GRAD_CHECK_MAX_PARAMS}"
        )
    tokens, targets = batch
    work = params.astype(np.float64)
    _, grads = backward(work, config, tokens, targets)
    analytic = dict(grads.named_tensors())

    worst = 0.0
    for name, tensor in work.named_tensors():
        flat = tensor.ravel()
        ana = analytic[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            lp = lm_loss(forward(work, config, tokens), targets)
            flat[idx] = orig - epsilon
            lm = lm_loss(forward(work, config, tokens), targets)
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(ana[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana[idx] - numeric) / denom)
    return worst
