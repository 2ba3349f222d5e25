"""Experiment description files: flat key=value text with [section] headers.

Sections:
    [experiment]  mode (scratch|growth|gradual), corpus, output_dir,
                  seed, emit_every
    [model]       the seven architecture integers (base model for growth
                  modes, the trained model for scratch mode)
    [train]       optimizer and schedule settings; total_tokens is used by
                  scratch mode only
    [growth]      operator, direction, growth_factor, pattern, noise_ratio,
                  seed, meta_steps, meta_lr (growth mode)
    [budget]      d_tokens and big_tokens (growth mode); target_layers,
                  tokens_per_stage, final_tokens (gradual mode)

Lines starting with '#' are comments. The GROWKIT_SEED environment variable
overrides every seed in the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Optional

from .errors import InputError
from .growth import GrowthPlan
from .model import ModelConfig
from .trainer import TrainConfig

MODES = ("scratch", "growth", "gradual")


@dataclass
class ExperimentSpec:
    mode: str
    corpus_path: str
    output_dir: str
    emit_every: int
    model: ModelConfig
    train: TrainConfig
    plan: Optional[GrowthPlan] = None
    d_tokens: int = 0
    big_tokens: int = 0
    meta_steps: int = 0
    meta_lr: float = 1e-2
    target_layers: int = 0
    tokens_per_stage: int = 0
    final_tokens: int = 0


def parse_sections(text: str) -> dict:
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if current is None or "=" not in line:
            raise InputError(f"line {lineno}: expected key=value inside a [section]: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        sections[current][key] = value
    return sections


def _get(section: dict, key: str, cast, default=None, where: str = ""):
    if key not in section:
        if default is not None:
            return default
        raise InputError(f"missing {where}{key}")
    try:
        return cast(section[key])
    except ValueError as exc:
        raise InputError(f"bad value for {where}{key}: {section[key]!r}") from exc


def _int_tokens(value: str) -> int:
    # accept plain ints or scientific notation like 2e7
    return int(float(value))


def load_experiment_spec(path) -> ExperimentSpec:
    with open(path, "r", encoding="utf-8") as fh:
        sections = parse_sections(fh.read())
    for required in ("experiment", "model", "train"):
        if required not in sections:
            raise InputError(f"spec is missing the [{required}] section")
    exp = sections["experiment"]
    mode = _get(exp, "mode", str, where="[experiment] ")
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    corpus = _get(exp, "corpus", str, where="[experiment] ")
    output_dir = _get(exp, "output_dir", str, where="[experiment] ")
    emit_every = _get(exp, "emit_every", int, default=50, where="[experiment] ")
    seed = _get(exp, "seed", int, default=0, where="[experiment] ")

    m = sections["model"]
    model = ModelConfig(**{
        k: _get(m, k, int, where="[model] ")
        for k in ("vocab_size", "d_model", "d_ffn", "n_heads", "head_dim", "n_layers", "max_seq_len")
    })

    t = sections["train"]
    train = TrainConfig(
        tokens_per_batch=_get(t, "tokens_per_batch", int, default=16384),
        seq_len=_get(t, "seq_len", int, default=256),
        max_lr=_get(t, "max_lr", float, default=1e-3),
        min_lr=_get(t, "min_lr", float, default=1e-4),
        warmup_steps=_get(t, "warmup_steps", int, default=100),
        total_tokens=_get(t, "total_tokens", _int_tokens, default=0),
        beta1=_get(t, "beta1", float, default=0.9),
        beta2=_get(t, "beta2", float, default=0.95),
        weight_decay=_get(t, "weight_decay", float, default=0.1),
        grad_clip=_get(t, "grad_clip", float, default=1.0),
        seed=seed,
    )

    spec = ExperimentSpec(
        mode=mode, corpus_path=corpus, output_dir=output_dir,
        emit_every=emit_every, model=model, train=train,
    )

    if mode == "growth":
        g = sections.get("growth")
        if g is None:
            raise InputError("growth mode needs a [growth] section")
        pattern = g.get("pattern") or None
        spec.plan = GrowthPlan(
            operator=_get(g, "operator", str, where="[growth] "),
            direction=_get(g, "direction", str, default="depth"),
            growth_factor=_get(g, "growth_factor", int, default=1),
            stack_pattern=pattern,
            noise_ratio=_get(g, "noise_ratio", float, default=0.0),
            seed=_get(g, "seed", int, default=seed),
        )
        spec.meta_steps = _get(g, "meta_steps", int, default=0)
        spec.meta_lr = _get(g, "meta_lr", float, default=1e-2)
        b = sections.get("budget")
        if b is None:
            raise InputError("growth mode needs a [budget] section")
        spec.d_tokens = _get(b, "d_tokens", _int_tokens, where="[budget] ")
        spec.big_tokens = _get(b, "big_tokens", _int_tokens, where="[budget] ")
        if spec.d_tokens <= 0 or spec.big_tokens <= 0:
            raise InputError("growth budgets must be positive")
    elif mode == "gradual":
        b = sections.get("budget")
        if b is None:
            raise InputError("gradual mode needs a [budget] section")
        spec.target_layers = _get(b, "target_layers", int, where="[budget] ")
        spec.tokens_per_stage = _get(b, "tokens_per_stage", _int_tokens, where="[budget] ")
        spec.final_tokens = _get(b, "final_tokens", _int_tokens, where="[budget] ")
        if spec.tokens_per_stage <= 0 or spec.final_tokens <= 0:
            raise InputError("gradual budgets must be positive")

    env_seed = os.environ.get("GROWKIT_SEED")
    if env_seed is not None:
        try:
            forced = int(env_seed)
        except ValueError as exc:
            raise InputError(f"GROWKIT_SEED must be an integer, got {env_seed!r}") from exc
        spec.train = replace(spec.train, seed=forced)
        if spec.plan is not None:
            spec.plan = GrowthPlan(
                operator=spec.plan.operator, direction=spec.plan.direction,
                growth_factor=spec.plan.growth_factor, stack_pattern=spec.plan.stack_pattern,
                noise_ratio=spec.plan.noise_ratio, seed=forced,
            )

    if not os.path.exists(spec.corpus_path):
        raise InputError(f"corpus file does not exist: {spec.corpus_path}")
    return spec
