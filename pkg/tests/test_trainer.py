import math

import numpy as np
import pytest

from growkit.errors import CorpusReadError, InputError, TrainingDiverged
from growkit.growth import GrowthPlan
from growkit.model import ModelConfig, init_params
from growkit.trainer import (
    LossCurve,
    TokenStream,
    TrainConfig,
    flops,
    load_corpus,
    lr_at,
    make_synthetic_corpus,
    nonembed_params,
    run_gradual_experiment,
    run_growth_experiment,
    train,
)

MODEL = ModelConfig(vocab_size=256, d_model=16, d_ffn=32, n_heads=2, head_dim=8, n_layers=2, max_seq_len=64)

TRAIN = TrainConfig(
    tokens_per_batch=512, seq_len=64, max_lr=3e-3, min_lr=3e-4,
    warmup_steps=10, total_tokens=0, seed=0,
)


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.bin"
    make_synthetic_corpus(path, 300_000, seed=0)
    return path


@pytest.fixture(scope="session")
def corpus(corpus_path):
    return load_corpus(corpus_path)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def test_nonembed_params_hand_count():
    cfg = ModelConfig(vocab_size=2, d_model=8, d_ffn=16, n_heads=2, head_dim=4, n_layers=1, max_seq_len=4)
    assert nonembed_params(cfg) == 664  # 256 + 384 + 16 per layer, + 8 final norm


def test_nonembed_params_layer_linearity():
    cfg1 = ModelConfig(vocab_size=2, d_model=8, d_ffn=16, n_heads=2, head_dim=4, n_layers=3, max_seq_len=4)
    cfg2 = ModelConfig(vocab_size=2, d_model=8, d_ffn=16, n_heads=2, head_dim=4, n_layers=6, max_seq_len=4)
    d = cfg1.d_model
    assert nonembed_params(cfg2) - d == 2 * (nonembed_params(cfg1) - d)
    # at zero layers only the final norm would remain
    per_layer = (nonembed_params(cfg2) - nonembed_params(cfg1)) // 3
    assert nonembed_params(cfg1) - 3 * per_layer == d


def test_flops_values():
    assert flops(7e9, 2e12) == 8.4e22
    assert flops(123456, 0) == 0.0
    # cost of d tokens on the quarter-size model equals d/4 tokens on the target
    n, big_n = 1e9, 4e9
    assert flops(n, 10e9) == flops(big_n, 2.5e9)


def test_flops_ledger_identity_exact():
    n, big_n = 1e9, 4e9
    d, big_d = 10e9, 97.5e9
    combined = flops(n, d) + flops(big_n, big_d)
    assert combined == 6.0 * big_n * (d / 4 + big_d)


def test_growth_factor_ratio_excluding_final_norm():
    base = ModelConfig(vocab_size=2, d_model=8, d_ffn=16, n_heads=2, head_dim=4, n_layers=2, max_seq_len=4)
    grown = ModelConfig(vocab_size=2, d_model=8, d_ffn=16, n_heads=2, head_dim=4, n_layers=8, max_seq_len=4)
    d = base.d_model
    assert (nonembed_params(grown) - d) == 4 * (nonembed_params(base) - d)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_lr_schedule_endpoints():
    cfg = TrainConfig(tokens_per_batch=512, seq_len=64, max_lr=1e-3, min_lr=1e-4,
                      warmup_steps=100, total_tokens=512 * 1000)
    assert lr_at(100, cfg) == pytest.approx(1e-3)
    assert lr_at(1000, cfg) == pytest.approx(1e-4)
    mid = 100 + (1000 - 100) // 2
    assert lr_at(mid, cfg) == pytest.approx((1e-3 + 1e-4) / 2)
    assert lr_at(1, cfg) == pytest.approx(1e-3 / 100)


def test_lr_schedule_continuity_bound():
    cfg = TrainConfig(tokens_per_batch=512, seq_len=64, max_lr=1e-3, min_lr=1e-4,
                      warmup_steps=7, total_tokens=512 * 400)
    decay_steps = cfg.total_steps - cfg.warmup_steps
    bound = cfg.max_lr * math.pi / (2 * decay_steps) + cfg.max_lr / cfg.warmup_steps
    for s in range(1, cfg.total_steps):
        assert abs(lr_at(s + 1, cfg) - lr_at(s, cfg)) <= bound


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def test_corpus_window_count(tmp_path):
    path = tmp_path / "one_mib.bin"
    path.write_bytes(bytes(2**20))
    stream = load_corpus(path)
    assert stream.num_windows(256) == 4096


def test_corpus_deterministic_order(corpus):
    a = corpus.window_batches(64, 4, seed=5)
    b = corpus.window_batches(64, 4, seed=5)
    for _ in range(5):
        assert np.array_equal(next(a), next(b))
    c = corpus.window_batches(64, 4, seed=6)
    assert not np.array_equal(next(corpus.window_batches(64, 4, seed=5)), next(c))


def test_corpus_tokens_in_byte_range(corpus):
    batch = next(corpus.window_batches(64, 4, seed=0))
    assert batch.min() >= 0 and batch.max() < 256


def test_corpus_too_short(tmp_path):
    path = tmp_path / "small.bin"
    path.write_bytes(b"abc")
    stream = load_corpus(path)
    with pytest.raises(InputError):
        next(stream.window_batches(64, 1, seed=0))


def test_corpus_unreadable(tmp_path):
    with pytest.raises(CorpusReadError):
        load_corpus(tmp_path / "missing.bin")


def test_synthetic_corpus_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    make_synthetic_corpus(p1, 50_000, seed=3)
    make_synthetic_corpus(p2, 50_000, seed=3)
    assert p1.read_bytes() == p2.read_bytes()
    assert len(p1.read_bytes()) == 50_000


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_zero_tokens_noop(corpus):
    params = init_params(MODEL, seed=0)
    res = train(params, MODEL, TRAIN, corpus)
    assert len(res.curve) == 0
    for (_, a), (_, b) in zip(params.named_tensors(), res.params.named_tensors()):
        assert np.array_equal(a, b)


def test_train_loss_decreases(corpus):
    params = init_params(MODEL, seed=0)
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 512 * 200})
    res = train(params, MODEL, cfg, corpus, emit_every=10)
    losses = res.curve.losses
    assert res.curve.samples[0].step == 1
    assert res.curve.samples[-1].step == 200
    assert losses[-1] < losses[0]


def test_train_deterministic(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 512 * 30})
    r1 = train(init_params(MODEL, seed=1), MODEL, cfg, corpus, emit_every=10)
    r2 = train(init_params(MODEL, seed=1), MODEL, cfg, corpus, emit_every=10)
    assert [s.__dict__ for s in r1.curve.samples] == [s.__dict__ for s in r2.curve.samples]
    for (_, a), (_, b) in zip(r1.params.named_tensors(), r2.params.named_tensors()):
        assert np.array_equal(a, b)


def test_train_curve_axes_monotone(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 512 * 40})
    res = train(init_params(MODEL, seed=2), MODEL, cfg, corpus, emit_every=7)
    steps, tokens, fl = res.curve.steps, res.curve.tokens, res.curve.flops
    assert np.all(np.diff(steps) > 0)
    assert np.all(np.diff(tokens) >= 0)
    assert np.all(np.diff(fl) >= 0)


def test_train_flops_ledger(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 512 * 20})
    offset = 123456.0
    res = train(init_params(MODEL, seed=3), MODEL, cfg, corpus, emit_every=5,
                flops_offset=offset, tokens_offset=1000)
    n = nonembed_params(MODEL)
    for s in res.curve.samples:
        assert s.flops == offset + 6.0 * n * (s.tokens - 1000)


def test_train_divergence_aborts(corpus):
    cfg = TrainConfig(tokens_per_batch=512, seq_len=64, max_lr=1e8, min_lr=1e8,
                      warmup_steps=1, total_tokens=512 * 50, grad_clip=0.0, seed=0)
    with pytest.raises(TrainingDiverged) as exc:
        train(init_params(MODEL, seed=4), MODEL, cfg, corpus, emit_every=1)
    assert exc.value.last_params is not None
    assert exc.value.step >= 1


def test_train_slow_path_matches_shape(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 512 * 3})
    res = train(init_params(MODEL, seed=5), MODEL, cfg, corpus, fast=False)
    assert len(res.curve) >= 2


def test_loss_curve_csv_roundtrip(tmp_path, corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 512 * 12})
    res = train(init_params(MODEL, seed=6), MODEL, cfg, corpus, emit_every=4)
    p1 = tmp_path / "curve.csv"
    res.curve.to_csv(p1)
    again = LossCurve.from_csv(p1)
    p2 = tmp_path / "curve2.csv"
    again.to_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def test_growth_experiment_stack(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 0})
    plan = GrowthPlan("direct", "depth", growth_factor=2, seed=7)
    res = run_growth_experiment(MODEL, plan, d_tokens=512 * 10, big_tokens=512 * 20,
                                config=cfg, corpus=corpus, emit_every=5)
    assert res.grown_config.n_layers == 4
    assert res.origin_map == (1, 2, 1, 2)
    n_base, n_big = nonembed_params(MODEL), nonembed_params(res.grown_config)
    c1 = 6.0 * n_base * 512 * 10
    # grown curve cost axis includes the base cost
    assert res.grown_curve.samples[0].flops > c1
    for s in res.grown_curve.samples:
        assert s.flops == c1 + 6.0 * n_big * (s.tokens - 512 * 10)
    # scratch matched on combined cost within one batch of tokens
    combined = res.combined_flops
    scratch_total = res.scratch_curve.samples[-1].flops
    assert abs(scratch_total - combined) <= 6.0 * n_big * 512


def test_growth_experiment_untrained_base(corpus):
    # growth timing of zero: stack an untrained base model
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 0})
    plan = GrowthPlan("direct", "depth", growth_factor=2, seed=12)
    res = run_growth_experiment(MODEL, plan, d_tokens=0, big_tokens=512 * 6,
                                config=cfg, corpus=corpus, emit_every=2)
    assert len(res.base_curve) == 0
    from growkit.model import init_params as ip
    from growkit.growth import grow_depth_stack as gds
    expect, _, _ = gds(ip(MODEL, cfg.seed), MODEL, 2)
    # the grown run started from the stacked untrained base
    assert res.grown_curve.samples[0].flops == 6.0 * nonembed_params(res.grown_config) * 512
    assert res.grown_config.n_layers == 4


def test_growth_experiment_deterministic(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 0})
    plan = GrowthPlan("zero", "depth", growth_factor=2, seed=8)
    r1 = run_growth_experiment(MODEL, plan, 512 * 5, 512 * 8, cfg, corpus, emit_every=2)
    r2 = run_growth_experiment(MODEL, plan, 512 * 5, 512 * 8, cfg, corpus, emit_every=2)
    assert [s.__dict__ for s in r1.grown_curve.samples] == [s.__dict__ for s in r2.grown_curve.samples]
    for (_, a), (_, b) in zip(r1.grown_params.named_tensors(), r2.grown_params.named_tensors()):
        assert np.array_equal(a, b)


def test_growth_experiment_masked_random(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 0})
    plan = GrowthPlan("random", "depth", growth_factor=2, seed=9)
    res = run_growth_experiment(MODEL, plan, 512 * 4, 512 * 12, cfg, corpus, emit_every=4)
    assert res.masks is not None
    # gates ramped to 1 after warmup
    assert all(g == 1.0 for g in res.masks.layer_gates.values())


def test_gradual_experiment(corpus):
    cfg = TrainConfig(**{**TRAIN.__dict__, "total_tokens": 0})
    res = run_gradual_experiment(MODEL, target_layers=8, tokens_per_stage=512 * 6,
                                 final_tokens=512 * 10, config=cfg, corpus=corpus, emit_every=3)
    assert res.final_config.n_layers == 8
    assert len(res.stage_boundaries) == 2
    steps = res.grown_curve.steps
    assert np.all(np.diff(steps) > 0)
    assert np.all(np.diff(res.grown_curve.flops) >= 0)
