"""Command-line interface.

All commands are non-interactive, print machine-parsable key=value lines on
stdout, send errors to stderr, and exit with: 0 ok, 1 assertion or verdict
failure, 2 usage error, 3 I/O error. Curve and checkpoint writes go through
a temp file and an atomic rename. GROWKIT_SEED overrides every seed in an
experiment spec.

Stack patterns: dash-separated groups of base-layer digits, each optionally
repeated with *k (e.g. "12-345*7-6"). Bases deeper than nine layers spell
indices comma-separated, e.g. "1,2-3,4*5-10,11,12".
"""

from __future__ import annotations

import argparse
import os
import sys

from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    CorpusReadError,
    GrowkitError,
    InputError,
    TrainingDiverged,
    UnreachableTargetError,
)
from .experiment import load_experiment_spec
from .growth import GrowthPlan, apply_plan, connection_rate
from .laws import fit_isoflop, fit_loss_gap, fit_power_law, guideline_d, guideline_g, speedup
from .model import init_params
from .trainer import (
    LossCurve,
    TrainConfig,
    load_corpus,
    make_synthetic_corpus,
    nonembed_params,
    run_gradual_experiment,
    run_growth_experiment,
    train,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _emit(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _write_curve(curve: LossCurve, path: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    curve.to_csv(tmp)
    os.replace(tmp, path)


def _plan_history_line(plan: GrowthPlan) -> str:
    return (
        f"op={plan.operator} dir={plan.direction} g={plan.growth_factor} "
        f"pattern={plan.stack_pattern or '-'} noise={plan.noise_ratio!r} seed={plan.seed}"
    )


# ---------------------------------------------------------------------------
# grow
# ---------------------------------------------------------------------------


def cmd_grow(args) -> int:
    params, meta = load_checkpoint(args.input)
    operator, direction = args.op, args.dir
    if operator == "stack":
        operator, direction = "direct", "depth"
    plan = GrowthPlan(
        operator=operator,
        direction=direction,
        growth_factor=args.g,
        stack_pattern=args.pattern,
        noise_ratio=args.noise,
        seed=args.seed,
    )
    corpus = load_corpus(args.corpus) if args.corpus else None
    result = apply_plan(params, meta.config, plan, corpus=corpus,
                        meta_steps=args.meta_steps, meta_lr=args.meta_lr)
    out_meta = CheckpointMeta(
        config=result.config,
        history=list(meta.history) + [_plan_history_line(plan)],
        origin_map=result.origin_map if result.origin_map is not None else meta.origin_map,
        masks=result.masks,
    )
    save_checkpoint(args.output, result.params, out_meta)
    _emit(out=args.output, operator=plan.operator, direction=plan.direction,
          growth_factor=plan.growth_factor, n_layers=result.config.n_layers,
          d_model=result.config.d_model, nonembed_params=nonembed_params(result.config))
    if result.origin_map is not None:
        _emit(origin_map=",".join(str(o) for o in result.origin_map))
        _emit(R_c=f"{connection_rate(result.origin_map):.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .verify import fp_deviation

    base_params, base_meta = load_checkpoint(args.base)
    grown_params, grown_meta = load_checkpoint(args.grown)
    label = grown_meta.history[-1].split()[0].replace("op=", "") if grown_meta.history else "unknown"
    report = fp_deviation(
        base_params, base_meta.config, grown_params, grown_meta.config,
        n_batches=args.batches, seed=args.seed, grown_masks=grown_meta.masks,
        tolerance=args.tol, operator=label,
    )
    print(report.to_record() + f" expect={args.expect}")
    matches = (report.verdict == "preserving") == (args.expect == "fp")
    return EXIT_OK if matches else EXIT_FAIL


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _speedup_report(scratch_curve, grown_curve) -> dict:
    if len(scratch_curve) == 0 or len(grown_curve) == 0:
        return {"speedup": "n/a"}
    target = float(scratch_curve.losses[-1])
    try:
        sp = speedup(scratch_curve, grown_curve, target)
    except UnreachableTargetError as exc:
        return {"target_loss": f"{target!r}", "speedup_unreachable": exc.curve_name}
    return {"target_loss": f"{target!r}", "speedup": f"{sp!r}"}


def cmd_train(args) -> int:
    spec = load_experiment_spec(args.spec)
    corpus = load_corpus(spec.corpus_path)
    os.makedirs(spec.output_dir, exist_ok=True)
    out = lambda name: os.path.join(spec.output_dir, name)

    try:
        if spec.mode == "scratch":
            params = init_params(spec.model, spec.train.seed)
            res = train(params, spec.model, spec.train, corpus, emit_every=spec.emit_every)
            _write_curve(res.curve, out("scratch.csv"))
            save_checkpoint(out("model.ckpt"), res.params, CheckpointMeta(config=spec.model))
            _emit(mode="scratch", scratch_csv=out("scratch.csv"), checkpoint=out("model.ckpt"),
                  steps=len(res.curve))
        elif spec.mode == "growth":
            res = run_growth_experiment(
                spec.model, spec.plan, spec.d_tokens, spec.big_tokens, spec.train, corpus,
                emit_every=spec.emit_every, meta_steps=spec.meta_steps, meta_lr=spec.meta_lr,
            )
            _write_curve(res.base_curve, out("base.csv"))
            _write_curve(res.grown_curve, out("grown.csv"))
            _write_curve(res.scratch_curve, out("scratch.csv"))
            save_checkpoint(out("base.ckpt"), res.base_params,
                            CheckpointMeta(config=res.base_config))
            save_checkpoint(
                out("grown.ckpt"), res.grown_params,
                CheckpointMeta(config=res.grown_config,
                               history=[_plan_history_line(spec.plan)],
                               origin_map=res.origin_map, masks=res.masks),
            )
            save_checkpoint(out("scratch.ckpt"), res.scratch_params,
                            CheckpointMeta(config=res.grown_config))
            _emit(mode="growth", base_csv=out("base.csv"), grown_csv=out("grown.csv"),
                  scratch_csv=out("scratch.csv"), combined_flops=f"{res.combined_flops!r}")
            if res.origin_map is not None:
                _emit(origin_map=",".join(str(o) for o in res.origin_map),
                      R_c=f"{connection_rate(res.origin_map):.3f}")
            _emit(**_speedup_report(res.scratch_curve, res.grown_curve))
        else:  # gradual
            res = run_gradual_experiment(
                spec.model, spec.target_layers, spec.tokens_per_stage, spec.final_tokens,
                spec.train, corpus, emit_every=spec.emit_every,
            )
            _write_curve(res.grown_curve, out("grown.csv"))
            _write_curve(res.scratch_curve, out("scratch.csv"))
            save_checkpoint(out("final.ckpt"), res.final_params,
                            CheckpointMeta(config=res.final_config))
            save_checkpoint(out("scratch.ckpt"), res.scratch_params,
                            CheckpointMeta(config=res.final_config))
            _emit(mode="gradual", grown_csv=out("grown.csv"), scratch_csv=out("scratch.csv"),
                  stage_boundaries=",".join(str(s) for s in res.stage_boundaries))
            _emit(**_speedup_report(res.scratch_curve, res.grown_curve))
    except TrainingDiverged as exc:
        save_checkpoint(out("diverged.ckpt"), exc.last_params,
                        CheckpointMeta(config=spec.model))
        _write_curve(exc.curve, out("diverged.csv"))
        print(f"error=training-diverged step={exc.step} checkpoint={out('diverged.ckpt')}",
              file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# law
# ---------------------------------------------------------------------------

_CURVE_HEADER = ["step", "tokens", "flops", "loss", "lr"]


def _read_points(path, expect_two=("c", "l"), curve_cols=("flops", "loss")):
    """Two-column CSVs are (x, y) points; loss-curve CSVs use curve_cols."""
    with open(path, "r", encoding="ascii") as fh:
        header = [h.strip().lower() for h in fh.readline().strip().split(",")]
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if header == _CURVE_HEADER:
        ix, iy = _CURVE_HEADER.index(curve_cols[0]), _CURVE_HEADER.index(curve_cols[1])
    elif len(header) == 2:
        ix, iy = 0, 1
    else:
        raise InputError(
            f"{path}: expected a two-column ({expect_two[0]},{expect_two[1]}) CSV "
            f"or a loss-curve CSV"
        )
    return [(float(r[ix]), float(r[iy])) for r in rows]


def cmd_law(args) -> int:
    if args.law_command == "fit":
        fit = fit_power_law(_read_points(args.csv))
        _emit(a=f"{fit.a!r}", b=f"{fit.b!r}", residual=f"{fit.residual!r}")
    elif args.law_command == "isoflop":
        fit = fit_isoflop(_read_points(args.csv, expect_two=("d", "loss"),
                                       curve_cols=("tokens", "loss")))
        kv = {"p": f"{fit.p!r}", "q": f"{fit.q!r}", "r": f"{fit.r!r}"}
        if fit.has_minimum:
            kv["optimal_d"] = f"{fit.optimal_d!r}"
        else:
            kv["no_interior_minimum"] = "true"
        _emit(**kv)
    elif args.law_command == "guideline":
        if (args.D is None) == (args.C is None):
            raise InputError("give exactly one of --D (target tokens) or --C (compute)")
        d = guideline_d(args.N, big_tokens=args.D, compute=args.C)
        g_raw, g_rec = guideline_g(args.N, big_tokens=args.D, compute=args.C)
        _emit(d=f"{d:.4g}", g_raw=f"{g_raw:.4g}", g=g_rec)
    elif args.law_command == "speedup":
        scratch = LossCurve.from_csv(args.scratch_csv)
        grown = LossCurve.from_csv(args.grown_csv)
        sp = speedup(scratch, grown, args.target)
        _emit(target_loss=f"{args.target!r}", speedup=f"{sp!r}")
    elif args.law_command == "lossgap":
        scratch = LossCurve.from_csv(args.scratch_csv)
        grown = LossCurve.from_csv(args.grown_csv)
        fit = fit_loss_gap(scratch, grown)
        kv = {"alpha": f"{fit.alpha!r}", "beta": f"{fit.beta!r}"}
        if args.extrapolate is not None:
            kv["gap_at"] = f"{args.extrapolate!r}"
            kv["gap"] = f"{fit.predict(args.extrapolate)!r}"
        _emit(**kv)
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    n_bytes = int(args.mib * 2**20)
    make_synthetic_corpus(args.out, n_bytes, seed=args.seed)
    _emit(out=args.out, bytes=n_bytes, seed=args.seed)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="growkit",
        description="Model-growth operators, verification, training, and scaling-law tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grow", help="apply a growth operator to a checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--op", required=True,
                   choices=["stack", "direct", "learn", "zero", "random"],
                   help="operator; 'stack' is shorthand for depthwise direct growth")
    p.add_argument("--dir", default="depth", choices=["width", "depth"])
    p.add_argument("--g", type=int, default=1, help="growth factor")
    p.add_argument("--pattern", default=None,
                   help="stack pattern, e.g. 12-345*7-6 (depthwise direct only)")
    p.add_argument("--noise", type=float, default=0.0, help="noise ratio blended in after growth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", default=None, help="corpus for learned growth")
    p.add_argument("--meta-steps", type=int, default=0)
    p.add_argument("--meta-lr", type=float, default=1e-2)
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("verify", help="function-preservation check between two checkpoints")
    p.add_argument("base")
    p.add_argument("grown")
    p.add_argument("--batches", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--expect", required=True, choices=["fp", "nonfp"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="run an experiment spec file")
    p.add_argument("spec")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("law", help="fits, guidelines, speedup, loss gaps")
    law_sub = p.add_subparsers(dest="law_command", required=True)
    q = law_sub.add_parser("fit", help="power-law fit of (C, L) points")
    q.add_argument("csv")
    q.set_defaults(func=cmd_law)
    q = law_sub.add_parser("isoflop", help="parabola fit of (d, loss) points in log10 d")
    q.add_argument("csv")
    q.set_defaults(func=cmd_law)
    q = law_sub.add_parser("guideline", help="growth timing and factor for a budget")
    q.add_argument("--N", type=float, required=True, help="non-embedding parameter count")
    q.add_argument("--D", type=float, default=None, help="target training tokens")
    q.add_argument("--C", type=float, default=None, help="compute budget in FLOPs")
    q.set_defaults(func=cmd_law)
    q = law_sub.add_parser("speedup", help="speedup of grown over scratch at a target loss")
    q.add_argument("--target", type=float, required=True)
    q.add_argument("scratch_csv")
    q.add_argument("grown_csv")
    q.set_defaults(func=cmd_law)
    q = law_sub.add_parser("lossgap", help="fit scratch-minus-grown loss vs ln(tokens)")
    q.add_argument("scratch_csv")
    q.add_argument("grown_csv")
    q.add_argument("--extrapolate", type=float, default=None)
    q.set_defaults(func=cmd_law)

    p = sub.add_parser("make-corpus", help="write a synthetic byte corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--mib", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error={exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnreachableTargetError as exc:
        print(f"error={exc}", file=sys.stderr)
        return EXIT_FAIL
    except CheckpointError as exc:
        print(f"error_code={exc.code} error={exc}", file=sys.stderr)
        return EXIT_IO
    except (CorpusReadError, OSError) as exc:
        print(f"error={exc}", file=sys.stderr)
        return EXIT_IO
    except GrowkitError as exc:
        print(f"error={exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
