"""Empirical-law layer: power-law fits, IsoFLOP parabolas, growth-timing and
growth-factor guidelines, speedup between curves, and loss-gap fits.

All fits are closed-form least squares in log space; the guideline equations
use the fitted constants

    log10(d) = 0.88*log10(N) + 163.27/log10(C) - 5.74
    log10(g) = 1.01*log10(N) - 29.88/log10(C) - 7.36

with C = 6*N*D floating-point operations. That cost convention is validated
by the guideline reference table in the tests (it reproduces the published
base-training token counts to within 1%).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, UnreachableTargetError

TIMING_COEFFS = (0.88, 163.27, -5.74)
FACTOR_COEFFS = (1.01, -29.88, -7.36)
RECOMMENDED_GROWTH_FACTOR = 4
FLOPS_PER_PARAM_TOKEN = 6.0


@dataclass
class PowerLawFit:
    a: float
    b: float
    residual: float  # sum of squared log-space residuals

    def predict(self, compute) -> float:
        return predict_loss(self, compute)


def fit_power_law(points: Sequence) -> PowerLawFit:
    """Least squares for L = a * C^b in log-log space (closed form)."""
    pts = [(float(c), float(l)) for c, l in points]
    if len(pts) < 2:
        raise InputError("need at least two points to fit a power law")
    if any(c <= 0 or l <= 0 for c, l in pts):
        raise InputError("power-law fit needs positive compute and loss values")
    cs = np.array([c for c, _ in pts])
    if np.unique(cs).size < 2:
        raise InputError("need at least two distinct compute values")
    x = np.log(cs)
    y = np.log(np.array([l for _, l in pts]))
    xm, ym = x.mean(), y.mean()
    b = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    log_a = float(ym - b * xm)
    resid = float(((y - (log_a + b * x)) ** 2).sum())
    return PowerLawFit(a=math.exp(log_a), b=b, residual=resid)


def predict_loss(fit: PowerLawFit, compute) -> float:
    return fit.a * float(compute) ** fit.b


@dataclass
class IsoflopFit:
    p: float
    q: float
    r: float
    optimal_d: Optional[float]  # None when the parabola has no interior minimum
    residual: float

    @property
    def has_minimum(self) -> bool:
        return self.optimal_d is not None


def fit_isoflop(points: Sequence) -> IsoflopFit:
    """Quadratic least squares of loss against log10(base-training tokens).

    The minimizing token count is 10^(-q/2p); a non-convex fit (p <= 0)
    reports no interior minimum.
    """
    pts = [(float(d), float(l)) for d, l in points]
    if len(pts) < 3:
        raise InputError("need at least three points to fit a parabola")
    if any(d <= 0 for d, _ in pts):
        raise InputError("token counts must be positive")
    ds = np.array([d for d, _ in pts])
    if np.unique(ds).size < 3:
        raise InputError("need at least three distinct token counts")
    x = np.log10(ds)
    y = np.array([l for _, l in pts])
    coeffs = np.polyfit(x, y, deg=2)
    p, q, r = (float(v) for v in coeffs)
    resid = float(((np.polyval(coeffs, x) - y) ** 2).sum())
    optimal = 10.0 ** (-q / (2.0 * p)) if p > 0 else None
    return IsoflopFit(p=p, q=q, r=r, optimal_d=optimal, residual=resid)


def _resolve_compute(n_params, big_tokens=None, compute=None) -> float:
    if n_params is None or n_params <= 0:
        raise InputError("parameter count must be positive")
    if (big_tokens is None) == (compute is None):
        raise InputError("give exactly one of target tokens or compute")
    if compute is None:
        if big_tokens <= 0:
            raise InputError("token count must be positive")
        compute = FLOPS_PER_PARAM_TOKEN * n_params * big_tokens
    if compute <= 0:
        raise InputError("compute must be positive")
    return float(compute)


def guideline_d(n_params, big_tokens=None, compute=None) -> float:
    """Recommended base-model training tokens before stacking."""
    c = _resolve_compute(n_params, big_tokens, compute)
    a, b, off = TIMING_COEFFS
    return 10.0 ** (a * math.log10(n_params) + b / math.log10(c) + off)


def guideline_g(n_params, big_tokens=None, compute=None):
    """(raw fitted growth factor, recommended integer growth factor).

    The fitted equation is reported for transparency; the recommendation is
    a constant factor of 4.
    """
    c = _resolve_compute(n_params, big_tokens, compute)
    a, b, off = FACTOR_COEFFS
    raw = 10.0 ** (a * math.log10(n_params) + b / math.log10(c) + off)
    return raw, RECOMMENDED_GROWTH_FACTOR


def _first_crossing(curve, target: float, name: str) -> float:
    """FLOPs at the first crossing of target loss, linearly interpolated."""
    losses = curve.losses
    fl = curve.flops
    if len(losses) == 0:
        raise UnreachableTargetError(name, target)
    if losses[0] <= target:
        return float(fl[0])
    below = np.nonzero(losses <= target)[0]
    if below.size == 0:
        raise UnreachableTargetError(name, target)
    i = int(below[0])
    l0, l1 = losses[i - 1], losses[i]
    f0, f1 = fl[i - 1], fl[i]
    if l0 == l1:
        return float(f1)
    t = (l0 - target) / (l0 - l1)
    return float(f0 + t * (f1 - f0))


def speedup(curve_scratch, curve_grown, target_loss: float) -> float:
    """FLOPs(scratch)/FLOPs(grown) - 1 at the first crossing of target_loss.

    The grown curve's cost axis must already include the base model's
    training cost (the trainer emits it that way).
    """
    f_scratch = _first_crossing(curve_scratch, target_loss, "scratch")
    f_grown = _first_crossing(curve_grown, target_loss, "grown")
    return f_scratch / f_grown - 1.0


@dataclass
class LossGapFit:
    """Scratch-minus-grown loss gap modelled as alpha + beta*ln(tokens)."""

    alpha: float
    beta: float

    def predict(self, tokens) -> float:
        return self.alpha + self.beta * math.log(tokens)


def fit_loss_gap(curve_scratch, curve_grown) -> LossGapFit:
    """Fit the loss difference over the overlapping token range.

    The grown curve is linearly interpolated onto the scratch curve's token
    grid before differencing.
    """
    ts = curve_scratch.tokens
    tg = curve_grown.tokens
    if len(ts) < 2 or len(tg) < 2:
        raise InputError("both curves need at least two samples")
    lo = max(ts.min(), tg.min())
    hi = min(ts.max(), tg.max())
    if lo >= hi:
        raise InputError("curves share no overlapping token range")
    keep = (ts >= lo) & (ts <= hi)
    if keep.sum() < 2:
        raise InputError("fewer than two scratch samples in the overlapping range")
    grid = ts[keep].astype(np.float64)
    gap = curve_scratch.losses[keep] - np.interp(grid, tg.astype(np.float64), curve_grown.losses)
    x = np.log(grid)
    xm = x.mean()
    beta = float(((x - xm) * (gap - gap.mean())).sum() / ((x - xm) ** 2).sum())
    alpha = float(gap.mean() - beta * xm)
    return LossGapFit(alpha=alpha, beta=beta)
