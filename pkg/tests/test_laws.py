import math

import numpy as np
import pytest

from growkit.errors import InputError, UnreachableTargetError
from growkit.laws import (
    LossGapFit,
    fit_isoflop,
    fit_loss_gap,
    fit_power_law,
    guideline_d,
    guideline_g,
    predict_loss,
    speedup,
)
from growkit.trainer import LossCurve


def make_curve(flops, losses, tokens=None):
    curve = LossCurve()
    tokens = tokens if tokens is not None else [int(f) for f in range(1, len(flops) + 1)]
    for i, (f, l) in enumerate(zip(flops, losses)):
        curve.append(i + 1, tokens[i], f, l, 1e-4)
    return curve


# ---------------------------------------------------------------------------
# power law
# ---------------------------------------------------------------------------


def test_power_law_exact_recovery():
    c = np.logspace(18, 22, 12)
    fit = fit_power_law(list(zip(c, 3.0 * c**-0.1)))
    assert fit.a == pytest.approx(3.0, abs=1e-9)
    assert fit.b == pytest.approx(-0.1, abs=1e-9)
    assert fit.residual < 1e-18


def test_power_law_two_points_interpolates():
    fit = fit_power_law([(1e18, 3.0), (1e20, 2.5)])
    assert fit.residual == pytest.approx(0.0, abs=1e-18)
    assert predict_loss(fit, 1e18) == pytest.approx(3.0, rel=1e-12)
    assert predict_loss(fit, 1e20) == pytest.approx(2.5, rel=1e-12)


def test_power_law_noisy_recovery():
    rng = np.random.default_rng(7)
    c = np.logspace(18, 23, 20)
    truth = 10.0 * c**-0.05
    noisy = truth * (1.0 + 0.01 * rng.standard_normal(20))
    fit = fit_power_law(list(zip(c, noisy)))
    assert fit.a == pytest.approx(10.0, rel=0.05)
    assert fit.b == pytest.approx(-0.05, rel=0.05)


def test_power_law_scale_equivariance():
    c = np.logspace(10, 14, 9)
    losses = 4.2 * c**-0.07
    base = fit_power_law(list(zip(c, losses)))
    k = 1000.0
    scaled = fit_power_law(list(zip(k * c, losses)))
    assert scaled.b == pytest.approx(base.b, abs=1e-9)
    assert scaled.a == pytest.approx(base.a * k**-base.b, rel=1e-9)


def test_power_law_input_errors():
    with pytest.raises(InputError):
        fit_power_law([(1e18, 3.0)])
    with pytest.raises(InputError):
        fit_power_law([(1e18, 3.0), (-1e18, 2.0)])
    with pytest.raises(InputError):
        fit_power_law([(1e18, 3.0), (1e18, 2.0)])


def test_predict_loss_trivials():
    from growkit.laws import PowerLawFit

    assert predict_loss(PowerLawFit(1.0, 0.0, 0.0), 5e20) == 1.0
    assert predict_loss(PowerLawFit(3.0, -0.1, 0.0), 1.0) == 3.0


def test_power_law_roundtrip():
    c = np.logspace(18, 21, 8)
    l = 2.7 * c**-0.033
    fit = fit_power_law(list(zip(c, l)))
    for ci, li in zip(c, l):
        assert predict_loss(fit, ci) == pytest.approx(li, rel=1e-9)


# ---------------------------------------------------------------------------
# isoflop parabola
# ---------------------------------------------------------------------------


def test_isoflop_symmetric_vertex():
    xs = [0.5, 1.0, 1.5]  # log10 d
    ds = [10.0**x for x in xs]
    losses = [2.0 + (x - 1.0) ** 2 for x in xs]
    fit = fit_isoflop(list(zip(ds, losses)))
    assert fit.has_minimum
    assert fit.optimal_d == pytest.approx(10.0, rel=1e-9)
    assert fit.residual == pytest.approx(0.0, abs=1e-12)


def test_isoflop_vertex_invariant_to_loss_offset():
    ds = [1e8, 1e9, 1e10, 1e11]
    losses = [3.1, 2.8, 2.9, 3.3]
    f1 = fit_isoflop(list(zip(ds, losses)))
    f2 = fit_isoflop(list(zip(ds, [l + 5.0 for l in losses])))
    assert f1.optimal_d == pytest.approx(f2.optimal_d, rel=1e-9)


def test_isoflop_no_interior_minimum():
    ds = [1e8, 1e9, 1e10]
    losses = [2.0, 2.5, 2.0]  # downward parabola
    fit = fit_isoflop(list(zip(ds, losses)))
    assert not fit.has_minimum
    assert fit.optimal_d is None


def test_isoflop_errors():
    with pytest.raises(InputError):
        fit_isoflop([(1e8, 2.0), (1e9, 2.1)])
    with pytest.raises(InputError):
        fit_isoflop([(1e8, 2.0), (-1e9, 2.1), (1e10, 2.2)])


# ---------------------------------------------------------------------------
# guidelines
# ---------------------------------------------------------------------------

GUIDELINE_TABLE = [
    (8e9, 15e12, 6.58e9),
    (7e9, 2e12, 11.11e9),
    (13e9, 2e12, 15.84e9),
    (70e9, 2e12, 42.48e9),
]


@pytest.mark.parametrize("n,d_tokens,expected", GUIDELINE_TABLE)
def test_guideline_d_reference_rows(n, d_tokens, expected):
    assert guideline_d(n, big_tokens=d_tokens) == pytest.approx(expected, rel=0.01)


def test_guideline_d_compute_form_matches_token_form():
    n, tokens = 8e9, 15e12
    assert guideline_d(n, compute=6.0 * n * tokens) == pytest.approx(
        guideline_d(n, big_tokens=tokens), rel=1e-12
    )


def test_guideline_g_recommendation_constant():
    for n, c in [(1.1e9, 6.6e20), (8e9, 7.2e23), (70e9, 8.4e23)]:
        raw, rec = guideline_g(n, compute=c)
        assert rec == 4
        assert raw > 0


def test_guideline_g_raw_value():
    raw, _ = guideline_g(1.1e9, compute=6.6e20)
    # independent evaluation of the fitted equation
    expected = 10 ** (1.01 * math.log10(1.1e9) - 29.88 / math.log10(6.6e20) - 7.36)
    assert raw == pytest.approx(expected, rel=1e-12)
    assert raw == pytest.approx(2.17, abs=0.01)


def test_guideline_g_scaling_structure():
    raw1, _ = guideline_g(1e9, compute=1e21)
    raw2, _ = guideline_g(1e10, compute=1e21)
    assert raw2 / raw1 == pytest.approx(10**1.01, rel=1e-9)


def test_guideline_errors():
    with pytest.raises(InputError):
        guideline_d(-1.0, big_tokens=1e12)
    with pytest.raises(InputError):
        guideline_d(1e9)
    with pytest.raises(InputError):
        guideline_d(1e9, big_tokens=1e12, compute=1e21)


# ---------------------------------------------------------------------------
# speedup
# ---------------------------------------------------------------------------


def test_speedup_identical_curves():
    curve = make_curve([1e19, 2e19, 3e19], [3.0, 2.5, 2.0])
    other = make_curve([1e19, 2e19, 3e19], [3.0, 2.5, 2.0])
    assert speedup(curve, other, 2.5) == 0.0


def test_speedup_synthetic_crossing():
    scratch = make_curve([1e20, 2e20, 3e20], [3.0, 2.9, 2.5])
    grown = make_curve([5e19, 1e20, 2e20], [3.0, 2.9, 2.5])
    assert speedup(scratch, grown, 2.9) == 1.0


def test_speedup_interpolates_between_samples():
    scratch = make_curve([1e20, 3e20], [3.0, 2.0])
    grown = make_curve([1e20, 3e20], [2.8, 1.8])
    f_scratch = 1e20 + (3.0 - 2.5) / (3.0 - 2.0) * 2e20
    f_grown = 1e20 + (2.8 - 2.5) / (2.8 - 1.8) * 2e20
    assert speedup(scratch, grown, 2.5) == pytest.approx(f_scratch / f_grown - 1, rel=1e-12)


def test_speedup_antisymmetry():
    a = make_curve([1e20, 2e20, 4e20], [3.0, 2.4, 2.1])
    b = make_curve([6e19, 1.5e20, 3e20], [3.1, 2.5, 2.05])
    sp_ab = speedup(a, b, 2.3)
    sp_ba = speedup(b, a, 2.3)
    assert (sp_ab + 1.0) * (sp_ba + 1.0) == pytest.approx(1.0, abs=1e-12)


def test_speedup_unreachable_names_curve():
    a = make_curve([1e20, 2e20], [3.0, 2.5])
    b = make_curve([1e20, 2e20], [3.0, 2.9])
    with pytest.raises(UnreachableTargetError) as exc:
        speedup(a, b, 2.6)
    assert exc.value.curve_name == "grown"
    with pytest.raises(UnreachableTargetError) as exc:
        speedup(b, a, 2.6)
    assert exc.value.curve_name == "scratch"


# ---------------------------------------------------------------------------
# loss gap
# ---------------------------------------------------------------------------


def test_loss_gap_constant():
    tokens = [int(t) for t in np.linspace(1e6, 5e7, 20)]
    scratch = make_curve(np.linspace(1e18, 5e19, 20), [2.5] * 20, tokens)
    grown = make_curve(np.linspace(1e18, 5e19, 20), [2.4] * 20, tokens)
    fit = fit_loss_gap(scratch, grown)
    assert fit.alpha == pytest.approx(0.1, abs=1e-9)
    assert fit.beta == pytest.approx(0.0, abs=1e-12)


def test_loss_gap_synthetic_log_recovery():
    tokens = np.linspace(1e6, 8e7, 50).astype(np.int64)
    gap = 0.5 - 0.03 * np.log(tokens)
    base_loss = 3.0 - 0.1 * np.log(tokens) / np.log(tokens).max()
    scratch = make_curve(np.linspace(1e18, 1e20, 50), base_loss, list(tokens))
    grown = make_curve(np.linspace(1e18, 1e20, 50), base_loss - gap, list(tokens))
    fit = fit_loss_gap(scratch, grown)
    assert fit.alpha == pytest.approx(0.5, abs=1e-9)
    assert fit.beta == pytest.approx(-0.03, abs=1e-9)


def test_loss_gap_extrapolation_sign():
    fit = LossGapFit(alpha=0.5, beta=-0.012)
    assert fit.predict(8e12) > 0.0  # slowly-decaying gap still positive at 8T tokens


def test_loss_gap_requires_overlap():
    scratch = make_curve([1e18, 2e18], [3.0, 2.9], [100, 200])
    grown = make_curve([1e18, 2e18], [3.0, 2.9], [300, 400])
    with pytest.raises(InputError):
        fit_loss_gap(scratch, grown)
