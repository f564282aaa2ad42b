import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from micropost.exceptions import ValidationError
from micropost.forward_models import BALL_STICK, EXTENDED_SANDI, STANDARD_MODEL
from micropost.priors import (
    PriorSpec,
    from_unit_cube,
    in_support,
    log_prior,
    ordered_from_uniform,
    sample_prior,
    simplex_from_uniform,
)

unit = st.floats(0.0, 1.0)


def test_default_constraints():
    assert PriorSpec.for_space(BALL_STICK).constraint == "none"
    assert PriorSpec.for_space(STANDARD_MODEL).constraint == "ordered_diffusivities"
    assert PriorSpec.for_space(EXTENDED_SANDI).constraint == "simplex_fractions"
    with pytest.raises(ValidationError):
        PriorSpec(STANDARD_MODEL, "none")
    with pytest.raises(ValidationError):
        PriorSpec(BALL_STICK, "simplex")


def test_transform_corners():
    assert ordered_from_uniform(1.0, 1.0, 0.1, 3.0) == pytest.approx((3.0, 3.0))
    assert ordered_from_uniform(0.0, 0.5, 0.1, 3.0) == pytest.approx((0.1, 0.1))
    assert simplex_from_uniform(1.0, 1.0) == pytest.approx((1.0, 0.0, 0.0))
    assert simplex_from_uniform(0.0, 0.3) == pytest.approx((0.0, 0.0, 1.0))


@settings(max_examples=200, deadline=None)
@given(unit, unit)
def test_ordered_transform_lands_in_triangle(u0, u1):
    hi, lo = ordered_from_uniform(u0, u1, 0.1, 3.0)
    assert 0.1 - 1e-12 <= lo <= hi + 1e-12 <= 3.0 + 2e-12


@settings(max_examples=200, deadline=None)
@given(unit, unit)
def test_simplex_transform_sums_to_one(k1, k2):
    fn, fs, fe = simplex_from_uniform(k1, k2)
    assert min(fn, fs, fe) >= -1e-12
    assert fn + fs + fe == pytest.approx(1.0)


@pytest.mark.parametrize("space", [BALL_STICK, STANDARD_MODEL, EXTENDED_SANDI])
def test_samples_in_support(space):
    spec = PriorSpec.for_space(space)
    theta = sample_prior(spec, 20000, rng_seed=0)
    assert np.all(in_support(spec, theta))
    assert np.all(np.isfinite(log_prior(spec, theta)))


def test_unconstrained_marginals_uniform():
    theta = sample_prior(PriorSpec.for_space(EXTENDED_SANDI), 10**5, rng_seed=1)
    for i in (2, 3, 4, 5):
        lo, hi = EXTENDED_SANDI.lower[i], EXTENDED_SANDI.upper[i]
        assert stats.kstest(theta[:, i], stats.uniform(lo, hi - lo).cdf).statistic < 0.01
    assert theta[:, 3].min() >= 0.03 and theta[:, 3].max() <= 0.95
    assert theta[:, 5].min() >= 0.15 and theta[:, 5].max() <= 1105.0


def triangle_chi2(d_par, d_perp, lo=0.1, hi=3.0, bins=10):
    """Chi-square of a 10x10 histogram against the uniform triangle density."""
    edges = np.linspace(lo, hi, bins + 1)
    counts, _, _ = np.histogram2d(d_par, d_perp, [edges, edges])
    w = edges[1] - edges[0]
    total_area = (hi - lo) ** 2 / 2
    obs, exp = [], []
    for i in range(bins):  # d_par bin
        for j in range(bins):  # d_perp bin
            if j < i:
                area = w * w
            elif j == i:
                area = w * w / 2
            else:
                continue
            obs.append(counts[i, j])
            exp.append(len(d_par) * area / total_area)
    obs, exp = np.array(obs), np.array(exp)
    assert counts[np.triu_indices(bins, 1)].sum() == 0
    chi2 = np.sum((obs - exp) ** 2 / exp)
    return stats.chi2.sf(chi2, len(obs) - 1)


def test_ordered_pair_uniform_on_triangle():
    theta = sample_prior(PriorSpec.for_space(STANDARD_MODEL), 10**5, rng_seed=2)
    assert triangle_chi2(theta[:, 3], theta[:, 4]) > 0.01


def test_chi2_oracle_rejects_square():
    # the unconstrained square law must fail the triangle test
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.1, 3.0, (2, 10**5))
    with pytest.raises(AssertionError):
        triangle_chi2(a, b)


def test_in_support_examples():
    assert in_support(PriorSpec.for_space(BALL_STICK), [0.5, 1.0, 1.0])
    assert not in_support(PriorSpec.for_space(STANDARD_MODEL), [0.5, 1.0, 0.3, 1.0, 2.0])
    assert not in_support(PriorSpec.for_space(EXTENDED_SANDI), [0.7, 0.5, 1.0, 0.3, 1.0, 10.0])
    assert not in_support(PriorSpec.for_space(BALL_STICK), [0.5, 1.0, 3.5])
    assert not in_support(PriorSpec.for_space(BALL_STICK), [np.nan, 1.0, 1.0])
    # boundary round-off on the ordering is tolerated
    assert in_support(PriorSpec.for_space(STANDARD_MODEL), [0.5, 1.0, 0.3, 2.0, 2.0 + 1e-13])
    with pytest.raises(ValidationError):
        in_support(PriorSpec.for_space(BALL_STICK), [0.5, 1.0])


def test_log_prior_value():
    spec = PriorSpec.for_space(STANDARD_MODEL)
    lp = log_prior(spec, [0.5, 1.0, 0.3, 2.0, 1.0])
    # f, D_a, ODI uniform on boxes; (D_par, D_perp) uniform on a triangle of area 2.9^2/2
    assert lp == pytest.approx(-np.log(1.0 * 2.9 * 0.92 * 2.9**2 / 2))
    assert log_prior(spec, [0.5, 1.0, 0.3, 1.0, 2.0]) == -np.inf


def test_unit_cube_matches_sampler():
    spec = PriorSpec.for_space(EXTENDED_SANDI)
    u = np.random.default_rng(4).uniform(size=(10, 6))
    np.testing.assert_array_equal(from_unit_cube(spec, u), sample_prior(spec, 10, np.random.default_rng(4)))


def test_sampler_determinism_and_n():
    spec = PriorSpec.for_space(BALL_STICK)
    np.testing.assert_array_equal(sample_prior(spec, 5, 3), sample_prior(spec, 5, 3))
    with pytest.raises(ValidationError):
        sample_prior(spec, 0)
