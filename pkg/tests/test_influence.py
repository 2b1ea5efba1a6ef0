import numpy as np
import pytest

from smallarea.influence import (HUBER, IDENTITY, SIGN, PsiSpec, expected_square,
                                 expected_square_quadrature, psi, psi_deriv)

HUB = PsiSpec(HUBER, 1.345, 0.5)


def test_psi_huber_clips_untilted():
    assert psi(HUB, 2.0) == pytest.approx(1.345)
    assert psi(HUB, -2.0) == pytest.approx(-1.345)
    assert psi(HUB, 0.5) == pytest.approx(0.5)


def test_psi_tilt_factor():
    spec = PsiSpec(HUBER, 1.345, 0.7)
    assert psi(spec, 2.0) == pytest.approx(2 * 1.345 * 0.7)
    assert psi(spec, -2.0) == pytest.approx(-2 * 1.345 * 0.3)


def test_psi_identity_untilted():
    assert psi(PsiSpec(IDENTITY, tau=0.5), -0.4) == pytest.approx(-0.4)


def test_psi_sign():
    spec = PsiSpec(SIGN, tau=0.5)
    assert psi(spec, 3.0) == 1.0
    assert psi(spec, -0.1) == -1.0
    assert psi(spec, 0.0) == 0.0


def test_psi_deriv_examples():
    assert psi_deriv(HUB, 0.5) == pytest.approx(1.0)
    assert psi_deriv(HUB, 3.0) == 0.0
    assert psi_deriv(PsiSpec(IDENTITY, tau=0.7), -1.0) == pytest.approx(0.6)


def test_psi_deriv_left_limit_at_kinks():
    # just inside the linear zone from the left at +c; flat from the left at -c
    assert psi_deriv(HUB, 1.345) == pytest.approx(1.0)
    assert psi_deriv(HUB, -1.345) == 0.0
    # tilt switch at zero takes the r <= 0 branch
    assert psi_deriv(PsiSpec(HUBER, 1.345, 0.7), 0.0) == pytest.approx(2 * 0.3)


@pytest.mark.parametrize("base,tau", [(HUBER, 0.5), (HUBER, 0.7), (HUBER, 0.13),
                                      (IDENTITY, 0.5), (IDENTITY, 0.31),
                                      (SIGN, 0.5), (SIGN, 0.62)])
def test_expected_square_matches_quadrature(base, tau):
    spec = PsiSpec(base, 1.345, tau)
    closed = expected_square(spec)
    quad = expected_square_quadrature(spec)
    assert closed == pytest.approx(quad, rel=1e-10)


def test_expected_square_known_values():
    assert expected_square(PsiSpec(IDENTITY, tau=0.5)) == pytest.approx(1.0)
    assert expected_square(PsiSpec(SIGN, tau=0.5)) == pytest.approx(1.0)
    # clipping vanishes as c grows
    assert expected_square(PsiSpec(HUBER, 50.0, 0.5)) == pytest.approx(1.0, abs=1e-12)


def test_tilt_reduces_to_base_at_half():
    rng = np.random.default_rng(1)
    r = rng.normal(size=200) * 3
    for base in (HUBER, IDENTITY, SIGN):
        spec = PsiSpec(base, 1.345, 0.5)
        expected = np.clip(r, -1.345, 1.345) if base == HUBER else \
            (r if base == IDENTITY else np.sign(r))
        np.testing.assert_allclose(psi(spec, r), expected, atol=1e-15)


def test_monotone_nondecreasing():
    r = np.linspace(-6, 6, 2001)
    for base in (HUBER, IDENTITY, SIGN):
        for tau in (0.2, 0.5, 0.8):
            vals = psi(PsiSpec(base, 1.345, tau), r)
            assert np.all(np.diff(vals) >= -1e-15)


def test_skew_symmetry_untilted():
    r = np.linspace(0.01, 5, 100)
    for base in (HUBER, IDENTITY, SIGN):
        spec = PsiSpec(base, 1.345, 0.5)
        np.testing.assert_allclose(psi(spec, -r), -psi(spec, r), atol=1e-15)


def test_boundedness():
    rng = np.random.default_rng(2)
    r = rng.normal(size=500) * 10
    for tau in (0.05, 0.5, 0.95):
        vals = psi(PsiSpec(HUBER, 1.345, tau), r)
        assert np.all(np.abs(vals) <= 2 * 1.345 + 1e-12)


def test_deriv_matches_finite_differences():
    eps = 1e-7
    rng = np.random.default_rng(3)
    for base in (HUBER, IDENTITY):
        for tau in (0.3, 0.5, 0.8):
            spec = PsiSpec(base, 1.345, tau)
            r = rng.uniform(-4, 4, size=300)
            # keep clear of the kinks
            r = r[(np.abs(np.abs(r) - 1.345) > 1e-3) & (np.abs(r) > 1e-3)]
            fd = (psi(spec, r + eps) - psi(spec, r - eps)) / (2 * eps)
            np.testing.assert_allclose(psi_deriv(spec, r), fd, atol=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        PsiSpec("tukey", 1.345, 0.5)
    with pytest.raises(ValueError):
        PsiSpec(HUBER, -1.0, 0.5)
    with pytest.raises(ValueError):
        PsiSpec(HUBER, 1.345, 0.0)
    with pytest.raises(ValueError):
        PsiSpec(HUBER, 1.345, 1.0)
