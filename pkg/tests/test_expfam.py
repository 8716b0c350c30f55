import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from hbcmf import expfam
from hbcmf.exceptions import DomainError, NumericalError
from hbcmf.expfam import Family

FAMILIES = list(Family)


class TestParse:
    @pytest.mark.parametrize("name", ["bernoulli", "Gaussian", "POISSON"])
    def test_case_insensitive(self, name):
        assert Family.parse(name).value == name.lower()

    def test_unknown(self):
        with pytest.raises(ValueError):
            Family.parse("gamma")


class TestLogPartition:
    def test_bernoulli_zero(self):
        assert expfam.log_partition(Family.BERNOULLI, 0.0) == pytest.approx(math.log(2), rel=1e-15)

    def test_gaussian(self):
        assert expfam.log_partition(Family.GAUSSIAN, 3.0) == 4.5

    def test_bernoulli_far_negative_tail(self):
        # log(1 + e^-50) evaluated with exact rational arithmetic on e^-50
        exact = float(Fraction(math.exp(-50)) - Fraction(math.exp(-50)) ** 2 / 2)
        got = expfam.log_partition(Family.BERNOULLI, -50.0)
        assert got > 0
        assert got == pytest.approx(exact, rel=1e-12)
        assert got == pytest.approx(1.9287498479639178e-22, rel=1e-12)

    def test_bernoulli_no_overflow(self):
        assert expfam.log_partition(Family.BERNOULLI, 800.0) == 800.0

    def test_poisson_cap(self):
        assert np.isfinite(expfam.log_partition(Family.POISSON, 700.0))
        with pytest.raises(NumericalError):
            expfam.log_partition(Family.POISSON, 700.5)

    def test_vectorised(self):
        out = expfam.log_partition(Family.GAUSSIAN, np.array([1.0, -2.0]))
        np.testing.assert_array_equal(out, [0.5, 2.0])


class TestMeanLink:
    def test_values(self):
        assert expfam.mean_link(Family.BERNOULLI, 0.0) == 0.5
        assert expfam.mean_link(Family.BERNOULLI, math.log(3)) == pytest.approx(0.75, rel=1e-15)
        assert expfam.mean_link(Family.GAUSSIAN, -2.5) == -2.5
        assert expfam.mean_link(Family.POISSON, 1.0) == pytest.approx(math.e)


class TestLinkDerivative:
    def test_values(self):
        assert expfam.link_derivative(Family.BERNOULLI, 0.0) == 0.25
        assert expfam.link_derivative(Family.GAUSSIAN, 17.0) == 1.0
        s = 1.0 / (1.0 + math.exp(-10.0))
        assert expfam.link_derivative(Family.BERNOULLI, 10.0) == pytest.approx(s * (1 - s), rel=1e-12)
        assert expfam.link_derivative(Family.BERNOULLI, 10.0) == pytest.approx(4.5396e-5, rel=1e-4)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_nonnegative(self, family):
        theta = np.linspace(-30, 30, 601)
        assert np.all(expfam.link_derivative(family, theta) >= 0)


class TestFiniteDifferences:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_derivative_chain(self, family):
        theta = np.linspace(-30, 30, 241)
        h = 1e-5
        fd_mean = (expfam.log_partition(family, theta + h) - expfam.log_partition(family, theta - h)) / (2 * h)
        mean = expfam.mean_link(family, theta)
        # absolute floor where the mean itself is tiny
        np.testing.assert_allclose(fd_mean, mean, rtol=1e-6, atol=1e-10)
        fd_var = (expfam.mean_link(family, theta + h) - expfam.mean_link(family, theta - h)) / (2 * h)
        np.testing.assert_allclose(fd_var, expfam.link_derivative(family, theta), rtol=1e-5, atol=1e-10)


class TestLogDensity:
    def test_values(self):
        assert expfam.log_density(Family.BERNOULLI, 1, 0.0) == pytest.approx(-math.log(2))
        assert expfam.log_density(Family.GAUSSIAN, 0.0, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert expfam.log_density(Family.POISSON, 2, 0.0) == pytest.approx(-1 - math.log(2))

    @pytest.mark.parametrize("family,x", [(Family.BERNOULLI, 2.0), (Family.BERNOULLI, 0.5),
                                          (Family.POISSON, -1.0), (Family.POISSON, 1.5),
                                          (Family.GAUSSIAN, float("inf"))])
    def test_inadmissible(self, family, x):
        with pytest.raises(DomainError):
            expfam.log_density(family, x, 0.0)

    @given(st.floats(-40, 40))
    def test_bernoulli_normalized(self, theta):
        total = math.exp(expfam.log_density(Family.BERNOULLI, 1, theta)) + \
            math.exp(expfam.log_density(Family.BERNOULLI, 0, theta))
        assert abs(total - 1.0) < 1e-12

    @given(st.floats(-20, 20))
    @settings(max_examples=25)
    def test_gaussian_integrates_to_one(self, theta):
        x = np.linspace(theta - 10, theta + 10, 20001)
        dens = np.exp(expfam.log_density(Family.GAUSSIAN, x, theta))
        assert abs(trapezoid(dens, x) - 1.0) < 1e-6

    def test_poisson_normalized(self):
        x = np.arange(0, 80.0)
        total = np.exp(expfam.log_density(Family.POISSON, x, math.log(7.0))).sum()
        assert total == pytest.approx(1.0, abs=1e-12)
