"""Unit tests for model manifolds and their Green kernels."""

import math

import numpy as np
import pytest

from fakedist.errors import (
    DivergentKernelError,
    DomainError,
    InvalidProfileError,
    ValueRangeError,
)
from fakedist.model import (
    CurvatureProfile,
    ModelManifold,
    ball_volume,
    curvature_integral,
    flat_sobolev_constant,
    green_kernel_model,
    invert_kernel,
    local_sobolev_constant,
    log_kernel_derivative,
    model_table,
    mu_euclidean,
    nonparabolic,
    solve_warping,
    sphere_area,
    sphere_volume,
    sturm_dominates,
    volume_log_derivative_decreasing,
)


@pytest.fixture(scope="module")
def flat2() -> ModelManifold:
    return solve_warping(CurvatureProfile.constant(0.0), 2, 20.0)


@pytest.fixture(scope="module")
def flat3() -> ModelManifold:
    return solve_warping(CurvatureProfile.constant(0.0), 3, 20.0)


@pytest.fixture(scope="module")
def hyperbolic3() -> ModelManifold:
    return solve_warping(CurvatureProfile.constant(1.0), 3, 20.0)


class TestCurvatureProfile:
    """Test cases for curvature profiles."""

    def test_constant_profile(self) -> None:
        """Test that a constant profile evaluates to its value."""
        profile = CurvatureProfile.constant(2.0)

        np.testing.assert_allclose(profile(np.array([0.5, 3.0])), [2.0, 2.0])
        assert profile.at_infinity() == 2.0

    def test_negative_profile_rejected(self) -> None:
        """Test that negative constants need an explicit opt-in."""
        with pytest.raises(InvalidProfileError, match="negative"):
            CurvatureProfile.constant(-1.0)

        assert CurvatureProfile.constant(-1.0, allow_negative=True).kappa2 == -1.0

    def test_increasing_table_rejected(self) -> None:
        """Test that an increasing profile fails validation."""
        profile = CurvatureProfile.table([0.0, 1.0, 2.0], [0.0, 0.5, 1.0])

        with pytest.raises(InvalidProfileError, match="increases"):
            solve_warping(profile, 2, 2.0, 128)

    def test_table_needs_increasing_abscissae(self) -> None:
        """Test that table abscissae must increase."""
        with pytest.raises(InvalidProfileError, match="strictly increasing"):
            CurvatureProfile.table([0.0, 0.0, 1.0], [1.0, 1.0, 1.0])

    def test_inverse_square_pole_exponent(self) -> None:
        """Test the pole exponent (1 + sqrt(1 + 4 kappa^2)) / 2."""
        assert CurvatureProfile.inverse_square(math.sqrt(2.0)).pole_exponent == pytest.approx(2.0)
        assert CurvatureProfile.inverse_square(0.0).pole_exponent == pytest.approx(1.0)

    def test_to_dict(self) -> None:
        """Test the JSON form of the profiles."""
        assert CurvatureProfile.constant(1.0).to_dict() == {"kind": "constant", "kappa2": 1.0}
        assert CurvatureProfile.inverse_square(0.5).to_dict() == {
            "kind": "inverse_square",
            "kappa": 0.5,
        }

    def test_curvature_integral(self) -> None:
        """Test i_H for flat, hyperbolic and compactly supported profiles."""
        assert curvature_integral(CurvatureProfile.constant(0.0)) == 0.0
        assert math.isinf(curvature_integral(CurvatureProfile.constant(1.0)))
        table = CurvatureProfile.table([0.0, 0.5, 1.0, 2.0], [1.0, 0.5, 0.0, 0.0])

        assert curvature_integral(table) == pytest.approx(0.125)

    def test_curvature_integral_of_closures(self) -> None:
        """Test i_H = 1/2 for H = (1 + t)^-3 and divergence for a positive limit."""
        decaying = CurvatureProfile.closure(lambda t: (1.0 + t) ** -3.0)
        positive = CurvatureProfile.closure(lambda t: np.ones_like(t))

        assert curvature_integral(decaying) == pytest.approx(0.5, rel=1e-8)
        assert math.isinf(curvature_integral(positive))


class TestSolveWarping:
    """Test cases for the warping function ODE."""

    def test_flat_model(self, flat2: ModelManifold) -> None:
        """Test h(t) = t on flat space."""
        t = np.array([0.5, 1.0, 7.0])

        np.testing.assert_allclose(flat2.h_at(t), t, rtol=1e-10)
        np.testing.assert_allclose(flat2.dh_at(t), 1.0, rtol=1e-10)

    def test_flat_model_tail(self) -> None:
        """Test that a complete flat model fits its tail and extends h beyond the table."""
        mm = solve_warping(CurvatureProfile.constant(0.0), 3, 10.0)

        assert mm.tail is not None
        assert mm.tail.regime == "polynomial"
        assert mm.tail.b == pytest.approx(2.0)
        assert float(mm.h_at(np.array([15.0]))[0]) == pytest.approx(15.0, rel=1e-8)

    def test_hyperbolic_model(self) -> None:
        """Test h(t) = sinh t for H = 1."""
        mm = solve_warping(CurvatureProfile.constant(1.0), 2, 5.0)

        assert float(mm.h_at(np.array([1.0]))[0]) == pytest.approx(1.175201, rel=1e-6)

    def test_inverse_square_model(self) -> None:
        """Test the closed form h = t^kappa'."""
        mm = solve_warping(CurvatureProfile.inverse_square(math.sqrt(2.0)), 2, 5.0)

        assert float(mm.h_at(np.array([3.0]))[0]) == pytest.approx(9.0)

    def test_spherical_model_has_finite_radius(self) -> None:
        """Test that H = -1 stops the table at the first zero of h."""
        mm = solve_warping(CurvatureProfile.constant(-1.0, allow_negative=True), 2, 5.0)

        assert mm.r_inf == pytest.approx(math.pi, rel=1e-6)
        assert not nonparabolic(mm, 1.5)

    def test_bad_dimension(self) -> None:
        """Test that m < 2 is refused."""
        with pytest.raises(DomainError, match="at least 2"):
            solve_warping(CurvatureProfile.constant(0.0), 1, 5.0)

    def test_bad_table_length(self) -> None:
        """Test that a non-positive t_max is refused."""
        with pytest.raises(DomainError, match="t_max"):
            solve_warping(CurvatureProfile.constant(0.0), 2, 0.0)

    def test_tail_beyond_table(self, hyperbolic3: ModelManifold) -> None:
        """Test that h continues past t_max through the tail fit."""
        t = np.array([25.0])

        assert float(hyperbolic3.log_volume(t)[0]) == pytest.approx(
            math.log(4 * math.pi) + 2 * math.log(math.sinh(25.0)), rel=1e-4
        )

    def test_negative_radius(self, flat2: ModelManifold) -> None:
        """Test that negative radii are refused."""
        with pytest.raises(ValueRangeError, match="negative"):
            flat2.h_at(np.array([-1.0]))


class TestVolumes:
    """Test cases for sphere and ball volumes."""

    def test_sphere_area(self) -> None:
        """Test the unit sphere volumes."""
        assert sphere_area(2) == pytest.approx(2 * math.pi)
        assert sphere_area(3) == pytest.approx(4 * math.pi)

    def test_flat_volumes(self, flat2: ModelManifold, flat3: ModelManifold) -> None:
        """Test v and V of flat spaces."""
        assert float(sphere_volume(flat2, [1.0])[0]) == pytest.approx(2 * math.pi)
        assert float(ball_volume(flat2, [1.0])[0]) == pytest.approx(math.pi, rel=1e-8)
        assert float(sphere_volume(flat3, [2.0])[0]) == pytest.approx(16 * math.pi)

    def test_hyperbolic_sphere_volume(self, hyperbolic3: ModelManifold) -> None:
        """Test v_h(1) = 4 pi sinh^2 1."""
        assert float(sphere_volume(hyperbolic3, [1.0])[0]) == pytest.approx(
            4 * math.pi * math.sinh(1.0) ** 2, rel=1e-8
        )

    def test_inverse_volume(self, hyperbolic3: ModelManifold) -> None:
        """Test that inverse_volume undoes sphere_volume."""
        t = np.array([0.3, 1.0, 4.0])

        np.testing.assert_allclose(
            hyperbolic3.inverse_volume(sphere_volume(hyperbolic3, t)), t, rtol=1e-8
        )

    def test_model_table_columns(self, flat3: ModelManifold) -> None:
        """Test the columns of a model table."""
        table = model_table(flat3, green_kernel_model(flat3, 2.0), np.array([1.0, 2.0]))

        assert list(table) == ["t", "h", "v_h", "V_h", "G"]
        np.testing.assert_allclose(table["G"], [1 / (4 * math.pi), 1 / (8 * math.pi)], rtol=1e-6)


class TestComparison:
    """Test cases for comparison predicates."""

    def test_sturm_comparison(self, flat3: ModelManifold, hyperbolic3: ModelManifold) -> None:
        """Test that larger curvature gives larger h."""
        assert sturm_dominates(hyperbolic3, flat3)
        assert not sturm_dominates(flat3, hyperbolic3)

    def test_volume_log_derivative_decreasing(self) -> None:
        """Test that v'/v = 2 coth t decreases."""
        mm = solve_warping(CurvatureProfile.constant(1.0), 3, 5.0)

        assert volume_log_derivative_decreasing(mm)


class TestNonparabolicity:
    """Test cases for the integrability criterion."""

    def test_flat_space(self, flat2: ModelManifold, flat3: ModelManifold) -> None:
        """Test that R^m is non-parabolic exactly for p < m."""
        assert nonparabolic(flat3, 2.0)
        assert nonparabolic(flat2, 1.5)
        assert not nonparabolic(flat2, 2.0)

    def test_hyperbolic_space(self) -> None:
        """Test that hyperbolic space is non-parabolic for p = m."""
        mm = solve_warping(CurvatureProfile.constant(1.0), 2, 20.0)

        assert nonparabolic(mm, 2.0)

    def test_p_must_exceed_one(self, flat3: ModelManifold) -> None:
        """Test that p <= 1 is refused."""
        with pytest.raises(DomainError, match="exceed 1"):
            nonparabolic(flat3, 1.0)


class TestModelKernel:
    """Test cases for model Green kernels."""

    def test_mu_euclidean(self) -> None:
        """Test the Euclidean fundamental solution."""
        assert float(mu_euclidean(3, 2.0, 1.0)) == pytest.approx(0.0795775, rel=1e-6)
        assert float(mu_euclidean(2, 1.5, 2.0)) == pytest.approx(0.0126651, rel=1e-5)

    def test_mu_needs_positive_radius(self) -> None:
        """Test that mu is refused at r = 0."""
        with pytest.raises(DomainError, match="r > 0"):
            mu_euclidean(3, 2.0, 0.0)

    def test_flat_kernel(self, flat3: ModelManifold) -> None:
        """Test G = 1 / (4 pi r) on R^3 for p = 2."""
        kernel = green_kernel_model(flat3, 2.0)
        t = np.array([0.01, 1.0, 10.0, 30.0])

        np.testing.assert_allclose(kernel.value(t), 1 / (4 * math.pi * t), rtol=1e-6)

    def test_flat_kernel_other_exponent(self, flat2: ModelManifold) -> None:
        """Test that the flat kernel equals mu for p < m."""
        kernel = green_kernel_model(flat2, 1.5)
        t = np.array([0.5, 2.0])

        np.testing.assert_allclose(kernel.value(t), mu_euclidean(2, 1.5, t), rtol=1e-6)

    def test_hyperbolic_kernel(self, hyperbolic3: ModelManifold) -> None:
        """Test G = (coth r - 1) / (4 pi) on hyperbolic 3-space."""
        kernel = green_kernel_model(hyperbolic3, 2.0)

        expected = (1.0 / math.tanh(1.0) - 1.0) / (4.0 * math.pi)

        assert float(kernel.value(np.array([1.0]))[0]) == pytest.approx(expected, rel=1e-5)

    def test_parabolic_kernel(self, flat2: ModelManifold) -> None:
        """Test that the kernel of R^2 for p = 2 does not exist."""
        with pytest.raises(DivergentKernelError, match="parabolic"):
            green_kernel_model(flat2, 2.0)

    def test_p_above_dimension(self, flat2: ModelManifold) -> None:
        """Test that p > m is refused."""
        with pytest.raises(DomainError, match="outside"):
            green_kernel_model(flat2, 2.5)

    def test_truncated_kernel_vanishes_at_radius(self, flat3: ModelManifold) -> None:
        """Test that G_R(R) = 0 and G_R = G - G(R)."""
        full = green_kernel_model(flat3, 2.0)
        truncated = green_kernel_model(flat3, 2.0, 5.0)
        t = np.array([1.0, 2.0])

        np.testing.assert_allclose(
            truncated.value(t), full.value(t) - full.value(np.array([5.0])), rtol=1e-6
        )

    def test_inversion_roundtrip(self, hyperbolic3: ModelManifold) -> None:
        """Test that invert_kernel undoes the kernel, including the tail."""
        kernel = green_kernel_model(hyperbolic3, 1.5)
        t = np.array([1e-3, 0.5, 3.0, 15.0, 25.0])

        np.testing.assert_allclose(invert_kernel(kernel, kernel.value(t)), t, rtol=1e-7)

    def test_inversion_flags_tail(self, hyperbolic3: ModelManifold) -> None:
        """Test that radii past the table are flagged."""
        kernel = green_kernel_model(hyperbolic3, 2.0)

        _, flags = invert_kernel(kernel, kernel.value(np.array([1.0, 25.0])), return_flags=True)

        assert flags.tolist() == [False, True]

    def test_inversion_rejects_nonpositive(self, flat3: ModelManifold) -> None:
        """Test that zero kernel values cannot be inverted."""
        with pytest.raises(ValueRangeError, match="positive"):
            invert_kernel(green_kernel_model(flat3, 2.0), np.array([0.0]))

    def test_log_derivative(self, flat3: ModelManifold) -> None:
        """Test chi(t) = 1/t for G = 1 / (4 pi t)."""
        chi = log_kernel_derivative(green_kernel_model(flat3, 2.0), np.array([1.0, 4.0]))

        np.testing.assert_allclose(chi, [1.0, 0.25], rtol=1e-6)


class TestSobolevConstants:
    """Test cases for Sobolev constants."""

    def test_flat_constant(self) -> None:
        """Test the isoperimetric constant of R^2."""
        assert flat_sobolev_constant(2) == pytest.approx(1 / (2 * math.sqrt(math.pi)))

    def test_local_constant_at_one(self) -> None:
        """Test that p = 1 returns the L1 constant."""
        assert local_sobolev_constant(0.3, 1.0, 3.0) == pytest.approx(0.3)

    def test_local_constant_range(self) -> None:
        """Test that p >= nu is refused."""
        with pytest.raises(DomainError, match="outside"):
            local_sobolev_constant(0.3, 3.0, 3.0)
