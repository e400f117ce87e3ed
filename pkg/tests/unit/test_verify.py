"""Unit tests for explicit constants and the decay, Harnack and functional audits."""

import math
from pathlib import Path

import mpmath
import numpy as np
import pytest

from fakedist.archive import read_csv
from fakedist.errors import DomainError, ValueRangeError
from fakedist.fake import EstimateAudit, FakeDistanceField, fake_distance
from fakedist.geom import RadialGrid, ScalarField, build_radial_grid
from fakedist.imcf import FlowResult
from fakedist.model import (
    CurvatureProfile,
    ModelManifold,
    flat_sobolev_constant,
    green_kernel_model,
    local_sobolev_constant,
    solve_warping,
)
from fakedist.psolve import SolveReport, green_kernel_numeric
from fakedist.verify import (
    Annulus,
    ConstantsRecord,
    audits_to_json,
    check_decay,
    check_functional_derivative,
    check_half_harnack,
    check_harnack_form,
    check_isoperimetric,
    check_kernel_flux,
    check_refinement_stability,
    check_unit_functionals,
    decay_constant,
    flux_functionals,
    functionals_table,
    half_harnack_constants,
    harnack_constant,
    harnack_exponent,
    harnack_exponent_fit,
    harnack_log_ratio,
    harnack_q_factor,
    kernel_flux,
    l1_decay_constant,
    moser_q0,
    write_functionals_csv,
)

FLAT_S = local_sobolev_constant(flat_sobolev_constant(3), 2.0, 3.0)


@pytest.fixture(scope="module")
def flat3() -> ModelManifold:
    return solve_warping(CurvatureProfile.constant(0.0), 3, 20.0)


@pytest.fixture(scope="module")
def grid(flat3: ModelManifold) -> RadialGrid:
    return build_radial_grid(flat3, 0.05, 5.0, 400, grading=1.01)


@pytest.fixture(scope="module")
def kernel(grid: RadialGrid) -> SolveReport:
    return green_kernel_numeric(grid, 2.0, exhaustion=[2.5, 5.0])


@pytest.fixture(scope="module")
def fd(kernel: SolveReport, flat3: ModelManifold) -> FakeDistanceField:
    return fake_distance(kernel, green_kernel_model(flat3, 2.0))


def _mp_decay(p: float, nu: float, s: float) -> mpmath.mpf:
    p, nu, s = mpmath.mpf(p), mpmath.mpf(nu), mpmath.mpf(s)
    base = 2**nu * p * (1 + p) ** p * (p / (p - 1)) ** (p - 1)
    return s ** (nu / p) * base ** ((nu - p) / p)


class TestDecayConstants:
    """Test cases for the decay constants."""

    def test_reference_value(self) -> None:
        """Test C_{2,3} = sqrt(288) for S = 1."""
        assert decay_constant(2.0, 3.0, 1.0) == pytest.approx(math.sqrt(288.0), rel=1e-12)

    @pytest.mark.parametrize(
        ("p", "nu", "s"), [(1.5, 3.0, 0.7), (2.0, 4.5, 2.3), (1.1, 2.0, 0.2), (3.0, 3.5, 1.0)]
    )
    def test_against_high_precision(self, p: float, nu: float, s: float) -> None:
        """Test the formula against mpmath."""
        assert decay_constant(p, nu, s) == pytest.approx(float(_mp_decay(p, nu, s)), rel=1e-12)

    def test_exponent_range(self) -> None:
        """Test that p >= nu is refused."""
        with pytest.raises(DomainError, match="1 < p < nu"):
            decay_constant(3.0, 3.0, 1.0)

    def test_sobolev_positive(self) -> None:
        """Test that a non-positive Sobolev constant is refused."""
        with pytest.raises(DomainError, match="positive"):
            decay_constant(2.0, 3.0, 0.0)

    def test_l1_constant(self) -> None:
        """Test S_1^m 2^(m^2 - 1)."""
        assert l1_decay_constant(2, 0.5) == pytest.approx(2.0)
        assert l1_decay_constant(3, 1.0) == pytest.approx(256.0)


class TestHarnackConstants:
    """Test cases for the Moser and Harnack constants."""

    def test_half_harnack_branches(self) -> None:
        """Test the three branches for p = 2, nu = 3."""
        assert half_harnack_constants(2.0, 3.0, 2.0) == pytest.approx(72.0)
        assert half_harnack_constants(2.0, 3.0, -1.0) == pytest.approx(32.0)
        assert half_harnack_constants(2.0, 3.0, 1.0) == pytest.approx(486.0)

    def test_half_harnack_high_precision(self) -> None:
        """Test the middle branch against mpmath."""
        p, nu = mpmath.mpf(1.7), mpmath.mpf(3.2)
        expected = 2**nu * 3**p * nu**nu / (p**p * (nu - p) ** (nu - p))

        assert half_harnack_constants(1.7, 3.2, 0.5) == pytest.approx(float(expected), rel=1e-12)

    def test_zero_exponent(self) -> None:
        """Test that q = 0 is refused."""
        with pytest.raises(DomainError, match="nonzero"):
            half_harnack_constants(2.0, 3.0, 0.0)

    def test_harnack_constant(self) -> None:
        """Test that the Harnack constant is the larger branch."""
        assert harnack_constant(2.0, 3.0) == pytest.approx(486.0)

    @pytest.mark.parametrize(
        ("p", "nu", "q"),
        [(2.0, 3.0, 1.0), (2.0, 3.0, 0.1), (1.5, 2.5, 0.3), (3.0, 4.0, 2.9), (1.2, 6.0, 0.05)],
    )
    def test_moser_start(self, p: float, nu: float, q: float) -> None:
        """Test that the iterates q0 k^i keep their distance from p - 1."""
        k = nu / (nu - p)
        q0 = moser_q0(p, nu, q)
        gap = (k - 1) * q / (2 * k)

        assert q / k < q0 <= q
        for i in range(80):
            assert abs(q0 * k**i - (p - 1)) >= gap - 1e-12

    def test_moser_start_trivial(self) -> None:
        """Test that q >= p and q < 0 start at q."""
        assert moser_q0(2.0, 3.0, 2.5) == 2.5
        assert moser_q0(2.0, 3.0, -0.5) == -0.5

    def test_q_factor(self) -> None:
        """Test both end points of the infimum over tau."""
        s = 1.0 / harnack_constant(2.0, 3.0)

        assert harnack_q_factor(2.0, 3.0, s, 1.0, 1.0) == pytest.approx(1.0)
        assert harnack_q_factor(2.0, 3.0, s, 2.0, 1.0) == pytest.approx(8.0)
        assert harnack_q_factor(2.0, 3.0, s, 2.0, 64.0) == pytest.approx(2.0**-9)

    def test_q_factor_needs_radius(self) -> None:
        """Test that a zero radius is refused."""
        with pytest.raises(DomainError, match="positive radius"):
            harnack_q_factor(2.0, 3.0, 1.0, 0.0, 1.0)

    def test_harnack_exponent(self) -> None:
        """Test log H = c2 P (|B_6R|/|B_2R|)^(1/p) Q^-2 p."""
        assert harnack_exponent(1.0, 2.0, 3.0, 16.0, 0.5) == pytest.approx(96.0)


class TestConstantsRecord:
    """Test cases for the constants record."""

    def test_derived_constants(self) -> None:
        """Test the derived decay and Harnack constants."""
        record = ConstantsRecord(p=2.0, nu=3.0, sobolev=1.0)

        assert record.decay == pytest.approx(math.sqrt(288.0))
        assert record.harnack == pytest.approx(486.0)
        assert record.half_harnack(-1.0) == pytest.approx(32.0)

    def test_to_dict(self) -> None:
        """Test the JSON form of the record."""
        data = ConstantsRecord(p=2.0, nu=3.0, sobolev=1.0, radius=1.0).to_dict()

        assert data["radius"] == 1.0
        assert data["poincare"] is None
        assert data["half_harnack"] == {"sub_small_q": 486.0, "sub_large_q": 72.0, "super": 32.0}

    def test_nonpositive_input(self) -> None:
        """Test that non-positive inputs are refused."""
        with pytest.raises(DomainError, match="sobolev"):
            ConstantsRecord(p=2.0, nu=3.0, sobolev=-1.0)

    def test_q_factor_needs_inputs(self) -> None:
        """Test that the factor needs the radius and the ball volume."""
        with pytest.raises(DomainError, match="radius"):
            ConstantsRecord(p=2.0, nu=3.0, sobolev=1.0).q_factor()


class TestDecayAudit:
    """Test cases for the decay audit."""

    def test_flat_kernel(self, kernel: SolveReport) -> None:
        """Test that 1 / (4 pi r) obeys the decay bound with the Euclidean constant."""
        audit = check_decay(kernel, FLAT_S)

        assert audit.passed
        assert audit.name == "decay_one"
        assert audit.context["margin"] > 0

    def test_volume_weight(self, kernel: SolveReport) -> None:
        """Test the volume-weighted form on R^3."""
        audit = check_decay(kernel, FLAT_S, weight="volume")

        assert audit.passed
        assert audit.name == "decay_volume"

    def test_small_constant_fails(self, kernel: SolveReport) -> None:
        """Test that a far too small Sobolev constant is detected."""
        assert not check_decay(kernel, 1e-6).passed


class TestHalfHarnack:
    """Test cases for the half-Harnack audits."""

    def test_subsolution(self, kernel: SolveReport) -> None:
        """Test the sup bound for the kernel as a subsolution."""
        constants = ConstantsRecord(p=2.0, nu=3.0, sobolev=FLAT_S)

        audit = check_half_harnack(kernel.field, "sub", Annulus(1.0, 2.0, 0.5), constants, 1.0)

        assert audit.passed
        assert audit.name == "half_harnack_sub"
        assert audit.context["q0"] == pytest.approx(2.0 / 3.0)

    def test_supersolution(self, kernel: SolveReport) -> None:
        """Test the inf bound for the kernel as a supersolution."""
        constants = ConstantsRecord(p=2.0, nu=3.0, sobolev=FLAT_S)

        audit = check_half_harnack(kernel.field, "super", Annulus(1.0, 2.0, 0.5), constants, -1.0)

        assert audit.passed
        assert audit.name == "half_harnack_super"

    def test_sign_mismatch(self, kernel: SolveReport) -> None:
        """Test that a subsolution audit needs q > 0."""
        constants = ConstantsRecord(p=2.0, nu=3.0, sobolev=FLAT_S)

        with pytest.raises(DomainError, match="q > 0"):
            check_half_harnack(kernel.field, "sub", Annulus(1.0, 2.0, 0.5), constants, -1.0)

    def test_annulus_outside(self, kernel: SolveReport) -> None:
        """Test that the neighbourhood must stay inside the domain."""
        constants = ConstantsRecord(p=2.0, nu=3.0, sobolev=FLAT_S)

        with pytest.raises(DomainError, match="does not fit"):
            check_half_harnack(kernel.field, "sub", Annulus(0.04, 1.0, 0.01), constants, 1.0)


class TestHarnackForm:
    """Test cases for the fitted Harnack exponent."""

    def test_exact_fit(self) -> None:
        """Test that exact data are recovered."""
        p = [2.0, 1.5, 1.25]
        y = [2.0 / (q - 1) + 0.5 for q in p]

        c, d = harnack_exponent_fit(p, y)

        assert c == pytest.approx(2.0)
        assert d == pytest.approx(0.5, abs=1e-10)

    def test_log_ratio(self, grid: RadialGrid) -> None:
        """Test log(sup/inf) of exp(-r) over a ball."""
        field = ScalarField(grid, np.exp(-grid.r_field))
        center = int(np.argmin(np.abs(grid.r_field - 2.0)))
        r0 = grid.r_field[center]
        inside = np.abs(grid.r_field - r0) <= 0.5
        expected = grid.r_field[inside].max() - grid.r_field[inside].min()

        assert harnack_log_ratio(field, center, 0.5) == pytest.approx(expected)

    def test_form_passes(self, grid: RadialGrid) -> None:
        """Test kernels whose log ratio is exactly c / (p - 1)."""
        reports = [
            SolveReport(ScalarField(grid, np.exp(-grid.r_field / (p - 1))), p, 0.0, 0.0, 0.0)
            for p in (2.0, 1.5, 1.25)
        ]
        center = int(np.argmin(np.abs(grid.r_field - 2.0)))

        audit = check_harnack_form(reports, center, 0.5)

        assert audit.passed
        assert audit.name == "harnack_form"

    def test_needs_three_exponents(self, kernel: SolveReport) -> None:
        """Test that two kernels are not enough."""
        with pytest.raises(DomainError, match="at least 3"):
            check_harnack_form([kernel, kernel], 10, 0.5)

    def test_refinement_stability(self) -> None:
        """Test the refinement identity."""
        assert check_refinement_stability("c", 1.0, 1.1).passed
        assert check_refinement_stability("c", 1.0, 1.1).name == "c_refinement"
        assert not check_refinement_stability("c", 1.0, 1.5).passed


class TestFluxFunctionals:
    """Test cases for the kernel flux and the functionals A and V."""

    def test_kernel_flux(self, kernel: SolveReport) -> None:
        """Test unit flux through a level set in the middle of the domain."""
        level = 1.0 / (4.0 * math.pi * 2.0)

        assert kernel_flux(kernel, level) == pytest.approx(1.0, rel=0.01)

    def test_kernel_flux_audit(self, kernel: SolveReport) -> None:
        """Test the flux audit on mid-range levels."""
        audit = check_kernel_flux(kernel)

        assert audit.passed
        assert len(audit.context["fluxes"]) == 10

    def test_kernel_flux_is_conserved(self, kernel: SolveReport) -> None:
        """Test that the flux is the same through every level set, not only near one."""
        fluxes = check_kernel_flux(kernel, levels=12).context["fluxes"]

        np.testing.assert_allclose(fluxes, 1.0, rtol=2e-3)

    def test_unit_functionals(self, fd: FakeDistanceField) -> None:
        """Test A_1 = V_1 = 1 on R^3."""
        audits = check_unit_functionals(fd)

        assert [a.name for a in audits] == ["unit_functional_A1", "unit_functional_V1"]
        assert all(a.passed for a in audits)

    def test_functional_derivative(self, fd: FakeDistanceField) -> None:
        """Test V_u' = (v_h / V_h)(A_u - V_u) for u = rho."""
        audit = check_functional_derivative(fd, fd.rho, [1.0, 2.0, 3.0])

        assert audit.passed
        assert audit.name == "functional_derivative"
        assert audit.rhs == 0.0
        assert audit.location in (1.0, 2.0, 3.0)
        assert math.isfinite(audit.context["expected"])

    def test_level_outside_range(self, fd: FakeDistanceField) -> None:
        """Test that levels outside the range of rho are refused."""
        ones = ScalarField(fd.domain, np.ones(fd.domain.n_vertices))

        with pytest.raises(ValueRangeError, match="outside"):
            flux_functionals(fd, ones, 50.0)

    def test_table(self, fd: FakeDistanceField, tmp_path: Path) -> None:
        """Test the functionals table and its CSV file."""
        table = functionals_table(fd, [1.0, 2.0])

        assert list(table) == ["t", "A1", "V1", "perimeter", "v_h", "volume", "V_h"]
        np.testing.assert_allclose(table["perimeter"], table["v_h"], rtol=0.02)
        path = write_functionals_csv(tmp_path / "functionals.csv", table)
        assert list(read_csv(path)) == list(table)


class TestIsoperimetric:
    """Test cases for the level sets of the flow."""

    def test_flat_flow(self, grid: RadialGrid, flat3: ModelManifold) -> None:
        """Test that rho1 = r passes all isoperimetric audits."""
        rho1 = ScalarField(grid, grid.r_field, "rho1")
        w = ScalarField(grid, flat3.log_volume(grid.r_field), "w")
        fr = FlowResult(rho1, w, [1.5], [], [], "point-source", flat3)

        audits = check_isoperimetric(fr)

        assert [a.name for a in audits] == [
            "perimeter_identity",
            "volume_lower_bound",
            "small_level_perimeter_trend",
        ]
        assert all(a.passed for a in audits)
        assert not audits[2].hard


class TestAuditsToJson:
    """Test cases for the audit summary."""

    def test_summary(self) -> None:
        """Test that failures are split into hard and soft."""
        audits = [
            EstimateAudit.inequality("ok", 0.0, 1.0, 0.0),
            EstimateAudit.inequality("hard", 2.0, 1.0, 0.0),
            EstimateAudit.inequality("soft", 2.0, 1.0, 0.0, hard=False),
        ]

        summary = audits_to_json(audits)

        assert summary["passed"] is False
        assert summary["hard_failures"] == ["hard"]
        assert summary["soft_failures"] == ["soft"]
        assert len(summary["audits"]) == 3

    def test_all_passed(self) -> None:
        """Test the summary of passing audits."""
        summary = audits_to_json([EstimateAudit.identity("ok", 1.0, 1.0, 0.01)])

        assert summary["passed"] is True
        assert summary["hard_failures"] == []
