"""Fake distance rho_p and the audits of its identities and gradient bounds.

rho_p is defined vertexwise by G^h(rho_p) = G, where G is a numeric Green
kernel and G^h the kernel of a comparison model with the same p.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Literal, NamedTuple

import numpy as np
from numpy.typing import NDArray

from fakedist.config import settings
from fakedist.errors import DomainError, ValueRangeError
from fakedist.geom import OUTER_TAG, POLE_TAG, DiscreteDomain, ScalarField
from fakedist.model import (
    CurvatureProfile,
    FloatArray,
    ModelKernel,
    ModelManifold,
    green_kernel_model,
    invert_kernel,
    solve_warping,
)
from fakedist.psolve import (
    PSolveConfig,
    SolveReport,
    energy_gradient,
    hat_gradient_magnitudes,
    kernel_collar_value,
)

logger = logging.getLogger(__name__)

AuditKind = Literal["inequality", "identity"]


@dataclass
class EstimateAudit:
    """One inequality or identity, measured."""

    name: str
    lhs: float
    rhs: float
    tolerance: float
    passed: bool
    kind: AuditKind = "inequality"
    hard: bool = True
    location: Any = None
    context: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def inequality(
        cls,
        name: str,
        lhs: float,
        rhs: float,
        tolerance: float,
        hard: bool = True,
        location: Any = None,
        **context: Any,
    ) -> "EstimateAudit":
        """Audit of lhs <= rhs + tolerance."""
        passed = bool(np.isfinite(lhs) and lhs <= rhs + tolerance)
        return cls(
            name,
            float(lhs),
            float(rhs),
            float(tolerance),
            passed,
            kind="inequality",
            hard=hard,
            location=location,
            context=context,
        )

    @classmethod
    def identity(
        cls,
        name: str,
        lhs: float,
        rhs: float,
        rtol: float,
        hard: bool = True,
        location: Any = None,
        **context: Any,
    ) -> "EstimateAudit":
        """Audit of |lhs - rhs| <= rtol |rhs|."""
        tolerance = rtol * abs(rhs)
        passed = bool(np.isfinite(lhs) and abs(lhs - rhs) <= tolerance)
        return cls(
            name,
            float(lhs),
            float(rhs),
            float(tolerance),
            passed,
            kind="identity",
            hard=hard,
            location=location,
            context=context,
        )

    def __bool__(self) -> bool:
        return self.passed

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "tol": self.tolerance,
            "pass": self.passed,
            "hard": self.hard,
            "location_of_max": self.location,
            "context": self.context,
        }


def audit_tolerance(
    h: float, tol_grad: float, c1: float | None = None, c2: float | None = None
) -> float:
    """Discretization budget c1 h + c2 tol_grad."""
    c1 = settings.audit_c1 if c1 is None else c1
    c2 = settings.audit_c2 if c2 is None else c2
    return c1 * h + c2 * tol_grad


@dataclass
class FakeDistanceField:
    rho: ScalarField
    p: float
    model: ModelKernel
    source_kernel: SolveReport
    tail_flags: NDArray[np.bool_] | None = None

    @property
    def domain(self) -> DiscreteDomain:
        return self.rho.owner

    def inside_collar(self, r: FloatArray) -> FloatArray:
        """rho at radii inside the collar, from the pole asymptote of the kernel."""
        return np.asarray(invert_kernel(self.model, kernel_collar_value(self.source_kernel, r)))


def fake_distance(kernel: SolveReport, model: ModelKernel) -> FakeDistanceField:
    """rho_p(v) = (G^h)^{-1}(G(v)) at every vertex.

    Raises:
        DomainError: If the kernel and the model have different p, or the
            model kernel is truncated
        ValueRangeError: If some kernel value is not positive
    """
    if not math.isclose(kernel.p, model.p, rel_tol=1e-12):
        raise DomainError(f"Kernel p={kernel.p} differs from model p={model.p}")
    if math.isfinite(model.r):
        raise DomainError("Fake distances need the untruncated model kernel")
    values = kernel.field.values
    bad = np.flatnonzero(~(values > 0))
    if bad.size:
        i = int(bad[0])
        raise ValueRangeError(f"Kernel value {values[i]:.6g} is not positive at vertex {i}")
    rho, flags = invert_kernel(model, values, return_flags=True)
    flags = np.asarray(flags, dtype=bool)
    if np.any(flags):
        logger.debug("%d fake distances come from the model tail", int(flags.sum()))
    return FakeDistanceField(
        ScalarField(kernel.field.owner, rho, "rho"), kernel.p, model, kernel, flags
    )


def _interior_mask(dom: DiscreteDomain) -> NDArray[np.bool_]:
    return dom.interior_cells(settings.collar_layers, settings.outer_layers)


def _tol_grad(tol_grad: float | None) -> float:
    if tol_grad is not None:
        return tol_grad
    return PSolveConfig.model_fields["tol_grad"].default


def check_gradient_bound(fd: FakeDistanceField, tol_grad: float | None = None) -> EstimateAudit:
    """|grad rho| <= 1 away from the collar and the outer rim."""
    dom = fd.domain
    norms = fd.rho.gradient_norm
    mask = _interior_mask(dom)
    if not np.any(mask):
        raise DomainError("No interior cells left after removing the boundary bands")
    inner = np.where(mask, norms, -np.inf)
    cell = int(np.argmax(inner))
    tol = audit_tolerance(dom.mesh_size, _tol_grad(tol_grad))
    return EstimateAudit.inequality(
        "gradient_bound_rho",
        float(norms[cell]),
        1.0,
        tol,
        location=cell,
        gap=float(1.0 - norms[cell]),
        min_interior=float(np.min(norms[mask])),
    )


class Composite(NamedTuple):
    """A profile psi with its first two derivatives."""

    value: Callable[[FloatArray], FloatArray]
    first: Callable[[FloatArray], FloatArray]
    second: Callable[[FloatArray], FloatArray]


IDENTITY = Composite(lambda t: t, np.ones_like, np.zeros_like)
SQUARE = Composite(lambda t: t**2, lambda t: 2 * t, lambda t: np.full_like(t, 2.0))


def pde_residual_rho(
    fd: FakeDistanceField,
    psi: Composite | None = None,
) -> float:
    """Weak residual of Delta_p psi(rho) = F(rho) |grad rho|^p away from the boundary bands.

    F = (v_h'/v_h) |psi'|^(p-2) psi' + (p-1) |psi'|^(p-2) psi''. Each hat
    test is normalized by the integral of the absolute values of both terms.
    """
    psi = psi or IDENTITY
    dom = fd.domain
    p = fd.p
    mm = fd.model.mm
    rho = fd.rho.values
    field_values = psi.value(rho)
    transport = energy_gradient(dom, field_values, p, 0.0)

    rho_grad = fd.rho.gradient_norm ** p
    quad = dom.cell_quadrature()
    rho_q = np.einsum("ql,cl->cq", quad.shapes, rho[quad.cells])
    d1 = psi.first(rho_q)
    forcing = (
        mm.volume_log_derivative(rho_q) * np.abs(d1) ** (p - 2) * d1
        + (p - 1) * np.abs(d1) ** (p - 2) * psi.second(rho_q)
    )
    per_point = quad.weights * forcing * rho_grad[:, None]
    contrib = np.einsum("cq,ql->cl", per_point, quad.shapes)
    abs_contrib = np.einsum("cq,ql->cl", np.abs(per_point), quad.shapes)
    n = dom.n_vertices
    source = np.bincount(quad.cells.ravel(), weights=contrib.ravel(), minlength=n)
    source_abs = np.bincount(quad.cells.ravel(), weights=abs_contrib.ravel(), minlength=n)

    e = ScalarField(dom, field_values).gradient_norm
    flux_abs = hat_gradient_magnitudes(dom).T @ (dom.cell_measure * e ** (p - 1))
    denom = np.asarray(flux_abs).ravel() + source_abs
    residual = np.abs(transport + source)

    layers_in = dom.vertex_layers(POLE_TAG)
    keep = (layers_in >= settings.collar_layers) & (denom > 0)
    if OUTER_TAG in dom.tags:
        keep &= dom.vertex_layers(OUTER_TAG) >= settings.outer_layers
    if not np.any(keep):
        raise DomainError("No test functions left after removing the boundary bands")
    return float(np.max(residual[keep] / denom[keep]))


def _log_gradients(u: ScalarField) -> tuple[FloatArray, NDArray[np.bool_]]:
    """|grad log u| per cell, on cells where u is positive at every vertex."""
    dom = u.owner
    positive = np.all(u.values[dom.cells] > 0, axis=1)
    if not np.any(positive):
        raise DomainError("Field is not positive on any cell")
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(u.values > 0, np.log(np.where(u.values > 0, u.values, 1.0)), 0.0)
    norms = ScalarField(dom, logs).gradient_norm
    return np.where(positive, norms, 0.0), positive


def check_sharp_gradient_estimate(
    report: SolveReport,
    kappa: float,
    boundary_sup: float | None = None,
    tol_grad: float | None = None,
) -> EstimateAudit:
    """max |grad log u| <= max{(m-1) kappa/(p-1), sup of |grad log u| at the boundary}.

    Without ``boundary_sup`` the boundary term is measured on the cells that
    touch a tagged boundary vertex.
    """
    dom = report.field.owner
    p = report.p
    norms, positive = _log_gradients(report.field)
    interior = _interior_mask(dom) & positive
    if boundary_sup is None:
        tagged = np.zeros(dom.n_vertices, dtype=bool)
        for tag in (POLE_TAG, OUTER_TAG):
            tagged[dom.tags.get(tag, np.array([], dtype=np.int64))] = True
        rim = np.any(tagged[dom.cells], axis=1) & positive
        boundary_sup = float(np.max(norms[rim])) if np.any(rim) else 0.0
    interior_term = (dom.m - 1) * kappa / (p - 1)
    rhs = max(interior_term, boundary_sup)
    if not np.any(interior):
        lhs, cell = 0.0, None
    else:
        inner = np.where(interior, norms, -np.inf)
        cell = int(np.argmax(inner))
        lhs = float(norms[cell])
    tol = audit_tolerance(dom.mesh_size, _tol_grad(tol_grad))
    return EstimateAudit.inequality(
        "sharp_gradient_estimate",
        lhs,
        rhs,
        tol,
        location=cell,
        interior_term=interior_term,
        boundary_sup=boundary_sup,
    )


@lru_cache(maxsize=32)
def _constant_model(m: int, kappa2: float, t_max: float) -> ModelManifold:
    return solve_warping(CurvatureProfile.constant(kappa2), m, t_max)


def barrier_slope(m: int, p: float, kappa: float, radius: float, tau: float) -> float:
    """|(log G^kappa_{R+tau})'(R)| for the model of constant curvature -kappa^2.

    Raises:
        DomainError: If the radius is not positive
    """
    if not radius > 0:
        raise DomainError(f"Interior ball radius must be positive, got {radius}")
    outer = radius + tau
    t_max = 2.0 * (outer if math.isfinite(outer) else radius)
    mm = _constant_model(m, kappa * kappa, t_max)
    kernel = green_kernel_model(mm, p, outer)
    return float(kernel.chi(np.array([radius]))[0])


def global_log_gradient_bound(m: int, p: float, kappa: float, radius: float) -> float:
    """max{(m-1) kappa/(p-1), |(log G^kappa)'(R)|}."""
    return max((m - 1) * kappa / (p - 1), barrier_slope(m, p, kappa, radius, math.inf))


def check_boundary_barrier(
    potential: SolveReport,
    r_x: float,
    tau: float,
    kappa: float,
    k_tag: str = POLE_TAG,
    tol_grad: float | None = None,
) -> EstimateAudit:
    """|grad log u| on the rim of K is at most the barrier slope of the model.

    Raises:
        DomainError: If ``r_x`` is not positive or the tag is missing
    """
    if not r_x > 0:
        raise DomainError(f"Interior ball radius must be positive, got {r_x}")
    dom = potential.field.owner
    if k_tag not in dom.tags:
        raise DomainError(f"Boundary tag {k_tag!r} is not present")
    in_k = np.zeros(dom.n_vertices, dtype=bool)
    in_k[dom.tags[k_tag]] = True
    norms, positive = _log_gradients(potential.field)
    touching = np.any(in_k[dom.cells], axis=1) & ~np.all(in_k[dom.cells], axis=1) & positive
    if not np.any(touching):
        raise DomainError(f"No cell crosses the rim of {k_tag!r}")
    masked = np.where(touching, norms, -np.inf)
    cell = int(np.argmax(masked))
    rhs = barrier_slope(dom.m, potential.p, kappa, r_x, tau)
    tol = audit_tolerance(dom.mesh_size, _tol_grad(tol_grad))
    return EstimateAudit.inequality(
        "boundary_barrier", float(norms[cell]), rhs, tol, location=cell, radius=r_x, tau=tau
    )


def check_rho_below_r(
    fd: FakeDistanceField, r_field: FloatArray | None = None, tol_grad: float | None = None
) -> EstimateAudit:
    """rho <= r at every vertex."""
    dom = fd.domain
    r = dom.r_field if r_field is None else np.asarray(r_field, dtype=float)
    excess = fd.rho.values - r
    finite = np.isfinite(excess)
    vertex = int(np.argmax(np.where(finite, excess, -np.inf)))
    tol = audit_tolerance(dom.mesh_size, _tol_grad(tol_grad))
    return EstimateAudit.inequality(
        "rho_below_r", float(excess[vertex]), 0.0, tol, location=vertex
    )


def check_kernel_roundtrip(fd: FakeDistanceField, rtol: float = 1e-8) -> EstimateAudit:
    """G^h(rho) = G at every vertex."""
    g = fd.source_kernel.field.values
    back = fd.model.value(fd.rho.values)
    errors = np.abs(back - g) / g
    vertex = int(np.argmax(errors))
    return EstimateAudit.inequality(
        "kernel_roundtrip", float(errors[vertex]), 0.0, rtol, location=vertex
    )
