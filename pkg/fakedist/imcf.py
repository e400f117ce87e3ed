"""Weak inverse mean curvature flow as the p -> 1 limit of p-harmonic data.

Point flows follow the fake distances rho_p of Green kernels with pole at
the collar; domain flows follow w_p = (1 - p) log u_p of the capacity
potentials of (Omega, M). Both continue along a decreasing list of p with
warm starts and extrapolate the last two snapshots linearly in p - 1.
"""

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator

from fakedist.archive import write_field_csv, write_json
from fakedist.config import settings
from fakedist.errors import DomainError, NoLimitError
from fakedist.fake import (
    EstimateAudit,
    FakeDistanceField,
    audit_tolerance,
    fake_distance,
)
from fakedist.geom import OUTER_TAG, POLE_TAG, DiscreteDomain, ScalarField, ball_volume_profile
from fakedist.model import (
    CurvatureProfile,
    FloatArray,
    ModelKernel,
    ModelManifold,
    curvature_integral,
    flat_sobolev_constant,
    green_kernel_model,
)
from fakedist.psolve import (
    PSolveConfig,
    SolveReport,
    capacity_potential,
    green_kernel_numeric,
    log_transform,
    warm_start,
)
from fakedist.verify import l1_decay_constant

logger = logging.getLogger(__name__)

FlowMode = Literal["point-source", "domain-source"]
ModelFamily = Callable[[float], ModelKernel]

P_FLOOR = 1.0 + 1e-3
ITERATION_SLACK = 25


def default_p_list(levels: int = 6, floor: float = P_FLOOR) -> list[float]:
    """1 + 2^-(k+1) for k = 0..levels-1, dropping values below the floor."""
    return [p for k in range(levels) if (p := 1.0 + 0.5 * 2.0**-k) >= floor]


class ContinuationSchedule(BaseModel):
    """Decreasing exponents of the continuation and per-p solver overrides."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    p_list: list[float] = Field(default_factory=default_p_list)
    tol_flow: float = Field(default=0.05, gt=0.0)
    overrides: dict[float, dict[str, Any]] = Field(default_factory=dict)

    @field_validator("p_list")
    @classmethod
    def validate_p_list(cls, value: list[float]) -> list[float]:
        """Check the exponents are strictly decreasing and above 1."""
        if not value:
            raise ValueError("p_list must not be empty")
        if min(value) <= 1.0:
            raise ValueError(f"every p must exceed 1, got {min(value)}")
        if any(b >= a for a, b in zip(value, value[1:])):
            raise ValueError("p_list must be strictly decreasing")
        return value

    def solver_config(self, p: float, base: PSolveConfig | None = None) -> PSolveConfig:
        update: dict[str, Any] = {}
        for key, values in self.overrides.items():
            if math.isclose(key, p, rel_tol=1e-12):
                update = dict(values)
        payload = (base.model_dump() if base is not None else {}) | update | {"p": p}
        return PSolveConfig.model_validate(payload)


def model_family(mm: ModelManifold) -> ModelFamily:
    """p -> untruncated model kernel, cached per p."""

    @lru_cache(maxsize=None)
    def kernel(p: float) -> ModelKernel:
        return green_kernel_model(mm, p)

    return kernel


@dataclass
class FlowSnapshot:
    p: float
    rho: ScalarField
    w: ScalarField
    iterations: int
    r_i: float = math.nan
    r_o: float = math.nan


@dataclass
class FlowResult:
    """Limit fake distance rho1 and flow potential w, with the snapshots behind them."""

    rho1: ScalarField
    w: ScalarField
    p_list: list[float]
    snapshots: list[FlowSnapshot]
    cauchy_trace: list[float]
    mode: FlowMode
    model: ModelManifold
    omega_tag: str | None = None
    r_i: float = math.nan
    r_o: float = math.nan
    h_plus: float = math.nan
    audits: list[EstimateAudit] = field(default_factory=list)

    @property
    def domain(self) -> DiscreteDomain:
        return self.rho1.owner

    @property
    def r_i_trace(self) -> list[float]:
        return [s.r_i for s in self.snapshots]

    @property
    def r_o_trace(self) -> list[float]:
        return [s.r_o for s in self.snapshots]

    def summary(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "omega_tag": self.omega_tag,
            "p_list": list(self.p_list),
            "cauchy_trace": list(self.cauchy_trace),
            "iterations": [s.iterations for s in self.snapshots],
            "R_i": self.r_i,
            "R_o": self.r_o,
            "R_i_trace": self.r_i_trace,
            "R_o_trace": self.r_o_trace,
            "H_plus": self.h_plus,
            "audits": [a.to_dict() for a in self.audits],
        }


def richardson_limit(x: Sequence[float], values: Sequence[Any]) -> Any:
    """Value at x = 0 of the line through the last two samples."""
    if len(values) == 1:
        return values[-1]
    xa, xb = x[-2], x[-1]
    a, b = np.asarray(values[-2], dtype=float), np.asarray(values[-1], dtype=float)
    return (xa * b - xb * a) / (xa - xb)


def _iterations(report: SolveReport) -> int:
    return int(sum(entry.get("iterations", 0) for entry in report.iterations))


def _continue_kernels(
    dom: DiscreteDomain,
    family: ModelFamily,
    schedule: ContinuationSchedule,
    cfg: PSolveConfig | None,
    exhaustion: ArrayLike | None,
    threads: int | None,
) -> Iterator[tuple[float, SolveReport, FakeDistanceField]]:
    warm: list[FloatArray] | None = None
    p_previous = math.nan
    for p in schedule.p_list:
        model = family(p)
        start = None if warm is None else [warm_start(u, p_previous, p) for u in warm]
        kernel = green_kernel_numeric(
            dom, p, schedule.solver_config(p, cfg), exhaustion, threads, warm=start
        )
        fd = fake_distance(kernel, model)
        warm, p_previous = kernel.members, p
        yield p, kernel, fd


def _cauchy_step(previous: FloatArray, current: FloatArray) -> float:
    finite = np.isfinite(previous) & np.isfinite(current)
    scale = max(float(np.max(np.abs(current[finite]))), 1e-300)
    return float(np.max(np.abs(current[finite] - previous[finite]))) / scale


def _trace_audits(
    trace: list[float], iterations: list[int], schedule: ContinuationSchedule
) -> list[EstimateAudit]:
    audits = []
    if len(trace) >= 3:
        tail = np.diff(trace[-3:])
        audits.append(
            EstimateAudit.inequality(
                "cauchy_decreasing",
                float(np.max(tail)),
                0.0,
                0.1 * schedule.tol_flow,
                hard=False,
                trace=list(trace),
            )
        )
    if len(iterations) >= 2:
        growth = np.diff(iterations)
        k = int(np.argmax(growth))
        audits.append(
            EstimateAudit.inequality(
                "warm_start_iterations",
                float(growth[k]),
                float(ITERATION_SLACK),
                0.0,
                hard=False,
                location=k + 1,
                iterations=list(iterations),
            )
        )
    return audits


def _check_limit(trace: list[float], schedule: ContinuationSchedule) -> None:
    if trace and trace[-1] > schedule.tol_flow:
        raise NoLimitError(
            f"Fake distances do not settle as p -> 1: last step {trace[-1]:.3g} "
            f"above {schedule.tol_flow:g}",
            trace,
        )


def _positivity_audit(rho1: ScalarField) -> EstimateAudit:
    dom = rho1.owner
    off_collar = np.ones(dom.n_vertices, dtype=bool)
    off_collar[dom.tags.get(POLE_TAG, np.array([], dtype=np.int64))] = False
    values = np.where(off_collar, rho1.values, np.inf)
    vertex = int(np.argmin(values))
    return EstimateAudit.inequality(
        "rho1_positive", -float(values[vertex]), 0.0, 0.0, location=vertex
    )


def run_point_flow(
    dom: DiscreteDomain,
    family: ModelFamily,
    schedule: ContinuationSchedule | None = None,
    cfg: PSolveConfig | None = None,
    exhaustion: ArrayLike | None = None,
    threads: int | None = None,
) -> FlowResult:
    """Flow issuing from the pole: rho1 = lim rho_p and w = log v_h(rho1).

    Raises:
        DivergentKernelError: If the model is parabolic for some p of the schedule
        NoLimitError: If the last relative step sup|rho_p - rho_q| / sup rho_q
            exceeds ``schedule.tol_flow``
    """
    schedule = schedule or ContinuationSchedule()
    snapshots: list[FlowSnapshot] = []
    trace: list[float] = []
    owner: DiscreteDomain | None = None
    for p, kernel, fd in _continue_kernels(dom, family, schedule, cfg, exhaustion, threads):
        owner = owner or fd.domain
        rho = ScalarField(owner, fd.rho.values, "rho")
        w_p = ScalarField(owner, log_transform(kernel, p).values, "w")
        if snapshots:
            trace.append(_cauchy_step(snapshots[-1].rho.values, rho.values))
        snapshots.append(FlowSnapshot(p, rho, w_p, _iterations(kernel)))
        logger.info("Point flow p=%g: step %s", p, f"{trace[-1]:.3g}" if trace else "-")
    assert owner is not None

    _check_limit(trace, schedule)
    x = [p - 1 for p in schedule.p_list]
    rho1 = np.maximum(richardson_limit(x, [s.rho.values for s in snapshots]), 0.0)
    mm = family(schedule.p_list[-1]).mm
    with np.errstate(divide="ignore"):
        w = np.where(rho1 > 0, mm.log_volume(np.where(rho1 > 0, rho1, 1.0)), -np.inf)
    result = FlowResult(
        ScalarField(owner, rho1, "rho1"),
        ScalarField(owner, w, "w"),
        list(schedule.p_list),
        snapshots,
        trace,
        "point-source",
        mm,
    )
    result.audits = [
        *_trace_audits(trace, [s.iterations for s in snapshots], schedule),
        _positivity_audit(result.rho1),
    ]
    return result


def _region_mask(dom: DiscreteDomain, tag: str) -> NDArray[np.bool_]:
    if tag not in dom.tags:
        raise DomainError(f"Region tag {tag!r} is not present on {dom!r}")
    mask = np.zeros(dom.n_vertices, dtype=bool)
    mask[dom.tags[tag]] = True
    return mask


def _outside_cells(dom: DiscreteDomain, inside: NDArray[np.bool_]) -> NDArray[np.bool_]:
    return dom.interior_cells() & ~np.all(inside[dom.cells], axis=1)


def run_domain_flow(
    dom: DiscreteDomain,
    omega_tag: str,
    family: ModelFamily,
    schedule: ContinuationSchedule | None = None,
    cfg: PSolveConfig | None = None,
    exhaustion: ArrayLike | None = None,
    threads: int | None = None,
) -> FlowResult:
    """Flow issuing from the region ``omega_tag``: w = lim (1 - p) log u_p.

    u_p is the potential of the capacitor (Omega, M). The fake inner and outer
    radii are min rho_p on the boundary of Omega and max rho_p over Omega.

    Raises:
        DomainError: If Omega does not contain the collar, touches the outer
            rim, or the last exhaustion radius stops short of the rim
        NoLimitError: As for :func:`run_point_flow`
    """
    schedule = schedule or ContinuationSchedule()
    inside = _region_mask(dom, omega_tag)
    if not np.all(inside[dom.tags[POLE_TAG]]):
        raise DomainError(f"Region {omega_tag!r} must contain the pole collar")
    if np.any(inside[dom.tags.get(OUTER_TAG, np.array([], dtype=np.int64))]):
        raise DomainError(f"Region {omega_tag!r} touches the outer rim")
    rim_ids, curvature = dom.boundary_mean_curvature(inside)
    h_plus = float(np.max(np.clip(curvature, 0.0, None))) if curvature.size else 0.0

    snapshots: list[FlowSnapshot] = []
    trace: list[float] = []
    potential: FloatArray | None = None
    p_previous = math.nan
    for p, kernel, fd in _continue_kernels(dom, family, schedule, cfg, exhaustion, threads):
        if fd.domain.n_vertices != dom.n_vertices:
            raise DomainError("Domain flows need an exhaustion that reaches the outer rim")
        start = None if potential is None else warm_start(potential, p_previous, p)
        cap = capacity_potential(
            dom, omega_tag, OUTER_TAG, schedule.solver_config(p, cfg), u0=start, far_field=True
        )
        potential, p_previous = cap.members[0], p
        rho = ScalarField(dom, fd.rho.values, "rho")
        w_p = log_transform(cap, p)
        if snapshots:
            trace.append(_cauchy_step(snapshots[-1].rho.values, rho.values))
        snapshots.append(
            FlowSnapshot(
                p,
                rho,
                w_p,
                _iterations(kernel) + _iterations(cap),
                r_i=float(np.min(rho.values[rim_ids])),
                r_o=float(np.max(rho.values[inside])),
            )
        )
        logger.info(
            "Domain flow p=%g: R_i=%.6g R_o=%.6g", p, snapshots[-1].r_i, snapshots[-1].r_o
        )

    _check_limit(trace, schedule)
    x = [p - 1 for p in schedule.p_list]
    rho1 = np.maximum(richardson_limit(x, [s.rho.values for s in snapshots]), 0.0)
    w = richardson_limit(x, [s.w.values for s in snapshots])
    result = FlowResult(
        ScalarField(dom, rho1, "rho1"),
        ScalarField(dom, w, "w"),
        list(schedule.p_list),
        snapshots,
        trace,
        "domain-source",
        family(schedule.p_list[-1]).mm,
        omega_tag=omega_tag,
        r_i=float(richardson_limit(x, [s.r_i for s in snapshots])),
        r_o=float(richardson_limit(x, [s.r_o for s in snapshots])),
        h_plus=h_plus,
    )
    tol_grad = (cfg or PSolveConfig(p=schedule.p_list[-1])).tol_grad
    result.audits = [
        *_trace_audits(trace, [s.iterations for s in snapshots], schedule),
        _positivity_audit(result.rho1),
        EstimateAudit.inequality("fake_radii_ordered", result.r_i, result.r_o, 1e-12),
        check_domain_sandwich(result, tol_grad),
        check_domain_gradient(result, tol_grad),
    ]
    return result


def check_domain_sandwich(fr: FlowResult, tol_grad: float | None = None) -> EstimateAudit:
    """log v_h(rho1) - log v_h(R_o) <= w <= log v_h(rho1) - log v_h(R_i) outside Omega."""
    if fr.mode != "domain-source" or fr.omega_tag is None:
        raise DomainError("The sandwich bound concerns flows from a region")
    dom = fr.domain
    inside = _region_mask(dom, fr.omega_tag)
    band = np.zeros(dom.n_vertices, dtype=bool)
    band[np.unique(dom.cells[dom.interior_cells()])] = True
    audited = band & ~inside & (fr.rho1.values > 0)
    if not np.any(audited):
        raise DomainError("No vertices outside the region to audit")
    mm = fr.model
    log_v = mm.log_volume(fr.rho1.values[audited])
    w = fr.w.values[audited]
    below = (log_v - float(mm.log_volume(np.array([fr.r_o]))[0])) - w
    above = w - (log_v - float(mm.log_volume(np.array([fr.r_i]))[0]))
    excess = np.maximum(below, above)
    k = int(np.argmax(excess))
    tol = audit_tolerance(dom.mesh_size, _default_tol_grad(tol_grad))
    return EstimateAudit.inequality(
        "domain_sandwich",
        float(excess[k]),
        0.0,
        tol,
        location=int(np.flatnonzero(audited)[k]),
        lower_margin=float(-np.max(below)),
        upper_margin=float(-np.max(above)),
    )


def check_domain_gradient(fr: FlowResult, tol_grad: float | None = None) -> EstimateAudit:
    """|grad w| <= max{(m-1) sqrt(H(R_i)), max of the positive boundary mean curvature}."""
    if fr.mode != "domain-source" or fr.omega_tag is None:
        raise DomainError("The gradient bound concerns flows from a region")
    dom = fr.domain
    cells = _outside_cells(dom, _region_mask(dom, fr.omega_tag))
    if not np.any(cells):
        raise DomainError("No cells outside the region to audit")
    norms = np.where(cells, fr.w.gradient_norm, -np.inf)
    cell = int(np.argmax(norms))
    h_ri = float(fr.model.profile(np.array([fr.r_i]))[0])
    bound = max((dom.m - 1) * math.sqrt(max(h_ri, 0.0)), fr.h_plus)
    tol = audit_tolerance(dom.mesh_size, _default_tol_grad(tol_grad))
    return EstimateAudit.inequality(
        "domain_gradient_bound",
        float(norms[cell]),
        bound,
        tol,
        location=cell,
        curvature_term=(dom.m - 1) * math.sqrt(max(h_ri, 0.0)),
        boundary_term=fr.h_plus,
    )


def _default_tol_grad(tol_grad: float | None) -> float:
    return PSolveConfig.model_fields["tol_grad"].default if tol_grad is None else tol_grad


def _interior_vertices(dom: DiscreteDomain) -> NDArray[np.bool_]:
    mask = np.zeros(dom.n_vertices, dtype=bool)
    mask[np.unique(dom.cells[dom.interior_cells()])] = True
    return mask


def check_limit_formula(fr: FlowResult, rtol: float | None = None) -> EstimateAudit:
    """G_p^(p-1) v_h(rho1) -> 1 at every vertex as p -> 1.

    The products at the four smallest p are fitted against 1, x, x log x and
    x^2 with x = p - 1; the constant term is the limit.
    """
    if fr.mode != "point-source":
        raise DomainError("The limit formula concerns flows from a point")
    rtol = settings.identity_rtol if rtol is None else rtol
    dom = fr.domain
    audited = _interior_vertices(dom) & np.isfinite(fr.w.values)
    tail = fr.snapshots[-4:]
    x = np.array([s.p - 1 for s in tail])
    products = np.array([np.exp(fr.w.values[audited] - s.w.values[audited]) for s in tail])
    basis = np.column_stack([np.ones_like(x), x, x * np.log(x), x**2])[:, : len(tail)]
    coef, *_ = np.linalg.lstsq(basis, products, rcond=None)
    limit = coef[0]
    k = int(np.argmax(np.abs(limit - 1.0)))
    return EstimateAudit.identity(
        "limit_formula",
        float(limit[k]),
        1.0,
        rtol,
        location=int(np.flatnonzero(audited)[k]),
        at_floor=float(np.max(np.abs(products[-1] - 1.0))),
        p=[s.p for s in tail],
    )


def mean_curvature_bound(mm: ModelManifold, w_h: ArrayLike) -> FloatArray:
    """(m-1) e^(-w/(m-1)) h'(h^-1(e^(w/(m-1)))) for w normalized as (m-1) log h(rho1)."""
    y = np.exp(np.asarray(w_h, dtype=float) / (mm.m - 1))
    return (mm.m - 1) * mm.dh_at(mm.inverse_h(y)) / y


def constant_curvature_bound(m: int, kappa: float, w_h: ArrayLike) -> FloatArray:
    """(m-1) e^(-w/(m-1)) sqrt(kappa^2 e^(2w/(m-1)) + 1)."""
    y = np.exp(np.asarray(w_h, dtype=float) / (m - 1))
    return (m - 1) * np.sqrt(kappa**2 * y**2 + 1.0) / y


def check_mean_curvature_bound(
    fr: FlowResult, model: ModelManifold | None = None, tol_grad: float | None = None
) -> EstimateAudit:
    """Gradient of w against the mean curvature of the model spheres.

    The bound reads in w - log omega_{m-1} = (m-1) log h(rho1). On each cell
    the smallest vertex value of w enters the bound and the audited quantity
    is |grad w| divided by it. Constant-curvature models also get the bound in
    closed form, recorded in the context and required to pass as well.
    """
    if fr.mode != "point-source":
        raise DomainError("The mean-curvature bound concerns flows from a point")
    mm = model or fr.model
    dom = fr.domain
    w_h = fr.w.values - math.log(mm.omega)
    cell_w = np.min(w_h[dom.cells], axis=1)
    cells = dom.interior_cells() & np.isfinite(cell_w)
    if not np.any(cells):
        raise DomainError("No interior cells with a finite flow value")
    grad = fr.w.gradient_norm[cells]
    ratio = grad / mean_curvature_bound(mm, cell_w[cells])
    k = int(np.argmax(ratio))
    tol = audit_tolerance(dom.mesh_size, _default_tol_grad(tol_grad))
    context: dict[str, Any] = {}
    kappa_ok = True
    if mm.profile.kind == "constant" and mm.profile.kappa2 >= 0:
        kappa = math.sqrt(mm.profile.kappa2)
        closed = grad / constant_curvature_bound(dom.m, kappa, cell_w[cells])
        context = {"kappa": kappa, "kappa_form_ratio": float(np.max(closed))}
        kappa_ok = bool(np.max(closed) <= 1.0 + tol)
    audit = EstimateAudit.inequality(
        "mean_curvature_bound",
        float(ratio[k]),
        1.0,
        tol,
        location=int(np.flatnonzero(cells)[k]),
        **context,
    )
    audit.passed = audit.passed and kappa_ok
    return audit


def explicit_quadratic_decay_bound(
    fr: FlowResult, kappa: float, tol_grad: float | None = None
) -> EstimateAudit:
    """|grad w| <= (R_o / rho1) max{kappa' (m-1) / R_i, max H+} for H = kappa^2 / t^2.

    Raises:
        DomainError: If the flow does not start from a region or its model
            is not the inverse-square profile with this kappa
    """
    if fr.mode != "domain-source" or fr.omega_tag is None:
        raise DomainError("The quadratic decay bound concerns flows from a region")
    profile = fr.model.profile
    if profile.kind != "inverse_square" or not math.isclose(profile.kappa, kappa, abs_tol=1e-12):
        raise DomainError(f"Flow model is not H = {kappa:g}^2 / t^2")
    dom = fr.domain
    kappa_prime = (1.0 + math.sqrt(1.0 + 4.0 * kappa**2)) / 2.0
    cell_rho = np.min(fr.rho1.values[dom.cells], axis=1)
    cells = _outside_cells(dom, _region_mask(dom, fr.omega_tag)) & (cell_rho > 0)
    if not np.any(cells):
        raise DomainError("No cells outside the region to audit")
    plateau = max(kappa_prime * (dom.m - 1) / fr.r_i, fr.h_plus)
    bound = fr.r_o / cell_rho[cells] * plateau
    ratio = fr.w.gradient_norm[cells] / bound
    k = int(np.argmax(ratio))
    tol = audit_tolerance(dom.mesh_size, _default_tol_grad(tol_grad))
    return EstimateAudit.inequality(
        "quadratic_decay_bound",
        float(ratio[k]),
        1.0,
        tol,
        location=int(np.flatnonzero(cells)[k]),
        kappa_prime=kappa_prime,
        plateau=plateau,
    )


def _sandwich_audit(
    name: str,
    fr: FlowResult,
    lower: FloatArray,
    audited: NDArray[np.bool_],
    tol_grad: float | None,
    **context: Any,
) -> EstimateAudit:
    dom = fr.domain
    rho = fr.rho1.values[audited]
    r = dom.r_field[audited]
    excess = np.maximum(lower / rho - 1.0, rho / r - 1.0)
    k = int(np.argmax(excess))
    tol = audit_tolerance(dom.mesh_size, _default_tol_grad(tol_grad))
    return EstimateAudit.inequality(
        name,
        float(excess[k]),
        0.0,
        tol,
        location=int(np.flatnonzero(audited)[k]),
        lower_ratio=float(np.max(lower / rho)),
        upper_ratio=float(np.max(rho / r)),
        **context,
    )


def _sandwich_vertices(fr: FlowResult) -> NDArray[np.bool_]:
    r = fr.domain.r_field
    return (fr.rho1.values > 0) & (r > 0) & np.isfinite(r)


def lower_bound_rho1(
    fr: FlowResult,
    sobolev_const: float,
    m: int | None = None,
    tol_grad: float | None = None,
) -> EstimateAudit:
    """v_h^-1(r^(m-1) / (S^m 2^(m^2-1))) <= rho1 <= r at every vertex, as ratios.

    Raises:
        DomainError: If the Sobolev constant is not positive
    """
    if sobolev_const <= 0:
        raise DomainError(f"Sobolev constant must be positive, got {sobolev_const}")
    m = fr.domain.m if m is None else m
    audited = _sandwich_vertices(fr)
    r = fr.domain.r_field[audited]
    lower = fr.model.inverse_volume(r ** (m - 1) / l1_decay_constant(m, sobolev_const))
    return _sandwich_audit(
        "rho1_sandwich_sobolev", fr, lower, audited, tol_grad, sobolev_const=sobolev_const
    )


def lower_bound_rho1_volume(
    fr: FlowResult,
    volume_constant: float,
    nu: float,
    levels: int = 64,
    tol_grad: float | None = None,
) -> EstimateAudit:
    """v_h^-1(C r^(nu-1) inf_{1<t<r} |B_t| / t^nu) <= rho1 <= r outside the unit ball.

    |B_t| is measured on the domain. The constant C is supplied by the caller.

    Raises:
        DomainError: If C is not positive or the domain does not reach past r = 1
    """
    if volume_constant <= 0:
        raise DomainError(f"Volume constant must be positive, got {volume_constant}")
    dom = fr.domain
    r_all = dom.r_field
    top = float(np.max(r_all[np.isfinite(r_all)]))
    if top <= 1.0:
        raise DomainError("The volume form of the sandwich needs points beyond r = 1")
    grid = np.linspace(1.0, top, levels + 1)[1:]
    ratio = ball_volume_profile(dom, grid) / grid**nu
    running_inf = np.minimum.accumulate(ratio)
    audited = _sandwich_vertices(fr) & (r_all > grid[0])
    r = r_all[audited]
    inf_ratio = running_inf[np.searchsorted(grid, r, side="right") - 1]
    lower = fr.model.inverse_volume(volume_constant * r ** (nu - 1) * inf_ratio)
    return _sandwich_audit(
        "rho1_sandwich_volume", fr, lower, audited, tol_grad, volume_constant=volume_constant, nu=nu
    )


def asymptotic_lower_bound_factor(profile: CurvatureProfile, m: int, s1: float) -> float:
    """e^(-i_H) (S_{R^m} / S_1)^(m/(m-1)) m / 2^(m+1); zero when i_H diverges."""
    if s1 <= 0:
        raise DomainError(f"Sobolev constant must be positive, got {s1}")
    i_h = curvature_integral(profile)
    if math.isinf(i_h):
        return 0.0
    return math.exp(-i_h) * (flat_sobolev_constant(m) / s1) ** (m / (m - 1)) * m / 2.0 ** (m + 1)


def check_asymptotic_lower_bound(
    fr: FlowResult, s1: float, tol_grad: float | None = None
) -> EstimateAudit:
    """c r <= rho1 <= r with c from :func:`asymptotic_lower_bound_factor`.

    Raises:
        DomainError: If the curvature integral of the model profile diverges
    """
    m = fr.domain.m
    factor = asymptotic_lower_bound_factor(fr.model.profile, m, s1)
    if factor == 0.0:
        raise DomainError("The linear lower bound needs a finite curvature integral")
    audited = _sandwich_vertices(fr)
    lower = factor * fr.domain.r_field[audited]
    return _sandwich_audit("rho1_linear_lower_bound", fr, lower, audited, tol_grad, factor=factor)


def write_flow_archive(
    fr: FlowResult, directory: str | Path, metadata: dict[str, Any] | None = None
) -> Path:
    """summary.json, limit.csv and one CSV per exponent under ``snapshots/``."""
    directory = Path(directory)
    write_json(directory / "summary.json", fr.summary(), metadata)
    write_field_csv(directory / "limit.csv", fr.rho1, {"w": fr.w.values})
    for s in fr.snapshots:
        write_field_csv(directory / "snapshots" / f"p_{s.p:.6g}.csv", s.rho, {"w": s.w.values})
    logger.info("Flow archive written to %s", directory)
    return directory
