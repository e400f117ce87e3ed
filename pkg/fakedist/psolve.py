"""p-Laplace solvers on discrete domains.

The p-Dirichlet energy sum_c mu_c (eps^2 + |grad u|_c^2)^(p/2) / p is
minimized by iteratively reweighted linear solves along a decreasing eps
schedule, followed by Newton steps on the unregularized energy. Kernels are
built by exhaustion: each member is a rescaled capacity potential of the pole
collar, shifted by the far-field value of the kernel at its outer radius.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import sparse
from scipy.sparse import linalg as splinalg

from fakedist.config import settings
from fakedist.errors import (
    ConvergenceError,
    DegenerateCapacitorError,
    DivergentKernelError,
    DomainError,
    ExhaustionDivergenceError,
    PreconditionError,
)
from fakedist.geom import (
    OUTER_TAG,
    POLE_TAG,
    DiscreteDomain,
    RadialGrid,
    ScalarField,
    SurfaceMesh,
)
from fakedist.model import FloatArray, green_kernel_model, mu_euclidean, nonparabolic

logger = logging.getLogger(__name__)

RightHandSide = Literal["zero", "dirac-at-collar"]


class PSolveConfig(BaseModel):
    """Solver parameters for one p-Laplace problem."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    p: float = Field(gt=1.0)
    eps_schedule: list[float] | None = None
    eps_floor: float = Field(default=1e-3, gt=0.0)
    tol_energy: float = Field(default=1e-10, gt=0.0)
    tol_grad: float = Field(default=1e-7, gt=0.0)
    max_iters: int = Field(default=200, ge=1)
    newton_iters: int = Field(default=60, ge=0)
    linear_rtol: float = Field(default=1e-10, gt=0.0)
    exhaustion_tol: float = Field(default=5e-3, gt=0.0)

    @field_validator("eps_schedule")
    @classmethod
    def validate_schedule(cls, value: list[float] | None) -> list[float] | None:
        """Check the schedule is positive and strictly decreasing."""
        if value is None:
            return value
        if not value or any(e <= 0 for e in value):
            raise ValueError("eps_schedule must be a non-empty list of positive numbers")
        if any(b >= a for a, b in zip(value, value[1:])):
            raise ValueError("eps_schedule must be strictly decreasing")
        return value


@dataclass
class SolveReport:
    """Outcome of a p-Laplace solve."""

    field: ScalarField
    p: float
    energy: float
    capacity: float
    residual_weak: float
    iterations: list[dict[str, Any]] = field(default_factory=list)
    eps_final: float = 0.0
    kind: str = "capacity"
    scale: float = 1.0
    far_field: float = 0.0
    sup_norms: list[float] = field(default_factory=list)
    members: list[FloatArray] = field(default_factory=list, repr=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "p": self.p,
            "energy": self.energy,
            "capacity": self.capacity,
            "residual_weak": self.residual_weak,
            "eps_final": self.eps_final,
            "scale": self.scale,
            "far_field": self.far_field,
            "sup_norms": list(self.sup_norms),
            "iterations": list(self.iterations),
            "vertices": self.field.owner.n_vertices,
        }


def _gradients(dom: DiscreteDomain, u: FloatArray) -> FloatArray:
    return (dom.grad_op @ u).reshape(dom.n_cells, dom.dim)


def p_energy(
    dom: DiscreteDomain, u: FloatArray, p: float, eps: float | FloatArray = 0.0
) -> float:
    """Regularized p-Dirichlet energy with the 1/p factor."""
    e = _gradients(dom, u)
    s = eps**2 + np.sum(e**2, axis=1)
    return float(np.sum(dom.cell_measure * s ** (p / 2)) / p)


def dirichlet_energy(dom: DiscreteDomain, u: FloatArray, p: float) -> float:
    """Integral of |grad u|^p."""
    e = _gradients(dom, u)
    return float(np.sum(dom.cell_measure * np.sum(e**2, axis=1) ** (p / 2)))


def energy_gradient(
    dom: DiscreteDomain, u: FloatArray, p: float, eps: float | FloatArray
) -> FloatArray:
    e = _gradients(dom, u)
    s = eps**2 + np.sum(e**2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(s > 0, s ** ((p - 2) / 2), 0.0)
    flux = (dom.cell_measure * weight)[:, None] * e
    return dom.grad_op.T @ flux.ravel()


def _cell_operator(dom: DiscreteDomain, blocks: FloatArray) -> sparse.csr_matrix:
    """G^T B G for per-cell symmetric blocks B of size dim x dim."""
    d = dom.dim
    base = d * np.arange(dom.n_cells)
    rows = (base[:, None, None] + np.arange(d)[None, :, None]).repeat(d, axis=2)
    cols = np.swapaxes(rows, 1, 2)
    mid = sparse.csr_matrix(
        (blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(d * dom.n_cells,) * 2
    )
    return (dom.grad_op.T @ mid @ dom.grad_op).tocsr()


def _irls_matrix(
    dom: DiscreteDomain, u: FloatArray, p: float, eps: float | FloatArray
) -> sparse.csr_matrix:
    e = _gradients(dom, u)
    s = eps**2 + np.sum(e**2, axis=1)
    weight = dom.cell_measure * s ** ((p - 2) / 2)
    blocks = weight[:, None, None] * np.eye(dom.dim)[None, :, :]
    return _cell_operator(dom, blocks)


def _hessian(
    dom: DiscreteDomain, u: FloatArray, p: float, eps: float, floor: float | FloatArray
) -> sparse.csr_matrix:
    e = _gradients(dom, u)
    s = np.maximum(eps**2 + np.sum(e**2, axis=1), floor**2)
    outer = e[:, :, None] * e[:, None, :] / s[:, None, None]
    blocks = (dom.cell_measure * s ** ((p - 2) / 2))[:, None, None] * (
        np.eye(dom.dim)[None, :, :] + (p - 2) * outer
    )
    return _cell_operator(dom, blocks)


def _solve_spd(matrix: sparse.csr_matrix, rhs: FloatArray, rtol: float) -> FloatArray:
    """Preconditioned conjugate gradients, with a direct solve as fallback."""
    matrix = matrix.tocsc()
    try:
        ilu = splinalg.spilu(matrix, drop_tol=1e-6, fill_factor=20)
        precond = splinalg.LinearOperator(matrix.shape, ilu.solve)
    except RuntimeError:
        precond = None
    x, info = splinalg.cg(matrix, rhs, rtol=rtol, atol=0.0, maxiter=2000, M=precond)
    if info != 0 or not np.all(np.isfinite(x)):
        logger.debug("CG stopped with info=%d, falling back to a direct solve", info)
        x = splinalg.splu(matrix).solve(rhs)
    return x


def _line_search(
    dom: DiscreteDomain,
    u: FloatArray,
    d: FloatArray,
    p: float,
    eps: float | FloatArray,
    e0: float,
    slope: float,
) -> tuple[float, float]:
    """Armijo back-tracking; returns (step, energy) with energy <= e0."""
    alpha = 1.0
    while alpha > 1e-12:
        e1 = p_energy(dom, u + alpha * d, p, eps)
        if e1 <= e0 + 1e-4 * alpha * slope:
            return alpha, e1
        alpha *= 0.5
    return 0.0, e0


def hat_gradient_magnitudes(dom: DiscreteDomain) -> sparse.csr_matrix:
    """Sparse cells x vertices matrix of |grad phi_i| on each cell."""
    squared = dom.grad_op.multiply(dom.grad_op).tocsr()
    if dom.dim > 1:
        collapse = sparse.kron(sparse.eye(dom.n_cells), np.ones((1, dom.dim)), format="csr")
        squared = (collapse @ squared).tocsr()
    return squared.sqrt()


def _test_norms(dom: DiscreteDomain, p: float) -> FloatArray:
    """L^p norm of the gradient of every hat function."""
    powered = hat_gradient_magnitudes(dom).power(p)
    return np.asarray(powered.T @ dom.cell_measure).ravel() ** (1.0 / p)


def weak_residual(
    dom: DiscreteDomain,
    field_: ScalarField | FloatArray,
    p: float,
    rhs: RightHandSide = "zero",
    fixed: NDArray[np.bool_] | None = None,
) -> float:
    """Largest relative weak-form residual over the P1 hat functions of free vertices.

    Each residual is divided by ||grad phi||_p ||grad u||_p^(p-1), its Hoelder
    bound, so the value lies in [0, 1]. With ``dirac-at-collar`` the sum of the
    collar hat functions is also tested against the unit point mass.
    """
    u = field_.values if isinstance(field_, ScalarField) else np.asarray(field_, dtype=float)
    if fixed is None:
        fixed = np.zeros(dom.n_vertices, dtype=bool)
        for tag in (POLE_TAG, OUTER_TAG):
            fixed[dom.tags.get(tag, np.array([], dtype=np.int64))] = True
    grad = energy_gradient(dom, u, p, 0.0)
    scale = dirichlet_energy(dom, u, p) ** ((p - 1) / p)
    if scale == 0:
        return 0.0 if rhs == "zero" else 1.0
    norms = _test_norms(dom, p)
    free = ~fixed & (norms > 0)
    worst = float(np.max(np.abs(grad[free]) / (norms[free] * scale))) if np.any(free) else 0.0
    if rhs == "dirac-at-collar":
        flux = float(np.sum(grad[dom.tags[POLE_TAG]]))
        worst = max(worst, abs(flux - 1.0))
    return worst


def _radial_guess(
    dom: RadialGrid, inner: NDArray[np.bool_], outer: NDArray[np.bool_], p: float
) -> FloatArray | None:
    """Exact minimizer of the discrete radial energy when K and the rim are contiguous."""
    a = int(np.max(np.flatnonzero(inner)))
    b = int(np.min(np.flatnonzero(outer)))
    if b <= a:
        return None
    spacing = dom.spacing[a:b]
    log_q = np.log(spacing) - np.log(dom.cell_measure[a:b] / spacing) / (p - 1)
    # u_j is proportional to the sum of q_c over the cells beyond j
    tail = np.logaddexp.accumulate(log_q[::-1])[::-1]
    u0 = np.zeros(dom.n_vertices)
    u0[: a + 1] = 1.0
    u0[a:b] = np.exp(tail - tail[0])
    return u0


def _model_guess(
    dom: DiscreteDomain, inner: NDArray[np.bool_], outer: NDArray[np.bool_], p: float
) -> FloatArray | None:
    r = dom.r_field
    r_in = float(np.max(r[inner]))
    r_out = float(np.min(r[outer]))
    if dom.mm is None or not (0 < r_in < r_out) or not math.isfinite(r_out):
        return None
    try:
        kernel = green_kernel_model(dom.mm, p, r_out)
    except PreconditionError:
        return None
    with np.errstate(divide="ignore"):
        logs = kernel.log_value(np.clip(r, r_in, r_out))
    return np.exp(logs - float(kernel.log_value(np.array([r_in]))[0]))


def _initial_guess(
    dom: DiscreteDomain, inner: NDArray[np.bool_], outer: NDArray[np.bool_], p: float
) -> FloatArray:
    guess = (
        _radial_guess(dom, inner, outer, p)
        if isinstance(dom, RadialGrid)
        else _model_guess(dom, inner, outer, p)
    )
    if guess is not None:
        return guess
    r = dom.r_field
    r_in = float(np.max(r[inner]))
    r_out = float(np.min(r[outer]))
    u0 = np.full(dom.n_vertices, 0.5)
    if np.isfinite(r_in) and np.isfinite(r_out) and 0 < r_in < r_out:
        exponent = min(p, dom.m)
        r_safe = np.clip(r, r_in, r_out)
        mu = mu_euclidean(dom.m, exponent, r_safe)
        mu_in = float(mu_euclidean(dom.m, exponent, r_in))
        mu_out = float(mu_euclidean(dom.m, exponent, r_out))
        u0 = np.clip((mu - mu_out) / (mu_in - mu_out), 0.0, 1.0)
    return u0


def _default_schedule(cfg: PSolveConfig) -> list[float]:
    schedule = []
    level = 1.0
    while level >= cfg.eps_floor:
        schedule.append(level)
        level *= 0.5
    return schedule


def _cell_scale(dom: DiscreteDomain, u: FloatArray) -> FloatArray:
    """Per-cell gradient magnitude of the start, floored away from zero."""
    norms = np.linalg.norm(_gradients(dom, u), axis=1)
    top = float(np.max(norms)) if norms.size else 0.0
    return np.maximum(norms, 1e-12 * top if top > 0 else 1e-12)


def minimize_p_energy(
    dom: DiscreteDomain,
    u0: FloatArray,
    fixed: NDArray[np.bool_],
    cfg: PSolveConfig,
) -> tuple[FloatArray, list[dict[str, Any]], float]:
    """Minimize the p-energy with Dirichlet values u0 on ``fixed``.

    The regularization on a cell is the schedule level times the gradient of
    u0 there, so cells where the potential is exponentially flat are
    smoothed in proportion. A start that already meets ``cfg.tol_grad``
    skips the schedule.

    Returns:
        Minimizer, iteration trace and the last level of the schedule

    Raises:
        ConvergenceError: If the weak residual stays above ``cfg.tol_grad``
    """
    p = cfg.p
    free = np.flatnonzero(~fixed)
    u = u0.astype(float).copy()
    trace: list[dict[str, Any]] = []
    schedule = cfg.eps_schedule or _default_schedule(cfg)
    if weak_residual(dom, u, p, fixed=fixed) <= cfg.tol_grad:
        schedule = []
    cell_scale = _cell_scale(dom, u)

    for level in schedule:
        eps = level * cell_scale
        energy = p_energy(dom, u, p, eps)
        k = 0
        for k in range(1, cfg.max_iters + 1):
            grad = energy_gradient(dom, u, p, eps)[free]
            matrix = _irls_matrix(dom, u, p, eps)[free][:, free]
            d = np.zeros_like(u)
            d[free] = _solve_spd(matrix, -grad, cfg.linear_rtol)
            alpha, new_energy = _line_search(dom, u, d, p, eps, energy, float(grad @ d[free]))
            if new_energy > energy:
                raise ConvergenceError(f"Energy increased at eps level {level:g}", trace)
            u += alpha * d
            decrease = energy - new_energy
            energy = new_energy
            if alpha == 0.0 or decrease <= cfg.tol_energy * abs(energy):
                break
        trace.append({"eps": level, "iterations": k, "energy": energy})
        logger.debug("eps level %.3g: %d IRLS iterations, energy %.12g", level, k, energy)

    floor = 1e-6 * cell_scale
    energy = p_energy(dom, u, p, 0.0)
    residual = weak_residual(dom, u, p, fixed=fixed)
    k = 0
    for k in range(1, cfg.newton_iters + 1):
        if residual <= 0.1 * cfg.tol_grad:
            break
        grad = energy_gradient(dom, u, p, 0.0)[free]
        hess = _hessian(dom, u, p, 0.0, floor)[free][:, free]
        d = np.zeros_like(u)
        d[free] = _solve_spd(hess, -grad, cfg.linear_rtol)
        slope = float(grad @ d[free])
        if slope >= 0:
            d[free] = -grad
            slope = -float(grad @ grad)
        alpha, energy = _line_search(dom, u, d, p, 0.0, energy, slope)
        if alpha == 0.0:
            break
        u += alpha * d
        residual = weak_residual(dom, u, p, fixed=fixed)
    trace.append({"eps": 0.0, "iterations": k, "energy": energy, "residual": residual})

    if residual > cfg.tol_grad:
        raise ConvergenceError(
            f"Failed to converge: weak residual {residual:.3g} above {cfg.tol_grad:g}", trace
        )
    return u, trace, (schedule[-1] if schedule else 0.0)


def _tag_mask(dom: DiscreteDomain, tag: str) -> NDArray[np.bool_]:
    if tag not in dom.tags:
        raise DomainError(f"Boundary tag {tag!r} is not present on {dom!r}")
    mask = np.zeros(dom.n_vertices, dtype=bool)
    mask[dom.tags[tag]] = True
    return mask


def _model_at_rim(dom: DiscreteDomain) -> bool:
    """Whether the metric on the triangles touching the outer rim is the model metric."""
    if dom.mm is None:
        return False
    if not isinstance(dom, SurfaceMesh) or dom.warp is None:
        return True
    rim_cells = np.any(np.isin(dom.cells, dom.tags[OUTER_TAG]), axis=1)
    bary = dom.tri_chart[rim_cells].mean(axis=1)
    ratio = dom.warp(bary[:, 0], bary[:, 1]) / dom.mm.h_at(bary[:, 0])
    return bool(np.allclose(ratio, 1.0, rtol=0.0, atol=1e-12))


def far_field_value(dom: DiscreteDomain, g_values: FloatArray, p: float, radius: float) -> float:
    """Value at the outer radius of the kernel on the whole manifold.

    Domains that carry a model and agree with it next to the outer rim get the
    model value; a surface whose perturbation reaches the rim does not. Otherwise
    log|grad G| is fitted on the outer half of the domain against t
    (exponential) and log t (polynomial) and the better fit is integrated to
    infinity. Parabolic geometries get 0.
    """
    if _model_at_rim(dom):
        assert dom.mm is not None
        if math.isinf(dom.mm.r_inf) and nonparabolic(dom.mm, p):
            return float(green_kernel_model(dom.mm, p).value(np.array([radius]))[0])
        return 0.0
    t = dom.cell_radius()
    grad = np.linalg.norm(_gradients(dom, g_values), axis=1)
    band = (t >= 0.5 * radius) & (grad > 0)
    if np.count_nonzero(band) < 4:
        return 0.0
    y = np.log(grad[band])
    best: tuple[float, str, float, float] | None = None
    for regime, x in (("exponential", t[band]), ("polynomial", np.log(t[band]))):
        slope, intercept = np.polyfit(x, y, 1)
        residual = float(np.sqrt(np.mean((intercept + slope * x - y) ** 2)))
        if best is None or residual < best[0]:
            best = (residual, regime, float(intercept), float(-slope))
    assert best is not None
    _, regime, a, b = best
    if regime == "exponential":
        return math.exp(a - b * radius) / b if b > 0 else 0.0
    return math.exp(a) * radius ** (1.0 - b) / (b - 1.0) if b > 1 else 0.0


def capacity_potential(
    dom: DiscreteDomain,
    k_tag: str,
    outer_tag: str,
    cfg: PSolveConfig,
    u0: FloatArray | None = None,
    far_field: bool = False,
) -> SolveReport:
    """Potential of the capacitor (K, Omega): p-harmonic, 1 on K and 0 on the outer rim.

    Args:
        dom: Domain carrying both tags
        k_tag: Tag of the vertices of K
        outer_tag: Tag of the outer boundary
        cfg: Solver parameters
        u0: Warm start; boundary values are overwritten
        far_field: Extrapolate the outer rim to infinity, returning the
            potential of (K, M) and its capacity

    Raises:
        DomainError: If p <= 1 or a tag is missing
        DegenerateCapacitorError: If no free vertex separates the plates
        ConvergenceError: If the solver does not reach ``cfg.tol_grad``
    """
    p = cfg.p
    if p <= 1:
        raise DomainError(f"p must exceed 1, got {p}")
    inner = _tag_mask(dom, k_tag)
    outer = _tag_mask(dom, outer_tag)
    if np.any(inner & outer):
        raise DegenerateCapacitorError(f"Tags {k_tag!r} and {outer_tag!r} share vertices")
    fixed = inner | outer
    if not np.any(~fixed):
        raise DegenerateCapacitorError("Capacitor has no free vertices")

    start = _initial_guess(dom, inner, outer, p) if u0 is None else np.asarray(u0, float).copy()
    start[inner] = 1.0
    start[outer] = 0.0
    u, trace, eps_final = minimize_p_energy(dom, start, fixed, cfg)
    cap = dirichlet_energy(dom, u, p)
    residual = weak_residual(dom, u, p, fixed=fixed)

    lo, hi = float(u.min()), float(u.max())
    if lo < -cfg.tol_grad or hi > 1 + cfg.tol_grad:
        logger.warning("Discrete maximum principle violated: u in [%.6g, %.6g]", lo, hi)

    report = SolveReport(ScalarField(dom, u, "u"), p, cap, cap, residual, trace, eps_final)
    report.members = [u]
    if far_field:
        radius = float(np.min(dom.radial_coordinate[outer]))
        scale = cap ** (-1.0 / (p - 1))
        shift = far_field_value(dom, scale * u, p, radius)
        if shift <= 0:
            raise DivergentKernelError("Capacity to infinity vanishes: the geometry is parabolic")
        top = scale + shift
        report.field = ScalarField(dom, (scale * u + shift) / top, "u")
        report.capacity = top ** (1 - p)
        report.energy = report.capacity
        report.scale = 1.0 / top
        report.far_field = shift
        report.kind = "capacity-to-infinity"
    logger.info("Capacity potential p=%g: cap=%.12g, residual %.3g", p, report.capacity, residual)
    return report


def default_exhaustion(dom: DiscreteDomain, members: int = 4) -> list[float]:
    top = float(np.max(dom.radial_coordinate))
    return [float(r) for r in np.linspace(0.5 * top, top, members)]


def green_kernel_numeric(
    dom: DiscreteDomain,
    p: float,
    cfg: PSolveConfig | None = None,
    exhaustion: ArrayLike | None = None,
    threads: int | None = None,
    warm: Sequence[FloatArray] | None = None,
) -> SolveReport:
    """Green kernel with pole at the collar, by exhaustion with far-field shifts.

    Every member is cap^(-1/(p-1)) times the capacity potential of the collar
    in the sub-domain of the given radius, hence has unit flux. The shifted
    members must form a Cauchy sequence on the innermost sub-domain. The
    unscaled member potentials stay on the report so that ``warm``, one start
    per member, can seed the next exponent.

    Raises:
        DomainError: If p is outside (1, m] or the collar is missing
        ExhaustionDivergenceError: If the last shifted members still differ
            by more than ``cfg.exhaustion_tol``
    """
    if not 1 < p <= dom.m:
        raise DomainError(f"p={p} outside (1, m={dom.m}]")
    if POLE_TAG not in dom.tags:
        raise DomainError("Kernel solves need a pole collar")
    cfg = cfg or PSolveConfig(p=p)
    if cfg.p != p:
        cfg = cfg.model_copy(update={"p": p})
    radii = sorted(
        float(r) for r in (exhaustion if exhaustion is not None else default_exhaustion(dom))
    )
    if warm is not None and len(warm) != len(radii):
        raise DomainError(f"{len(warm)} warm starts for {len(radii)} exhaustion members")
    starts = list(warm) if warm is not None else [None] * len(radii)
    threads = threads or settings.threads

    def member(radius: float, u0: FloatArray | None) -> tuple[SolveReport, NDArray[np.int64]]:
        sub, vmap = dom.restrict(radius)
        if u0 is not None and u0.shape != (sub.n_vertices,):
            u0 = None
        report = capacity_potential(sub, POLE_TAG, OUTER_TAG, cfg, u0=u0)
        scale = report.capacity ** (-1.0 / (p - 1))
        values = scale * report.field.values
        shift = far_field_value(sub, values, p, radius)
        report.field = ScalarField(sub, values + shift, "G")
        report.kind = "kernel"
        report.scale = scale
        report.far_field = shift
        return report, vmap

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        members = list(pool.map(member, radii, starts))

    core = members[0][1]
    sup_norms: list[float] = []
    previous = None
    for report, vmap in members:
        pos = np.searchsorted(vmap, core)
        current = report.field.values[pos]
        if previous is not None:
            unshifted_prev = previous[0] - previous[1]
            unshifted = current - report.far_field
            if np.any(unshifted < unshifted_prev - cfg.exhaustion_tol * np.abs(unshifted_prev)):
                logger.warning("Exhaustion kernels are not monotone in the radius")
            sup_norms.append(float(np.max(np.abs(current - previous[0])) / np.max(previous[0])))
        previous = (current, report.far_field)

    final, _ = members[-1]
    final.sup_norms = sup_norms
    final.members = [report.members[0] for report, _ in members]
    if sup_norms and sup_norms[-1] > cfg.exhaustion_tol:
        last_two = (sup_norms[-2] if len(sup_norms) > 1 else math.nan, sup_norms[-1])
        raise ExhaustionDivergenceError(
            f"Exhaustion is not Cauchy: last sup-norms {last_two[0]:.3g}, {last_two[1]:.3g}",
            last_two,
        )
    final.residual_weak = weak_residual(
        final.field.owner, final.field, p, rhs="dirac-at-collar"
    )
    final.energy = dirichlet_energy(final.field.owner, final.field.values, p)
    logger.info(
        "Green kernel p=%g: %d members, far field %.6g, residual %.3g",
        p,
        len(members),
        final.far_field,
        final.residual_weak,
    )
    return final


def kernel_collar_value(report: SolveReport, r: ArrayLike) -> FloatArray:
    """Kernel inside the collar from the pole asymptote matched at radius eps."""
    dom = report.field.owner
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0) or np.any(r_arr > dom.eps * (1 + 1e-12)):
        raise DomainError(f"Collar values need 0 < r <= eps={dom.eps:g}")
    at_collar = float(np.mean(report.field.values[dom.tags[POLE_TAG]]))
    p = report.p
    return at_collar + mu_euclidean(dom.m, p, r_arr) - float(mu_euclidean(dom.m, p, dom.eps))


def warm_start(previous: ScalarField | FloatArray, p_previous: float, p: float) -> FloatArray:
    """u_p ~ u_q^((q-1)/(p-1)), since (1-p) log u_p barely moves with p."""
    raw = previous.values if isinstance(previous, ScalarField) else previous
    values = np.clip(np.asarray(raw, dtype=float), 0.0, None)
    return values ** ((p_previous - 1) / (p - 1))


def log_transform(report: SolveReport | ScalarField, p: float) -> ScalarField:
    """w_p = (1 - p) log u.

    Raises:
        DomainError: If u is not strictly positive, naming the first offending vertex
    """
    field_ = report.field if isinstance(report, SolveReport) else report
    u = field_.values
    bad = np.flatnonzero(~(u > 0))
    if bad.size:
        i = int(bad[0])
        raise DomainError(f"log transform of the non-positive value {u[i]:.6g} at vertex {i}")
    return field_.with_values((1 - p) * np.log(u), "w")
