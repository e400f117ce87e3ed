"""Explicit constants of the decay and Harnack estimates, and the audits that use them.

Constants are pure formulas of (p, nu) and the Sobolev constant S_{p,nu}.
Audits compare them, or the flux functionals of a fake distance, with
measured fields and return :class:`~fakedist.fake.EstimateAudit` records.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal, NamedTuple

import numpy as np
from numpy.typing import ArrayLike

from fakedist.archive import write_csv
from fakedist.config import settings
from fakedist.errors import DomainError, ValueRangeError
from fakedist.fake import EstimateAudit, FakeDistanceField, audit_tolerance
from fakedist.geom import (
    POLE_TAG,
    ScalarField,
    ball_volume_profile,
    geodesic_distance,
    level_set_measure,
    surface_integral_on_level,
    volume_integral_below,
)
from fakedist.model import FloatArray, ball_volume, sphere_volume
from fakedist.psolve import PSolveConfig, SolveReport

if TYPE_CHECKING:
    from fakedist.imcf import FlowResult

logger = logging.getLogger(__name__)

Role = Literal["sub", "super"]
Weight = Literal["one", "volume"]


def decay_constant(p: float, nu: float, sobolev: float) -> float:
    """C_{p,nu} = S^(nu/p) [2^nu p (1+p)^p (p/(p-1))^(p-1)]^((nu-p)/p).

    Raises:
        DomainError: If p is not in (1, nu) or S is not positive
    """
    if not 1 < p < nu:
        raise DomainError(f"Decay constant needs 1 < p < nu, got p={p}, nu={nu}")
    if sobolev <= 0:
        raise DomainError(f"Sobolev constant must be positive, got {sobolev}")
    base = 2.0**nu * p * (1.0 + p) ** p * (p / (p - 1.0)) ** (p - 1.0)
    return sobolev ** (nu / p) * base ** ((nu - p) / p)


def l1_decay_constant(m: int, s1: float) -> float:
    """S_1^m 2^(m^2 - 1), the p -> 1 constant of the localized decay estimate."""
    if s1 <= 0:
        raise DomainError(f"Sobolev constant must be positive, got {s1}")
    return s1**m * 2.0 ** (m * m - 1)


def half_harnack_constants(p: float, nu: float, q: float) -> float:
    """Moser constant: 2^nu (1+p)^p for q >= p, 2^nu 3^p nu^nu/(p^p (nu-p)^(nu-p))
    for 0 < q < p and 2^(p+nu) for q < 0.

    Raises:
        DomainError: If q = 0, p <= 1 or p >= nu
    """
    if q == 0:
        raise DomainError("The half-Harnack exponent q must be nonzero")
    if not 1 < p < nu:
        raise DomainError(f"Half-Harnack constants need 1 < p < nu, got p={p}, nu={nu}")
    if q < 0:
        return 2.0 ** (p + nu)
    if q >= p:
        return 2.0**nu * (1.0 + p) ** p
    return 2.0**nu * 3.0**p * nu**nu / (p**p * (nu - p) ** (nu - p))


def moser_q0(p: float, nu: float, q: float) -> float:
    """Starting exponent of the Moser iteration for the exponent q.

    For q > 0 the iterates q0 k^i, k = nu/(nu-p), stay at distance at least
    (k-1) q/(2k) from p - 1; q0 lies in (q/k, q] and equals q when q >= p or
    p - 1 <= q/k. Supersolutions (q < 0) start at q itself.

    Raises:
        DomainError: If q = 0 or p is not in (1, nu)
    """
    if q == 0:
        raise DomainError("The half-Harnack exponent q must be nonzero")
    if not 1 < p < nu:
        raise DomainError(f"Moser iteration needs 1 < p < nu, got p={p}, nu={nu}")
    if q < 0 or q >= p:
        return q
    k = nu / (nu - p)
    a = q / k
    if p - 1 <= a:
        return q
    j = max(1, math.ceil(math.log((p - 1) / a) / math.log(k)))
    while (p - 1) > k**j * a:
        j += 1
    while j > 1 and (p - 1) <= k ** (j - 1) * a:
        j -= 1
    lo, hi = k ** (j - 1) * a, k**j * a
    half = (hi - lo) / 2.0
    anchor = (p - 1) - half if (p - 1) > lo + half else (p - 1) + half
    return anchor / k ** (j - 1)


def harnack_constant(p: float, nu: float) -> float:
    """C_{p,nu} = 2^nu max{(1+p)^p, 3^p nu^nu/(p^p (nu-p)^(nu-p))}."""
    return max(half_harnack_constants(p, nu, p), half_harnack_constants(p, nu, p / 2.0))


def harnack_q_factor(p: float, nu: float, sobolev: float, radius: float, volume_2r: float) -> float:
    """Q, the infimum over tau in [1, nu/(nu-p)] of (S C)^(-nu tau/p) R^(nu tau) |B_2R|^(-tau).

    The logarithm is linear in tau, so the infimum sits at an end point.
    """
    if radius <= 0 or volume_2r <= 0:
        raise DomainError("Harnack factor needs a positive radius and ball volume")
    slope = (
        -(nu / p) * math.log(sobolev * harnack_constant(p, nu))
        + nu * math.log(radius)
        - math.log(volume_2r)
    )
    return math.exp(min(slope, slope * nu / (nu - p)))


def harnack_exponent(
    c2: float, p: float, poincare: float, volume_ratio: float, q_factor: float
) -> float:
    """log H_{p,nu} = c2 P (|B_6R|/|B_2R|)^(1/p) Q^-2 p; c2 is not known explicitly."""
    return c2 * poincare * volume_ratio ** (1.0 / p) * q_factor**-2 * p


@dataclass(frozen=True)
class ConstantsRecord:
    """Inputs of the explicit estimates for one exponent and their derived constants."""

    p: float
    nu: float
    sobolev: float
    p0: float | None = None
    poincare: float | None = None
    radius: float | None = None
    volume_2r: float | None = None
    volume_ratio: float | None = None

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value is not None and value <= 0:
                raise DomainError(f"Constant {name} must be positive, got {value}")

    @property
    def decay(self) -> float:
        return decay_constant(self.p, self.nu, self.sobolev)

    @property
    def harnack(self) -> float:
        return harnack_constant(self.p, self.nu)

    def half_harnack(self, q: float) -> float:
        return half_harnack_constants(self.p, self.nu, q)

    def q_factor(self) -> float:
        if self.radius is None or self.volume_2r is None:
            raise DomainError("The Harnack factor needs the radius and |B_2R|")
        return harnack_q_factor(self.p, self.nu, self.sobolev, self.radius, self.volume_2r)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["decay_constant"] = self.decay
        out["harnack_constant"] = self.harnack
        out["half_harnack"] = {
            "sub_small_q": self.half_harnack(self.p / 2.0),
            "sub_large_q": self.half_harnack(self.p),
            "super": self.half_harnack(-1.0),
        }
        return out


def _tol(dom_mesh_size: float, tol_grad: float | None) -> float:
    tol_grad = PSolveConfig.model_fields["tol_grad"].default if tol_grad is None else tol_grad
    return audit_tolerance(dom_mesh_size, tol_grad)


def _volume_weight(dom: Any, nu: float, top: float) -> tuple[FloatArray, FloatArray]:
    """Grid s and eta(s) = sup over (0, s] of s^nu / |B_s|."""
    grid = np.geomspace(0.5 * dom.eps, top, 128)
    eta = np.maximum.accumulate(grid**nu / ball_volume_profile(dom, grid))
    return grid, eta


def check_decay(
    kernel: SolveReport,
    sobolev: float,
    nu: float | None = None,
    weight: Weight = "one",
    tol_grad: float | None = None,
) -> EstimateAudit:
    """G <= C^(1/(p-1)) eta(2r)^(1/(p-1)) r^(-(nu-p)/(p-1)), audited in logarithms.

    With ``weight="volume"`` eta(t) is the supremum of s^nu/|B_s| over (0, t]
    measured on the domain, and only vertices with 2r inside the domain count.
    """
    dom = kernel.field.owner
    p = kernel.p
    nu = float(dom.m) if nu is None else nu
    constant = decay_constant(p, nu, sobolev)
    r = dom.r_field
    top = float(np.max(r[np.isfinite(r)]))
    audited = np.zeros(dom.n_vertices, dtype=bool)
    audited[np.unique(dom.cells[dom.interior_cells()])] = True
    audited &= (r > 0) & (kernel.field.values > 0)
    log_eta = np.zeros(dom.n_vertices)
    if weight == "volume":
        audited &= 2 * r <= top
        grid, eta = _volume_weight(dom, nu, top)
        idx = np.clip(np.searchsorted(grid, 2 * r, side="right") - 1, 0, grid.size - 1)
        log_eta = np.log(eta[idx])
    if not np.any(audited):
        raise DomainError("No vertices left for the decay audit")
    log_rhs = (math.log(constant) + log_eta[audited]) / (p - 1) - (nu - p) / (p - 1) * np.log(
        r[audited]
    )
    excess = np.log(kernel.field.values[audited]) - log_rhs
    k = int(np.argmax(excess))
    return EstimateAudit.inequality(
        f"decay_{weight}",
        float(excess[k]),
        0.0,
        _tol(dom.mesh_size, tol_grad),
        location=int(np.flatnonzero(audited)[k]),
        p=p,
        nu=nu,
        constant=constant,
        margin=float(-np.max(excess)),
    )


class Annulus(NamedTuple):
    """A_inf = {inner <= r <= outer}, A_0 its neighbourhood of width margin."""

    inner: float
    outer: float
    margin: float


def check_half_harnack(
    field: ScalarField,
    role: Role,
    annulus: Annulus,
    constants: ConstantsRecord,
    q: float,
    tol_grad: float | None = None,
) -> EstimateAudit:
    """Moser's sup bound for subsolutions (q > 0) or inf bound for supersolutions (q < 0).

    Raises:
        DomainError: If the sign of q does not match the role, or A_0 leaves the domain
    """
    if (role == "sub") != (q > 0):
        raise DomainError(f"A {role}solution audit needs q {'>' if role == 'sub' else '<'} 0")
    dom = field.owner
    r = ScalarField(dom, dom.r_field, "r")
    lo, hi = annulus.inner - annulus.margin, annulus.outer + annulus.margin
    if lo <= dom.eps or hi >= float(np.max(r.values)) or annulus.inner >= annulus.outer:
        raise DomainError(f"Annulus [{lo:g}, {hi:g}] does not fit inside the domain")
    p, nu = constants.p, constants.nu
    q0 = moser_q0(p, nu, q)
    c_bar = half_harnack_constants(p, nu, q)

    u = np.clip(field.values, 1e-300, None)
    core = (r.values >= annulus.inner) & (r.values <= annulus.outer)
    ones = ScalarField(dom, np.ones(dom.n_vertices))
    volume = volume_integral_below(ones, None, r, hi) - volume_integral_below(ones, None, r, lo)
    powered = ScalarField(dom, u**q)
    mean = (
        volume_integral_below(powered, None, r, hi) - volume_integral_below(powered, None, r, lo)
    ) / volume
    log_bound = (
        nu / (p * q0) * math.log(constants.sobolev * c_bar)
        - nu / q0 * math.log(annulus.margin)
        + math.log(volume) / q0
        + math.log(mean) / q
    )
    if role == "sub":
        lhs, rhs = math.log(float(np.max(u[core]))), log_bound
    else:
        lhs, rhs = -math.log(float(np.min(u[core]))), -log_bound
    return EstimateAudit.inequality(
        f"half_harnack_{role}",
        lhs,
        rhs,
        _tol(dom.mesh_size, tol_grad),
        q=q,
        q0=q0,
        constant=c_bar,
        annulus=list(annulus),
    )


def harnack_exponent_fit(
    p_list: Sequence[float], log_ratios: Sequence[float]
) -> tuple[float, float]:
    """Least-squares (c, d) in log(sup/inf) = c/(p-1) + d."""
    x = 1.0 / (np.asarray(p_list, dtype=float) - 1.0)
    basis = np.column_stack([x, np.ones_like(x)])
    (c, d), *_ = np.linalg.lstsq(basis, np.asarray(log_ratios, dtype=float), rcond=None)
    return float(c), float(d)


def harnack_log_ratio(field: ScalarField, center: int, radius: float) -> float:
    """log(sup/inf) of a positive field over the geodesic ball B_radius(center)."""
    dist = geodesic_distance(field.owner, center).values
    inside = dist <= radius
    values = field.values[inside]
    if values.size == 0 or np.any(values <= 0):
        raise DomainError("Harnack ratio needs a positive field on a non-empty ball")
    return float(math.log(np.max(values) / np.min(values)))


def check_harnack_form(
    kernels: Sequence[SolveReport], center: int, radius: float, rel: float = 0.1
) -> EstimateAudit:
    """(p-1) log(sup/inf) stays below the fitted c (1 + rel), c from c/(p-1) + d.

    Raises:
        DomainError: If fewer than three exponents are given
    """
    if len(kernels) < 3:
        raise DomainError(f"Harnack form fit needs at least 3 exponents, got {len(kernels)}")
    p_list = [k.p for k in kernels]
    ratios = [harnack_log_ratio(k.field, center, radius) for k in kernels]
    c, d = harnack_exponent_fit(p_list, ratios)
    scaled = [(p - 1) * y for p, y in zip(p_list, ratios)]
    k = int(np.argmax(scaled))
    return EstimateAudit.inequality(
        "harnack_form",
        scaled[k],
        max(c, 0.0) * (1.0 + rel),
        1e-12,
        location=p_list[k],
        c=c,
        d=d,
        p=p_list,
        log_ratios=ratios,
    )


def check_refinement_stability(
    name: str, coarse: float, fine: float, rel: float = 0.2
) -> EstimateAudit:
    """|fine - coarse| <= rel |coarse|."""
    return EstimateAudit.identity(f"{name}_refinement", fine, coarse, rel)


def kernel_flux(kernel: SolveReport, level: float) -> float:
    """Integral of |grad G|^(p-1) over the level set {G = level}."""
    g = kernel.field
    return surface_integral_on_level(
        ScalarField(g.owner, np.ones(g.owner.n_vertices)),
        g.gradient_norm ** (kernel.p - 1),
        g,
        level,
        conservative=True,
    )


def mid_levels(values: FloatArray, count: int, lo: float = 0.25, hi: float = 0.75) -> FloatArray:
    finite = values[np.isfinite(values)]
    a, b = float(np.min(finite)), float(np.max(finite))
    return a + (b - a) * np.linspace(lo, hi, count)


def check_kernel_flux(kernel: SolveReport, levels: int = 10, rtol: float = 0.01) -> EstimateAudit:
    """Unit flux of the kernel through level sets at the middle vertex quantiles of G."""
    values = kernel.field.values
    ts = np.quantile(values[np.isfinite(values)], np.linspace(0.25, 0.75, levels))
    fluxes = np.array([kernel_flux(kernel, float(t)) for t in ts])
    k = int(np.argmax(np.abs(fluxes - 1.0)))
    return EstimateAudit.identity(
        "kernel_flux", float(fluxes[k]), 1.0, rtol, location=float(ts[k]), fluxes=fluxes.tolist()
    )


def _collar_term(fd: FakeDistanceField, u: ScalarField) -> float:
    """Contribution of the unmeshed collar to integrals over {rho <= t}."""
    dom = fd.domain
    collar = dom.tags[POLE_TAG]
    rho_collar = float(np.mean(fd.rho.values[collar]))
    return float(np.mean(u.values[collar])) * float(ball_volume(fd.model.mm, [rho_collar])[0])


def flux_functionals(fd: FakeDistanceField, u: ScalarField, t: float) -> tuple[float, float]:
    """A_u(t) = flux of u |grad rho|^(p-1) over {rho = t} / v_h(t) and
    V_u(t) = integral of u |grad rho|^p over {rho <= t} / V_h(t).

    Raises:
        ValueRangeError: If t is outside the range of rho
    """
    rho = fd.rho
    lo, hi = float(np.min(rho.values)), float(np.max(rho.values))
    if not lo < t < hi:
        raise ValueRangeError(f"Level {t:g} outside the fake distance range ({lo:g}, {hi:g})")
    p = fd.p
    mm = fd.model.mm
    grad = rho.gradient_norm
    flux = surface_integral_on_level(u, grad ** (p - 1), rho, t, conservative=True)
    bulk = volume_integral_below(u, grad**p, rho, t) + _collar_term(fd, u)
    return (
        flux / float(sphere_volume(mm, [t])[0]),
        bulk / float(ball_volume(mm, [t])[0]),
    )


def check_unit_functionals(
    fd: FakeDistanceField, levels: ArrayLike | None = None, rtol: float | None = None
) -> list[EstimateAudit]:
    """A_1 = 1 and V_1 = 1 on mid-range levels of rho."""
    rtol = settings.identity_rtol if rtol is None else rtol
    ts = mid_levels(fd.rho.values, 10) if levels is None else np.asarray(levels, dtype=float)
    ones = ScalarField(fd.domain, np.ones(fd.domain.n_vertices))
    values = np.array([flux_functionals(fd, ones, float(t)) for t in ts])
    audits = []
    for column, name in enumerate(("A1", "V1")):
        k = int(np.argmax(np.abs(values[:, column] - 1.0)))
        audits.append(
            EstimateAudit.identity(
                f"unit_functional_{name}",
                float(values[k, column]),
                1.0,
                rtol,
                location=float(ts[k]),
            )
        )
    return audits


def check_functional_derivative(
    fd: FakeDistanceField, u: ScalarField, levels: ArrayLike, rtol: float = 0.05
) -> EstimateAudit:
    """V_u' = (v_h/V_h)(A_u - V_u), with V_u' by central differences."""
    mm = fd.model.mm
    worst: tuple[float, float, float] | None = None
    for t in np.asarray(levels, dtype=float):
        step = 1e-2 * t
        _, v_plus = flux_functionals(fd, u, t + step)
        _, v_minus = flux_functionals(fd, u, t - step)
        a, v = flux_functionals(fd, u, t)
        lhs = (v_plus - v_minus) / (2 * step)
        ratio = float(sphere_volume(mm, [t])[0] / ball_volume(mm, [t])[0])
        rhs = ratio * (a - v)
        scale = ratio * max(abs(a), abs(v))
        gap = abs(lhs - rhs) / scale
        if worst is None or gap > worst[0]:
            worst = (gap, float(t), rhs)
    assert worst is not None
    return EstimateAudit.inequality(
        "functional_derivative", worst[0], 0.0, rtol, location=worst[1], expected=worst[2]
    )


def functionals_table(fd: FakeDistanceField, levels: ArrayLike) -> dict[str, FloatArray]:
    """Columns t, A1, V1, perimeter, v_h, volume, V_h for the given levels."""
    mm = fd.model.mm
    ones = ScalarField(fd.domain, np.ones(fd.domain.n_vertices))
    ts = np.asarray(levels, dtype=float)
    rows = []
    for t in ts:
        a1, v1 = flux_functionals(fd, ones, float(t))
        measured = level_set_measure(fd.rho, float(t))
        rows.append(
            (a1, v1, measured.perimeter, measured.enclosed_volume + fd.domain.collar_volume)
        )
    data = np.array(rows)
    return {
        "t": ts,
        "A1": data[:, 0],
        "V1": data[:, 1],
        "perimeter": data[:, 2],
        "v_h": sphere_volume(mm, ts),
        "volume": data[:, 3],
        "V_h": ball_volume(mm, ts),
    }


def write_functionals_csv(path: str | Path, table: dict[str, FloatArray]) -> Path:
    return write_csv(path, table)


def check_isoperimetric(
    fr: "FlowResult",
    levels: ArrayLike | None = None,
    rtol: float = 0.03,
    slack: float = 0.01,
) -> list[EstimateAudit]:
    """Perimeter of {rho1 < t} = v_h(t), |{rho1 < t}| >= V_h(t), and the small-t trend.

    The trend audit is soft: |perimeter / v_h - 1| should not grow as t
    decreases over the decade above the collar.
    """
    dom = fr.domain
    mm = fr.model
    rho1 = fr.rho1
    ts = mid_levels(rho1.values, 10) if levels is None else np.asarray(levels, dtype=float)
    perimeters, volumes = [], []
    for t in ts:
        measured = level_set_measure(rho1, float(t))
        perimeters.append(measured.perimeter)
        volumes.append(measured.enclosed_volume + dom.collar_volume)
    ratio_p = np.array(perimeters) / sphere_volume(mm, ts)
    ratio_v = np.array(volumes) / ball_volume(mm, ts)
    kp = int(np.argmax(np.abs(ratio_p - 1.0)))
    kv = int(np.argmin(ratio_v))
    audits = [
        EstimateAudit.identity(
            "perimeter_identity", float(ratio_p[kp]), 1.0, rtol, location=float(ts[kp])
        ),
        EstimateAudit.inequality(
            "volume_lower_bound",
            (1.0 - slack) - float(ratio_v[kv]),
            0.0,
            0.0,
            location=float(ts[kv]),
            gap=float(np.min(ratio_v) - 1.0),
        ),
    ]

    collar = float(np.max(rho1.values[dom.tags[POLE_TAG]]))
    top = float(np.max(rho1.values))
    small = np.geomspace(2.0 * collar, min(20.0 * collar, 0.5 * top), 6)
    deviation = np.array(
        [
            abs(level_set_measure(rho1, float(t)).perimeter / float(sphere_volume(mm, [t])[0]) - 1)
            for t in small
        ]
    )
    growth = np.diff(deviation[::-1])
    audits.append(
        EstimateAudit.inequality(
            "small_level_perimeter_trend",
            float(np.max(growth)) if growth.size else 0.0,
            0.0,
            _tol(dom.mesh_size, None),
            hard=False,
            levels=small.tolist(),
            deviation=deviation.tolist(),
        )
    )
    return audits


def audits_to_json(audits: Sequence[EstimateAudit]) -> dict[str, Any]:
    hard = [a.name for a in audits if not a.passed and a.hard]
    soft = [a.name for a in audits if not a.passed and not a.hard]
    return {
        "audits": [a.to_dict() for a in audits],
        "passed": not hard and not soft,
        "hard_failures": hard,
        "soft_failures": soft,
    }
