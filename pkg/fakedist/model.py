"""Model manifolds M_h, their volumes and their p-Green kernels.

A model is the warped product dt^2 + h(t)^2 g_{S^{m-1}} where h solves
h'' = H h, h(0) = 0, h'(0) = 1 for a curvature profile H. Kernel values are
tabulated in logarithmic form so that steep exponents (p close to 1) neither
overflow near the pole nor underflow far away.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline
from scipy.special import gamma, logsumexp

from fakedist.config import settings
from fakedist.errors import (
    DivergentKernelError,
    DomainError,
    IndeterminateError,
    InternalConsistencyError,
    InvalidProfileError,
    ValueRangeError,
)

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
ProfileKind = Literal["constant", "table", "closure", "inverse_square"]
TailRegime = Literal["exponential", "polynomial"]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
_LOG_GL_WEIGHTS = np.log(_GL_WEIGHTS)


def sphere_area(m: int) -> float:
    """Volume of the unit (m-1)-sphere, 2 pi^(m/2) / Gamma(m/2)."""
    return float(2.0 * math.pi ** (m / 2.0) / gamma(m / 2.0))


@dataclass(frozen=True, eq=False)
class CurvatureProfile:
    """Radial curvature bound H(t), nonnegative and non-increasing."""

    kind: ProfileKind
    kappa2: float = 0.0
    kappa: float = 0.0
    t_samples: FloatArray | None = None
    values: FloatArray | None = None
    func: Callable[[FloatArray], ArrayLike] | None = None
    allow_negative: bool = False

    @classmethod
    def constant(cls, kappa2: float, allow_negative: bool = False) -> "CurvatureProfile":
        """Constant profile H = kappa2.

        Negative values describe comparison-from-above models (h = sin) and
        are refused unless ``allow_negative`` is set.
        """
        if kappa2 < 0 and not allow_negative:
            raise InvalidProfileError(f"Curvature profile is negative: kappa2={kappa2}")
        return cls("constant", kappa2=float(kappa2), allow_negative=allow_negative)

    @classmethod
    def table(cls, t: ArrayLike, values: ArrayLike) -> "CurvatureProfile":
        t_arr = np.asarray(t, dtype=float)
        v_arr = np.asarray(values, dtype=float)
        if t_arr.ndim != 1 or t_arr.shape != v_arr.shape or t_arr.size < 2:
            raise InvalidProfileError("Tabulated profile needs matching 1-D t and H arrays")
        if np.any(np.diff(t_arr) <= 0):
            raise InvalidProfileError("Tabulated profile abscissae must be strictly increasing")
        return cls("table", t_samples=t_arr, values=v_arr)

    @classmethod
    def closure(cls, func: Callable[[FloatArray], ArrayLike]) -> "CurvatureProfile":
        return cls("closure", func=func)

    @classmethod
    def inverse_square(cls, kappa: float) -> "CurvatureProfile":
        """Profile H(t) = kappa^2 / t^2, whose model is h(t) = t^kappa'."""
        if kappa < 0:
            raise InvalidProfileError(f"kappa must be nonnegative, got {kappa}")
        return cls("inverse_square", kappa=float(kappa))

    @property
    def pole_exponent(self) -> float:
        """Exponent k with h(t) ~ t^k at the pole."""
        if self.kind == "inverse_square":
            return (1.0 + math.sqrt(1.0 + 4.0 * self.kappa**2)) / 2.0
        return 1.0

    def __call__(self, t: ArrayLike) -> FloatArray:
        t_arr = np.asarray(t, dtype=float)
        match self.kind:
            case "constant":
                return np.full_like(t_arr, self.kappa2)
            case "table":
                assert self.t_samples is not None and self.values is not None
                return np.interp(t_arr, self.t_samples, self.values)
            case "closure":
                assert self.func is not None
                return np.asarray(self.func(t_arr), dtype=float) * np.ones_like(t_arr)
            case _:
                with np.errstate(divide="ignore"):
                    return self.kappa**2 / t_arr**2

    def at_infinity(self) -> float:
        """Limit of H at infinity."""
        match self.kind:
            case "constant":
                return self.kappa2
            case "table":
                assert self.values is not None
                return float(self.values[-1])
            case "closure":
                return float(self(np.array([1e8]))[0])
            case _:
                return 0.0

    def validate(self, samples: ArrayLike) -> None:
        """Check H >= 0 and H non-increasing on the given increasing samples.

        Raises:
            InvalidProfileError: If a sample violates either property
        """
        t = np.asarray(samples, dtype=float)
        values = self(t)
        if not np.all(np.isfinite(values)):
            raise InvalidProfileError("Curvature profile is not finite on the samples")
        if not self.allow_negative and np.any(values < 0):
            bad = float(t[np.argmax(values < 0)])
            raise InvalidProfileError(f"Curvature profile is negative at t={bad:.6g}")
        scale = max(1.0, float(np.max(np.abs(values))))
        rising = np.diff(values) > 1e-12 * scale
        if np.any(rising):
            bad = float(t[1:][np.argmax(rising)])
            raise InvalidProfileError(f"Curvature profile increases at t={bad:.6g}")

    def to_dict(self) -> dict[str, Any]:
        match self.kind:
            case "constant":
                return {"kind": "constant", "kappa2": self.kappa2}
            case "table":
                assert self.t_samples is not None and self.values is not None
                return {"kind": "table", "t": self.t_samples.tolist(), "H": self.values.tolist()}
            case "inverse_square":
                return {"kind": "inverse_square", "kappa": self.kappa}
            case _:
                return {"kind": "closure"}


def _log_power_integral(gamma_: float, lo: FloatArray, hi: float) -> FloatArray:
    """log of the integral of s^(-gamma) over [lo, hi]; ``hi`` may be infinite."""
    e = 1.0 - gamma_
    lo = np.asarray(lo, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if abs(e) < 1e-12:
            return np.log(np.log(hi / lo))
        if e < 0:
            ratio = 0.0 if math.isinf(hi) else (hi / lo) ** e
            return e * np.log(lo) + np.log1p(-ratio) - math.log(-e)
        return e * math.log(hi) + np.log1p(-((lo / hi) ** e)) - math.log(e)


@dataclass(frozen=True)
class TailFit:
    """Growth of log v_h beyond the table: a + b t or a + b log t."""

    regime: TailRegime
    a: float
    b: float
    t0: float
    residual: float = 0.0

    def log_volume(self, t: ArrayLike) -> FloatArray:
        t_arr = np.asarray(t, dtype=float)
        if self.regime == "exponential":
            return self.a + self.b * t_arr
        return self.a + self.b * np.log(t_arr)

    def inverse_log_volume(self, log_v: ArrayLike) -> FloatArray:
        lv = np.asarray(log_v, dtype=float)
        if self.regime == "exponential":
            return (lv - self.a) / self.b
        return np.exp((lv - self.a) / self.b)

    def log_kernel_integral(self, t: ArrayLike, r: float, p: float) -> FloatArray:
        """log of the integral of v_h^(-1/(p-1)) over [t, r]."""
        t_arr = np.asarray(t, dtype=float)
        q = p - 1.0
        if self.regime == "exponential":
            rate = self.b / q
            with np.errstate(divide="ignore"):
                cut = 0.0 if math.isinf(r) else np.exp(-rate * (r - t_arr))
                return math.log(1.0 / rate) - (self.a + self.b * t_arr) / q + np.log1p(-cut)
        return -self.a / q + _log_power_integral(self.b / q, t_arr, r)

    def chi(self, t: ArrayLike, p: float) -> FloatArray:
        """|(log G)'| for the untruncated kernel in the tail."""
        t_arr = np.asarray(t, dtype=float)
        if self.regime == "exponential":
            return np.full_like(t_arr, self.b / (p - 1.0))
        return (self.b / (p - 1.0) - 1.0) / t_arr

    def invert(self, log_g: ArrayLike, p: float) -> FloatArray:
        """Solve log G(t) = log_g in the tail of the untruncated kernel."""
        y = np.asarray(log_g, dtype=float)
        q = p - 1.0
        if self.regime == "exponential":
            return (q * (math.log(q / self.b) - y) - self.a) / self.b
        g = self.b / q
        return np.exp((y + self.a / q + math.log(g - 1.0)) / (1.0 - g))

    def to_dict(self) -> dict[str, Any]:
        return {"regime": self.regime, "a": self.a, "b": self.b, "residual": self.residual}


class ModelManifold:
    """Sampled warping function h of a model together with its volume data."""

    def __init__(
        self,
        m: int,
        profile: CurvatureProfile,
        t: FloatArray,
        h: FloatArray,
        dh: FloatArray,
        r_inf: float = math.inf,
    ) -> None:
        self.m = m
        self.profile = profile
        self.t = t
        self.h = h
        self.dh = dh
        self.r_inf = r_inf
        self.t_max = float(t[-1])
        self.omega = sphere_area(m)
        self.pole_exponent = profile.pole_exponent
        self._power = self.pole_exponent if profile.kind == "inverse_square" else None

        if self._power is None:
            self._h_spline = CubicHermiteSpline(t, h, dh)
            self._dh_spline = CubicHermiteSpline(t, dh, profile(t) * h)
            v = self.omega * h ** (m - 1)
            dv = self.omega * (m - 1) * h ** (m - 2) * dh
            self._v_primitive = CubicHermiteSpline(t, v, dv).antiderivative()
        self.tail: TailFit | None = None
        if math.isinf(r_inf):
            self.tail = fit_tail(self)

    def __repr__(self) -> str:
        return f"ModelManifold(m={self.m}, kind={self.profile.kind!r}, t_max={self.t_max:g})"

    def _check_range(self, t: FloatArray) -> None:
        if np.any(t < 0) or np.any(~np.isfinite(t)):
            raise ValueRangeError("Model evaluated at a negative or non-finite radius")
        if np.any(t >= self.r_inf):
            raise ValueRangeError(f"Radius beyond the first zero of h (R_inf={self.r_inf:.6g})")
        if self.tail is None and np.any(t > self.t_max):
            raise ValueRangeError(f"Radius beyond the table (t_max={self.t_max:.6g})")

    def h_at(self, t: ArrayLike) -> FloatArray:
        t_arr = np.asarray(t, dtype=float)
        self._check_range(t_arr)
        if self._power is not None:
            return t_arr**self._power
        out = np.asarray(self._h_spline(np.minimum(t_arr, self.t_max)), dtype=float)
        beyond = t_arr > self.t_max
        if np.any(beyond):
            assert self.tail is not None
            lv = self.tail.log_volume(t_arr[beyond])
            out[beyond] = np.exp((lv - math.log(self.omega)) / (self.m - 1))
        return out

    def dh_at(self, t: ArrayLike) -> FloatArray:
        t_arr = np.asarray(t, dtype=float)
        self._check_range(t_arr)
        if self._power is not None:
            return self._power * t_arr ** (self._power - 1.0)
        out = np.asarray(self._dh_spline(np.minimum(t_arr, self.t_max)), dtype=float)
        beyond = t_arr > self.t_max
        if np.any(beyond):
            assert self.tail is not None
            tt = t_arr[beyond]
            out[beyond] = self.h_at(tt) * self.tail_log_derivative(tt) / (self.m - 1)
        return out

    def tail_log_derivative(self, t: FloatArray) -> FloatArray:
        assert self.tail is not None
        if self.tail.regime == "exponential":
            return np.full_like(t, self.tail.b)
        return self.tail.b / t

    def log_volume(self, t: ArrayLike) -> FloatArray:
        """log v_h(t)."""
        t_arr = np.asarray(t, dtype=float)
        self._check_range(t_arr)
        out = np.empty_like(t_arr)
        inside = t_arr <= self.t_max
        with np.errstate(divide="ignore"):
            out[inside] = math.log(self.omega) + (self.m - 1) * np.log(self.h_at(t_arr[inside]))
        if np.any(~inside):
            assert self.tail is not None
            out[~inside] = self.tail.log_volume(t_arr[~inside])
        return out

    def volume_log_derivative(self, t: ArrayLike) -> FloatArray:
        """v_h'/v_h = (m-1) h'/h."""
        t_arr = np.asarray(t, dtype=float)
        return (self.m - 1) * self.dh_at(t_arr) / self.h_at(t_arr)

    def inverse_h(self, y: ArrayLike) -> FloatArray:
        """h^{-1} on the increasing branch of h."""
        y_arr = np.asarray(y, dtype=float)
        if np.any(y_arr < 0):
            raise ValueRangeError("h^{-1} of a negative value")
        if self._power is not None:
            return y_arr ** (1.0 / self._power)
        top = int(np.argmax(self.dh <= 0)) if np.any(self.dh <= 0) else self.t.size
        t_inc, h_inc = self.t[:top], self.h[:top]
        out = np.interp(y_arr, h_inc, t_inc)
        inside = y_arr <= h_inc[-1]
        for _ in range(4):
            ti = out[inside]
            out[inside] = ti - (self._h_spline(ti) - y_arr[inside]) / self._dh_spline(ti)
        if np.any(~inside):
            if self.tail is None:
                raise ValueRangeError("h^{-1} beyond the table of a compact model")
            lv = math.log(self.omega) + (self.m - 1) * np.log(y_arr[~inside])
            out[~inside] = self.tail.inverse_log_volume(lv)
        return np.clip(out, 0.0, None)

    def inverse_volume(self, v: ArrayLike) -> FloatArray:
        """v_h^{-1}."""
        v_arr = np.asarray(v, dtype=float)
        return self.inverse_h((v_arr / self.omega) ** (1.0 / (self.m - 1)))

    def describe(self) -> dict[str, Any]:
        return {
            "m": self.m,
            "profile": self.profile.to_dict(),
            "t_max": self.t_max,
            "r_inf": self.r_inf if math.isfinite(self.r_inf) else None,
            "omega": self.omega,
            "tail": self.tail.to_dict() if self.tail is not None else None,
        }


def _integrate_rk4(profile: CurvatureProfile, t: FloatArray) -> tuple[FloatArray, FloatArray]:
    dt = float(t[1] - t[0])
    ends = profile(t)
    mids = profile(t[:-1] + 0.5 * dt)
    h = np.empty_like(t)
    dh = np.empty_like(t)
    y0, y1 = 0.0, 1.0
    h[0], dh[0] = y0, y1
    for i in range(t.size - 1):
        a, b, c = ends[i], mids[i], ends[i + 1]
        k1h, k1d = y1, a * y0
        k2h, k2d = y1 + 0.5 * dt * k1d, b * (y0 + 0.5 * dt * k1h)
        k3h, k3d = y1 + 0.5 * dt * k2d, b * (y0 + 0.5 * dt * k2h)
        k4h, k4d = y1 + dt * k3d, c * (y0 + dt * k3h)
        y0 += dt * (k1h + 2.0 * k2h + 2.0 * k3h + k4h) / 6.0
        y1 += dt * (k1d + 2.0 * k2d + 2.0 * k3d + k4d) / 6.0
        h[i + 1], dh[i + 1] = y0, y1
    return h, dh


def solve_warping(
    profile: CurvatureProfile, m: int, t_max: float, n: int | None = None
) -> ModelManifold:
    """Integrate h'' = H h, h(0) = 0, h'(0) = 1 on [0, t_max].

    Args:
        profile: Curvature profile H
        m: Dimension of the model
        t_max: Table length
        n: Number of RK4 steps (defaults to ``settings.rk4_steps``)

    Returns:
        ModelManifold sampled on n + 1 equispaced radii, truncated before the
        first zero of h when there is one

    Raises:
        DomainError: If m < 2, t_max <= 0 or n < 64
        InvalidProfileError: If the profile is negative or increasing
        InternalConsistencyError: If h vanishes although H >= 0
    """
    n = n or settings.rk4_steps
    if m < 2:
        raise DomainError(f"Model dimension must be at least 2, got {m}")
    if not t_max > 0:
        raise DomainError(f"t_max must be positive, got {t_max}")
    if n < 64:
        raise DomainError(f"At least 64 steps are required, got {n}")

    t = np.linspace(0.0, t_max, n + 1)
    profile.validate(t[1:])
    if profile.kind == "inverse_square":
        k = profile.pole_exponent
        h, dh = t**k, k * t ** (k - 1.0)
    else:
        h, dh = _integrate_rk4(profile, t)

    r_inf = math.inf
    nonpositive = np.flatnonzero(h[1:] <= 0.0)
    if nonpositive.size:
        i = int(nonpositive[0]) + 1
        if np.all(profile(t[: i + 1]) >= 0):
            raise InternalConsistencyError(f"h vanishes at t={t[i]:.6g} although H >= 0")
        r_inf = float(t[i - 1] - h[i - 1] / dh[i - 1])
        t, h, dh = t[:i], h[:i], dh[:i]
        logger.debug("h has its first zero at R_inf=%.12g", r_inf)
    elif profile.kind == "constant" and profile.kappa2 < 0:
        r_inf = math.pi / math.sqrt(-profile.kappa2)
    return ModelManifold(m, profile, t, h, dh, r_inf)


def fit_tail(mm: ModelManifold) -> TailFit:
    """Fit the growth of log v_h on the last samples of the table.

    Constant and inverse-square profiles get their exact rate; other profiles
    compare the exponential and the polynomial regime and keep the better
    least-squares residual.
    """
    prof = mm.profile
    t_end = mm.t_max
    log_v_end = float(mm.log_volume(np.array([t_end]))[0])
    if prof.kind == "constant":
        if prof.kappa2 > 0:
            b = (mm.m - 1) * math.sqrt(prof.kappa2)
            return TailFit("exponential", log_v_end - b * t_end, b, t_end)
        return TailFit("polynomial", math.log(mm.omega), float(mm.m - 1), t_end)
    if prof.kind == "inverse_square":
        return TailFit("polynomial", math.log(mm.omega), mm.pole_exponent * (mm.m - 1), t_end)

    start = max(1, int(mm.t.size * (1.0 - settings.tail_fraction)))
    ts = mm.t[start:]
    lv = mm.log_volume(ts)
    fits: list[TailFit] = []
    for regime, x in (("exponential", ts), ("polynomial", np.log(ts))):
        b, a = np.polyfit(x, lv, 1)
        residual = float(np.sqrt(np.mean((a + b * x - lv) ** 2)))
        # anchor at the table end so that the tail continues v_h exactly
        a = log_v_end - b * (t_end if regime == "exponential" else math.log(t_end))
        fits.append(TailFit(regime, float(a), float(b), t_end, residual))  # type: ignore[arg-type]
    best = min(fits, key=lambda f: f.residual)
    logger.debug("Tail fit: %s a=%.6g b=%.6g", best.regime, best.a, best.b)
    return best


def sphere_volume(mm: ModelManifold, t: ArrayLike) -> FloatArray:
    """v_h(t) = omega_{m-1} h(t)^(m-1)."""
    return np.exp(mm.log_volume(t))


def ball_volume(mm: ModelManifold, t: ArrayLike) -> FloatArray:
    """V_h(t), the integral of v_h over [0, t]."""
    t_arr = np.asarray(t, dtype=float)
    mm._check_range(t_arr)
    if mm._power is not None:
        e = mm._power * (mm.m - 1) + 1.0
        return mm.omega * t_arr**e / e
    inside = np.minimum(t_arr, mm.t_max)
    out = np.asarray(mm._v_primitive(inside), dtype=float)
    beyond = t_arr > mm.t_max
    if np.any(beyond):
        tail = mm.tail
        assert tail is not None
        tt = t_arr[beyond]
        if tail.regime == "exponential":
            extra = np.exp(tail.a) * (np.exp(tail.b * tt) - np.exp(tail.b * mm.t_max)) / tail.b
        else:
            e = tail.b + 1.0
            extra = np.exp(tail.a) * (tt**e - mm.t_max**e) / e
        out[beyond] += extra
    return out


def mu_euclidean(m: int, p: float, r: ArrayLike) -> FloatArray:
    """Fundamental solution of the Euclidean p-Laplacian with unit flux.

    Raises:
        DomainError: If p is outside (1, m] or r <= 0
    """
    if not 1 < p <= m:
        raise DomainError(f"p={p} outside (1, m={m}]")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0):
        raise DomainError("mu is only defined for r > 0")
    omega = sphere_area(m)
    if p == m:
        return -(omega ** (-1.0 / (m - 1))) * np.log(r_arr)
    return (p - 1) / (m - p) * omega ** (-1.0 / (p - 1)) * r_arr ** (-(m - p) / (p - 1))


def nonparabolic(mm: ModelManifold, p: float) -> bool:
    """Decide whether v_h^(-1/(p-1)) is integrable at infinity.

    Raises:
        DomainError: If p <= 1
        IndeterminateError: If the fitted exponent is within the indeterminate band
    """
    if p <= 1:
        raise DomainError(f"p must exceed 1, got {p}")
    if math.isfinite(mm.r_inf):
        return False
    prof = mm.profile
    if prof.kind == "constant":
        return prof.kappa2 > 0 or p < mm.m
    if prof.kind == "inverse_square":
        return mm.pole_exponent * (mm.m - 1) / (p - 1) > 1.0

    tail = mm.tail
    assert tail is not None
    band = settings.indeterminate_band
    if tail.regime == "exponential":
        if abs(tail.b) <= band:
            raise IndeterminateError("Exponential tail rate is zero within tolerance, raise t_max")
        return tail.b > 0
    exponent = tail.b / (p - 1)
    if abs(exponent - 1.0) <= band:
        raise IndeterminateError(
            f"Tail exponent {exponent:.9g} is critical within {band:g}, raise t_max"
        )
    return exponent > 1.0


class ModelKernel:
    """Green kernel G^h_R(t), the integral of v_h^(-1/(p-1)) over [t, R].

    The integral is split at t_split: below it the kernel follows the pole
    asymptote with a quadratic correction, above it 8-point Gauss-Legendre
    cells accumulate from the right, and beyond the table the tail fit of v_h
    is integrated in closed form.
    """

    def __init__(self, mm: ModelManifold, p: float, r: float = math.inf) -> None:
        self.mm = mm
        self.p = p
        self.r = r
        self.beta = mm.pole_exponent * (mm.m - 1) / (p - 1)
        self.t_end = min(r, mm.t_max)
        self.t_split = min(settings.pole_split * mm.t_max, 0.1 * self.t_end)
        self._log_a = -math.log(mm.omega) / (p - 1)

        ts = self.t_split
        alpha = (mm.m - 1) / (p - 1)
        log_c = math.log(float(mm.h_at(np.array([ts]))[0])) - mm.pole_exponent * math.log(ts)
        self._c2 = math.expm1(-alpha * log_c) / ts**2

        nodes = self._nodes()
        cells = self._log_cells(nodes[:-1], nodes[1:])
        log_end = self._log_beyond_table()
        acc = np.logaddexp.accumulate(np.concatenate(([log_end], cells[::-1])))
        self.nodes = nodes
        self.log_g_nodes = acc[::-1]
        logger.debug(
            "Model kernel p=%g R=%g: %d cells, G(t_split)=%.6g",
            p,
            r,
            cells.size,
            math.exp(self.log_g_nodes[0]),
        )

    def __repr__(self) -> str:
        return f"ModelKernel(p={self.p:g}, R={self.r:g}, m={self.mm.m})"

    def log_density(self, t: ArrayLike) -> FloatArray:
        """log v_h(t)^(-1/(p-1))."""
        return -self.mm.log_volume(t) / (self.p - 1)

    def _nodes(self) -> FloatArray:
        base = np.union1d(
            np.geomspace(self.t_split, self.t_end, 400),
            np.linspace(self.t_split, self.t_end, 400),
        )
        jumps = np.abs(np.diff(self.log_density(base)))
        parts = np.maximum(1, np.ceil(jumps).astype(int))
        pieces = [
            np.linspace(a, b, k, endpoint=False) for a, b, k in zip(base[:-1], base[1:], parts)
        ]
        return np.concatenate([*pieces, base[-1:]])

    def _log_cells(self, lo: FloatArray, hi: FloatArray) -> FloatArray:
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        x = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        logs = _LOG_GL_WEIGHTS[None, :] + self.log_density(x)
        with np.errstate(divide="ignore"):
            return logsumexp(logs, axis=1) + np.log(half)

    def _log_beyond_table(self) -> float:
        if self.r <= self.mm.t_max:
            return -math.inf
        assert self.mm.tail is not None
        value = self.mm.tail.log_kernel_integral(np.array([self.mm.t_max]), self.r, self.p)
        return float(value[0])

    def _log_inner(self, t: FloatArray) -> FloatArray:
        ts = self.t_split
        log_i1 = _log_power_integral(self.beta, t, ts)
        log_i3 = _log_power_integral(self.beta - 2.0, t, ts)
        inner = log_i1 + np.log1p(self._c2 * np.exp(log_i3 - log_i1))
        return np.logaddexp(self._log_a + inner, self.log_g_nodes[0])

    def _log_table(self, t: FloatArray) -> FloatArray:
        k = np.clip(np.searchsorted(self.nodes, t, side="right") - 1, 0, self.nodes.size - 2)
        right = self.nodes[k + 1]
        return np.logaddexp(self._log_cells(t, right), self.log_g_nodes[k + 1])

    def log_value(self, t: ArrayLike) -> FloatArray:
        """log G^h_R(t); -inf at t = R."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr <= 0) or np.any(t_arr > self.r):
            raise ValueRangeError(f"Kernel evaluated outside (0, R={self.r:g}]")
        out = np.empty_like(t_arr)
        inner = t_arr < self.t_split
        beyond = t_arr > self.t_end
        table = ~inner & ~beyond
        if np.any(inner):
            out[inner] = self._log_inner(t_arr[inner])
        if np.any(table):
            out[table] = self._log_table(t_arr[table])
        if np.any(beyond):
            assert self.mm.tail is not None
            out[beyond] = self.mm.tail.log_kernel_integral(t_arr[beyond], self.r, self.p)
        return out

    def value(self, t: ArrayLike) -> FloatArray:
        return np.exp(self.log_value(t))

    __call__ = value

    def chi(self, t: ArrayLike) -> FloatArray:
        """|(log G)'(t)| = v_h(t)^(-1/(p-1)) / G(t)."""
        t_arr = np.asarray(t, dtype=float)
        if math.isinf(self.r) and self.mm.tail is not None:
            beyond = t_arr > self.t_end
            if np.any(beyond):
                out = np.empty_like(t_arr)
                out[beyond] = self.mm.tail.chi(t_arr[beyond], self.p)
                out[~beyond] = self.chi(t_arr[~beyond])
                return out
        with np.errstate(over="ignore"):
            return np.exp(self.log_density(t_arr) - self.log_value(t_arr))

    def describe(self) -> dict[str, Any]:
        return {
            "p": self.p,
            "R": self.r if math.isfinite(self.r) else None,
            "t_split": self.t_split,
            "cells": int(self.nodes.size - 1),
        }


def green_kernel_model(mm: ModelManifold, p: float, r: float = math.inf) -> ModelKernel:
    """Build the model kernel G^h_R.

    Raises:
        DomainError: If p is outside (1, m]
        DivergentKernelError: If R is infinite and the model is parabolic
        ValueRangeError: If R is not a radius of the model
    """
    if not 1 < p <= mm.m:
        raise DomainError(f"p={p} outside (1, m={mm.m}]")
    if math.isinf(r):
        if not nonparabolic(mm, p):
            raise DivergentKernelError(f"Model is parabolic for p={p}: G^h diverges")
    elif not 0 < r < mm.r_inf or (r > mm.t_max and mm.tail is None):
        raise ValueRangeError(f"Truncation radius R={r} is not a radius of the model")
    return ModelKernel(mm, p, r)


def _newton_log_t(
    k: ModelKernel, y: FloatArray, lo: FloatArray, hi: FloatArray, x: FloatArray
) -> FloatArray:
    """Safeguarded Newton iteration for log G(e^x) = y on the bracket [lo, hi]."""
    rtol = settings.inversion_rtol
    for _ in range(200):
        t = np.exp(x)
        with np.errstate(invalid="ignore"):
            f = k.log_value(t) - y
        done = np.abs(f) <= 0.5 * rtol
        if np.all(done):
            break
        lo = np.where(f > 0, x, lo)
        hi = np.where(f > 0, hi, x)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            candidate = x + f / (k.chi(t) * t)
        bad = ~np.isfinite(candidate) | (candidate <= lo) | (candidate >= hi)
        candidate = np.where(bad, 0.5 * (lo + hi), candidate)
        x = np.where(done | (hi - lo <= 1e-15 * np.abs(x)), x, candidate)
    return x


def invert_kernel(
    k: ModelKernel, g: ArrayLike, return_flags: bool = False
) -> Any:
    """Solve G^h_R(t) = g for t.

    Args:
        k: Model kernel
        g: Kernel values, scalar or array
        return_flags: Also return a mask of radii obtained from the tail fit

    Returns:
        Radii with |G(t) - g| <= inversion_rtol * g, shaped like ``g``

    Raises:
        ValueRangeError: If some g is not a positive finite number
    """
    g_arr = np.atleast_1d(np.asarray(g, dtype=float))
    if np.any(~np.isfinite(g_arr)) or np.any(g_arr <= 0):
        raise ValueRangeError("Kernel values must be positive and finite to be inverted")
    y = np.log(g_arr)
    nodes, log_g = k.nodes, k.log_g_nodes
    t = np.empty_like(y)
    flags = np.zeros(y.shape, dtype=bool)

    inner = y > log_g[0]
    beyond = y < log_g[-1]
    table = ~inner & ~beyond

    if np.any(table):
        yt = y[table]
        i = np.clip(np.searchsorted(-log_g, -yt, side="right") - 1, 0, nodes.size - 2)
        lo, hi = np.log(nodes[i]), np.log(nodes[i + 1])
        with np.errstate(invalid="ignore"):
            frac = (log_g[i] - yt) / (log_g[i] - log_g[i + 1])
        x0 = lo + np.nan_to_num(frac, nan=0.0, posinf=0.0) * (hi - lo)
        t[table] = np.exp(_newton_log_t(k, yt, lo, hi, np.clip(x0, lo, hi)))

    if np.any(inner):
        yi = y[inner]
        hi = np.full_like(yi, math.log(k.t_split))
        if k.beta > 1:
            x0 = (math.log(k.beta - 1.0) + yi - k._log_a) / (1.0 - k.beta)
        else:
            x0 = hi - np.exp(yi - k._log_a)
        lo = np.maximum(np.minimum(x0, hi) - 2.0, -700.0)
        for _ in range(200):
            short = k.log_value(np.exp(lo)) < yi
            if not np.any(short):
                break
            lo = np.where(short, np.maximum(lo - 2.0, -700.0), lo)
        t[inner] = np.exp(_newton_log_t(k, yi, lo, hi, np.clip(x0, lo, hi)))

    if np.any(beyond):
        tail = k.mm.tail
        assert tail is not None
        yb = y[beyond]
        if math.isinf(k.r):
            t[beyond] = tail.invert(yb, k.p)
        else:
            lo = np.full_like(yb, math.log(k.mm.t_max))
            hi = np.full_like(yb, math.log(k.r))
            t[beyond] = np.exp(_newton_log_t(k, yb, lo, hi, 0.5 * (lo + hi)))
        flags[beyond] = True

    result: Any = t.reshape(np.shape(g)) if np.ndim(g) else float(t[0])
    if return_flags:
        return result, (flags.reshape(np.shape(g)) if np.ndim(g) else bool(flags[0]))
    return result


def log_kernel_derivative(k: ModelKernel, t: ArrayLike) -> FloatArray:
    """chi(t) = |(log G^h)'(t)|, strictly decreasing in t.

    Raises:
        ValueRangeError: If t <= 0 or t lies beyond the kernel
    """
    return k.chi(t)


def model_table(mm: ModelManifold, k: ModelKernel | None, t: ArrayLike) -> dict[str, FloatArray]:
    """Columns t, h, v_h, V_h, G of a model table."""
    t_arr = np.asarray(t, dtype=float)
    columns = {
        "t": t_arr,
        "h": mm.h_at(t_arr),
        "v_h": sphere_volume(mm, t_arr),
        "V_h": ball_volume(mm, t_arr),
    }
    if k is not None:
        columns["G"] = k.value(t_arr)
    return columns


def sturm_dominates(mm1: ModelManifold, mm2: ModelManifold, samples: int = 512) -> bool:
    """True when h1 >= h2 on common samples, as Sturm comparison predicts for H1 >= H2."""
    top = min(mm1.t_max, mm2.t_max)
    t = np.linspace(0.0, top, samples)
    h1, h2 = mm1.h_at(t), mm2.h_at(t)
    return bool(np.all(h1 >= h2 - 1e-10 * np.maximum(1.0, np.abs(h2))))


def volume_log_derivative_decreasing(mm: ModelManifold) -> bool:
    """True when v_h'/v_h is strictly decreasing on the interior table samples."""
    d = mm.volume_log_derivative(mm.t[1:-1])
    return bool(np.all(np.diff(d) < 0))


def flat_sobolev_constant(m: int) -> float:
    """Isoperimetric L1-Sobolev constant of R^m."""
    return m ** (-(m - 1) / m) * sphere_area(m) ** (-1.0 / m)


def local_sobolev_constant(s1: float, p: float, nu: float) -> float:
    """p-Sobolev constant obtained from the L1 one by Hoelder, [S1 p (nu-1)/(nu-p)]^p.

    Raises:
        DomainError: If p is outside [1, nu)
    """
    if not 1 <= p < nu:
        raise DomainError(f"p={p} outside [1, nu={nu})")
    return (s1 * p * (nu - 1) / (nu - p)) ** p


def curvature_integral(profile: CurvatureProfile) -> float:
    """Integral of t H(t) over (0, inf); infinite when it diverges.

    Closures are integrated to ``settings.quad_rtol``; quadrature that cannot
    reach it counts as divergent.
    """
    match profile.kind:
        case "constant":
            return 0.0 if profile.kappa2 == 0 else math.inf
        case "inverse_square":
            return 0.0 if profile.kappa == 0 else math.inf
        case "table":
            assert profile.t_samples is not None and profile.values is not None
            if profile.values[-1] > 0:
                return math.inf
            return float(np.trapezoid(profile.t_samples * profile.values, profile.t_samples))
        case _:
            result = integrate.quad(
                lambda s: s * float(profile(np.array([s]))[0]),
                0.0,
                math.inf,
                epsrel=settings.quad_rtol,
                limit=200,
                full_output=1,
            )
            # a fourth element carries the quadpack warning
            if len(result) > 3 or not math.isfinite(result[0]):
                logger.debug("Curvature integral treated as divergent: %s", result[3:])
                return math.inf
            return float(result[0])
