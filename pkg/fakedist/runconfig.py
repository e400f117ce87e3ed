"""Run files: JSON documents validated into :class:`RunConfig`.

A run file names a model (dimension, curvature profile, table length), a
geometry built from it or read from disk, the exponent or continuation
schedule, solver settings, the audits to run and where to write artifacts.
"""

import json
import logging
import math
from pathlib import Path
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    TypeAdapter,
    ValidationError,
    field_validator,
    model_validator,
)

from fakedist.archive import read_off
from fakedist.errors import ConfigError
from fakedist.geom import (
    DiscreteDomain,
    bump_perturbation,
    build_radial_grid,
    build_warped_surface,
)
from fakedist.imcf import ContinuationSchedule, FlowMode
from fakedist.model import CurvatureProfile, ModelManifold, solve_warping
from fakedist.psolve import PSolveConfig

logger = logging.getLogger(__name__)

OMEGA_TAG = "omega"

AuditName = Literal[
    "gradient_bound",
    "rho_below_r",
    "kernel_roundtrip",
    "kernel_flux",
    "unit_functionals",
    "sharp_gradient",
    "decay",
    "decay_volume",
    "half_harnack",
    "harnack_form",
    "limit_formula",
    "mean_curvature",
    "sandwich",
    "asymptotic_lower_bound",
    "isoperimetric",
]
FLOW_AUDITS: frozenset[str] = frozenset(
    {"limit_formula", "mean_curvature", "sandwich", "asymptotic_lower_bound", "isoperimetric"}
)
POINT_FLOW_AUDITS: frozenset[str] = FLOW_AUDITS - {"isoperimetric"}
DEFAULT_AUDITS: list[AuditName] = [
    "gradient_bound",
    "rho_below_r",
    "kernel_roundtrip",
    "kernel_flux",
    "unit_functionals",
    "decay",
]


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ConstantProfileSpec(_Spec):
    kind: Literal["constant"] = "constant"
    kappa2: float = 0.0
    allow_negative: bool = False

    def build(self) -> CurvatureProfile:
        return CurvatureProfile.constant(self.kappa2, self.allow_negative)


class TableProfileSpec(_Spec):
    kind: Literal["table"]
    t: list[float]
    H: list[float]

    def build(self) -> CurvatureProfile:
        return CurvatureProfile.table(self.t, self.H)


class InverseSquareProfileSpec(_Spec):
    kind: Literal["inverse_square"]
    kappa: float = Field(ge=0.0)

    def build(self) -> CurvatureProfile:
        return CurvatureProfile.inverse_square(self.kappa)


class DecayingProfileSpec(_Spec):
    """H(t) = kappa2 / (1 + t)^power."""

    kind: Literal["decaying"]
    kappa2: float = Field(ge=0.0)
    power: float = Field(default=2.0, gt=0.0)

    def build(self) -> CurvatureProfile:
        kappa2, power = self.kappa2, self.power
        return CurvatureProfile.closure(lambda t: kappa2 / (1.0 + t) ** power)


ProfileSpec = Annotated[
    ConstantProfileSpec | TableProfileSpec | InverseSquareProfileSpec | DecayingProfileSpec,
    Field(discriminator="kind"),
]
_profile_adapter: TypeAdapter[Any] = TypeAdapter(ProfileSpec)


class ModelSpec(_Spec):
    m: int = Field(default=2, ge=2)
    t_max: float = Field(default=40.0, gt=0.0)
    steps: int | None = Field(default=None, ge=64)
    profile: ProfileSpec = Field(default_factory=ConstantProfileSpec)

    def build(self) -> ModelManifold:
        return solve_warping(self.profile.build(), self.m, self.t_max, self.steps)


class RadialGeometry(_Spec):
    kind: Literal["radial"] = "radial"
    eps_pole: float = Field(default=0.01, gt=0.0)
    t_out: float = Field(default=10.0, gt=0.0)
    cells: int = Field(default=2000, ge=32)
    grading: float = Field(default=1.0, gt=0.0)

    def build(self, mm: ModelManifold, refine: int, seed: int) -> DiscreteDomain:
        factor = 2**refine
        return build_radial_grid(
            mm, self.eps_pole, self.t_out, self.cells * factor, self.grading ** (1.0 / factor)
        )


class PerturbationSpec(_Spec):
    """Bump perturbation of the angular warping; random phases come from the run seed."""

    amplitude: float = Field(ge=0.0, lt=1.0)
    t0: float = Field(ge=0.0)
    t1: float
    modes: int = Field(default=1, ge=1)
    random_phases: bool = False

    @model_validator(mode="after")
    def check_support(self) -> "PerturbationSpec":
        if self.t1 <= self.t0:
            raise ValueError("t1 must exceed t0")
        return self

    def build(self, seed: int) -> Any:
        phases = np.zeros(self.modes)
        if self.random_phases:
            phases = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi, self.modes)
        return bump_perturbation(self.amplitude, self.t0, self.t1, phases)


class WarpedSurfaceGeometry(_Spec):
    kind: Literal["warped-surface"]
    eps_pole: float = Field(default=0.05, gt=0.0)
    t_out: float = Field(default=6.0, gt=0.0)
    n_t: int = Field(default=48, ge=4)
    n_theta: int = Field(default=64, ge=8)
    grading: float | None = Field(default=None, gt=0.0)
    perturbation: PerturbationSpec | None = None

    def build(self, mm: ModelManifold, refine: int, seed: int) -> DiscreteDomain:
        if mm.m != 2:
            raise ConfigError(f"Warped surfaces need a two-dimensional model, got m={mm.m}")
        factor = 2**refine
        f = self.perturbation.build(seed) if self.perturbation is not None else None
        grading = None if self.grading is None else self.grading ** (1.0 / factor)
        return build_warped_surface(
            mm, f, self.n_t * factor, self.n_theta * factor, self.eps_pole, self.t_out, grading
        )


class OffFileGeometry(_Spec):
    kind: Literal["off-file"]
    path: Path
    eps_pole: float | None = Field(default=None, gt=0.0)

    def build(self, mm: ModelManifold, refine: int, seed: int) -> DiscreteDomain:
        if refine:
            raise ConfigError("Imported meshes cannot be refined")
        mesh = read_off(self.path, self.eps_pole)
        mesh.mm = mm
        return mesh


GeometrySpec = Annotated[
    RadialGeometry | WarpedSurfaceGeometry | OffFileGeometry, Field(discriminator="kind")
]


class FlowSpec(_Spec):
    mode: FlowMode = "point-source"
    omega_radius: float | None = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def check_omega(self) -> "FlowSpec":
        if self.mode == "domain-source" and self.omega_radius is None:
            raise ValueError("domain-source flows need omega_radius")
        return self


class AnnulusSpec(_Spec):
    inner: float = Field(gt=0.0)
    outer: float = Field(gt=0.0)
    margin: float = Field(gt=0.0)
    q_sub: float | None = Field(default=None, gt=0.0)
    q_super: float = Field(default=-1.0, lt=0.0)


class AuditSpec(_Spec):
    enabled: list[AuditName] = Field(default_factory=lambda: list(DEFAULT_AUDITS))
    s1: float | None = Field(default=None, gt=0.0)
    nu: float | None = Field(default=None, gt=1.0)
    kappa: float | None = Field(default=None, ge=0.0)
    levels: int = Field(default=10, ge=2)
    harnack_radius: float | None = Field(default=None, gt=0.0)
    annulus: AnnulusSpec | None = None
    volume_constant: float | None = Field(default=None, gt=0.0)


class RunConfig(_Spec):
    """Validated run file."""

    schema_version: Literal[1]
    seed: int = Field(default=0, ge=0, lt=2**64)
    model: ModelSpec = Field(default_factory=ModelSpec)
    geometry: GeometrySpec = Field(default_factory=RadialGeometry)
    p: float | None = Field(default=None, gt=1.0)
    schedule: ContinuationSchedule | None = None
    solver: dict[str, Any] = Field(default_factory=dict)
    exhaustion: list[float] | None = None
    flow: FlowSpec = Field(default_factory=FlowSpec)
    audits: AuditSpec = Field(default_factory=AuditSpec)
    output_dir: Path | None = None

    @field_validator("solver")
    @classmethod
    def validate_solver(cls, value: dict[str, Any]) -> dict[str, Any]:
        if "p" in value:
            raise ValueError("the exponent belongs at the top level, not in solver")
        PSolveConfig.model_validate({**value, "p": 2.0})
        return value

    @model_validator(mode="after")
    def check_exponents(self) -> "RunConfig":
        if self.p is not None and self.p > self.model.m:
            raise ValueError(f"p={self.p} exceeds the model dimension m={self.model.m}")
        return self

    def exponent(self) -> float:
        """The single exponent of model, solve and verify runs.

        Raises:
            ConfigError: If neither ``p`` nor a schedule is given
        """
        if self.p is not None:
            return self.p
        if self.schedule is not None:
            return self.schedule.p_list[0]
        raise ConfigError("The run file sets neither p nor schedule")

    def solver_config(self, p: float) -> PSolveConfig:
        return PSolveConfig.model_validate({**self.solver, "p": p})

    def continuation(self) -> ContinuationSchedule:
        return self.schedule or ContinuationSchedule()

    def build_domain(self, mm: ModelManifold, refine: int = 0) -> DiscreteDomain:
        """Geometry of the run, with the flow region tagged when one is configured."""
        dom = self.geometry.build(mm, refine, self.seed)
        if self.flow.omega_radius is not None:
            dom.tag_region(OMEGA_TAG, dom.r_field <= self.flow.omega_radius)
        logger.info("Built %r with mesh size %.4g", dom, dom.mesh_size)
        return dom


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        path = ".".join(str(item) for item in error["loc"]) or "<root>"
        parts.append(f"{path}: {error['msg']}")
    return "; ".join(parts)


def _resolve_paths(data: Any, base: Path) -> Any:
    geometry = data.get("geometry") if isinstance(data, dict) else None
    if isinstance(geometry, dict) and isinstance(geometry.get("path"), str):
        path = Path(geometry["path"])
        if not path.is_absolute():
            geometry["path"] = str(base / path)
    return data


def parse_run_config(data: Any) -> RunConfig:
    """Validate a decoded run file.

    Raises:
        ConfigError: With the field path of every violation
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid run file: {_format_errors(exc)}") from exc


def _read_document(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"Missing run file {path}") from exc
    except OSError as exc:
        raise ConfigError(f"Failed to read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"Failed to parse {path}: {exc.msg} at line {exc.lineno} column {exc.colno}"
        ) from exc


def load_run_config(path: str | Path) -> RunConfig:
    """Read and validate a run file; relative mesh paths resolve against its directory.

    Raises:
        ConfigError: If the file is missing, not JSON or fails validation
    """
    path = Path(path)
    return parse_run_config(_resolve_paths(_read_document(path), path.parent))


def profile_from_dict(data: dict[str, Any]) -> CurvatureProfile:
    """Curvature profile from its JSON form, e.g. ``{"kind": "constant", "kappa2": 1}``.

    Raises:
        ConfigError: If the dictionary does not describe a profile
    """
    try:
        spec = _profile_adapter.validate_python(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid profile: {_format_errors(exc)}") from exc
    return spec.build()


def load_profile(path: str | Path) -> CurvatureProfile:
    """Read a profile saved as JSON."""
    return profile_from_dict(_read_document(Path(path)))
