"""Command line interface.

Sub-commands ``model``, ``solve``, ``flow`` and ``verify`` read a JSON run
file and write their artifacts under the output directory; ``report``
re-reads ``verify.json`` from there. Exit codes: 0 when every audit passes,
1 when only soft audits fail, 2 on a hard audit failure or a violated
mathematical precondition, 3 on configuration and I/O errors.
"""

import argparse
import logging
import sys
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NoReturn

import numpy as np

from fakedist import __version__
from fakedist.archive import (
    read_json,
    run_metadata,
    write_field_csv,
    write_json,
    write_model_table,
)
from fakedist.config import Settings, settings
from fakedist.errors import ArtifactError, ConfigError, FakedistError
from fakedist.fake import (
    EstimateAudit,
    FakeDistanceField,
    check_gradient_bound,
    check_kernel_roundtrip,
    check_rho_below_r,
    check_sharp_gradient_estimate,
    fake_distance,
)
from fakedist.geom import DiscreteDomain
from fakedist.imcf import (
    FlowResult,
    check_asymptotic_lower_bound,
    check_limit_formula,
    check_mean_curvature_bound,
    lower_bound_rho1,
    lower_bound_rho1_volume,
    model_family,
    run_domain_flow,
    run_point_flow,
    write_flow_archive,
)
from fakedist.model import (
    ModelManifold,
    flat_sobolev_constant,
    green_kernel_model,
    local_sobolev_constant,
    nonparabolic,
)
from fakedist.psolve import SolveReport, green_kernel_numeric
from fakedist.runconfig import (
    FLOW_AUDITS,
    OMEGA_TAG,
    POINT_FLOW_AUDITS,
    RunConfig,
    load_run_config,
)
from fakedist.verify import (
    Annulus,
    ConstantsRecord,
    audits_to_json,
    check_decay,
    check_half_harnack,
    check_harnack_form,
    check_isoperimetric,
    check_kernel_flux,
    check_unit_functionals,
    functionals_table,
    mid_levels,
    write_functionals_csv,
)

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors surface as :class:`ConfigError`."""

    def error(self, message: str) -> NoReturn:
        raise ConfigError(f"Invalid arguments: {message}")


@dataclass
class RunContext:
    config: RunConfig
    out: Path
    threads: int
    refine: int
    metadata: dict[str, Any]

    @property
    def enabled(self) -> set[str]:
        return set(self.config.audits.enabled)


def exit_code(audits: Iterable[EstimateAudit]) -> int:
    failed = [a for a in audits if not a.passed]
    if any(a.hard for a in failed):
        return 2
    return 1 if failed else 0


def _output_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"Failed to create output directory {path}: {exc}") from exc
    return path


def _context(args: argparse.Namespace, active: Settings) -> RunContext:
    cfg = load_run_config(args.config)
    out = args.out or cfg.output_dir or active.output_dir
    meta = run_metadata(cfg.model_dump(mode="json"), cfg.seed)
    meta.update({"command": args.command, "refine": args.refine})
    threads = args.threads or active.threads
    return RunContext(cfg, _output_dir(Path(out)), threads, args.refine, meta)


def _solve_kernel(
    ctx: RunContext, mm: ModelManifold, dom: DiscreteDomain, p: float
) -> tuple[SolveReport, FakeDistanceField]:
    cfg = ctx.config
    kernel = green_kernel_numeric(
        dom, p, cfg.solver_config(p), cfg.exhaustion, ctx.threads
    )
    return kernel, fake_distance(kernel, green_kernel_model(mm, p))


def _run_flow(ctx: RunContext, mm: ModelManifold, dom: DiscreteDomain) -> FlowResult:
    cfg = ctx.config
    schedule = cfg.continuation()
    base = cfg.solver_config(schedule.p_list[0])
    family = model_family(mm)
    if cfg.flow.mode == "domain-source":
        return run_domain_flow(
            dom, OMEGA_TAG, family, schedule, base, cfg.exhaustion, ctx.threads
        )
    return run_point_flow(dom, family, schedule, base, cfg.exhaustion, ctx.threads)


def cmd_model(ctx: RunContext) -> int:
    """Tables of h, v_h, V_h and, when an exponent is set, the model kernel."""
    mm = ctx.config.model.build()
    try:
        p: float | None = ctx.config.exponent()
    except ConfigError:
        p = None
    kernel = green_kernel_model(mm, p) if p is not None else None
    t = np.linspace(0.0, mm.t_max, 513)[1:]
    write_model_table(ctx.out / "model_table.csv", mm, kernel, t)
    payload = {
        "model": mm.describe(),
        "p": p,
        "nonparabolic": nonparabolic(mm, p) if p is not None else None,
        "kernel": kernel.describe() if kernel is not None else None,
    }
    write_json(ctx.out / "model.json", payload, ctx.metadata)
    return 0


def cmd_solve(ctx: RunContext) -> int:
    """Numeric Green kernel and its fake distance."""
    mm = ctx.config.model.build()
    dom = ctx.config.build_domain(mm, ctx.refine)
    p = ctx.config.exponent()
    kernel, fd = _solve_kernel(ctx, mm, dom, p)
    payload = {
        "p": p,
        "domain": repr(kernel.field.owner),
        "mesh_size": kernel.field.owner.mesh_size,
        "kernel": kernel.to_json(),
        "tail_vertices": int(np.sum(fd.tail_flags)) if fd.tail_flags is not None else 0,
    }
    write_json(ctx.out / "solve.json", payload, ctx.metadata)
    write_field_csv(ctx.out / "kernel.csv", kernel.field, {"rho": fd.rho.values})
    return 0


def cmd_flow(ctx: RunContext) -> int:
    """p -> 1 continuation from the pole or from the configured region."""
    mm = ctx.config.model.build()
    dom = ctx.config.build_domain(mm, ctx.refine)
    fr = _run_flow(ctx, mm, dom)
    write_flow_archive(fr, ctx.out / "flow", ctx.metadata)
    return exit_code(fr.audits)


def _sobolev(ctx: RunContext, m: int) -> tuple[float, float]:
    audit_opts = ctx.config.audits
    s1 = audit_opts.s1 if audit_opts.s1 is not None else flat_sobolev_constant(m)
    nu = audit_opts.nu if audit_opts.nu is not None else float(m)
    return s1, nu


def kernel_audits(
    ctx: RunContext, mm: ModelManifold, kernel: SolveReport, fd: FakeDistanceField
) -> list[EstimateAudit]:
    """Audits of a single kernel solve selected in the run file.

    Raises:
        ConfigError: If an enabled audit lacks its parameters
    """
    audit_opts = ctx.config.audits
    enabled = ctx.enabled
    dom = kernel.field.owner
    p = kernel.p
    s1, nu = _sobolev(ctx, dom.m)
    audits: list[EstimateAudit] = []

    if "gradient_bound" in enabled:
        audits.append(check_gradient_bound(fd))
    if "rho_below_r" in enabled:
        audits.append(check_rho_below_r(fd))
    if "kernel_roundtrip" in enabled:
        audits.append(check_kernel_roundtrip(fd))
    if "kernel_flux" in enabled:
        audits.append(check_kernel_flux(kernel, audit_opts.levels))
    if "unit_functionals" in enabled:
        audits.extend(check_unit_functionals(fd, mid_levels(fd.rho.values, audit_opts.levels)))
    if "sharp_gradient" in enabled:
        if audit_opts.kappa is None:
            raise ConfigError("The sharp gradient audit needs audits.kappa")
        audits.append(check_sharp_gradient_estimate(kernel, audit_opts.kappa))
    if enabled & {"decay", "decay_volume", "half_harnack"}:
        sobolev = local_sobolev_constant(s1, p, nu)
        if "decay" in enabled:
            audits.append(check_decay(kernel, sobolev, nu))
        if "decay_volume" in enabled:
            audits.append(check_decay(kernel, sobolev, nu, weight="volume"))
        if "half_harnack" in enabled:
            if audit_opts.annulus is None:
                raise ConfigError("The half-Harnack audit needs audits.annulus")
            a = audit_opts.annulus
            annulus = Annulus(a.inner, a.outer, a.margin)
            constants = ConstantsRecord(p, nu, sobolev)
            q_sub = a.q_sub if a.q_sub is not None else p
            audits.append(check_half_harnack(kernel.field, "sub", annulus, constants, q_sub))
            audits.append(
                check_half_harnack(kernel.field, "super", annulus, constants, a.q_super)
            )
    if "harnack_form" in enabled:
        if audit_opts.harnack_radius is None:
            raise ConfigError("The Harnack form audit needs audits.harnack_radius")
        audits.append(_harnack_form(ctx, mm, dom, audit_opts.harnack_radius))
    return audits


def _harnack_form(
    ctx: RunContext, mm: ModelManifold, dom: DiscreteDomain, radius: float
) -> EstimateAudit:
    r = dom.r_field
    center = int(np.argmin(np.abs(r - 0.5 * float(np.max(r)))))
    kernels = [
        _solve_kernel(ctx, mm, dom, p)[0] for p in ctx.config.continuation().p_list
    ]
    return check_harnack_form(kernels, center, radius)


def flow_audits(ctx: RunContext, fr: FlowResult) -> list[EstimateAudit]:
    """Flow audits selected in the run file, after the flow's own audits."""
    spec = ctx.config.audits
    enabled = ctx.enabled
    s1, nu = _sobolev(ctx, fr.domain.m)
    audits = list(fr.audits)
    point = fr.mode == "point-source"
    skipped = sorted(enabled & POINT_FLOW_AUDITS) if not point else []
    if skipped:
        logger.info("Skipping point-source audits on a domain flow: %s", ", ".join(skipped))
    if "limit_formula" in enabled and point:
        audits.append(check_limit_formula(fr))
    if "mean_curvature" in enabled and point:
        audits.append(check_mean_curvature_bound(fr))
    if "sandwich" in enabled and point:
        audits.append(lower_bound_rho1(fr, s1))
        if spec.volume_constant is not None:
            audits.append(lower_bound_rho1_volume(fr, spec.volume_constant, nu))
    if "asymptotic_lower_bound" in enabled and point:
        audits.append(check_asymptotic_lower_bound(fr, s1))
    if "isoperimetric" in enabled:
        audits.extend(check_isoperimetric(fr))
    return audits


def cmd_verify(ctx: RunContext) -> int:
    """Run the selected audits and write verify.json and functionals.csv."""
    mm = ctx.config.model.build()
    dom = ctx.config.build_domain(mm, ctx.refine)
    p = ctx.config.exponent()
    kernel, fd = _solve_kernel(ctx, mm, dom, p)
    audits = kernel_audits(ctx, mm, kernel, fd)
    if ctx.enabled & FLOW_AUDITS:
        audits.extend(flow_audits(ctx, _run_flow(ctx, mm, dom)))

    s1, nu = _sobolev(ctx, dom.m)
    constants = None
    if p < nu:
        constants = ConstantsRecord(p, nu, local_sobolev_constant(s1, p, nu)).to_dict()
    payload = {"p": p, "constants": constants, **audits_to_json(audits)}
    write_json(ctx.out / "verify.json", payload, ctx.metadata)
    table = functionals_table(fd, mid_levels(fd.rho.values, ctx.config.audits.levels))
    write_functionals_csv(ctx.out / "functionals.csv", table)

    code = exit_code(audits)
    failed = [a.name for a in audits if not a.passed]
    if failed:
        logger.warning("%d of %d audits failed: %s", len(failed), len(audits), ", ".join(failed))
    else:
        logger.info("All %d audits passed", len(audits))
    return code


def cmd_report(args: argparse.Namespace, active: Settings) -> int:
    """Print the audits stored in verify.json; the exit code is recomputed from them."""
    out = Path(args.out or active.output_dir)
    data = read_json(out / "verify.json")
    rows = data.get("audits", [])
    print(f"{'audit':<34} {'lhs':>14} {'rhs':>14} {'tol':>10}  status")
    for row in rows:
        status = "pass" if row["pass"] else ("FAIL" if row["hard"] else "warn")
        print(
            f"{row['name']:<34} {_cell(row['lhs']):>14} {_cell(row['rhs']):>14} "
            f"{_cell(row['tol']):>10}  {status}"
        )
    failed = [row for row in rows if not row["pass"]]
    if any(row["hard"] for row in failed):
        return 2
    return 1 if failed else 0


def _cell(value: float | None) -> str:
    return "nan" if value is None else f"{value:.6g}"


def _runner(
    command: Callable[[RunContext], int],
) -> Callable[[argparse.Namespace, Settings], int]:
    def handler(args: argparse.Namespace, active: Settings) -> int:
        return command(_context(args, active))

    return handler


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def _nonnegative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {value}")
    return number


def create_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="fakedist",
        description="Green kernels, fake distances and weak inverse mean curvature flow",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="Output directory (default: settings)")
    common.add_argument(
        "--threads", type=_positive_int, help="Worker threads (fallback FAKEDIST_THREADS)"
    )
    common.add_argument(
        "--log-level", choices=LOG_LEVELS, type=str.upper, help="Logging level"
    )
    run_args = ArgumentParser(add_help=False)
    run_args.add_argument("--config", type=Path, required=True, help="JSON run file")
    run_args.add_argument(
        "--refine", type=_nonnegative_int, default=0, help="Halve the mesh size k times"
    )

    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "model": (cmd_model, "Model tables"),
        "solve": (cmd_solve, "Numeric Green kernel and fake distance"),
        "flow": (cmd_flow, "p -> 1 continuation"),
        "verify": (cmd_verify, "Audits of the explicit estimates"),
    }
    for name, (command, help_text) in commands.items():
        sp = sub.add_parser(name, parents=[common, run_args], help=help_text)
        sp.set_defaults(handler=_runner(command))
    rp = sub.add_parser("report", parents=[common], help="Summarize verify.json")
    rp.set_defaults(handler=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None, settings_override: Settings | None = None) -> int:
    active = settings_override or settings
    try:
        args = create_parser().parse_args(argv)
        logging.basicConfig(
            level=args.log_level or active.log_level.upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return args.handler(args, active)
    except FakedistError as exc:
        print(f"fakedist: {exc}", file=sys.stderr)
        return exc.exit_code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
