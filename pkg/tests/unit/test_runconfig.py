"""Unit tests for run file validation."""

import json
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from fakedist.errors import ConfigError
from fakedist.geom import RadialGrid, SurfaceMesh
from fakedist.runconfig import (
    DEFAULT_AUDITS,
    OMEGA_TAG,
    load_profile,
    load_run_config,
    parse_run_config,
    profile_from_dict,
)

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


def _minimal(**extra: Any) -> dict[str, Any]:
    return {"schema_version": 1, "p": 2.0, **extra}


class TestParseRunConfig:
    """Test cases for run file validation."""

    def test_defaults(self) -> None:
        """Test the defaults of a minimal run file."""
        config = parse_run_config(_minimal())

        assert config.seed == 0
        assert config.model.m == 2
        assert config.geometry.kind == "radial"
        assert config.audits.enabled == DEFAULT_AUDITS
        assert config.flow.mode == "point-source"
        assert config.exponent() == 2.0

    def test_schema_version(self) -> None:
        """Test that an unknown schema version is refused with its path."""
        with pytest.raises(ConfigError, match="schema_version"):
            parse_run_config({"schema_version": 2, "p": 2.0})

    def test_unknown_key(self) -> None:
        """Test that unknown keys are refused."""
        with pytest.raises(ConfigError, match="colour"):
            parse_run_config(_minimal(colour="red"))

    def test_exponent_above_dimension(self) -> None:
        """Test that p > m is refused."""
        with pytest.raises(ConfigError, match="exceeds the model dimension"):
            parse_run_config(_minimal(p=2.5))

    def test_exponent_from_schedule(self) -> None:
        """Test that the first exponent of the schedule is used without p."""
        config = parse_run_config({"schema_version": 1, "schedule": {"p_list": [1.5, 1.2]}})

        assert config.exponent() == 1.5
        assert config.continuation().p_list == [1.5, 1.2]

    def test_no_exponent(self) -> None:
        """Test that a run needs p or a schedule."""
        with pytest.raises(ConfigError, match="neither p nor schedule"):
            parse_run_config({"schema_version": 1}).exponent()

    def test_solver_settings(self) -> None:
        """Test that solver settings reach the solver config."""
        config = parse_run_config(_minimal(solver={"tol_grad": 1e-6, "max_iters": 50}))

        cfg = config.solver_config(1.5)

        assert cfg.p == 1.5
        assert cfg.tol_grad == 1e-6
        assert cfg.max_iters == 50

    def test_solver_exponent(self) -> None:
        """Test that p inside solver settings is refused."""
        with pytest.raises(ConfigError, match="top level"):
            parse_run_config(_minimal(solver={"p": 2.0}))

    def test_invalid_solver_field(self) -> None:
        """Test that unknown solver settings are refused."""
        with pytest.raises(ConfigError, match="solver"):
            parse_run_config(_minimal(solver={"tolerance": 1.0}))

    def test_domain_flow_needs_radius(self) -> None:
        """Test that a domain-source flow needs omega_radius."""
        with pytest.raises(ConfigError, match="omega_radius"):
            parse_run_config(_minimal(flow={"mode": "domain-source"}))

    def test_perturbation_support(self) -> None:
        """Test that the bump needs t1 > t0."""
        geometry = {
            "kind": "warped-surface",
            "perturbation": {"amplitude": 0.1, "t0": 2.0, "t1": 1.0},
        }

        with pytest.raises(ConfigError, match="t1 must exceed t0"):
            parse_run_config(_minimal(geometry=geometry))

    def test_unknown_audit(self) -> None:
        """Test that unknown audit names are refused."""
        with pytest.raises(ConfigError, match="audits.enabled"):
            parse_run_config(_minimal(audits={"enabled": ["speed"]}))


class TestBuildDomain:
    """Test cases for geometry construction."""

    def test_radial_with_region(self) -> None:
        """Test a radial grid with the flow region tagged."""
        config = parse_run_config(
            {
                "schema_version": 1,
                "schedule": {"p_list": [1.5, 1.2]},
                "model": {"m": 3, "t_max": 10.0},
                "geometry": {"kind": "radial", "eps_pole": 0.01, "t_out": 2.0, "cells": 64},
                "flow": {"mode": "domain-source", "omega_radius": 1.0},
            }
        )

        dom = config.build_domain(config.model.build())

        assert isinstance(dom, RadialGrid)
        assert dom.n_cells == 64
        assert np.all(dom.r_field[dom.tags[OMEGA_TAG]] <= 1.0)

    def test_refinement_doubles_cells(self) -> None:
        """Test that one refinement level doubles the cell count."""
        config = parse_run_config(
            _minimal(geometry={"kind": "radial", "eps_pole": 0.01, "t_out": 2.0, "cells": 64})
        )

        dom = config.build_domain(config.model.build(), refine=1)

        assert dom.n_cells == 128

    def test_warped_surface_needs_two_dimensions(self) -> None:
        """Test that surfaces over a three-dimensional model are refused."""
        config = parse_run_config(
            _minimal(model={"m": 3, "t_max": 10.0}, geometry={"kind": "warped-surface"})
        )

        with pytest.raises(ConfigError, match="two-dimensional"):
            config.build_domain(config.model.build())

    def test_random_phases_follow_seed(self) -> None:
        """Test that equal seeds build equal perturbed surfaces."""
        geometry = {
            "kind": "warped-surface",
            "t_out": 3.0,
            "n_t": 8,
            "n_theta": 16,
            "perturbation": {"amplitude": 0.1, "t0": 1.0, "t1": 2.0, "random_phases": True},
        }
        config = parse_run_config(_minimal(seed=3, geometry=geometry))
        mm = config.model.build()

        first = config.build_domain(mm)
        second = config.build_domain(mm)

        assert isinstance(first, SurfaceMesh)
        np.testing.assert_array_equal(first.metric, second.metric)


class TestLoadRunConfig:
    """Test cases for reading run files."""

    @pytest.mark.parametrize(
        "name",
        [
            "flat_radial.json",
            "hyperbolic_radial.json",
            "perturbed_surface.json",
            "domain_flow.json",
        ],
    )
    def test_shipped_configs(self, name: str) -> None:
        """Test that the shipped run files validate."""
        config = load_run_config(CONFIGS / name)

        assert config.schema_version == 1

    def test_missing_file(self, tmp_path: Path) -> None:
        """Test that a missing run file is a config error."""
        with pytest.raises(ConfigError, match="Missing run file"):
            load_run_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path: Path) -> None:
        """Test that a malformed document reports its position."""
        path = tmp_path / "run.json"
        path.write_text('{"schema_version": 1,', encoding="utf-8")

        with pytest.raises(ConfigError, match="line 1"):
            load_run_config(path)

    def test_relative_mesh_path(self, tmp_path: Path) -> None:
        """Test that mesh paths resolve against the run file."""
        path = tmp_path / "run.json"
        document = _minimal(geometry={"kind": "off-file", "path": "mesh.off"})
        path.write_text(json.dumps(document), encoding="utf-8")

        config = load_run_config(path)

        assert config.geometry.path == tmp_path / "mesh.off"


class TestProfiles:
    """Test cases for curvature profiles from JSON."""

    def test_constant(self) -> None:
        """Test a constant profile."""
        profile = profile_from_dict({"kind": "constant", "kappa2": 1.0})

        np.testing.assert_allclose(profile(np.array([0.5, 3.0])), 1.0)

    def test_decaying(self) -> None:
        """Test H = kappa2 / (1 + t)^power."""
        profile = profile_from_dict({"kind": "decaying", "kappa2": 4.0, "power": 2.0})

        np.testing.assert_allclose(profile(np.array([0.0, 1.0])), [4.0, 1.0])

    def test_unknown_kind(self) -> None:
        """Test that unknown profile kinds are refused."""
        with pytest.raises(ConfigError, match="Invalid profile"):
            profile_from_dict({"kind": "wavy"})

    def test_load_profile(self, tmp_path: Path) -> None:
        """Test reading a table profile from disk."""
        path = tmp_path / "profile.json"
        path.write_text(
            json.dumps({"kind": "table", "t": [0.0, 1.0, 2.0], "H": [1.0, 0.5, 0.0]}),
            encoding="utf-8",
        )

        profile = load_profile(path)

        np.testing.assert_allclose(profile(np.array([0.0, 2.0])), [1.0, 0.0])
