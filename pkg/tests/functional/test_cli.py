"""Functional tests for the command line interface."""

import json
from pathlib import Path
from typing import Any

import pytest

from fakedist.archive import read_csv, read_json
from fakedist.config import Settings
from fakedist.main import main

FLAT3_RUN: dict[str, Any] = {
    "schema_version": 1,
    "model": {"m": 3, "t_max": 20.0},
    "geometry": {
        "kind": "radial",
        "eps_pole": 0.05,
        "t_out": 5.0,
        "cells": 400,
        "grading": 1.01,
    },
    "exhaustion": [2.5, 5.0],
    "p": 2.0,
    "audits": {
        "enabled": [
            "gradient_bound",
            "rho_below_r",
            "kernel_roundtrip",
            "kernel_flux",
            "unit_functionals",
            "decay",
        ]
    },
}


def _write_run(directory: Path, document: dict[str, Any], name: str = "run.json") -> Path:
    path = directory / name
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


def _audit(name: str, passed: bool, hard: bool) -> dict[str, Any]:
    return {
        "name": name,
        "kind": "inequality",
        "lhs": 1.0,
        "rhs": 0.5,
        "tol": 0.0,
        "pass": passed,
        "hard": hard,
        "location_of_max": None,
        "context": {},
    }


@pytest.fixture(scope="module")
def verified(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, int]:
    directory = tmp_path_factory.mktemp("verify")
    config = _write_run(directory, FLAT3_RUN)
    code = main(["verify", "--config", str(config), "--out", str(directory / "out")])
    return directory / "out", code


class TestModelCommand:
    """Test cases for the model command."""

    def test_tables(self, tmp_path: Path) -> None:
        """Test the model table and summary of R^3 with p = 2."""
        config = _write_run(tmp_path, {"schema_version": 1, "model": {"m": 3}, "p": 2.0})

        code = main(["model", "--config", str(config), "--out", str(tmp_path / "out")])

        assert code == 0
        table = read_csv(tmp_path / "out" / "model_table.csv")
        assert list(table) == ["t", "h", "v_h", "V_h", "G"]
        summary = read_json(tmp_path / "out" / "model.json")
        assert summary["nonparabolic"] is True
        assert summary["run"]["command"] == "model"

    def test_byte_identical_rerun(self, tmp_path: Path) -> None:
        """Test that two runs of one file write identical artifacts."""
        config = _write_run(tmp_path, {"schema_version": 1, "model": {"m": 3}, "p": 1.5})

        for name in ("a", "b"):
            assert main(["model", "--config", str(config), "--out", str(tmp_path / name)]) == 0

        for artifact in ("model.json", "model_table.csv"):
            first = (tmp_path / "a" / artifact).read_bytes()
            assert first == (tmp_path / "b" / artifact).read_bytes()

    def test_parabolic_model(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test that the plane with p = 2 is a precondition failure."""
        config = _write_run(tmp_path, {"schema_version": 1, "model": {"m": 2}, "p": 2.0})

        code = main(["model", "--config", str(config), "--out", str(tmp_path / "out")])

        assert code == 2
        assert "parabolic" in capsys.readouterr().err


class TestSolveCommand:
    """Test cases for the solve command."""

    def test_flat_kernel(self, tmp_path: Path) -> None:
        """Test the kernel artifacts of R^3."""
        config = _write_run(tmp_path, FLAT3_RUN)

        code = main(["solve", "--config", str(config), "--out", str(tmp_path / "out")])

        assert code == 0
        summary = read_json(tmp_path / "out" / "solve.json")
        assert summary["kernel"]["kind"] == "kernel"
        table = read_csv(tmp_path / "out" / "kernel.csv")
        assert list(table) == ["vertex", "t", "G", "rho"]

    def test_missing_mesh(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test that a missing mesh file is an I/O error."""
        document = {
            "schema_version": 1,
            "model": {"m": 2},
            "geometry": {"kind": "off-file", "path": "absent.off"},
            "p": 1.5,
        }
        config = _write_run(tmp_path, document)

        code = main(["solve", "--config", str(config), "--out", str(tmp_path / "out")])

        assert code == 3
        assert "Missing geometry file" in capsys.readouterr().err


class TestVerifyCommand:
    """Test cases for the verify and report commands."""

    def test_all_audits_pass(self, verified: tuple[Path, int]) -> None:
        """Test that every audit passes on R^3."""
        out, code = verified

        assert code == 0
        report = read_json(out / "verify.json")
        assert report["passed"] is True
        assert report["constants"]["harnack_constant"] == pytest.approx(486.0)
        assert (out / "functionals.csv").is_file()

    def test_report(
        self, verified: tuple[Path, int], capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Test that the report lists every audit and recomputes the exit code."""
        out, _ = verified

        code = main(["report", "--out", str(out)])

        assert code == 0
        printed = capsys.readouterr().out
        assert "kernel_flux" in printed
        assert "decay_one" in printed

    @pytest.mark.parametrize(
        ("audits", "expected"),
        [
            ([_audit("a", True, True)], 0),
            ([_audit("a", True, True), _audit("b", False, False)], 1),
            ([_audit("a", False, True), _audit("b", False, False)], 2),
        ],
    )
    def test_report_exit_codes(
        self, tmp_path: Path, audits: list[dict[str, Any]], expected: int
    ) -> None:
        """Test exit codes recomputed from stored audits."""
        (tmp_path / "verify.json").write_text(json.dumps({"audits": audits}), encoding="utf-8")

        assert main(["report"], Settings(output_dir=tmp_path)) == expected

    def test_domain_flow_skips_point_audits(self, tmp_path: Path) -> None:
        """Test that point-source flow audits are skipped on a domain-source flow."""
        document = {
            "schema_version": 1,
            "model": {"m": 3, "t_max": 20.0},
            "geometry": {
                "kind": "radial",
                "eps_pole": 0.05,
                "t_out": 4.0,
                "cells": 200,
                "grading": 1.01,
            },
            "exhaustion": [4.0],
            "schedule": {"p_list": [1.5, 1.3]},
            "flow": {"mode": "domain-source", "omega_radius": 1.0},
            "audits": {"enabled": ["mean_curvature", "limit_formula"]},
        }
        config = _write_run(tmp_path, document)

        code = main(["verify", "--config", str(config), "--out", str(tmp_path / "out")])

        assert code in (0, 1)
        names = {a["name"] for a in read_json(tmp_path / "out" / "verify.json")["audits"]}
        assert "domain_sandwich" in names
        assert "mean_curvature_bound" not in names
        assert "limit_formula" not in names

    def test_report_without_verify(self, tmp_path: Path) -> None:
        """Test that a missing verify.json is an I/O error."""
        assert main(["report", "--out", str(tmp_path)]) == 3


class TestErrors:
    """Test cases for configuration errors."""

    def test_invalid_json(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test that a malformed run file exits with 3."""
        path = tmp_path / "run.json"
        path.write_text("{", encoding="utf-8")

        code = main(["model", "--config", str(path), "--out", str(tmp_path / "out")])

        assert code == 3
        assert "Failed to parse" in capsys.readouterr().err

    def test_invalid_field(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test that a domain-source flow without a radius exits with 3."""
        config = _write_run(
            tmp_path, {"schema_version": 1, "p": 1.5, "flow": {"mode": "domain-source"}}
        )

        code = main(["flow", "--config", str(config), "--out", str(tmp_path / "out")])

        assert code == 3
        assert "omega_radius" in capsys.readouterr().err

    def test_missing_config_argument(self) -> None:
        """Test that usage errors exit with 3."""
        assert main(["model"]) == 3

    def test_unknown_command(self) -> None:
        """Test that an unknown command exits with 3."""
        assert main(["train"]) == 3
