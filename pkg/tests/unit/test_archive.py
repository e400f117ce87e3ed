"""Unit tests for artifacts on disk."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from fakedist.archive import (
    config_digest,
    normalize,
    read_csv,
    read_json,
    read_off,
    run_metadata,
    write_csv,
    write_field_csv,
    write_json,
    write_model_table,
    write_off,
)
from fakedist.errors import ArtifactError
from fakedist.geom import ScalarField, build_radial_grid, build_warped_surface
from fakedist.model import CurvatureProfile, green_kernel_model, solve_warping


class TestNormalize:
    """Test cases for float normalization."""

    def test_rounding(self) -> None:
        """Test rounding to the requested digits."""
        assert normalize(1.0 / 3.0, digits=4) == 0.3333

    def test_non_finite(self) -> None:
        """Test that NaN and infinities become None."""
        assert normalize([math.nan, math.inf, 1.0]) == [None, None, 1.0]

    def test_numpy_values(self) -> None:
        """Test that numpy scalars and arrays become plain Python values."""
        data = normalize({"a": np.arange(2), "b": np.float64(0.5), "c": np.bool_(True)})

        assert data == {"a": [0, 1], "b": 0.5, "c": True}

    def test_digest_ignores_key_order(self) -> None:
        """Test that the digest depends on content only."""
        assert config_digest({"a": 1, "b": 2.0}) == config_digest({"b": 2.0, "a": 1})
        assert config_digest({"a": 1}) != config_digest({"a": 2})


class TestJson:
    """Test cases for JSON artifacts."""

    def test_sorted_with_metadata(self, tmp_path: Path) -> None:
        """Test sorted keys and the run block."""
        path = write_json(tmp_path / "out" / "report.json", {"b": 1, "a": 2}, {"seed": 3})

        text = path.read_text(encoding="utf-8")

        assert text.index('"a"') < text.index('"b"')
        assert read_json(path)["run"] == {"seed": 3}

    def test_byte_identical(self, tmp_path: Path) -> None:
        """Test that equal payloads give equal files."""
        payload = {"x": 1.0 / 7.0, "y": [1, 2]}

        first = write_json(tmp_path / "a.json", payload).read_bytes()
        second = write_json(tmp_path / "b.json", dict(reversed(payload.items()))).read_bytes()

        assert first == second

    def test_missing(self, tmp_path: Path) -> None:
        """Test that a missing artifact is reported."""
        with pytest.raises(ArtifactError, match="Missing artifact"):
            read_json(tmp_path / "absent.json")

    def test_malformed(self, tmp_path: Path) -> None:
        """Test that malformed JSON is reported with its position."""
        path = tmp_path / "bad.json"
        path.write_text("{", encoding="utf-8")

        with pytest.raises(ArtifactError, match="Failed to parse"):
            read_json(path)

    def test_run_metadata(self) -> None:
        """Test the metadata block."""
        meta = run_metadata({"p": 2.0}, seed=5)

        assert meta["package"] == "fakedist"
        assert meta["seed"] == 5
        assert meta["config_sha256"] == config_digest({"p": 2.0})


class TestCsv:
    """Test cases for CSV tables."""

    def test_write_and_read(self, tmp_path: Path) -> None:
        """Test header order and values."""
        path = write_csv(tmp_path / "t.csv", {"t": [1.0, 2.0], "n": [3, 4]})

        assert path.read_text(encoding="utf-8").splitlines()[0] == "t,n"
        table = read_csv(path)
        np.testing.assert_allclose(table["n"], [3.0, 4.0])

    def test_length_mismatch(self, tmp_path: Path) -> None:
        """Test that ragged columns are refused."""
        with pytest.raises(ArtifactError, match="differ in length"):
            write_csv(tmp_path / "t.csv", {"a": [1.0], "b": [1.0, 2.0]})

    def test_non_numeric(self, tmp_path: Path) -> None:
        """Test that text entries are refused when reading."""
        path = tmp_path / "t.csv"
        path.write_text("a\nx\n", encoding="utf-8")

        with pytest.raises(ArtifactError, match="Non-numeric"):
            read_csv(path)

    def test_field_csv(self, tmp_path: Path) -> None:
        """Test the vertex, t and value columns of a field."""
        mm = solve_warping(CurvatureProfile.constant(0.0), 3, 10.0)
        grid = build_radial_grid(mm, 0.1, 1.0, 32)
        field = ScalarField(grid, 2.0 * grid.r_field, "u")

        table = read_csv(write_field_csv(tmp_path / "u.csv", field, {"w": grid.r_field}))

        assert list(table) == ["vertex", "t", "u", "w"]
        np.testing.assert_allclose(table["u"], 2.0 * table["t"])

    def test_model_table(self, tmp_path: Path) -> None:
        """Test the model table with its kernel column."""
        mm = solve_warping(CurvatureProfile.constant(0.0), 3, 10.0)
        t = np.array([0.5, 1.0, 2.0])

        table = read_csv(write_model_table(tmp_path / "m.csv", mm, green_kernel_model(mm, 2.0), t))

        assert list(table) == ["t", "h", "v_h", "V_h", "G"]
        np.testing.assert_allclose(table["G"], 1.0 / (4.0 * math.pi * t), rtol=1e-6)


class TestOff:
    """Test cases for mesh files."""

    def test_mesh_file(self, tmp_path: Path) -> None:
        """Test that a saved surface keeps its metric, tags and collar radius."""
        mesh = build_warped_surface(np.sinh, None, 6, 12, 0.1, 1.0, grading=1.0)

        loaded = read_off(write_off(tmp_path / "s.off", mesh))

        assert loaded.eps == pytest.approx(0.1)
        assert loaded.polar == mesh.polar
        np.testing.assert_array_equal(loaded.cells, mesh.cells)
        np.testing.assert_allclose(loaded.metric, mesh.metric, rtol=1e-12)
        assert sorted(loaded.tags) == sorted(mesh.tags)

    def test_euclidean_default_metric(self, tmp_path: Path) -> None:
        """Test that faces without metric entries are Euclidean."""
        path = tmp_path / "plain.off"
        path.write_text("OFF\n# eps 0.1\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", encoding="utf-8")

        mesh = read_off(path)

        np.testing.assert_allclose(mesh.metric, [[1.0, 0.0, 1.0]])

    def test_missing_eps(self, tmp_path: Path) -> None:
        """Test that a file without collar radius is refused."""
        path = tmp_path / "plain.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", encoding="utf-8")

        with pytest.raises(ArtifactError, match="collar radius"):
            read_off(path)

    def test_not_off(self, tmp_path: Path) -> None:
        """Test that other formats are refused."""
        path = tmp_path / "mesh.obj"
        path.write_text(json.dumps({"v": []}), encoding="utf-8")

        with pytest.raises(ArtifactError, match="not an OFF file"):
            read_off(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        """Test that a missing mesh file is reported."""
        with pytest.raises(ArtifactError, match="Missing geometry file"):
            read_off(tmp_path / "absent.off")
