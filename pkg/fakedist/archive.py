"""Reproducible artifacts: JSON reports, CSV tables and meshes on disk.

Floats are written with ``settings.float_digits`` significant digits and JSON
keys are sorted, so equal runs produce byte-identical files. Meshes use the
OFF layout with the chart coordinates as vertices and the metric of every
triangle appended to its face line; tags, the collar radius and the polar
flag travel in ``#`` header lines.
"""

import csv
import hashlib
import json
import logging
import math
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from fakedist import __version__
from fakedist.config import settings
from fakedist.errors import ArtifactError
from fakedist.geom import ScalarField, SurfaceMesh
from fakedist.model import ModelKernel, ModelManifold, model_table

logger = logging.getLogger(__name__)


def format_float(x: float, digits: int | None = None) -> str:
    digits = settings.float_digits if digits is None else digits
    return f"{x:.{digits}g}"


def normalize(obj: Any, digits: int | None = None) -> Any:
    """Round floats to the configured digits; NaN and infinities become None."""
    if isinstance(obj, Mapping):
        return {str(k): normalize(v, digits) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [normalize(v, digits) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [normalize(v, digits) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            return None
        return float(format_float(value, digits))
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_digest(payload: Mapping[str, Any]) -> str:
    """sha256 of the canonical JSON form of a configuration."""
    data = json.dumps(normalize(payload), sort_keys=True).encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def run_metadata(
    config: Mapping[str, Any] | None = None, seed: int | None = None
) -> dict[str, Any]:
    meta: dict[str, Any] = {"package": "fakedist", "version": __version__, "seed": seed}
    if config is not None:
        meta["config_sha256"] = config_digest(config)
    return meta


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"Failed to create output directory {path.parent}: {exc}") from exc


def write_json(
    path: str | Path, payload: Mapping[str, Any], metadata: Mapping[str, Any] | None = None
) -> Path:
    """Write ``payload`` as sorted, rounded JSON, with ``metadata`` under ``run``.

    Raises:
        ArtifactError: If the file cannot be written
    """
    path = Path(path)
    body = dict(payload)
    if metadata is not None:
        body["run"] = dict(metadata)
    _ensure_parent(path)
    text = json.dumps(normalize(body), sort_keys=True, indent=2) + "\n"
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"Failed to write {path}: {exc}") from exc
    logger.debug("Wrote %s", path)
    return path


def read_json(path: str | Path) -> dict[str, Any]:
    """Read a JSON artifact.

    Raises:
        ArtifactError: If the file is missing or not valid JSON
    """
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactError(f"Missing artifact {path}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(
            f"Failed to parse {path}: {exc.msg} at line {exc.lineno} column {exc.colno}"
        ) from exc
    except OSError as exc:
        raise ArtifactError(f"Failed to read {path}: {exc}") from exc


def write_csv(path: str | Path, columns: Mapping[str, ArrayLike]) -> Path:
    """Write equally long columns, one row per sample, header first.

    Raises:
        ArtifactError: If the columns differ in length or the file cannot be written
    """
    path = Path(path)
    arrays = {name: np.atleast_1d(np.asarray(values)) for name, values in columns.items()}
    lengths = {a.shape[0] for a in arrays.values()}
    if len(lengths) > 1:
        raise ArtifactError(f"Columns of {path.name} differ in length: {sorted(lengths)}")
    _ensure_parent(path)

    def cell(value: Any) -> str:
        if isinstance(value, (float, np.floating)):
            return format_float(float(value))
        return str(value)

    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(arrays)
            for row in zip(*arrays.values()):
                writer.writerow([cell(v) for v in row])
    except OSError as exc:
        raise ArtifactError(f"Failed to write {path}: {exc}") from exc
    return path


def read_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Read a numeric CSV written by :func:`write_csv`.

    Raises:
        ArtifactError: If the file is missing or malformed
    """
    path = Path(path)
    try:
        with path.open(encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ArtifactError(f"Failed to read {path}: {exc}") from exc
    if not rows:
        raise ArtifactError(f"Empty table {path}")
    header, body = rows[0], rows[1:]
    try:
        data = np.array([[float(v) for v in row] for row in body], dtype=float)
    except ValueError as exc:
        raise ArtifactError(f"Non-numeric entry in {path}: {exc}") from exc
    data = data.reshape(len(body), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def write_field_csv(
    path: str | Path, field: ScalarField, extra: Mapping[str, ArrayLike] | None = None
) -> Path:
    """Vertex id, radial coordinate and value of a field, plus optional columns."""
    dom = field.owner
    columns: dict[str, ArrayLike] = {
        "vertex": np.arange(dom.n_vertices),
        "t": dom.radial_coordinate,
        field.name: field.values,
    }
    columns.update(extra or {})
    return write_csv(path, columns)


def write_off(path: str | Path, mesh: SurfaceMesh) -> Path:
    """Save a surface mesh with its per-triangle metric."""
    path = Path(path)
    lines = ["OFF", f"# eps {format_float(mesh.eps)}", f"# polar {int(mesh.polar)}"]
    for name in sorted(mesh.tags):
        ids = " ".join(str(int(i)) for i in mesh.tags[name])
        lines.append(f"# tag {name} {ids}".rstrip())
    lines.append(f"{mesh.n_vertices} {mesh.n_cells} 0")
    lines.extend(f"{format_float(x)} {format_float(y)} 0" for x, y in mesh.chart)
    for tri, g in zip(mesh.cells, mesh.metric):
        corners = " ".join(str(int(i)) for i in tri)
        lines.append(f"3 {corners} " + " ".join(format_float(v) for v in g))
    _ensure_parent(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"Failed to write {path}: {exc}") from exc
    return path


def _parse_header(comments: Sequence[str]) -> tuple[float | None, bool, dict[str, np.ndarray]]:
    eps: float | None = None
    polar = False
    tags: dict[str, np.ndarray] = {}
    for line in comments:
        parts = line.lstrip("#").split()
        if not parts:
            continue
        match parts[0]:
            case "eps" if len(parts) == 2:
                eps = float(parts[1])
            case "polar" if len(parts) == 2:
                polar = parts[1] == "1"
            case "tag" if len(parts) >= 2:
                tags[parts[1]] = np.array([int(i) for i in parts[2:]], dtype=np.int64)
    return eps, polar, tags


def read_off(path: str | Path, eps: float | None = None) -> SurfaceMesh:
    """Load a mesh saved by :func:`write_off`.

    Faces without metric entries get the Euclidean metric of the chart.

    Raises:
        ArtifactError: If the file is missing, malformed or has no collar radius
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise ArtifactError(f"Missing geometry file {path}") from exc
    except OSError as exc:
        raise ArtifactError(f"Failed to read {path}: {exc}") from exc

    comments = [line for line in raw if line.startswith("#")]
    body = [line.split() for line in raw if line.strip() and not line.startswith("#")]
    if not body or body[0] != ["OFF"]:
        raise ArtifactError(f"{path} is not an OFF file")
    header_eps, polar, tags = _parse_header(comments)
    try:
        n_v, n_t = int(body[1][0]), int(body[1][1])
        chart = np.array([[float(v) for v in row[:2]] for row in body[2 : 2 + n_v]])
        faces = body[2 + n_v : 2 + n_v + n_t]
        triangles = np.array([[int(v) for v in row[1:4]] for row in faces], dtype=np.int64)
        metric = np.array(
            [[float(v) for v in row[4:7]] if len(row) >= 7 else [1.0, 0.0, 1.0] for row in faces]
        )
    except (IndexError, ValueError) as exc:
        raise ArtifactError(f"Malformed OFF file {path}: {exc}") from exc
    if chart.shape != (n_v, 2) or triangles.shape != (n_t, 3):
        raise ArtifactError(f"Malformed OFF file {path}: counts do not match the header")
    eps = eps if eps is not None else header_eps
    if eps is None:
        raise ArtifactError(f"{path} does not record the collar radius eps")
    return SurfaceMesh(chart, triangles, metric, tags, eps, polar=polar)


def write_model_table(
    path: str | Path, mm: ModelManifold, kernel: ModelKernel | None, t: ArrayLike
) -> Path:
    """Columns t, h, v_h, V_h and, with a kernel, G."""
    return write_csv(path, model_table(mm, kernel, t))
