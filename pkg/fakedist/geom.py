"""Discrete carriers of geometry: radial grids and warped surface meshes.

Both carriers expose the same interface to the solvers: a sparse operator
mapping vertex values to metric-orthonormal gradient components per cell,
cell measures, a quadrature rule, boundary tags and level-set integrals.
The pole is never a vertex; it is represented by the inner collar of
radius eps tagged ``pole-collar``.
"""

import heapq
import logging
import math
from abc import ABC, abstractmethod
from collections import defaultdict
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse
from scipy.sparse import csgraph

from fakedist.config import settings
from fakedist.errors import DomainError, InvalidMetricError, ValueRangeError
from fakedist.model import FloatArray, ModelManifold, ball_volume, sphere_volume

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]
WarpFunction = Callable[[FloatArray, FloatArray], FloatArray]

POLE_TAG = "pole-collar"
OUTER_TAG = "outer"

_GL4_X, _GL4_W = np.polynomial.legendre.leggauss(4)
_UNIT_X = 0.5 * (_GL4_X + 1.0)
_UNIT_W = 0.5 * _GL4_W


@dataclass(frozen=True)
class CellQuadrature:
    """Quadrature points per cell, with the hat functions of the cell's vertices."""

    cells: IntArray
    shapes: FloatArray
    weights: FloatArray


@dataclass(frozen=True)
class LevelSetMeasurement:
    t: float
    perimeter: float
    enclosed_volume: float


class DiscreteDomain(ABC):
    """Common interface of radial grids and surface meshes."""

    m: int
    dim: int
    eps: float
    mm: ModelManifold | None
    cells: IntArray
    cell_measure: FloatArray
    grad_op: sparse.csr_matrix
    tags: dict[str, IntArray]

    @property
    @abstractmethod
    def n_vertices(self) -> int: ...

    @property
    def n_cells(self) -> int:
        return int(self.cells.shape[0])

    @property
    @abstractmethod
    def r_field(self) -> FloatArray:
        """Distance from the pole at every vertex."""

    @property
    @abstractmethod
    def radial_coordinate(self) -> FloatArray:
        """Radius used to cut the domain into an exhaustion."""

    @property
    @abstractmethod
    def mesh_size(self) -> float: ...

    @property
    @abstractmethod
    def collar_volume(self) -> float:
        """Volume enclosed by the pole collar."""

    @abstractmethod
    def restrict(self, radius: float) -> tuple["DiscreteDomain", IntArray]:
        """Sub-domain up to ``radius`` and the map from its vertices to ours."""

    @abstractmethod
    def cell_quadrature(self) -> CellQuadrature: ...

    @abstractmethod
    def cell_radius(self) -> FloatArray: ...

    @abstractmethod
    def contour_integral(
        self, level: FloatArray, t: float, u: FloatArray, w: FloatArray, conservative: bool = False
    ) -> float:
        """Integral of u w over {level = t}.

        With ``conservative`` the crossing of each cell is weighted by the area the P1
        weak form balances across that cell instead of the exact level-set measure.
        """

    @abstractmethod
    def sublevel_integral(
        self, level: FloatArray, t: float, u: FloatArray, w: FloatArray
    ) -> float: ...

    @abstractmethod
    def boundary_mean_curvature(self, inside: NDArray[np.bool_]) -> tuple[IntArray, FloatArray]:
        """Mean curvature of the boundary of the vertex region ``inside``."""

    def adjacency(self) -> sparse.csr_matrix:
        cells = self.cells
        k = cells.shape[1]
        rows = np.concatenate([cells[:, i] for i in range(k) for j in range(k) if i != j])
        cols = np.concatenate([cells[:, j] for i in range(k) for j in range(k) if i != j])
        data = np.ones(rows.size)
        adj = sparse.coo_matrix((data, (rows, cols)), shape=(self.n_vertices,) * 2).tocsr()
        adj.data[:] = 1.0
        return adj

    def vertex_layers(self, tag: str) -> FloatArray:
        """Graph distance, in edges, from the vertices carrying ``tag``."""
        return csgraph.dijkstra(
            self.adjacency(), directed=False, indices=self.tags[tag], unweighted=True, min_only=True
        )

    def interior_cells(
        self, collar_layers: int | None = None, outer_layers: int | None = None
    ) -> NDArray[np.bool_]:
        """Cells at least the given number of layers away from the collar and the outer rim."""
        collar_layers = settings.collar_layers if collar_layers is None else collar_layers
        outer_layers = settings.outer_layers if outer_layers is None else outer_layers
        from_collar = self.vertex_layers(POLE_TAG)[self.cells].min(axis=1)
        mask = from_collar >= collar_layers
        if OUTER_TAG in self.tags and self.tags[OUTER_TAG].size:
            from_outer = self.vertex_layers(OUTER_TAG)[self.cells].min(axis=1)
            mask &= from_outer >= outer_layers
        return mask

    def tag_region(self, name: str, mask: ArrayLike) -> None:
        self.tags[name] = np.flatnonzero(np.asarray(mask, dtype=bool))


@dataclass(eq=False)
class ScalarField:
    """Vertex values on a domain, with lazily computed cell gradients."""

    owner: DiscreteDomain
    values: FloatArray
    name: str = ""
    _gradients: FloatArray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.owner.n_vertices,):
            raise ValueRangeError(
                f"Field {self.name!r} has {self.values.size} values for "
                f"{self.owner.n_vertices} vertices"
            )

    @property
    def cell_gradients(self) -> FloatArray:
        if self._gradients is None:
            flat = self.owner.grad_op @ self.values
            self._gradients = flat.reshape(self.owner.n_cells, self.owner.dim)
        return self._gradients

    @property
    def gradient_norm(self) -> FloatArray:
        return np.linalg.norm(self.cell_gradients, axis=1)

    def with_values(self, values: ArrayLike, name: str | None = None) -> "ScalarField":
        return ScalarField(self.owner, np.asarray(values, dtype=float), name or self.name)


class RadialGrid(DiscreteDomain):
    """Nodes eps = t_0 < ... < t_N = T of a model; every field is radial."""

    dim = 1

    def __init__(self, mm: ModelManifold, nodes: FloatArray) -> None:
        self.mm = mm
        self.m = mm.m
        self.nodes = np.asarray(nodes, dtype=float)
        self.eps = float(self.nodes[0])
        n = self.nodes.size
        idx = np.arange(n - 1)
        self.cells = np.column_stack([idx, idx + 1])
        self.spacing = np.diff(self.nodes)
        points = self.nodes[:-1, None] + self.spacing[:, None] * _UNIT_X[None, :]
        self._quad_weights = self.spacing[:, None] * _UNIT_W[None, :] * sphere_volume(mm, points)
        self.cell_measure = self._quad_weights.sum(axis=1)
        inv = 1.0 / self.spacing
        self.grad_op = sparse.csr_matrix(
            (np.column_stack([-inv, inv]).ravel(), (np.repeat(idx, 2), self.cells.ravel())),
            shape=(n - 1, n),
        )
        self.tags = {POLE_TAG: np.array([0]), OUTER_TAG: np.array([n - 1])}

    def __repr__(self) -> str:
        return f"RadialGrid(m={self.m}, eps={self.eps:g}, T={self.nodes[-1]:g}, N={self.n_cells})"

    @property
    def n_vertices(self) -> int:
        return int(self.nodes.size)

    @property
    def r_field(self) -> FloatArray:
        return self.nodes.copy()

    @property
    def radial_coordinate(self) -> FloatArray:
        return self.nodes

    @property
    def mesh_size(self) -> float:
        return float(self.spacing.max())

    @property
    def collar_volume(self) -> float:
        return float(ball_volume(self.mm, np.array([self.eps]))[0])

    def restrict(self, radius: float) -> tuple["RadialGrid", IntArray]:
        keep = np.flatnonzero(self.nodes <= radius * (1 + 1e-12))
        if keep.size < 3:
            raise ValueRangeError(f"Restriction to R={radius:g} leaves fewer than 3 nodes")
        return RadialGrid(self.mm, self.nodes[keep]), keep

    def cell_quadrature(self) -> CellQuadrature:
        shapes = np.column_stack([1.0 - _UNIT_X, _UNIT_X])
        return CellQuadrature(self.cells, shapes, self._quad_weights)

    def quadrature_radii(self) -> FloatArray:
        return self.nodes[:-1, None] + self.spacing[:, None] * _UNIT_X[None, :]

    def cell_radius(self) -> FloatArray:
        return 0.5 * (self.nodes[:-1] + self.nodes[1:])

    def _crossings(self, level: FloatArray, t: float) -> tuple[IntArray, FloatArray]:
        f0, f1 = level[:-1], level[1:]
        cells = np.flatnonzero((f0 - t) * (f1 - t) < 0)
        lam = (t - f0[cells]) / (f1[cells] - f0[cells])
        return cells, lam

    def contour_integral(
        self, level: FloatArray, t: float, u: FloatArray, w: FloatArray, conservative: bool = False
    ) -> float:
        cells, lam = self._crossings(level, t)
        us = u[cells] + lam * (u[cells + 1] - u[cells])
        if conservative:
            area = self.cell_measure[cells] / self.spacing[cells]
        else:
            area = sphere_volume(self.mm, self.nodes[cells] + lam * self.spacing[cells])
        return float(np.sum(us * w[cells] * area))

    def sublevel_integral(self, level: FloatArray, t: float, u: FloatArray, w: FloatArray) -> float:
        f0, f1 = level[:-1], level[1:]
        lo = self.nodes[:-1].copy()
        hi = self.nodes[1:].copy()
        below0, below1 = f0 < t, f1 < t
        empty = ~below0 & ~below1
        cross = below0 ^ below1
        with np.errstate(divide="ignore", invalid="ignore"):
            s = self.nodes[:-1] + (t - f0) / (f1 - f0) * self.spacing
        hi = np.where(cross & below0, s, hi)
        lo = np.where(cross & below1, s, lo)
        hi = np.where(empty, lo, hi)
        x = lo[:, None] + (hi - lo)[:, None] * _UNIT_X[None, :]
        frac = (x - self.nodes[:-1, None]) / self.spacing[:, None]
        ux = u[:-1, None] + frac * (u[1:] - u[:-1])[:, None]
        vx = sphere_volume(self.mm, x)
        cell = np.sum(_UNIT_W[None, :] * ux * vx, axis=1) * (hi - lo)
        return float(np.sum(cell * w))

    def boundary_mean_curvature(self, inside: NDArray[np.bool_]) -> tuple[IntArray, FloatArray]:
        last = int(np.flatnonzero(inside).max())
        t = self.nodes[last : last + 1]
        return np.array([last]), self.mm.volume_log_derivative(t)


def build_radial_grid(
    mm: ModelManifold, eps_pole: float, t_out: float, n: int, grading: float = 1.0
) -> RadialGrid:
    """Graded nodes eps + (T - eps)(q^i - 1)/(q^N - 1), uniform when q = 1.

    Raises:
        ValueRangeError: If the bounds are not 0 < eps < T < R_inf, N < 32 or q <= 0
    """
    if not 0 < eps_pole < t_out < mm.r_inf:
        raise ValueRangeError(
            f"Radial grid needs 0 < eps_pole < T_out < R_inf, got {eps_pole}, {t_out}, {mm.r_inf}"
        )
    if n < 32:
        raise ValueRangeError(f"Radial grid needs at least 32 cells, got {n}")
    if grading <= 0:
        raise ValueRangeError(f"Grading must be positive, got {grading}")
    i = np.arange(n + 1, dtype=float)
    if grading == 1.0:
        nodes = eps_pole + (t_out - eps_pole) * i / n
    else:
        nodes = eps_pole + (t_out - eps_pole) * np.expm1(i * math.log(grading)) / math.expm1(
            n * math.log(grading)
        )
    nodes[-1] = t_out
    return RadialGrid(mm, nodes)


def _metric_cholesky(metric: FloatArray) -> FloatArray:
    """Inverse Cholesky factor L^{-1} of g = L L^T per triangle."""
    g11, g12, g22 = metric[:, 0], metric[:, 1], metric[:, 2]
    l11 = np.sqrt(g11)
    l21 = g12 / l11
    l22 = np.sqrt(g22 - l21**2)
    inv = np.zeros((metric.shape[0], 2, 2))
    inv[:, 0, 0] = 1.0 / l11
    inv[:, 1, 0] = -l21 / (l11 * l22)
    inv[:, 1, 1] = 1.0 / l22
    return inv


def _warp_derivatives(
    warp: WarpFunction, t: FloatArray, theta: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    dt = 1e-6 * np.maximum(1.0, np.abs(t))
    dth = 1e-6
    phi = warp(t, theta)
    phi_t = (warp(t + dt, theta) - warp(t - dt, theta)) / (2 * dt)
    phi_th = (warp(t, theta + dth) - warp(t, theta - dth)) / (2 * dth)
    return phi, phi_t, phi_th


def warped_edge_lengths(warp: WarpFunction, xa: FloatArray, xb: FloatArray) -> FloatArray:
    """Lengths of short geodesics of dt^2 + phi^2 dtheta^2 between chart points.

    The chart segment is bent by the Christoffel symbols at its midpoint, so
    the result is accurate to fourth order in the edge length.
    """
    d = xb - xa
    mid = 0.5 * (xa + xb)
    phi, phi_t, phi_th = _warp_derivatives(warp, mid[:, 0], mid[:, 1])
    bend = np.column_stack(
        [
            -0.5 * phi * phi_t * d[:, 1] ** 2,
            (phi_t / phi) * d[:, 0] * d[:, 1] + 0.5 * (phi_th / phi) * d[:, 1] ** 2,
        ]
    )
    total = np.zeros(d.shape[0])
    for s, ws in zip(_UNIT_X, _UNIT_W):
        x = xa + s * d + s * (1 - s) * bend
        velocity = d + (1 - 2 * s) * bend
        phi_s = warp(x[:, 0], x[:, 1])
        total += ws * np.sqrt(velocity[:, 0] ** 2 + (phi_s * velocity[:, 1]) ** 2)
    return total


class SurfaceMesh(DiscreteDomain):
    """Triangle mesh of a chart (t, theta) with a constant metric per triangle.

    ``tri_chart`` holds the chart coordinates of each triangle's corners,
    unwrapped across the theta seam. When ``warp`` is known the metric is
    dt^2 + warp(t, theta)^2 dtheta^2 and it is also used at contour points
    and for edge lengths.
    """

    dim = 2
    m = 2

    def __init__(
        self,
        chart: FloatArray,
        triangles: IntArray,
        metric: FloatArray,
        tags: dict[str, IntArray],
        eps: float,
        tri_chart: FloatArray | None = None,
        warp: WarpFunction | None = None,
        mm: ModelManifold | None = None,
        polar: bool = False,
    ) -> None:
        self.chart = np.asarray(chart, dtype=float)
        self.cells = np.asarray(triangles, dtype=np.int64)
        self.metric = np.asarray(metric, dtype=float)
        self.tags = {name: np.asarray(ids, dtype=np.int64) for name, ids in tags.items()}
        self.eps = eps
        self.warp = warp
        self.mm = mm
        self.polar = polar
        self.tri_chart = tri_chart if tri_chart is not None else _unwrap(self.chart[self.cells])
        self._r_field: FloatArray | None = None

        det = self.metric[:, 0] * self.metric[:, 2] - self.metric[:, 1] ** 2
        if np.any(det <= 0) or np.any(self.metric[:, 0] + self.metric[:, 2] <= 0):
            bad = int(np.argmax((det <= 0) | (self.metric[:, 0] + self.metric[:, 2] <= 0)))
            raise InvalidMetricError(f"Metric is not positive definite on triangle {bad}")

        edges = self.tri_chart[:, 1:, :] - self.tri_chart[:, :1, :]
        chart_area = 0.5 * (edges[:, 0, 0] * edges[:, 1, 1] - edges[:, 0, 1] * edges[:, 1, 0])
        if np.any(chart_area <= 0):
            raise InvalidMetricError("Triangles must be positively oriented in the chart")
        self.cell_measure = np.sqrt(det) * chart_area

        local = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        ops = _metric_cholesky(self.metric) @ np.linalg.inv(edges) @ local
        rows = (2 * np.arange(self.n_cells)[:, None, None] + np.arange(2)[None, :, None]).repeat(
            3, axis=2
        )
        cols = np.broadcast_to(self.cells[:, None, :], ops.shape)
        self.grad_op = sparse.csr_matrix(
            (ops.ravel(), (rows.ravel(), cols.ravel())), shape=(2 * self.n_cells, self.n_vertices)
        )
        self._edge_lengths = self._compute_edge_lengths()

    def __repr__(self) -> str:
        return f"SurfaceMesh(vertices={self.n_vertices}, triangles={self.n_cells})"

    @property
    def n_vertices(self) -> int:
        return int(self.chart.shape[0])

    @property
    def tri_edge_lengths(self) -> FloatArray:
        """Per triangle, the length of the edge opposite each local vertex."""
        return self._edge_lengths

    def _compute_edge_lengths(self) -> FloatArray:
        lengths = np.empty((self.n_cells, 3))
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            xa, xb = self.tri_chart[:, i, :], self.tri_chart[:, j, :]
            if self.warp is not None:
                lengths[:, k] = warped_edge_lengths(self.warp, xa, xb)
            else:
                d = xb - xa
                g = self.metric
                lengths[:, k] = d[:, 0] ** 2 * g[:, 0] + 2 * d[:, 0] * d[:, 1] * g[:, 1]
                lengths[:, k] += d[:, 1] ** 2 * g[:, 2]
        if self.warp is None:
            # average the two triangles sharing an edge
            key = np.sort(
                np.stack([self.cells[:, [1, 2, 0]], self.cells[:, [2, 0, 1]]], axis=-1), axis=-1
            ).reshape(-1, 2)
            _, inverse = np.unique(key, axis=0, return_inverse=True)
            inverse = inverse.ravel()
            sums = np.bincount(inverse, weights=lengths.ravel())
            counts = np.bincount(inverse)
            lengths = np.sqrt((sums / counts)[inverse].reshape(-1, 3))
        return lengths

    def metric_at(self, points: FloatArray, cells: IntArray) -> FloatArray:
        """Metric (g11, g12, g22) at chart points lying in the given triangles."""
        if self.warp is None:
            return self.metric[cells]
        phi = self.warp(points[:, 0], points[:, 1])
        return np.column_stack([np.ones_like(phi), np.zeros_like(phi), phi**2])

    def boundary_vertices(self) -> IntArray:
        key = np.sort(
            np.concatenate([self.cells[:, [0, 1]], self.cells[:, [1, 2]], self.cells[:, [2, 0]]]),
            axis=1,
        )
        edges, counts = np.unique(key, axis=0, return_counts=True)
        return np.unique(edges[counts == 1])

    def vertex_triangles(self) -> list[IntArray]:
        order = np.argsort(self.cells.ravel(), kind="stable")
        owners = order // 3
        counts = np.bincount(self.cells.ravel(), minlength=self.n_vertices)
        return np.split(owners, np.cumsum(counts)[:-1])

    @property
    def r_field(self) -> FloatArray:
        if self._r_field is None:
            self._r_field = geodesic_distance(self, POLE_TAG).values
        return self._r_field

    @property
    def radial_coordinate(self) -> FloatArray:
        return self.chart[:, 0] if self.polar else self.r_field

    @property
    def mesh_size(self) -> float:
        return float(self._edge_lengths.max())

    @property
    def collar_volume(self) -> float:
        if self.mm is not None:
            return float(ball_volume(self.mm, np.array([self.eps]))[0])
        ring = self.tags[POLE_TAG]
        loop = 2.0 * math.pi * self.eps if ring.size == 0 else self._loop_length(ring)
        return loop**2 / (4.0 * math.pi)

    def _loop_length(self, ring: IntArray) -> float:
        on_ring = np.isin(self.cells, ring)
        total = 0.0
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            both = on_ring[:, i] & on_ring[:, j]
            total += float(self._edge_lengths[both, k].sum())
        return total

    def restrict(self, radius: float) -> tuple["SurfaceMesh", IntArray]:
        coord = self.radial_coordinate
        keep_vertex = coord <= radius * (1 + 1e-9)
        keep_cells = np.all(keep_vertex[self.cells], axis=1)
        used = np.unique(self.cells[keep_cells])
        if used.size < 3:
            raise ValueRangeError(f"Restriction to R={radius:g} leaves no triangles")
        new_index = np.full(self.n_vertices, -1, dtype=np.int64)
        new_index[used] = np.arange(used.size)
        dropped = ~np.isin(np.arange(self.n_vertices), used)
        rim = np.asarray((self.adjacency() @ dropped.astype(float)) > 0).ravel()[used]
        tags = {
            name: new_index[ids[np.isin(ids, used)]]
            for name, ids in self.tags.items()
            if name != OUTER_TAG
        }
        tags[OUTER_TAG] = np.flatnonzero(rim | np.isin(used, self.tags.get(OUTER_TAG, [])))
        sub = SurfaceMesh(
            self.chart[used],
            new_index[self.cells[keep_cells]],
            self.metric[keep_cells],
            tags,
            self.eps,
            tri_chart=self.tri_chart[keep_cells],
            warp=self.warp,
            mm=self.mm,
            polar=self.polar,
        )
        if self._r_field is not None:
            sub._r_field = self._r_field[used]
        return sub, used

    def cell_quadrature(self) -> CellQuadrature:
        shapes = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        weights = np.repeat(self.cell_measure[:, None] / 3.0, 3, axis=1)
        return CellQuadrature(self.cells, shapes, weights)

    def cell_radius(self) -> FloatArray:
        return self.radial_coordinate[self.cells].mean(axis=1)

    def _marching(self, level: FloatArray, t: float) -> dict[str, Any]:
        """Classify triangles against the level and locate contour crossings."""
        vals = level[self.cells]
        below = vals < t
        count = below.sum(axis=1)
        cut = np.flatnonzero((count == 1) | (count == 2))
        # the lone vertex is the one below (count 1) or above (count 2)
        lone_mask = np.where((count[cut] == 1)[:, None], below[cut], ~below[cut])
        lone = np.argmax(lone_mask, axis=1)
        j = (lone + 1) % 3
        k = (lone + 2) % 3
        rows = np.arange(cut.size)
        fi, fj, fk = vals[cut, lone], vals[cut, j], vals[cut, k]
        lam_j = (t - fi) / (fj - fi)
        lam_k = (t - fi) / (fk - fi)
        xc = self.tri_chart[cut]
        xi = xc[rows, lone]
        pj = xi + lam_j[:, None] * (xc[rows, j] - xi)
        pk = xi + lam_k[:, None] * (xc[rows, k] - xi)
        return {
            "count": count,
            "cut": cut,
            "lone": lone,
            "j": j,
            "k": k,
            "lam_j": lam_j,
            "lam_k": lam_k,
            "pj": pj,
            "pk": pk,
        }

    def contour_integral(
        self, level: FloatArray, t: float, u: FloatArray, w: FloatArray, conservative: bool = False
    ) -> float:
        # segment lengths already match the P1 flux to first order
        mc = self._marching(level, t)
        cut = mc["cut"]
        if cut.size == 0:
            return 0.0
        d = mc["pk"] - mc["pj"]
        g = self.metric_at(0.5 * (mc["pj"] + mc["pk"]), cut)
        length = np.sqrt(
            d[:, 0] ** 2 * g[:, 0] + 2 * d[:, 0] * d[:, 1] * g[:, 1] + d[:, 1] ** 2 * g[:, 2]
        )
        ut = u[self.cells[cut]]
        rows = np.arange(cut.size)
        ui = ut[rows, mc["lone"]]
        uj = ui + mc["lam_j"] * (ut[rows, mc["j"]] - ui)
        uk = ui + mc["lam_k"] * (ut[rows, mc["k"]] - ui)
        return float(np.sum(length * 0.5 * (uj + uk) * w[cut]))

    def sublevel_integral(self, level: FloatArray, t: float, u: FloatArray, w: FloatArray) -> float:
        mc = self._marching(level, t)
        count, cut = mc["count"], mc["cut"]
        ut = u[self.cells]
        full = self.cell_measure * ut.mean(axis=1)
        total = float((full * w)[count == 3].sum())
        if cut.size == 0:
            return total
        rows = np.arange(cut.size)
        uc = ut[cut]
        ui = uc[rows, mc["lone"]]
        uj = ui + mc["lam_j"] * (uc[rows, mc["j"]] - ui)
        uk = ui + mc["lam_k"] * (uc[rows, mc["k"]] - ui)
        corner = self.cell_measure[cut] * mc["lam_j"] * mc["lam_k"] * (ui + uj + uk) / 3.0
        lone_below = count[cut] == 1
        part = np.where(lone_below, corner, full[cut] - corner)
        return total + float(np.sum(part * w[cut]))

    def angles(self) -> FloatArray:
        """Interior angles per triangle corner, from the edge lengths."""
        lengths = self._edge_lengths
        out = np.empty_like(lengths)
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            li, lj, lk = lengths[:, i], lengths[:, j], lengths[:, k]
            out[:, k] = np.arccos(np.clip((li**2 + lj**2 - lk**2) / (2 * li * lj), -1.0, 1.0))
        return out

    def boundary_mean_curvature(self, inside: NDArray[np.bool_]) -> tuple[IntArray, FloatArray]:
        inside = np.asarray(inside, dtype=bool)
        outside_neighbours = np.asarray(self.adjacency() @ (~inside).astype(float)).ravel()
        rim = np.flatnonzero(inside & (outside_neighbours > 0))
        inner_cells = np.all(inside[self.cells], axis=1)
        angle_sum = np.bincount(
            self.cells[inner_cells].ravel(),
            weights=self.angles()[inner_cells].ravel(),
            minlength=self.n_vertices,
        )
        # dual length: half of each boundary edge of the inner complex at its endpoints
        corner_pairs = [((k + 1) % 3, (k + 2) % 3) for k in range(3)]
        edges = np.concatenate(
            [np.sort(self.cells[inner_cells][:, [i, j]], axis=1) for i, j in corner_pairs]
        )
        lengths = np.concatenate([self._edge_lengths[inner_cells, k] for k in range(3)])
        _, index, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
        boundary = counts[index.ravel()] == 1
        half = 0.5 * lengths[boundary]
        dual = np.zeros(self.n_vertices)
        np.add.at(dual, edges[boundary, 0], half)
        np.add.at(dual, edges[boundary, 1], half)
        with np.errstate(divide="ignore", invalid="ignore"):
            curvature = (math.pi - angle_sum[rim]) / dual[rim]
        return rim, curvature


def _unwrap(corners: FloatArray) -> FloatArray:
    """Shift theta of triangle corners across the seam so each triangle is compact."""
    out = corners.copy()
    ref = out[:, :1, 1]
    out[:, :, 1] += np.where(out[:, :, 1] - ref > math.pi, -2 * math.pi, 0.0)
    out[:, :, 1] += np.where(out[:, :, 1] - ref < -math.pi, 2 * math.pi, 0.0)
    return out


def bump_perturbation(
    amplitude: float,
    t0: float,
    t1: float,
    phases: ArrayLike | None = None,
) -> Callable[[FloatArray, FloatArray], FloatArray]:
    """f(t, theta) = 1 + amplitude * s(t) * mean_k sin(k theta + phase_k).

    s is the smooth bump exp(1 - 1/(1 - x^2)) on (t0, t1), equal to 1 at the
    centre and vanishing with all derivatives at both ends.
    """
    phase_arr = np.zeros(1) if phases is None else np.asarray(phases, dtype=float)
    modes = np.arange(1, phase_arr.size + 1)

    def f(t: FloatArray, theta: FloatArray) -> FloatArray:
        t = np.asarray(t, dtype=float)
        x = (2.0 * t - t0 - t1) / (t1 - t0)
        inside = np.abs(x) < 1
        s = np.zeros_like(t)
        s[inside] = np.exp(1.0 - 1.0 / (1.0 - x[inside] ** 2))
        waves = np.sin(modes[:, None] * np.ravel(theta)[None, :] + phase_arr[:, None])
        return 1.0 + amplitude * s * waves.mean(axis=0).reshape(np.shape(theta))

    return f


def build_warped_surface(
    h: ModelManifold | Callable[[FloatArray], FloatArray],
    f: Callable[[FloatArray, FloatArray], FloatArray] | None,
    n_t: int,
    n_theta: int,
    eps_pole: float,
    t_out: float,
    grading: float | None = None,
) -> SurfaceMesh:
    """Triangulate [eps, T] x [0, 2 pi) with metric dt^2 + (h f)^2 dtheta^2.

    Args:
        h: Two-dimensional model, or a warping function of t
        f: Positive perturbation periodic in theta, None for f = 1
        n_t: Number of radial cells
        n_theta: Number of angular cells
        eps_pole: Radius of the pole collar (inner circle)
        t_out: Radius of the outer circle
        grading: Ratio of consecutive radial steps; None spaces the circles
            geometrically so that triangles stay close to isotropic

    Raises:
        DomainError: If a model of dimension other than 2 is passed
        ValueRangeError: If the chart bounds or resolutions are invalid
        InvalidMetricError: If h f is not positive on the chart
    """
    mm = h if isinstance(h, ModelManifold) else None
    if mm is not None:
        if mm.m != 2:
            raise DomainError(f"Surface meshes need a two-dimensional model, got m={mm.m}")
        h_fn: Callable[[FloatArray], FloatArray] = mm.h_at
        if t_out >= mm.r_inf:
            raise ValueRangeError(f"T_out={t_out} beyond R_inf={mm.r_inf}")
    else:
        h_fn = h  # type: ignore[assignment]
    if not 0 < eps_pole < t_out:
        raise ValueRangeError(f"Need 0 < eps_pole < T_out, got {eps_pole}, {t_out}")
    if n_t < 2 or n_theta < 3:
        raise ValueRangeError("Need at least 2 radial and 3 angular cells")

    i = np.arange(n_t + 1, dtype=float)
    if grading is None:
        radii = eps_pole * (t_out / eps_pole) ** (i / n_t)
    elif grading == 1.0:
        radii = eps_pole + (t_out - eps_pole) * i / n_t
    else:
        radii = eps_pole + (t_out - eps_pole) * np.expm1(i * math.log(grading)) / math.expm1(
            n_t * math.log(grading)
        )
    radii[-1] = t_out
    dtheta = 2 * math.pi / n_theta
    thetas = np.arange(n_theta) * dtheta

    tt, th = np.meshgrid(radii, thetas, indexing="ij")
    chart = np.column_stack([tt.ravel(), th.ravel()])

    def vid(a: IntArray, b: IntArray) -> IntArray:
        return a * n_theta + b % n_theta

    ii, jj = np.meshgrid(np.arange(n_t), np.arange(n_theta), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    v00, v10, v11, v01 = vid(ii, jj), vid(ii + 1, jj), vid(ii + 1, jj + 1), vid(ii, jj + 1)
    c00 = np.column_stack([radii[ii], thetas[jj]])
    c10 = np.column_stack([radii[ii + 1], thetas[jj]])
    c11 = np.column_stack([radii[ii + 1], thetas[jj] + dtheta])
    c01 = np.column_stack([radii[ii], thetas[jj] + dtheta])
    flip = (ii + jj) % 2 == 1
    tri_a = np.where(
        flip[:, None], np.column_stack([v00, v10, v01]), np.column_stack([v00, v10, v11])
    )
    tri_b = np.where(
        flip[:, None], np.column_stack([v10, v11, v01]), np.column_stack([v00, v11, v01])
    )
    ch_a = np.where(flip[:, None, None], np.stack([c00, c10, c01], 1), np.stack([c00, c10, c11], 1))
    ch_b = np.where(flip[:, None, None], np.stack([c10, c11, c01], 1), np.stack([c00, c11, c01], 1))
    triangles = np.concatenate([tri_a, tri_b])
    tri_chart = np.concatenate([ch_a, ch_b])

    f_fn = f if f is not None else (lambda t, theta: np.ones_like(np.asarray(t, dtype=float)))
    f_vertices = f_fn(chart[:, 0], chart[:, 1])
    if np.any(f_vertices <= 0):
        raise InvalidMetricError("Perturbation f is not positive on the chart")

    def warp(t: FloatArray, theta: FloatArray) -> FloatArray:
        return h_fn(t) * f_fn(t, theta)

    bary = tri_chart.mean(axis=1)
    phi = warp(bary[:, 0], bary[:, 1])
    if np.any(~np.isfinite(phi)) or np.any(phi <= 0):
        raise InvalidMetricError("Warping h f is not positive on the chart")
    metric = np.column_stack([np.ones_like(phi), np.zeros_like(phi), phi**2])
    tags = {
        POLE_TAG: np.arange(n_theta, dtype=np.int64),
        OUTER_TAG: n_t * n_theta + np.arange(n_theta, dtype=np.int64),
    }
    mesh = SurfaceMesh(
        chart, triangles, metric, tags, eps_pole, tri_chart=tri_chart, warp=warp, mm=mm, polar=True
    )
    logger.debug("Built %r", mesh)
    return mesh


def _triangle_update(ta: float, tb: float, a: float, b: float, c: float) -> float:
    """Hopf-Lax update of C from A, B in a planar triangle with |BC|=a, |AC|=b, |AB|=c."""
    x = (a * a + c * c - b * b) / (2 * c)
    d = math.sqrt(max(a * a - x * x, 0.0))
    delta = ta - tb
    best = min(ta + b, tb + a)
    k = delta / c
    if abs(k) < 1.0:
        s = min(max(x - k * d / math.sqrt(1 - k * k), 0.0), c)
        best = min(best, tb + s * k + math.hypot(x - s, d))
    if best < max(ta, tb):
        return min(ta + b, tb + a)
    return best


# (C, A, B, |BC|, |AC|, |AB|): C is updated from A and B
Stencil = tuple[int, int, int, float, float, float]


def _third_point(
    pp: FloatArray, pq: FloatArray, r_p: float, r_q: float, behind: FloatArray
) -> FloatArray:
    """Point at distances r_p from pp and r_q from pq, across the line pq from ``behind``."""
    span = pq - pp
    length = float(np.hypot(*span))
    u = span / length
    n = np.array([-u[1], u[0]])
    x = (r_p * r_p - r_q * r_q + length * length) / (2 * length)
    h = math.sqrt(max(r_p * r_p - x * x, 0.0))
    side = 1.0 if float(np.dot(behind - pp, n)) <= 0 else -1.0
    return pp + x * u + side * h * n


def _unfold_obtuse(
    mesh: SurfaceMesh,
    edge_cells: dict[tuple[int, int], list[int]],
    cell: int,
    corner: int,
    max_steps: int = 8,
) -> tuple[int, float, float, float] | None:
    """Virtual vertex splitting the obtuse angle of ``cell`` at ``corner``.

    Neighbouring triangles are unfolded into the plane of ``cell`` across the
    edge opposite the corner until a vertex D falls in the section where both
    angles ACD and DCB are at most pi/2. Returns (D, |CD|, |AD|, |DB|) in the
    unfolded plane, or None when the unfolding reaches the boundary first.
    """
    cells = mesh.cells
    lengths = mesh.tri_edge_lengths
    i, j = (corner + 1) % 3, (corner + 2) % 3
    a, b, c = lengths[cell, i], lengths[cell, j], lengths[cell, corner]
    gamma = math.acos(min(max((a * a + b * b - c * c) / (2 * a * b), -1.0), 1.0))
    lo, hi = gamma - math.pi / 2, math.pi / 2
    pa = np.array([b, 0.0])
    pb = np.array([a * math.cos(gamma), a * math.sin(gamma)])
    p, q = int(cells[cell, i]), int(cells[cell, j])
    pp, pq, behind = pa, pb, np.zeros(2)
    current = cell
    for _ in range(max_steps):
        others = [x for x in edge_cells[(min(p, q), max(p, q))] if x != current]
        if not others:
            return None
        nxt = others[0]
        tri = [int(v) for v in cells[nxt]]
        ip, iq = tri.index(p), tri.index(q)
        d = tri[3 - ip - iq]
        pd = _third_point(pp, pq, lengths[nxt, iq], lengths[nxt, ip], behind)
        theta = math.atan2(pd[1], pd[0])
        if lo <= theta <= hi:
            return d, float(np.hypot(*pd)), float(np.hypot(*(pd - pa))), float(np.hypot(*(pb - pd)))
        if theta < lo:
            behind, p, pp = pp, d, pd
        else:
            behind, q, pq = pq, d, pd
        current = nxt
    return None


def _update_stencils(mesh: SurfaceMesh) -> list[Stencil]:
    """Update triangles of every corner; obtuse corners are split into two acute ones."""
    cells = mesh.cells
    lengths = mesh.tri_edge_lengths
    edge_cells: dict[tuple[int, int], list[int]] = defaultdict(list)
    for c, tri in enumerate(cells.tolist()):
        for k in range(3):
            u, v = tri[(k + 1) % 3], tri[(k + 2) % 3]
            edge_cells[(min(u, v), max(u, v))].append(c)
    stencils: list[Stencil] = []
    split = 0
    for c, tri in enumerate(cells.tolist()):
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            a, b, e = float(lengths[c, i]), float(lengths[c, j]), float(lengths[c, k])
            stencil = (tri[k], tri[i], tri[j], a, b, e)
            if a * a + b * b >= e * e:
                stencils.append(stencil)
                continue
            virtual = _unfold_obtuse(mesh, edge_cells, c, k)
            if virtual is None:
                stencils.append(stencil)
                continue
            d, cd, ad, db = virtual
            stencils.append((tri[k], tri[i], d, cd, b, ad))
            stencils.append((tri[k], d, tri[j], a, cd, db))
            split += 1
    if split:
        logger.debug("Fast marching split %d obtuse angles", split)
    return stencils


def _fast_marching(mesh: SurfaceMesh, sources: IntArray) -> FloatArray:
    n = mesh.n_vertices
    dist = np.full(n, np.inf)
    accepted = np.zeros(n, dtype=bool)
    dist[sources] = 0.0
    heap = [(0.0, int(s)) for s in sources]
    heapq.heapify(heap)
    stencils = _update_stencils(mesh)
    supported: list[list[int]] = [[] for _ in range(n)]
    for s, (_, va, vb, _a, _b, _c) in enumerate(stencils):
        supported[va].append(s)
        supported[vb].append(s)
    while heap:
        tv, v = heapq.heappop(heap)
        if accepted[v] or tv > dist[v]:
            continue
        accepted[v] = True
        for s in supported[v]:
            w, va, vb, a, b, c = stencils[s]
            if accepted[w]:
                continue
            if accepted[va] and accepted[vb]:
                cand = _triangle_update(dist[va], dist[vb], a, b, c)
            elif v == va:
                cand = dist[va] + b
            else:
                cand = dist[vb] + a
            if cand < dist[w]:
                dist[w] = cand
                heapq.heappush(heap, (cand, w))
    return dist


def geodesic_distance(dom: DiscreteDomain, source: int | str = POLE_TAG) -> ScalarField:
    """Distance field from a vertex or a tagged vertex set.

    With the pole collar as source the result is the distance from the pole,
    i.e. the distance to the collar plus eps. Radial grids are exact; meshes
    use first-order fast marching on the edge-length geometry, with obtuse
    angles split by a virtual vertex from the unfolded neighbourhood.
    """
    if isinstance(dom, RadialGrid):
        if source == POLE_TAG:
            return ScalarField(dom, dom.nodes.copy(), "r")
        if isinstance(source, str):
            return ScalarField(dom, np.abs(dom.nodes - dom.nodes[dom.tags[source]].min()), "r")
        return ScalarField(dom, np.abs(dom.nodes - dom.nodes[source]), "r")
    if not isinstance(dom, SurfaceMesh):
        raise DomainError(f"Unsupported domain {dom!r}")
    sources = dom.tags[source] if isinstance(source, str) else np.array([source])
    dist = _fast_marching(dom, sources)
    unreachable = ~np.isfinite(dist)
    if np.any(unreachable):
        logger.warning("%d vertices are unreachable from %s", int(unreachable.sum()), source)
    if source == POLE_TAG:
        dist = dist + dom.eps
    return ScalarField(dom, dist, "r")


def gauss_curvature(mesh: SurfaceMesh) -> ScalarField:
    """Angle defect over mixed area at interior vertices; NaN on the boundary."""
    angles = mesh.angles()
    if np.any(angles < 1e-3):
        logger.warning(
            "Mesh quality: %d triangle angles below 1e-3 rad", int(np.sum(angles < 1e-3))
        )
    lengths = mesh.tri_edge_lengths
    s = 0.5 * lengths.sum(axis=1)
    area = np.sqrt(
        np.clip(s * (s - lengths[:, 0]) * (s - lengths[:, 1]) * (s - lengths[:, 2]), 0.0, None)
    )
    mixed = np.empty_like(angles)
    obtuse = np.any(angles > math.pi / 2, axis=1)
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        voronoi = (
            lengths[:, j] ** 2 / np.tan(angles[:, j]) + lengths[:, i] ** 2 / np.tan(angles[:, i])
        ) / 8.0
        mixed[:, k] = np.where(
            obtuse, np.where(angles[:, k] > math.pi / 2, area / 2, area / 4), voronoi
        )
    n = mesh.n_vertices
    angle_sum = np.bincount(mesh.cells.ravel(), weights=angles.ravel(), minlength=n)
    mixed_area = np.bincount(mesh.cells.ravel(), weights=mixed.ravel(), minlength=n)
    values = (2 * math.pi - angle_sum) / mixed_area
    values[mesh.boundary_vertices()] = np.nan
    return ScalarField(mesh, values, "K")


def _level_value(level: FloatArray, t: float) -> float:
    if np.any(level == t):
        span = float(np.nanmax(level) - np.nanmin(level))
        t += 1e-12 * (span if span > 0 else 1.0)
    return t


def level_set_measure(field_: ScalarField, t: float) -> LevelSetMeasurement:
    """Perimeter of {field = t} and volume of {field < t} inside the domain.

    Raises:
        ValueRangeError: If t lies outside the range of the field
    """
    values = field_.values
    lo, hi = float(np.min(values)), float(np.max(values))
    if not lo <= t <= hi:
        raise ValueRangeError(f"Level {t:g} outside the field range [{lo:g}, {hi:g}]")
    dom = field_.owner
    level = _level_value(values, t)
    ones_v = np.ones(dom.n_vertices)
    ones_c = np.ones(dom.n_cells)
    return LevelSetMeasurement(
        t,
        dom.contour_integral(values, level, ones_v, ones_c),
        dom.sublevel_integral(values, level, ones_v, ones_c),
    )


def surface_integral_on_level(
    field_u: ScalarField,
    w: FloatArray | None,
    level_field: ScalarField,
    t: float,
    conservative: bool = False,
) -> float:
    """Integral of u w over {level_field = t}; w is a per-cell weight or None for 1.

    Fluxes pass ``conservative=True`` to weigh each crossing by the area the discrete
    weak form balances.
    """
    dom = level_field.owner
    weights = np.ones(dom.n_cells) if w is None else np.asarray(w, dtype=float)
    level = _level_value(level_field.values, t)
    return dom.contour_integral(level_field.values, level, field_u.values, weights, conservative)


def volume_integral_below(
    field_u: ScalarField, w: FloatArray | None, level_field: ScalarField, t: float
) -> float:
    """Integral of u w over {level_field < t}; w is a per-cell weight or None for 1."""
    dom = level_field.owner
    weights = np.ones(dom.n_cells) if w is None else np.asarray(w, dtype=float)
    level = _level_value(level_field.values, t)
    return dom.sublevel_integral(level_field.values, level, field_u.values, weights)


def ball_volume_profile(dom: DiscreteDomain, levels: ArrayLike) -> FloatArray:
    """Measured |B_t(o)| for each level: sublevel volume of r plus the collar volume."""
    r = ScalarField(dom, dom.r_field, "r")
    out = []
    top = float(np.max(r.values))
    for t in np.asarray(levels, dtype=float):
        if t <= dom.eps:
            out.append(dom.collar_volume * (t / dom.eps) ** dom.m)
        else:
            out.append(level_set_measure(r, min(t, top)).enclosed_volume + dom.collar_volume)
    return np.asarray(out)
