"""Discrete weighted point-cloud approximations of metric measure spaces.

A space is a triple (nodes, weights, dist): quadrature nodes in ambient
R^N, positive quadrature masses playing the role of the measure, and a
dense symmetric distance matrix playing the role of the metric.  Builders
cover intervals and boxes (midpoint rule), metric graphs (arclength
quadrature, geodesic distance), chart manifolds, direct sums of spaces,
and the Sierpinski prefractal.

All values are immutable after construction (array buffers are marked
read-only), so concurrent reads are safe and builders are pure.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra, shortest_path

from .errors import ResourceLimitError

# Snap tolerance for identifying shared graph endpoints.
VERTEX_MERGE_TOL = 1e-9
# Additive tolerance for metric checks (symmetry, triangle inequality).
METRIC_TOL = 1e-9
# Full O(n^3) triangle check up to this size; sampled beyond.
_FULL_TRIANGLE_CHECK_N = 420


def _frozen(a, dtype=float):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DiscreteMeasureSpace:
    """Weighted point cloud with a distance matrix.

    Attributes:
        nodes: (n, ambient_dim) coordinates.
        weights: (n,) positive quadrature masses.
        dist: (n, n) symmetric nonnegative distances, zero diagonal.
        components: (n,) integer structural labels (direct-sum parts).
        total_measure: sum of the weights.
        builder: provenance record (builder name and parameters).
    """

    nodes: np.ndarray
    weights: np.ndarray
    dist: np.ndarray
    components: np.ndarray
    total_measure: float
    builder: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = _frozen(np.atleast_2d(self.nodes))
        weights = _frozen(np.atleast_1d(self.weights))
        dist = _frozen(self.dist)
        components = _frozen(np.atleast_1d(self.components), dtype=np.int64)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "total_measure", float(self.total_measure))
        self._validate()

    def _validate(self):
        n = self.n_nodes
        if n < 1:
            raise ValueError("a space needs at least one node")
        if self.nodes.ndim != 2:
            raise ValueError("nodes must be a 2-D array of coordinates")
        if self.weights.shape != (n,) or self.components.shape != (n,):
            raise ValueError("weights/components length must match node count")
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("node coordinates must be finite")
        if not np.all(self.weights > 0):
            raise ValueError("all quadrature weights must be strictly positive")
        total = float(self.weights.sum())
        if not math.isfinite(self.total_measure) or self.total_measure <= 0:
            raise ValueError("total_measure must be finite and positive")
        if abs(total - self.total_measure) > 1e-12 * abs(self.total_measure):
            raise ValueError(
                f"total_measure {self.total_measure!r} does not match "
                f"sum of weights {total!r}"
            )
        if self.dist.shape != (n, n):
            raise ValueError("dist must be n x n")
        if not np.all(np.isfinite(self.dist)):
            raise ValueError("distances must be finite (is the space connected?)")
        if np.any(self.dist < 0):
            raise ValueError("distances must be nonnegative")
        if np.abs(np.diagonal(self.dist)).max() > METRIC_TOL:
            raise ValueError("dist must have zero diagonal")
        if np.abs(self.dist - self.dist.T).max() > METRIC_TOL:
            raise ValueError("dist must be symmetric")
        _check_triangle_inequality(self.dist)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.nodes.shape[1]

    def to_dict(self, include_dist=True) -> dict:
        """JSON-compatible tree; ``dist`` is row-major and optional."""
        d = {
            "ambient_dim": self.ambient_dim,
            "nodes": self.nodes.tolist(),
            "weights": self.weights.tolist(),
            "components": self.components.tolist(),
            "builder": self.builder,
        }
        if include_dist:
            d["dist"] = self.dist.ravel().tolist()
        return d

    def save(self, path, include_dist=True):
        payload = json.dumps(self.to_dict(include_dist), sort_keys=True)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
        try:
            with os.fdopen(fd, "w") as f:
                f.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def space_from_dict(d: dict) -> DiscreteMeasureSpace:
    """Rebuild a space from :meth:`DiscreteMeasureSpace.to_dict` output.

    A missing ``dist`` entry is recomputed as ambient Euclidean distance;
    geodesic builders must therefore store their distance matrix.
    """
    nodes = np.asarray(d["nodes"], dtype=float)
    if nodes.ndim == 1:
        nodes = nodes[:, None]
    n = nodes.shape[0]
    weights = np.asarray(d["weights"], dtype=float)
    components = np.asarray(d.get("components", np.zeros(n)), dtype=np.int64)
    if "dist" in d and d["dist"] is not None:
        dist = np.asarray(d["dist"], dtype=float)
        dist = dist.reshape(n, n) if dist.ndim == 1 else dist
        dist = 0.5 * (dist + dist.T)
        np.fill_diagonal(dist, 0.0)
    else:
        dist = euclidean_matrix(nodes)
    return DiscreteMeasureSpace(
        nodes=nodes,
        weights=weights,
        dist=dist,
        components=components,
        total_measure=float(weights.sum()),
        builder=d.get("builder", {}),
    )


def load_space(path) -> DiscreteMeasureSpace:
    with open(path) as f:
        return space_from_dict(json.load(f))


@dataclass(frozen=True)
class SupportSet:
    """Sorted node indices above a thresholding level."""

    indices: np.ndarray
    threshold: float

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "threshold", float(self.threshold))
        if self.threshold < 0:
            raise ValueError("support threshold must be nonnegative")

    def __len__(self):
        return int(self.indices.size)

    def to_mask(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        mask[self.indices] = True
        return mask

    def issuperset(self, other: "SupportSet") -> bool:
        return bool(np.isin(other.indices, self.indices).all())


def _check_triangle_inequality(dist, tol=METRIC_TOL):
    n = dist.shape[0]
    if n <= _FULL_TRIANGLE_CHECK_N:
        pivots = range(n)
    else:
        pivots = np.random.default_rng(0).choice(n, size=64, replace=False)
    for k in pivots:
        slack = dist - (dist[:, [k]] + dist[[k], :])
        if slack.max() > tol:
            i, j = np.unravel_index(np.argmax(slack), slack.shape)
            raise ValueError(
                f"triangle inequality violated at ({i},{int(k)},{j}): "
                f"d={dist[i, j]!r} > {dist[i, k] + dist[k, j]!r}"
            )


def euclidean_matrix(nodes) -> np.ndarray:
    """Dense pairwise Euclidean distances (exactly symmetric)."""
    x = np.asarray(nodes, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return d


def max_nn_spacing(space: DiscreteMeasureSpace) -> float:
    """Largest nearest-neighbor distance; the resolution scale of the space."""
    if space.n_nodes == 1:
        return 0.0
    d = space.dist.copy()
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).max())


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_interval(a, b, n) -> DiscreteMeasureSpace:
    """Midpoint rule on [a, b] with n cells."""
    a, b = float(a), float(b)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("interval bounds must be finite")
    if not a < b:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    n = int(n)
    if n < 1:
        raise ValueError("need at least one cell")
    h = (b - a) / n
    x = a + (np.arange(n) + 0.5) * h
    nodes = x[:, None]
    weights = np.full(n, h)
    return DiscreteMeasureSpace(
        nodes=nodes,
        weights=weights,
        dist=euclidean_matrix(nodes),
        components=np.zeros(n, dtype=np.int64),
        total_measure=b - a,
        builder={"name": "interval", "a": a, "b": b, "n": n},
    )


def build_box(lo, hi, n_per_dim) -> DiscreteMeasureSpace:
    """Tensor-grid midpoint rule on the box [lo, hi]."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    counts = np.atleast_1d(np.asarray(n_per_dim, dtype=int))
    if not (lo.shape == hi.shape == counts.shape):
        raise ValueError("lo, hi and n_per_dim must have matching dimensions")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("box bounds must be finite")
    if not np.all(lo < hi):
        raise ValueError("need lo < hi componentwise")
    if not np.all(counts >= 1):
        raise ValueError("need at least one cell per dimension")
    axes = [
        l + (np.arange(m) + 0.5) * ((u - l) / m)
        for l, u, m in zip(lo, hi, counts)
    ]
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    cell = float(np.prod((hi - lo) / counts))
    n = nodes.shape[0]
    return DiscreteMeasureSpace(
        nodes=nodes,
        weights=np.full(n, cell),
        dist=euclidean_matrix(nodes),
        components=np.zeros(n, dtype=np.int64),
        total_measure=float(np.prod(hi - lo)),
        builder={
            "name": "box",
            "lo": lo.tolist(),
            "hi": hi.tolist(),
            "n": counts.tolist(),
        },
    )


def _polyline_quadrature(points, m):
    """Arclength midpoint nodes on a polyline: coordinates and edge length."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    length = float(seg.sum())
    if length <= 0:
        raise ValueError("polyline has zero length")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = (np.arange(m) + 0.5) * (length / m)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    frac = (targets - cum[idx]) / seg[idx]
    coords = pts[idx] + frac[:, None] * (pts[idx + 1] - pts[idx])
    return coords, length


def build_graph(edges, m_per_edge) -> DiscreteMeasureSpace:
    """Metric graph from polyline edges with shared (snapped) endpoints.

    Each edge carries ``m_per_edge`` arclength-midpoint quadrature nodes of
    mass length/m.  Distances are geodesic: shortest paths over the fine
    chain graph (junction vertices plus quadrature nodes), with endpoints
    closer than ``VERTEX_MERGE_TOL`` identified.
    """
    m = int(m_per_edge)
    if m < 1:
        raise ValueError("need at least one quadrature node per edge")
    if not edges:
        raise ValueError("edge list is empty")
    polys = []
    for e in edges:
        pts = np.asarray(e, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("each edge must be a polyline with >= 2 vertices")
        if not np.all(np.isfinite(pts)):
            raise ValueError("edge vertices must be finite")
        polys.append(pts)
    dims = {p.shape[1] for p in polys}
    if len(dims) != 1:
        raise ValueError(f"edges live in different ambient dimensions: {sorted(dims)}")

    junctions = []

    def junction_id(p):
        for i, q in enumerate(junctions):
            if np.linalg.norm(p - q) < VERTEX_MERGE_TOL:
                return i
        junctions.append(p)
        return len(junctions) - 1

    ends = [(junction_id(p[0]), junction_id(p[-1])) for p in polys]

    n_j = len(junctions)
    incidence = np.zeros((n_j, n_j), dtype=bool)
    for a, b in ends:
        incidence[a, b] = incidence[b, a] = True
    n_comp, _ = connected_components(csr_matrix(incidence), directed=False)
    if n_j and n_comp > 1:
        raise ValueError(
            "edge-vertex incidence graph is disconnected; "
            "geodesic distance is undefined between components"
        )

    coords_list, lengths = [], []
    for p in polys:
        c, length = _polyline_quadrature(p, m)
        coords_list.append(c)
        lengths.append(length)
    quad_nodes = np.vstack(coords_list)
    n_quad = quad_nodes.shape[0]

    # chain graph: junctions [0, n_j), quadrature nodes [n_j, n_j + n_quad)
    rows, cols, vals = [], [], []

    def link(i, j, d):
        rows.append(i)
        cols.append(j)
        vals.append(d)

    for e, (length, (a, b)) in enumerate(zip(lengths, ends)):
        base = n_j + e * m
        step = length / m
        link(a, base, step / 2)
        for k in range(m - 1):
            link(base + k, base + k + 1, step)
        link(base + m - 1, b, step / 2)
    chain = csr_matrix(
        (vals, (rows, cols)), shape=(n_j + n_quad, n_j + n_quad)
    )
    full = dijkstra(chain, directed=False, indices=np.arange(n_j, n_j + n_quad))
    dist = full[:, n_j:]
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)

    weights = np.concatenate([np.full(m, length / m) for length in lengths])
    return DiscreteMeasureSpace(
        nodes=quad_nodes,
        weights=weights,
        dist=dist,
        components=np.zeros(n_quad, dtype=np.int64),
        total_measure=float(sum(lengths)),
        builder={"name": "graph", "m_per_edge": m, "n_edges": len(polys)},
    )


def build_manifold_chart(grid, phi, sqrt_g) -> DiscreteMeasureSpace:
    """Push a box discretization of the parameter domain through a chart.

    ``phi`` maps a parameter point to ambient R^N and ``sqrt_g`` gives the
    metric volume factor; node mass is cell volume times sqrt_g at the cell
    center.  Distances are ambient Euclidean (equivalent to the geodesic
    metric on compact embedded manifolds).  For 1-D grids both callables
    receive a scalar.
    """
    if not isinstance(grid, DiscreteMeasureSpace):
        raise ValueError("grid must be a DiscreteMeasureSpace (interval/box)")

    def _arg(x):
        return float(x[0]) if x.size == 1 else x

    mapped = np.asarray([np.atleast_1d(phi(_arg(x))) for x in grid.nodes], dtype=float)
    if mapped.ndim != 2 or not np.all(np.isfinite(mapped)):
        raise ValueError("phi must map every grid node to a finite point")
    g_vals = np.asarray([sqrt_g(_arg(x)) for x in grid.nodes], dtype=float)
    if not np.all(np.isfinite(g_vals)) or not np.all(g_vals > 0):
        raise ValueError("sqrt_g must be positive and finite at all grid nodes")

    dist = euclidean_matrix(mapped)
    off = dist + np.diag(np.full(len(mapped), np.inf))
    if off.min() <= 1e-12:
        i, j = np.unravel_index(np.argmin(off), off.shape)
        raise ValueError(
            f"phi is not injective on the grid: nodes {i} and {j} collide"
        )
    weights = grid.weights * g_vals
    return DiscreteMeasureSpace(
        nodes=mapped,
        weights=weights,
        dist=dist,
        components=np.zeros(len(mapped), dtype=np.int64),
        total_measure=float(weights.sum()),
        builder={"name": "manifold_chart", "grid": grid.builder},
    )


def build_multistructure(parts) -> DiscreteMeasureSpace:
    """Direct sum of spaces: measures add, distance is ambient Euclidean."""
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one part")
    dims = {p.ambient_dim for p in parts}
    if len(dims) != 1:
        raise ValueError(f"parts live in different ambient dimensions: {sorted(dims)}")
    nodes = np.vstack([p.nodes for p in parts])
    weights = np.concatenate([p.weights for p in parts])
    labels = []
    offset = 0
    for p in parts:
        _, local = np.unique(p.components, return_inverse=True)
        labels.append(local + offset)
        offset += int(local.max()) + 1
    return DiscreteMeasureSpace(
        nodes=nodes,
        weights=weights,
        dist=euclidean_matrix(nodes),
        components=np.concatenate(labels),
        total_measure=float(sum(p.total_measure for p in parts)),
        builder={"name": "multistructure", "parts": [p.builder for p in parts]},
    )


def build_sierpinski(level) -> DiscreteMeasureSpace:
    """Level-``level`` prefractal gasket graph on the unit triangle.

    Vertices of the 3^level cells; the self-similar measure gives each cell
    mass 3^-level, split evenly among its three corners (outer corners thus
    carry half the mass of junction vertices), normalized to total mass 1.
    Distances are geodesic along the prefractal edges of length 2^-level.
    """
    level = int(level)
    if level < 0:
        raise ValueError("level must be nonnegative")
    if level > 8:
        raise ResourceLimitError(
            f"level {level} exceeds the dense-matrix budget (max 8)"
        )
    side = 2**level
    tris = [((0, 0), (side, 0), (0, side))]
    for _ in range(level):
        nxt = []
        for a, b, c in tris:
            mab = ((a[0] + b[0]) // 2, (a[1] + b[1]) // 2)
            mac = ((a[0] + c[0]) // 2, (a[1] + c[1]) // 2)
            mbc = ((b[0] + c[0]) // 2, (b[1] + c[1]) // 2)
            nxt += [(a, mab, mac), (mab, b, mbc), (mac, mbc, c)]
        tris = nxt

    index: dict = {}
    counts: list = []

    def vid(p):
        i = index.get(p)
        if i is None:
            i = len(index)
            index[p] = i
            counts.append(0)
        return i

    edge_rows, edge_cols = [], []
    for tri in tris:
        ids = [vid(p) for p in tri]
        for i in ids:
            counts[i] += 1
        for a, b in ((0, 1), (0, 2), (1, 2)):
            edge_rows.append(ids[a])
            edge_cols.append(ids[b])

    n = len(index)
    lattice = np.array(list(index.keys()), dtype=float)
    nodes = np.empty((n, 2))
    nodes[:, 0] = (lattice[:, 0] + 0.5 * lattice[:, 1]) / side
    nodes[:, 1] = lattice[:, 1] * (math.sqrt(3) / 2) / side

    weights = np.asarray(counts, dtype=float) * 3.0 ** (-(level + 1))
    adj = csr_matrix(
        (np.ones(len(edge_rows)), (edge_rows, edge_cols)), shape=(n, n)
    )
    hops = shortest_path(adj, method="D", directed=False, unweighted=True)
    dist = hops * (1.0 / side)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return DiscreteMeasureSpace(
        nodes=nodes,
        weights=weights,
        dist=dist,
        components=np.zeros(n, dtype=np.int64),
        total_measure=float(weights.sum()),
        builder={"name": "sierpinski", "level": level},
    )


# ---------------------------------------------------------------------------
# chain connectivity and support dilation
# ---------------------------------------------------------------------------

def is_R_connected(space, R):
    """Whether every pair of nodes is joined by a chain of steps < R.

    Returns ``(True, n0)`` with n0 the hop diameter of the threshold graph
    (the smallest n for which n-fold open-ball dilation from any single
    node covers the space), or ``(False, None)``.
    """
    R = float(R)
    if not R > 0:
        raise ValueError("R must be positive")
    adj = space.dist < R
    graph = csr_matrix(adj)
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp > 1:
        return False, None
    hops = shortest_path(graph, method="D", directed=False, unweighted=True)
    return True, max(int(hops.max()), 1)


def expand_support(space, support: SupportSet, R, n) -> SupportSet:
    """n-fold dilation of an index set by open balls of radius R.

    One step maps S to {i : d(i, j) < R for some j in S}; since d(i, i) = 0
    the result always contains S, so the dilation is monotone in n.
    """
    R = float(R)
    if not R > 0:
        raise ValueError("R must be positive")
    n = int(n)
    if n < 0:
        raise ValueError("n must be nonnegative")
    if len(support) == 0:
        raise ValueError("cannot dilate an empty support")
    mask = support.to_mask(space.n_nodes)
    adj = space.dist < R
    for _ in range(n):
        grown = adj[:, mask].any(axis=1)
        if np.array_equal(grown, mask):
            break
        mask = grown
    return SupportSet(np.flatnonzero(mask), support.threshold)
