"""Triangular finite-element meshes: construction, decimation, smoothing,
boundary buffering, and piecewise-linear basis evaluation.

Vertices carry a class flag: ``interior`` / ``boundary`` vertices make up the
latent mesh, ``auxiliary`` vertices are the buffer rings added by
:func:`extend_boundary` and exist only to mitigate Neumann boundary effects in
the precision construction. Basis rows are evaluated on the latent
(pre-extension) mesh, so their length equals the latent vertex count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .errors import (
    CollinearInput,
    DuplicatePoints,
    PointOutsideMesh,
    TargetTooSmall,
)

INTERIOR = "interior"
BOUNDARY = "boundary"
AUXILIARY = "auxiliary"

_CLASSES = (INTERIOR, BOUNDARY, AUXILIARY)

# Fixed epsilon for geometric predicates (documented limitation: desk-scale
# point sets, no exact arithmetic).
GEOM_EPS = 1e-12


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def signed_area(a, b, c) -> float:
    """Twice-signed-area convention is not used: returns the actual signed area."""
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))


def triangle_angles(a, b, c) -> np.ndarray:
    """Interior angles (radians) of triangle abc, in vertex order."""
    pts = np.asarray([a, b, c], dtype=float)
    out = np.empty(3)
    for i in range(3):
        u = pts[(i + 1) % 3] - pts[i]
        v = pts[(i + 2) % 3] - pts[i]
        cosang = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        out[i] = math.acos(min(1.0, max(-1.0, cosang)))
    return out


def in_circumcircle(a, b, c, d, eps: float = GEOM_EPS) -> bool:
    """True when d lies strictly inside the circumcircle of CCW triangle abc.

    The determinant scales with length^4; the tolerance is normalised by the
    characteristic size of the configuration so the predicate is scale-free.
    """
    ax, ay = a[0] - d[0], a[1] - d[1]
    bx, by = b[0] - d[0], b[1] - d[1]
    cx, cy = c[0] - d[0], c[1] - d[1]
    det = (
        (ax * ax + ay * ay) * (bx * cy - cx * by)
        - (bx * bx + by * by) * (ax * cy - cx * ay)
        + (cx * cx + cy * cy) * (ax * by - bx * ay)
    )
    scale = max(abs(ax), abs(ay), abs(bx), abs(by), abs(cx), abs(cy), 1e-300)
    return det > eps * scale**4


def _point_segment_distance(p, a, b) -> float:
    ap = np.asarray(p, dtype=float) - a
    ab = np.asarray(b, dtype=float) - a
    denom = float(np.dot(ab, ab))
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float(np.dot(ap, ab)) / denom))
    return float(np.linalg.norm(ap - t * ab))


# ---------------------------------------------------------------------------
# mesh container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityReport:
    """Mesh quality summary: minimum interior angle (radians), maximum edge
    length (the FEM mesh parameter h), and the latent vertex count R."""

    min_angle: float
    max_edge_h: float
    vertex_count: int


@dataclass(frozen=True)
class Mesh:
    """Immutable triangulation.

    vertices      (n, 2) float array
    triangles     (m, 3) int array, counter-clockwise
    vertex_class  length-n sequence of {interior, boundary, auxiliary}
    interior_index  maps latent-vertex positions into the (possibly extended)
                    vertex list; identity for unextended meshes
    """

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_class: tuple
    interior_index: np.ndarray
    _locator: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "vertex_class", tuple(self.vertex_class))
        ii = np.ascontiguousarray(np.asarray(self.interior_index, dtype=np.int64))
        ii.setflags(write=False)
        object.__setattr__(self, "interior_index", ii)

    # -- basic sizes ------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_latent(self) -> int:
        """Number of non-auxiliary vertices (the R of the latent field)."""
        return int(self.interior_index.shape[0])

    @property
    def latent_vertices(self) -> np.ndarray:
        return self.vertices[self.interior_index]

    # -- topology ----------------------------------------------------------

    def edges(self) -> set:
        out = set()
        for i, j, k in self.triangles:
            out.add((min(i, j), max(i, j)))
            out.add((min(j, k), max(j, k)))
            out.add((min(i, k), max(i, k)))
        return out

    def hull_vertices(self) -> set:
        """Vertices on the boundary of the triangulated region (edges used once)."""
        count = {}
        for i, j, k in self.triangles:
            for e in ((i, j), (j, k), (k, i)):
                key = (min(e), max(e))
                count[key] = count.get(key, 0) + 1
        out = set()
        for (i, j), c in count.items():
            if c == 1:
                out.add(int(i))
                out.add(int(j))
        return out

    def hull_polygon(self) -> np.ndarray:
        """CCW-ordered hull coordinates."""
        hull = ConvexHull(self.vertices)
        return self.vertices[hull.vertices]

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        return 0.5 * (
            (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
            - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        )

    def validate(self) -> None:
        """Assert structural mesh invariants; raises ValueError on violation."""
        n = self.n_vertices
        t = self.triangles
        if t.min(initial=0) < 0 or t.max(initial=-1) >= n:
            raise ValueError("triangle index out of range")
        for tri in t:
            if len(set(int(x) for x in tri)) != 3:
                raise ValueError(f"degenerate triangle indices {tri}")
        areas = self.triangle_areas()
        if np.any(areas <= 0):
            raise ValueError("non-positive triangle area (orientation or sliver)")
        count = {}
        for i, j, k in t:
            for e in ((i, j), (j, k), (k, i)):
                key = (min(e), max(e))
                count[key] = count.get(key, 0) + 1
        if any(c > 2 for c in count.values()):
            raise ValueError("edge shared by more than two triangles")
        hull = ConvexHull(self.vertices)
        if not math.isclose(areas.sum(), hull.volume, rel_tol=1e-9):
            raise ValueError(
                f"triangulation does not cover the hull: {areas.sum()} vs {hull.volume}"
            )

    # -- point location -----------------------------------------------------

    def _build_locator(self):
        v, t = self.vertices, self.triangles
        lo = v.min(axis=0)
        hi = v.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        nbin = max(1, int(math.sqrt(max(1, self.n_triangles))))
        buckets = {}
        corners = v[t]  # (m, 3, 2)
        tlo = corners.min(axis=1)
        thi = corners.max(axis=1)
        ilo = np.clip(((tlo - lo) / span * nbin).astype(int), 0, nbin - 1)
        ihi = np.clip(((thi - lo) / span * nbin).astype(int), 0, nbin - 1)
        for idx in range(self.n_triangles):
            for bx in range(ilo[idx, 0], ihi[idx, 0] + 1):
                for by in range(ilo[idx, 1], ihi[idx, 1] + 1):
                    buckets.setdefault((bx, by), []).append(idx)
        self._locator["lo"] = lo
        self._locator["span"] = span
        self._locator["nbin"] = nbin
        self._locator["buckets"] = buckets

    def locate(self, point, tol: float = 1e-10):
        """Containing triangle index and barycentric coordinates of ``point``.

        Raises PointOutsideMesh when no triangle contains the point within
        ``tol`` on the barycentric coordinates.
        """
        if not self._locator:
            self._build_locator()
        lo = self._locator["lo"]
        span = self._locator["span"]
        nbin = self._locator["nbin"]
        p = np.asarray(point, dtype=float)
        bx = int(np.clip((p[0] - lo[0]) / span[0] * nbin, 0, nbin - 1))
        by = int(np.clip((p[1] - lo[1]) / span[1] * nbin, 0, nbin - 1))
        candidates = self._locator["buckets"].get((bx, by), ())
        best = None
        best_violation = np.inf
        v, t = self.vertices, self.triangles
        for idx in candidates:
            a, b, c = v[t[idx, 0]], v[t[idx, 1]], v[t[idx, 2]]
            area = signed_area(a, b, c)
            l1 = signed_area(p, b, c) / area
            l2 = signed_area(a, p, c) / area
            l3 = 1.0 - l1 - l2
            violation = -min(l1, l2, l3)
            if violation < best_violation:
                best_violation = violation
                best = (idx, np.array([l1, l2, l3]))
            if violation <= 0.0:
                break
        if best is None or best_violation > tol:
            raise PointOutsideMesh(f"point {tuple(p)} outside mesh hull")
        return best


def _classify(vertices: np.ndarray, triangles: np.ndarray) -> list:
    count = {}
    for i, j, k in triangles:
        for e in ((i, j), (j, k), (k, i)):
            key = (min(e), max(e))
            count[key] = count.get(key, 0) + 1
    on_hull = set()
    for (i, j), c in count.items():
        if c == 1:
            on_hull.add(int(i))
            on_hull.add(int(j))
    return [BOUNDARY if i in on_hull else INTERIOR for i in range(len(vertices))]


def _make_mesh(vertices, triangles, vertex_class=None, interior_index=None) -> Mesh:
    vertices = np.asarray(vertices, dtype=float)
    tri = np.asarray(triangles, dtype=np.int64)
    # enforce CCW orientation
    fixed = []
    for i, j, k in tri:
        a, b, c = vertices[i], vertices[j], vertices[k]
        if signed_area(a, b, c) < 0:
            fixed.append((i, k, j))
        else:
            fixed.append((i, j, k))
    tri = np.asarray(fixed, dtype=np.int64)
    if vertex_class is None:
        vertex_class = _classify(vertices, tri)
    if interior_index is None:
        interior_index = np.arange(len(vertices))
    return Mesh(vertices, tri, tuple(vertex_class), interior_index)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _qhull_triangles(points: np.ndarray) -> np.ndarray:
    """Delaunay simplices with exactly-degenerate slivers dropped.

    Qhull's facet triangulation can emit zero-area simplices for collinear or
    cocircular inputs (lattices, sampled ring edges); they cover no area, so
    removing them keeps the triangulation exact.
    """
    dt = Delaunay(points)
    tri = dt.simplices
    a, b, c = points[tri[:, 0]], points[tri[:, 1]], points[tri[:, 2]]
    area = 0.5 * np.abs(
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )
    edge2 = np.maximum(
        ((b - a) ** 2).sum(axis=1),
        np.maximum(((c - b) ** 2).sum(axis=1), ((a - c) ** 2).sum(axis=1)),
    )
    keep = area > GEOM_EPS * np.maximum(edge2, 1e-300)
    return tri[keep]


def delaunay_triangulate(points) -> Mesh:
    """Delaunay triangulation of a 2-D point set.

    Every returned triangle satisfies the empty-circumcircle property (fixed
    1e-12 tolerance on the scale-normalised in-circle predicate).
    """
    pts = np.asarray([(p[0], p[1]) for p in points], dtype=float)
    if pts.shape[0] < 3:
        raise CollinearInput("need at least 3 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinates")
    scale = max(pts.max() - pts.min(), 1.0)
    rounded = np.round(pts / (GEOM_EPS * scale)).astype(np.int64)
    if len(np.unique(rounded, axis=0)) != len(pts):
        raise DuplicatePoints("duplicate points in input")
    try:
        tri = _qhull_triangles(pts)
    except QhullError as exc:
        raise CollinearInput(f"points do not span 2-D: {exc}") from exc
    if tri.shape[0] == 0:
        raise CollinearInput("points do not span 2-D")
    mesh = _make_mesh(pts, tri)
    # Qhull can emit slivers for cocircular inputs; Lawson flips restore the
    # empty-circumcircle property under our fixed predicate.
    mesh = _lawson_all(mesh)
    mesh.validate()
    return mesh


def _edge_to_triangles(triangles) -> dict:
    e2t = {}
    for tidx, (i, j, k) in enumerate(triangles):
        for e in ((i, j), (j, k), (k, i)):
            key = (min(e), max(e))
            e2t.setdefault(key, []).append(tidx)
    return e2t


def _flip_edges(vertices, tri_list, seed_edges) -> list:
    """Lawson edge flips until every queued edge is locally Delaunay.

    ``tri_list`` is a list of index triples (CCW); returns the updated list.
    """
    triangles = {tuple(int(x) for x in t) for t in tri_list}
    e2t = {}
    for t in triangles:
        for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            e2t.setdefault((min(e), max(e)), set()).add(t)
    queue = [(min(e), max(e)) for e in seed_edges]
    guard = 0
    limit = 50 * max(1, len(triangles)) * max(4, len(e2t))
    while queue:
        guard += 1
        if guard > limit:  # cannot happen for valid input; defensive stop
            break
        key = queue.pop()
        incident = e2t.get(key)
        if incident is None or len(incident) != 2:
            continue
        t1, t2 = tuple(incident)
        a, b = key
        c = next(v for v in t1 if v not in key)
        d = next(v for v in t2 if v not in key)
        # orient so that (a, b, c) is CCW
        if signed_area(vertices[a], vertices[b], vertices[c]) < 0:
            a, b = b, a
        if not in_circumcircle(vertices[a], vertices[b], vertices[c], vertices[d]):
            continue
        new1 = (a, d, c)
        new2 = (d, b, c)
        if (
            signed_area(vertices[a], vertices[d], vertices[c]) <= 0
            or signed_area(vertices[d], vertices[b], vertices[c]) <= 0
        ):
            continue  # non-convex quad, flip would invert
        for old in (t1, t2):
            triangles.discard(old)
            for e in ((old[0], old[1]), (old[1], old[2]), (old[2], old[0])):
                ekey = (min(e), max(e))
                e2t.get(ekey, set()).discard(old)
        for new in (new1, new2):
            triangles.add(new)
            for e in ((new[0], new[1]), (new[1], new[2]), (new[2], new[0])):
                ekey = (min(e), max(e))
                e2t.setdefault(ekey, set()).add(new)
        e2t.pop(key, None)
        for e in ((a, d), (d, b), (b, c), (c, a)):
            queue.append((min(e), max(e)))
    return list(triangles)


def _lawson_all(mesh: Mesh) -> Mesh:
    """Restore the empty-circumcircle property mesh-wide (cheap when the
    input is already Delaunay: only violated edges enter the flip queue)."""
    tri = [tuple(int(x) for x in t) for t in mesh.triangles]
    vertices = mesh.vertices
    e2t = {}
    for t in tri:
        for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            e2t.setdefault((min(e), max(e)), []).append(t)
    bad = []
    for key, inc in e2t.items():
        if len(inc) != 2:
            continue
        t1, t2 = inc
        a, b = key
        c = next(v for v in t1 if v not in key)
        d = next(v for v in t2 if v not in key)
        if signed_area(vertices[a], vertices[b], vertices[c]) < 0:
            a, b = b, a
        if in_circumcircle(vertices[a], vertices[b], vertices[c], vertices[d]):
            bad.append(key)
    if not bad:
        return mesh
    tri = _flip_edges(vertices, tri, bad)
    return _make_mesh(vertices, tri, mesh.vertex_class, mesh.interior_index)


# ---------------------------------------------------------------------------
# decimation
# ---------------------------------------------------------------------------

def _ear_clip(vertices, ring) -> list:
    """Triangulate the simple polygon ``ring`` (CCW vertex indices) by ear
    clipping; returns CCW index triples."""
    ring = list(ring)
    triangles = []
    guard = 0
    while len(ring) > 3:
        guard += 1
        if guard > 10 * len(ring) ** 2:
            raise RuntimeError("ear clipping failed to converge")
        n = len(ring)
        clipped = False
        # prefer the ear with the largest minimum angle for quality
        best = None
        best_quality = -1.0
        for i in range(n):
            a, b, c = ring[(i - 1) % n], ring[i], ring[(i + 1) % n]
            pa, pb, pc = vertices[a], vertices[b], vertices[c]
            if signed_area(pa, pb, pc) <= GEOM_EPS * max(
                1e-300, float(np.abs(np.array([pa, pb, pc])).max()) ** 2
            ):
                continue
            contains_other = False
            for v in ring:
                if v in (a, b, c):
                    continue
                p = vertices[v]
                if (
                    signed_area(pa, pb, p) >= 0
                    and signed_area(pb, pc, p) >= 0
                    and signed_area(pc, pa, p) >= 0
                ):
                    contains_other = True
                    break
            if contains_other:
                continue
            quality = float(triangle_angles(pa, pb, pc).min())
            if quality > best_quality:
                best_quality = quality
                best = i
        if best is not None:
            i = best
            a, b, c = ring[(i - 1) % n], ring[i], ring[(i + 1) % n]
            triangles.append((a, b, c))
            ring.pop(i)
            clipped = True
        if not clipped:
            raise RuntimeError("no ear found; polygon not simple?")
    triangles.append(tuple(ring))
    return triangles


def _vertex_star(triangles, v):
    """Incident triangles of v and the CCW-ordered link ring."""
    incident = [t for t in triangles if v in t]
    succ = {}
    for t in incident:
        i = t.index(v)
        a, b = t[(i + 1) % 3], t[(i + 2) % 3]
        succ[a] = b  # link edge a->b is CCW around v
    start = next(iter(succ))
    ring = [start]
    while True:
        nxt = succ[ring[-1]]
        if nxt == start:
            break
        ring.append(nxt)
        if len(ring) > len(succ) + 1:
            raise RuntimeError("open or non-manifold vertex star")
    return incident, ring


def decimate(mesh: Mesh, target: int) -> Mesh:
    """Remove vertices until exactly ``target`` remain.

    Each step removes the interior vertex whose smallest incident triangle
    area is minimal (ties broken by lowest index), re-triangulates the cavity
    by ear clipping, and restores the Delaunay property with edge flips. Hull
    vertices are never removal candidates.
    """
    if target < 3:
        raise TargetTooSmall(f"target {target} < 3")
    if target > mesh.n_vertices:
        raise TargetTooSmall(
            f"target {target} exceeds vertex count {mesh.n_vertices}"
        )
    if target == mesh.n_vertices:
        return mesh

    vertices = np.array(mesh.vertices)
    triangles = [tuple(int(x) for x in t) for t in mesh.triangles]
    alive = list(range(mesh.n_vertices))

    while len(alive) > target:
        hull = set()
        count = {}
        for i, j, k in triangles:
            for e in ((i, j), (j, k), (k, i)):
                key = (min(e), max(e))
                count[key] = count.get(key, 0) + 1
        for (i, j), c in count.items():
            if c == 1:
                hull.add(i)
                hull.add(j)
        min_area = {}
        for t in triangles:
            a = signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]])
            for v in t:
                if v in hull:
                    continue
                if v not in min_area or a < min_area[v]:
                    min_area[v] = a
        if not min_area:
            raise TargetTooSmall(
                "no interior vertex left to remove (hull vertices are kept)"
            )
        victim = min(min_area, key=lambda v: (min_area[v], v))
        incident, ring = _vertex_star(triangles, victim)
        for t in incident:
            triangles.remove(t)
        cavity = _ear_clip(vertices, ring)
        triangles.extend(cavity)
        internal = {}
        for t in cavity:
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(e), max(e))
                internal[key] = internal.get(key, 0) + 1
        seed = {e for e, c in internal.items() if c == 2}
        triangles = _flip_edges(vertices, triangles, seed)
        alive.remove(victim)

    remap = {old: new for new, old in enumerate(alive)}
    new_tri = [(remap[i], remap[j], remap[k]) for i, j, k in triangles]
    out = _make_mesh(vertices[alive], new_tri)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Laplacian smoothing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothResult:
    """Smoothing outcome: the smoothed mesh, whether every interior angle
    reached the target, sweeps used, and the achieved minimum angle."""

    mesh: Mesh
    target_met: bool
    sweeps: int
    min_angle: float


def _min_angle(vertices, triangles) -> float:
    worst = math.pi
    for i, j, k in triangles:
        worst = min(
            worst,
            float(triangle_angles(vertices[i], vertices[j], vertices[k]).min()),
        )
    return worst


def laplacian_smooth(mesh: Mesh, theta_min: float, max_sweeps: int = 20) -> SmoothResult:
    """Move interior vertices to their neighbour centroid when the move keeps
    a valid star and does not reduce the local minimum angle; flips restore
    the Delaunay property after each accepted move.

    Stops when every angle is at least ``theta_min`` or after ``max_sweeps``.
    Hull vertices never move, and the global minimum angle at exit is never
    below its input value.
    """
    if not 0.0 < theta_min <= math.pi / 6:
        raise ValueError("theta_min must be in (0, pi/6]")
    vertices = np.array(mesh.vertices)
    triangles = [tuple(int(x) for x in t) for t in mesh.triangles]

    sweeps = 0
    while _min_angle(vertices, triangles) < theta_min and sweeps < max_sweeps:
        sweeps += 1
        hull = set()
        count = {}
        for i, j, k in triangles:
            for e in ((i, j), (j, k), (k, i)):
                key = (min(e), max(e))
                count[key] = count.get(key, 0) + 1
        for (i, j), c in count.items():
            if c == 1:
                hull.add(i)
                hull.add(j)
        moved_any = False
        for v in range(len(vertices)):
            if v in hull:
                continue
            incident = [t for t in triangles if v in t]
            if not incident:
                continue
            neigh = sorted({u for t in incident for u in t if u != v})
            centroid = vertices[neigh].mean(axis=0)
            if np.allclose(centroid, vertices[v], atol=1e-15):
                continue
            old_local = min(
                float(
                    triangle_angles(vertices[a], vertices[b], vertices[c]).min()
                )
                for a, b, c in incident
            )
            old_pos = vertices[v].copy()
            vertices[v] = centroid
            star_ok = all(
                signed_area(vertices[a], vertices[b], vertices[c]) > 0
                for a, b, c in incident
            )
            if not star_ok:
                vertices[v] = old_pos
                continue
            new_local = min(
                float(
                    triangle_angles(vertices[a], vertices[b], vertices[c]).min()
                )
                for a, b, c in incident
            )
            if new_local < old_local:
                vertices[v] = old_pos
                continue
            moved_any = True
            seed = {
                (min(e), max(e))
                for t in incident
                for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))
            }
            triangles = _flip_edges(vertices, triangles, seed)
        if not moved_any:
            break

    final = _min_angle(vertices, triangles)
    out = _make_mesh(vertices, triangles, mesh.vertex_class, mesh.interior_index)
    out.validate()
    return SmoothResult(out, final >= theta_min, sweeps, final)


# ---------------------------------------------------------------------------
# boundary extension
# ---------------------------------------------------------------------------

def _offset_hull(polygon: np.ndarray, dist: float) -> np.ndarray:
    """Offset a CCW convex polygon outward by ``dist`` with miter joins."""
    n = len(polygon)
    lines = []
    for i in range(n):
        a = polygon[i]
        b = polygon[(i + 1) % n]
        d = b - a
        length = np.linalg.norm(d)
        if length < 1e-300:
            continue
        normal = np.array([d[1], -d[0]]) / length  # outward for CCW
        lines.append((a + dist * normal, b + dist * normal))
    out = []
    m = len(lines)
    for i in range(m):
        (p1, p2) = lines[(i - 1) % m]
        (q1, q2) = lines[i]
        d1 = p2 - p1
        d2 = q2 - q1
        denom = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(denom) < 1e-14 * max(np.linalg.norm(d1), np.linalg.norm(d2)) ** 2:
            out.append(q1)  # nearly parallel edges: fall back to endpoint
            continue
        t = ((q1[0] - p1[0]) * d2[1] - (q1[1] - p1[1]) * d2[0]) / denom
        out.append(p1 + t * d1)
    return np.asarray(out)


def _sample_polygon(polygon: np.ndarray, spacing: float) -> np.ndarray:
    pts = []
    n = len(polygon)
    for i in range(n):
        a = polygon[i]
        b = polygon[(i + 1) % n]
        length = np.linalg.norm(b - a)
        k = max(1, int(math.ceil(length / spacing)))
        for j in range(k):
            pts.append(a + (b - a) * (j / k))
    return np.asarray(pts)


def mean_interior_edge_length(mesh: Mesh) -> float:
    v = mesh.vertices
    lengths = [np.linalg.norm(v[i] - v[j]) for i, j in mesh.edges()]
    return float(np.mean(lengths))


def extend_boundary(mesh: Mesh, buffer_width: float, ring_spacing: float | None = None) -> Mesh:
    """Add auxiliary vertex rings outside the hull until every latent vertex
    lies at least ``buffer_width`` from the extended hull boundary.

    Latent vertices keep their identities through ``interior_index``. Returns
    the mesh unchanged when the buffer requirement already holds.
    """
    if buffer_width <= 0:
        raise ValueError("buffer_width must be positive")
    if ring_spacing is None:
        ring_spacing = mean_interior_edge_length(mesh)

    def margin(m: Mesh) -> float:
        poly = m.hull_polygon()
        seg_a = poly
        seg_b = np.roll(poly, -1, axis=0)
        pts = m.latent_vertices
        ab = seg_b - seg_a  # (k, 2)
        denom = np.maximum((ab**2).sum(axis=1), 1e-300)
        ap = pts[:, None, :] - seg_a[None, :, :]  # (n, k, 2)
        t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
        closest = seg_a[None, :, :] + t[:, :, None] * ab[None, :, :]
        dist = np.linalg.norm(pts[:, None, :] - closest, axis=2)
        return float(dist.min(axis=1).min())

    if margin(mesh) >= buffer_width:
        return mesh

    hull_poly = mesh.hull_polygon()
    n_rings = max(1, int(math.ceil(buffer_width / ring_spacing)))
    latent = mesh.vertices[mesh.interior_index]
    latent_class = [mesh.vertex_class[i] for i in mesh.interior_index]

    for attempt in range(100):
        ring_pts = []
        for k in range(1, n_rings + 1):
            ring_pts.append(
                _sample_polygon(_offset_hull(hull_poly, k * ring_spacing), ring_spacing)
            )
        aux = np.vstack(ring_pts)
        allv = np.vstack([latent, aux])
        tri = _qhull_triangles(allv)
        classes = list(latent_class) + [AUXILIARY] * len(aux)
        candidate = _make_mesh(
            allv, tri, classes, np.arange(len(latent))
        )
        candidate = _lawson_all(candidate)
        if margin(candidate) >= buffer_width:
            candidate.validate()
            return candidate
        n_rings += 1
    raise RuntimeError("failed to reach requested buffer width")


# ---------------------------------------------------------------------------
# quality / basis
# ---------------------------------------------------------------------------

def mesh_quality(mesh: Mesh) -> QualityReport:
    v = mesh.vertices
    min_angle = _min_angle(v, mesh.triangles)
    max_edge = max(np.linalg.norm(v[i] - v[j]) for i, j in mesh.edges())
    return QualityReport(min_angle, float(max_edge), mesh.n_latent)


def basis_row(mesh: Mesh, point, tol: float = 1e-10):
    """Piecewise-linear basis values of ``point``: index/value pairs over the
    mesh vertices (at most 3 nonzeros, nonnegative, summing to 1).

    The latent mesh (no auxiliary vertices) is the intended target; on an
    extended mesh the row spans all vertices.
    """
    tidx, bary = mesh.locate(point, tol=tol)
    tri = mesh.triangles[tidx]
    bary = np.clip(bary, 0.0, None)
    bary = bary / bary.sum()
    idx = []
    val = []
    for local in range(3):
        if bary[local] > tol:
            idx.append(int(tri[local]))
            val.append(float(bary[local]))
    total = sum(val)
    val = [x / total for x in val]
    return idx, val


def basis_matrix(mesh: Mesh, points, tol: float = 1e-10):
    """Sparse (len(points) x n_vertices) matrix of basis rows."""
    from scipy.sparse import csr_matrix

    rows, cols, data = [], [], []
    for r, p in enumerate(points):
        idx, val = basis_row(mesh, p, tol=tol)
        rows.extend([r] * len(idx))
        cols.extend(idx)
        data.extend(val)
    return csr_matrix(
        (data, (rows, cols)), shape=(len(points), mesh.n_vertices)
    )


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    """Write the ``lrssm-mesh v1`` text format (lossless at 17 digits)."""
    with open(path, "w") as fh:
        fh.write(f"lrssm-mesh v1 R={mesh.n_vertices} T={mesh.n_triangles}\n")
        for i in range(mesh.n_vertices):
            x, y = mesh.vertices[i]
            fh.write(f"v {x:.17g} {y:.17g} {mesh.vertex_class[i]}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"t {i} {j} {k}\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["lrssm-mesh", "v1"]:
            raise ValueError(f"not a lrssm-mesh v1 file: {header}")
        nv = int(header[2].split("=")[1])
        nt = int(header[3].split("=")[1])
        vertices = np.empty((nv, 2))
        classes = []
        for i in range(nv):
            parts = fh.readline().split()
            if parts[0] != "v":
                raise ValueError("malformed vertex line")
            vertices[i] = (float(parts[1]), float(parts[2]))
            if parts[3] not in _CLASSES:
                raise ValueError(f"unknown vertex class {parts[3]}")
            classes.append(parts[3])
        triangles = np.empty((nt, 3), dtype=np.int64)
        for i in range(nt):
            parts = fh.readline().split()
            if parts[0] != "t":
                raise ValueError("malformed triangle line")
            triangles[i] = (int(parts[1]), int(parts[2]), int(parts[3]))
    interior_index = np.array(
        [i for i, c in enumerate(classes) if c != AUXILIARY], dtype=np.int64
    )
    return Mesh(vertices, triangles, tuple(classes), interior_index)
