"""Adaptive conforming triangulation of a rectangular domain.

The mesh is a forest of triangles refined by newest-vertex bisection.
Elements are never deleted: refining deactivates a parent and activates
its two children, coarsening does the reverse, so transfer operators can
walk a shared hierarchy between the element sets of consecutive steps.

Triangles are stored as vertex triples ``(v0, v1, v2)`` with positive
orientation; the refinement edge is ``v0-v1`` and ``v2`` is the newest
vertex.  Bisection inserts the midpoint ``m`` of ``v0-v1`` and creates
the children ``(v2, v0, m)`` and ``(v1, v2, m)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    GeometryToleranceError,
    HierarchyError,
    NotRegularlyCutError,
    ToleranceUnreachableError,
)
from .interface import InterfaceCurve, compute_normals, enclosed_area

#: snapping tolerance for on-edge intersection ties
SNAP_EPS = 1e-12

MINUS, PLUS, INTERFACE = -1, 1, 0


@dataclass
class AdaptConfig:
    """Fine/coarse resolution targets for interface-driven adaptation.

    ``n_fine``/``n_coarse`` divide twice the half-width of the shorter
    domain side, giving target leg lengths ``h = 2H/N`` and right-angled
    isosceles reference areas ``h^2/2``.
    """

    n_fine: int
    n_coarse: int
    domain: tuple  # (x0, x1, y0, y1)
    h_fine: float = field(init=False)
    h_coarse: float = field(init=False)
    vol_fine: float = field(init=False)
    vol_coarse: float = field(init=False)

    def __post_init__(self):
        if self.n_fine <= self.n_coarse:
            raise ConfigError(
                f"n_fine ({self.n_fine}) must exceed n_coarse ({self.n_coarse})")
        x0, x1, y0, y1 = self.domain
        half_min = 0.5 * min(x1 - x0, y1 - y0)
        self.h_fine = 2.0 * half_min / self.n_fine
        self.h_coarse = 2.0 * half_min / self.n_coarse
        self.vol_fine = 0.5 * self.h_fine**2
        self.vol_coarse = 0.5 * self.h_coarse**2


class BulkMesh:
    """Bisection forest over a rectangle with an active leaf front."""

    DIRICHLET = 1   # horizontal walls
    SLIP = 2        # vertical walls

    def __init__(self, domain, n_coarse):
        x0, x1, y0, y1 = map(float, domain)
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"degenerate domain {domain}")
        self.domain = (x0, x1, y0, y1)
        half_min = 0.5 * min(x1 - x0, y1 - y0)
        h_c = 2.0 * half_min / n_coarse
        nx = max(1, round((x1 - x0) / h_c))
        ny = max(1, round((y1 - y0) / h_c))
        self._grid_nx, self._grid_ny = nx, ny
        self._cell_w = (x1 - x0) / nx
        self._cell_h = (y1 - y0) / ny

        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        xg, yg = np.meshgrid(xs, ys, indexing="ij")
        verts = np.column_stack([xg.ravel(), yg.ravel()])

        def vid(i, j):
            return i * (ny + 1) + j

        tris = []
        for j in range(ny):
            for i in range(nx):
                a = vid(i, j)
                b = vid(i + 1, j)
                c = vid(i + 1, j + 1)
                d = vid(i, j + 1)
                tris.append((c, a, b))   # lower-right half, diagonal a-c
                tris.append((a, c, d))   # upper-left half
        nt = len(tris)

        self._verts = np.empty((max(4 * len(verts), 1024), 2))
        self._verts[:len(verts)] = verts
        self.n_verts = len(verts)

        cap = max(4 * nt, 1024)
        self._tri = np.empty((cap, 3), dtype=np.int64)
        self._tri[:nt] = np.asarray(tris, dtype=np.int64)
        self._parent = np.full(cap, -1, dtype=np.int64)
        self._child = np.full(cap, -1, dtype=np.int64)  # first child; second is +1
        self._active = np.zeros(cap, dtype=bool)
        self._active[:nt] = True
        self.n_tris = nt
        self.n_roots = nt
        self._midpoint = {}  # sorted vertex pair -> midpoint vertex id
        self._version = 0

    # -- basic queries -----------------------------------------------------

    @property
    def verts(self):
        return self._verts[:self.n_verts]

    def active_ids(self):
        return np.flatnonzero(self._active[:self.n_tris])

    def active_tris(self):
        return self._tri[self.active_ids()]

    def tri_coords(self, ids):
        return self._verts[self._tri[ids]]

    def areas(self, ids):
        p = self.tri_coords(ids)
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))

    def is_active(self, e):
        return bool(self._active[e])

    def parent(self, e):
        return int(self._parent[e])

    def children(self, e):
        c = int(self._child[e])
        return (c, c + 1) if c >= 0 else None

    def active_snapshot(self):
        return self._active[:self.n_tris].copy()

    # -- growth helpers ----------------------------------------------------

    def _ensure_vert_capacity(self, extra):
        need = self.n_verts + extra
        if need > len(self._verts):
            new = np.empty((max(need, 2 * len(self._verts)), 2))
            new[:self.n_verts] = self._verts[:self.n_verts]
            self._verts = new

    def _ensure_tri_capacity(self, extra):
        need = self.n_tris + extra
        if need > len(self._tri):
            cap = max(need, 2 * len(self._tri))
            for name in ("_tri",):
                new = np.empty((cap, 3), dtype=np.int64)
                new[:self.n_tris] = getattr(self, name)[:self.n_tris]
                setattr(self, name, new)
            for name, fill in (("_parent", -1), ("_child", -1)):
                new = np.full(cap, fill, dtype=np.int64)
                new[:self.n_tris] = getattr(self, name)[:self.n_tris]
                setattr(self, name, new)
            new = np.zeros(cap, dtype=bool)
            new[:self.n_tris] = self._active[:self.n_tris]
            self._active = new

    def _midpoint_vertex(self, a, b):
        key = (a, b) if a < b else (b, a)
        m = self._midpoint.get(key)
        if m is None:
            self._ensure_vert_capacity(1)
            self._verts[self.n_verts] = 0.5 * (self._verts[a] + self._verts[b])
            m = self.n_verts
            self.n_verts += 1
            self._midpoint[key] = m
        return m

    # -- bisection ---------------------------------------------------------

    def _make_children(self, e):
        """Create (or reuse) the two bisection children of ``e``."""
        c = int(self._child[e])
        if c >= 0:
            return c
        v0, v1, v2 = self._tri[e]
        m = self._midpoint_vertex(int(v0), int(v1))
        self._ensure_tri_capacity(2)
        c = self.n_tris
        self._tri[c] = (v2, v0, m)
        self._tri[c + 1] = (v1, v2, m)
        self._parent[c] = e
        self._parent[c + 1] = e
        self._child[e] = c
        self.n_tris += 2
        return c

    def _split(self, e, emap):
        """Replace active ``e`` by its children, updating the edge map."""
        c = self._make_children(e)
        self._active[e] = False
        self._active[c] = True
        self._active[c + 1] = True
        for key in _tri_edge_keys(self._tri[e]):
            lst = emap[key]
            lst.remove(e)
        for t in (c, c + 1):
            for key in _tri_edge_keys(self._tri[t]):
                emap.setdefault(key, []).append(t)
        self._version += 1
        return c

    def _bisect_conforming(self, e, emap, depth=0):
        """Bisect ``e`` and whatever neighbours conformity demands."""
        if depth > 64:
            raise HierarchyError("bisection recursion exceeded depth 64")
        if not self._active[e]:
            return
        v0, v1 = int(self._tri[e][0]), int(self._tri[e][1])
        key = (v0, v1) if v0 < v1 else (v1, v0)
        while True:
            others = [t for t in emap.get(key, ()) if t != e]
            if not others:
                self._split(e, emap)
                return
            nb = others[0]
            n0, n1 = int(self._tri[nb][0]), int(self._tri[nb][1])
            nkey = (n0, n1) if n0 < n1 else (n1, n0)
            if nkey == key:
                self._split(e, emap)
                self._split(nb, emap)
                return
            self._bisect_conforming(nb, emap, depth + 1)
            # after the neighbour refined, the element across our edge changed

    def refine(self, marked):
        """Conforming bisection of all marked active elements."""
        marked = [int(e) for e in marked if self._active[e]]
        if not marked:
            return False
        emap = self._edge_map()
        for e in marked:
            if self._active[e]:
                self._bisect_conforming(e, emap)
        return True

    def _edge_map(self):
        ids = self.active_ids()
        emap = {}
        for e in ids:
            for key in _tri_edge_keys(self._tri[e]):
                emap.setdefault(key, []).append(int(e))
        return emap

    # -- coarsening ----------------------------------------------------------

    def coarsen(self, marked_mask):
        """Undo bisections whose merged patches are fully marked.

        ``marked_mask`` is a boolean array over element ids.  A parent is
        restored only when both children are active leaves, every active
        element sharing the bisection vertex is such a sibling, and all of
        them are marked.
        """
        ids = self.active_ids()
        cand_parents = {}
        for e in ids:
            p = int(self._parent[e])
            if p < 0:
                continue
            cand_parents.setdefault(p, []).append(int(e))
        pairs = {p: ch for p, ch in cand_parents.items()
                 if len(ch) == 2 and all(marked_mask[c] for c in ch)}
        if not pairs:
            return False
        # group sibling pairs by their bisection vertex
        by_vertex = {}
        for p, ch in pairs.items():
            m = int(self._tri[self._child[p]][2])
            by_vertex.setdefault(m, []).append(p)
        # incidence of active elements on candidate vertices
        incid = {m: [] for m in by_vertex}
        for e in ids:
            for v in self._tri[e]:
                v = int(v)
                if v in incid:
                    incid[v].append(int(e))
        changed = False
        for m, parents in by_vertex.items():
            patch = set()
            for p in parents:
                patch.update(pairs[p])
            if set(incid[m]) != patch:
                continue
            for p in parents:
                c = int(self._child[p])
                self._active[c] = False
                self._active[c + 1] = False
                self._active[p] = True
            changed = True
        if changed:
            self._version += 1
        return changed

    # -- point location ------------------------------------------------------

    def root_at(self, p):
        i = min(max(int((p[0] - self.domain[0]) / self._cell_w), 0), self._grid_nx - 1)
        j = min(max(int((p[1] - self.domain[2]) / self._cell_h), 0), self._grid_ny - 1)
        base = 2 * (j * self._grid_nx + i)
        # lower-right half is stored first; decide by barycentric test
        if _min_bary(self._verts[self._tri[base]], p) >= -SNAP_EPS:
            return base
        return base + 1

    def locate(self, p, active_mask=None):
        """Element of the (given) active front containing ``p``.

        Descends the forest from the root cell, always testing the first
        child before the second, which fixes the tie-break on edges.
        """
        active = self._active if active_mask is None else active_mask
        e = self.root_at(p)
        guard = 0
        while not active[e]:
            c = int(self._child[e])
            if c < 0:
                raise HierarchyError(
                    f"point {p} reached childless inactive element {e}")
            b0 = _min_bary(self._verts[self._tri[c]], p)
            if b0 >= -SNAP_EPS:
                e = c
            else:
                b1 = _min_bary(self._verts[self._tri[c + 1]], p)
                e = c + 1 if b1 >= b0 else c
            guard += 1
            if guard > 128:
                raise HierarchyError("point location did not terminate")
        return int(e)

    # -- boundary ------------------------------------------------------------

    def boundary_wall(self, a, b):
        """Wall tag for edge ``(a, b)`` or None for interior edges."""
        x0, x1, y0, y1 = self.domain
        pa, pb = self._verts[a], self._verts[b]
        tol = SNAP_EPS * max(x1 - x0, y1 - y0)
        for y in (y0, y1):
            if abs(pa[1] - y) <= tol and abs(pb[1] - y) <= tol:
                return self.DIRICHLET
        for x in (x0, x1):
            if abs(pa[0] - x) <= tol and abs(pb[0] - x) <= tol:
                return self.SLIP
        return None


def _tri_edge_keys(tri):
    a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
    return ((a, b) if a < b else (b, a),
            (b, c) if b < c else (c, b),
            (a, c) if a < c else (c, a))


def _min_bary(tri, p):
    """Smallest barycentric coordinate of ``p`` in triangle ``tri``."""
    d = np.array([tri[1] - tri[0], tri[2] - tri[0]])
    det = d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0]
    r = np.asarray(p) - tri[0]
    l1 = (r[0] * d[1, 1] - r[1] * d[1, 0]) / det
    l2 = (d[0, 0] * r[1] - d[0, 1] * r[0]) / det
    return min(l1, l2, 1.0 - l1 - l2)


def build_uniform(domain, n_coarse) -> BulkMesh:
    """Uniform criss-cross triangulation of mesh size ``2H/n_coarse``."""
    return BulkMesh(domain, n_coarse)


# ---------------------------------------------------------------------------
# interface classification
# ---------------------------------------------------------------------------

@dataclass
class ElementClassification:
    """Interface-aware labelling of the active elements of a mesh.

    All per-element arrays follow the ordering of ``element_ids`` (the
    active elements at classification time).  Clipped sub-segments are
    stored flat: ``sub_owner`` indexes into ``element_ids``.
    """

    element_ids: np.ndarray
    labels: np.ndarray            # MINUS / PLUS / INTERFACE per element
    vertex_side: dict             # mesh vertex id -> MINUS / PLUS
    minus_fraction: np.ndarray    # in [0, 1]
    sub_owner: np.ndarray         # (S,) index into element_ids
    sub_segment: np.ndarray       # (S,) parent interface segment index
    sub_p: np.ndarray             # (S, 2, 2) endpoints
    sub_t: np.ndarray             # (S, 2) params along the parent segment
    has_fractions: bool = False

    def interface_elements(self):
        return np.flatnonzero(self.labels == INTERFACE)


def point_side(curve: InterfaceCurve, point):
    """MINUS when the point lies inside the curve, PLUS outside.

    Points within 1e-14 of a segment are perturbed by 1e-12 along +x
    before the winding test.
    """
    p = np.asarray(point, dtype=float)
    if _dist_to_curve(curve, p) < 1e-14:
        p = p + np.array([1e-12, 0.0])
    wind = _winding_bulk(curve, p[None, :])[0]
    return MINUS if wind != 0 else PLUS


def _dist_to_curve(curve, p):
    a = curve.vertices
    b = np.roll(a, -1, axis=0)
    ab = b - a
    t = np.clip(np.einsum("kd,d->k", ab, p) - np.einsum("kd,kd->k", ab, a), 0.0,
                np.einsum("kd,kd->k", ab, ab))
    t = t / np.einsum("kd,kd->k", ab, ab)
    proj = a + t[:, None] * ab
    return np.min(np.hypot(proj[:, 0] - p[0], proj[:, 1] - p[1]))


def _winding_bulk(curve, pts):
    """Signed winding number of many points w.r.t. the closed polygon."""
    a = curve.vertices
    b = np.roll(a, -1, axis=0)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    ya, yb = a[:, 1][None, :], b[:, 1][None, :]
    upward = (ya <= y) & (yb > y)
    downward = (ya > y) & (yb <= y)
    # cross product (b-a) x (p-a): sign tells which side of the segment
    cross = ((b[:, 0] - a[:, 0])[None, :] * (y - ya)
             - (b[:, 1] - a[:, 1])[None, :] * (x - a[:, 0][None, :]))
    wind = (upward & (cross > 0)).sum(axis=1) - (downward & (cross < 0)).sum(axis=1)
    return wind


def clip_segment_to_triangle(p0, p1, tri):
    """Intersection of segment ``p0-p1`` with the closed triangle.

    Returns ``(t0, t1)`` parameters along the segment, or None when the
    intersection is empty or has zero length.
    """
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    tri = np.asarray(tri, dtype=float)
    t0, t1 = 0.0, 1.0
    for i in range(3):
        a = tri[(i + 1) % 3]
        b = tri[(i + 2) % 3]
        edge = b - a
        # inward normal for a CCW triangle
        n = np.array([-edge[1], edge[0]])
        num = n @ (p0 - a)
        den = n @ d
        if abs(den) < 1e-30:
            if num < -SNAP_EPS * np.linalg.norm(n):
                return None
            continue
        t_hit = -num / den
        if den > 0:
            t0 = max(t0, t_hit)
        else:
            t1 = min(t1, t_hit)
        if t0 >= t1:
            return None
    if (t1 - t0) * np.hypot(d[0], d[1]) <= 1e-13:
        return None
    return (t0, t1)


class _SegmentGrid:
    """Uniform bucket grid over the interface segments."""

    def __init__(self, curve, domain, cell):
        x0, x1, y0, y1 = domain
        self.x0, self.y0 = x0, y0
        self.cell = cell
        self.nx = max(1, int(np.ceil((x1 - x0) / cell)))
        self.ny = max(1, int(np.ceil((y1 - y0) / cell)))
        a = curve.vertices
        b = np.roll(a, -1, axis=0)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        i0 = np.clip(((lo[:, 0] - x0) / cell).astype(int), 0, self.nx - 1)
        i1 = np.clip(((hi[:, 0] - x0) / cell).astype(int), 0, self.nx - 1)
        j0 = np.clip(((lo[:, 1] - y0) / cell).astype(int), 0, self.ny - 1)
        j1 = np.clip(((hi[:, 1] - y0) / cell).astype(int), 0, self.ny - 1)
        self.buckets = {}
        for s in range(len(a)):
            for i in range(i0[s], i1[s] + 1):
                for j in range(j0[s], j1[s] + 1):
                    self.buckets.setdefault((i, j), []).append(s)
        occ = np.zeros((self.nx + 1, self.ny + 1), dtype=np.int32)
        for (i, j) in self.buckets:
            occ[i + 1, j + 1] = 1
        self.cum = occ.cumsum(axis=0).cumsum(axis=1)

    def candidates_mask(self, boxes):
        """Boolean mask of boxes ``(n, 4) = (xmin, xmax, ymin, ymax)``
        overlapping at least one occupied bucket."""
        i0 = np.clip(((boxes[:, 0] - self.x0) / self.cell).astype(int), 0, self.nx - 1)
        i1 = np.clip(((boxes[:, 1] - self.x0) / self.cell).astype(int), 0, self.nx - 1)
        j0 = np.clip(((boxes[:, 2] - self.y0) / self.cell).astype(int), 0, self.ny - 1)
        j1 = np.clip(((boxes[:, 3] - self.y0) / self.cell).astype(int), 0, self.ny - 1)
        c = self.cum
        total = (c[i1 + 1, j1 + 1] - c[i0, j1 + 1] - c[i1 + 1, j0] + c[i0, j0])
        return total > 0

    def segments_near(self, box):
        i0 = max(int((box[0] - self.x0) / self.cell), 0)
        i1 = min(int((box[1] - self.x0) / self.cell), self.nx - 1)
        j0 = max(int((box[2] - self.y0) / self.cell), 0)
        j1 = min(int((box[3] - self.y0) / self.cell), self.ny - 1)
        out = set()
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                out.update(self.buckets.get((i, j), ()))
        return sorted(out)


def _clip_curve_to_mesh(mesh, curve, element_ids):
    """All positive-length sub-segments of the curve inside each element.

    Returns flat arrays (owner index into element_ids, segment id, endpoint
    coords, params) for every clipped piece.
    """
    coords = mesh.tri_coords(element_ids)
    boxes = np.column_stack([coords[:, :, 0].min(axis=1), coords[:, :, 0].max(axis=1),
                             coords[:, :, 1].min(axis=1), coords[:, :, 1].max(axis=1)])
    cell = max(np.median(curve.segment_lengths()), 1e-12)
    grid = _SegmentGrid(curve, mesh.domain, cell)
    hit = grid.candidates_mask(boxes)
    owners, segs, pts, ts = [], [], [], []
    verts = curve.vertices
    nverts = np.roll(verts, -1, axis=0)
    for idx in np.flatnonzero(hit):
        tri = coords[idx]
        for s in grid.segments_near(boxes[idx]):
            res = clip_segment_to_triangle(verts[s], nverts[s], tri)
            if res is None:
                continue
            t0, t1 = res
            p0 = verts[s] + t0 * (nverts[s] - verts[s])
            p1 = verts[s] + t1 * (nverts[s] - verts[s])
            owners.append(idx)
            segs.append(s)
            pts.append((p0, p1))
            ts.append((t0, t1))
    if owners:
        return (np.asarray(owners), np.asarray(segs),
                np.asarray(pts), np.asarray(ts))
    return (np.zeros(0, dtype=int), np.zeros(0, dtype=int),
            np.zeros((0, 2, 2)), np.zeros((0, 2)))


def classify_elements(mesh: BulkMesh, curve: InterfaceCurve,
                      compute_fractions=False) -> ElementClassification:
    """Partition the active elements into minus / plus / interface.

    An element is ``interface`` iff a positive-length piece of the curve
    lies in its closure.  All other elements take the common side of
    their three vertices; a sign disagreement there means the clipping
    and the winding test contradict each other and is raised as a
    tolerance error.
    """
    ids = mesh.active_ids()
    owners, segs, pts, ts = _clip_curve_to_mesh(mesh, curve, ids)
    labels = np.empty(len(ids), dtype=np.int8)
    is_if = np.zeros(len(ids), dtype=bool)
    is_if[owners] = True

    tri_v = mesh._tri[ids]
    used = np.unique(tri_v)
    vcoords = mesh._verts[used]
    wind = _winding_bulk(curve, vcoords)
    side = np.where(wind != 0, MINUS, PLUS).astype(np.int8)
    # points sitting on the curve get the documented +x nudge; their side
    # is arbitrary, so they do not participate in consistency decisions
    sus = _near_curve_mask(curve, vcoords, 1e-14)
    for i in np.flatnonzero(sus):
        side[i] = point_side(curve, vcoords[i])
    side_of = dict(zip(used.tolist(), side.tolist()))
    lookup = np.searchsorted(used, tri_v)
    vs = side[lookup]
    vs_clean = np.where(sus[lookup], 0, vs)

    for i in np.flatnonzero(~is_if):
        clean = vs_clean[i][vs_clean[i] != 0]
        if len(clean) == 0:
            centroid = mesh._verts[tri_v[i]].mean(axis=0)
            labels[i] = point_side(curve, centroid)
        elif np.all(clean == clean[0]):
            labels[i] = clean[0]
        else:
            raise GeometryToleranceError(
                f"element {ids[i]} has mixed vertex sides "
                "but no crossing sub-segment")
    labels[is_if] = INTERFACE

    fractions = np.where(labels == MINUS, 1.0,
                         np.where(labels == PLUS, 0.0, 0.5))
    cls = ElementClassification(
        element_ids=ids, labels=labels, vertex_side=side_of,
        minus_fraction=fractions, sub_owner=owners, sub_segment=segs,
        sub_p=pts, sub_t=ts, has_fractions=False)
    if compute_fractions:
        _fill_fractions(mesh, curve, cls)
    return cls


def _near_curve_mask(curve, pts, tol):
    """Cheap conservative mask of points within ``tol`` of the curve."""
    a = curve.vertices
    lo = a.min(axis=0) - tol
    hi = a.max(axis=0) + tol
    box = ((pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0])
           & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1]))
    out = np.zeros(len(pts), dtype=bool)
    for i in np.flatnonzero(box):
        if _dist_to_curve(curve, pts[i]) < tol:
            out[i] = True
    return out


def _fill_fractions(mesh, curve, cls):
    normals = compute_normals(curve)
    ids = cls.element_ids
    areas = mesh.areas(ids)
    for e in cls.interface_elements():
        sel = cls.sub_owner == e
        tri = mesh.tri_coords(ids[e:e + 1])[0]
        nu = normals.segment_normals[cls.sub_segment[sel]]
        try:
            cut = cut_area(tri, cls.sub_p[sel], nu)
        except NotRegularlyCutError:
            cut = _subdivided_cut_area(tri, curve, cls.sub_segment[sel], normals)
        cls.minus_fraction[e] = min(max(cut / areas[e], 0.0), 1.0)
    cls.has_fractions = True


def cut_area(tri, sub_p, sub_nu, vertex_sides=None):
    """Area of (triangle intersect inner phase) for a regularly cut element.

    ``sub_p`` holds the clipped sub-segment endpoints, ``sub_nu`` the
    parent segment normals.  The element must be regularly cut: at least
    one edge without an interior crossing.  Crossings at triangle
    vertices cut no edge, since both incident edges pass through every
    admissible ``z0``.  The side of the vertex opposite the uncut edge
    is decided by the sign of the boundary integral itself, with the
    per-piece integrand signs as fallback.
    """
    tri = np.asarray(tri, dtype=float)
    if len(sub_p) == 0:
        raise NotRegularlyCutError("no sub-segments in element")
    diam = max(np.linalg.norm(tri[1] - tri[0]), np.linalg.norm(tri[2] - tri[1]),
               np.linalg.norm(tri[0] - tri[2]))
    snap = SNAP_EPS * diam
    ends = sub_p.reshape(-1, 2)
    at_vertex = np.zeros(len(ends), dtype=bool)
    for v in tri:
        at_vertex |= np.hypot(ends[:, 0] - v[0], ends[:, 1] - v[1]) <= snap
    interior_ends = ends[~at_vertex]
    cut_edges = set()
    for i in range(3):
        a, b = tri[(i + 1) % 3], tri[(i + 2) % 3]
        if len(interior_ends) and _points_near_segment(
                interior_ends, a, b, snap).any():
            cut_edges.add(i)
    if len(cut_edges) == 3:
        raise NotRegularlyCutError("all three edges carry interior crossings")
    free_edge = min(set(range(3)) - cut_edges)
    z0 = tri[free_edge]

    mids = 0.5 * (sub_p[:, 0] + sub_p[:, 1])
    lens = np.linalg.norm(sub_p[:, 1] - sub_p[:, 0], axis=1)
    integrand = np.einsum("sd,sd->s", mids - z0, sub_nu)
    integral = float(np.sum(lens * integrand))

    area = _tri_area(tri)
    thresh = 1e-13 * diam * max(lens.sum(), diam)
    if abs(integral) > thresh:
        z0_minus = integral > 0
    else:
        signs = np.sign(integrand[np.abs(integrand) > 1e-14 * diam])
        if len(signs) and np.all(signs == signs[0]):
            z0_minus = signs[0] > 0
        else:
            raise NotRegularlyCutError("integral sign not robust")
    cut = 0.5 * integral if z0_minus else area + 0.5 * integral
    if cut < -1e-10 * area or cut > area * (1 + 1e-10):
        raise NotRegularlyCutError(f"cut area {cut} outside [0, {area}]")
    return min(max(cut, 0.0), area)


def _points_near_segment(pts, a, b, tol):
    ab = b - a
    denom = ab @ ab
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1]) <= tol


def _tri_area(tri):
    return 0.5 * abs((tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
                     - (tri[1, 1] - tri[0, 1]) * (tri[2, 0] - tri[0, 0]))


def _subdivided_cut_area(tri, curve, seg_ids, normals, depth=0):
    """Recursive bisection fallback for elements without a closed form.

    The local partitions exist only for this integral; subdividing until
    every piece is regularly cut makes the result exact, which is at
    least as strong as any positive stopping tolerance.
    """
    if depth > 40:
        raise ToleranceUnreachableError(
            "cut-area bisection exceeded depth 40")
    verts = curve.vertices
    nverts = np.roll(verts, -1, axis=0)
    # split along the longest edge, keeping positive orientation
    lens = [np.linalg.norm(tri[(i + 2) % 3] - tri[(i + 1) % 3]) for i in range(3)]
    i = int(np.argmax(lens))
    a, b, c = tri[(i + 1) % 3], tri[(i + 2) % 3], tri[i]
    m = 0.5 * (a + b)
    total = 0.0
    for child in (np.array([c, a, m]), np.array([b, c, m])):
        sub_p, sub_nu, subsegs = [], [], []
        for s in seg_ids:
            res = clip_segment_to_triangle(verts[s], nverts[s], child)
            if res is None:
                continue
            t0, t1 = res
            sub_p.append((verts[s] + t0 * (nverts[s] - verts[s]),
                          verts[s] + t1 * (nverts[s] - verts[s])))
            sub_nu.append(normals.segment_normals[s])
            subsegs.append(s)
        if not sub_p:
            centroid = child.mean(axis=0)
            if point_side(curve, centroid) == MINUS:
                total += _tri_area(child)
            continue
        sub_p = np.asarray(sub_p)
        sub_nu = np.asarray(sub_nu)
        try:
            total += cut_area(child, sub_p, sub_nu)
        except NotRegularlyCutError:
            total += _subdivided_cut_area(child, curve, subsegs, normals,
                                          depth + 1)
    return total


def approx_minus_volume(mesh: BulkMesh, cls: ElementClassification,
                        curve: InterfaceCurve, tol_v=1e-8):
    """Measure of the inner phase accumulated element by element.

    Regularly cut elements contribute their exact cut area; the others
    are locally bisected until the total matches the polygon area within
    ``tol_v`` (the polygon area of the front-tracked interface is exact).
    """
    ids = cls.element_ids
    areas = mesh.areas(ids)
    total = float(areas[cls.labels == MINUS].sum())
    exact = enclosed_area(curve)
    normals = compute_normals(curve)
    irregular = []
    for e in cls.interface_elements():
        sel = cls.sub_owner == e
        tri = mesh.tri_coords(ids[e:e + 1])[0]
        nu = normals.segment_normals[cls.sub_segment[sel]]
        try:
            total += cut_area(tri, cls.sub_p[sel], nu)
        except NotRegularlyCutError:
            irregular.append((tri, cls.sub_segment[sel]))
    for tri, segs in irregular:
        total += _subdivided_cut_area(tri, curve, segs, normals)
    if abs(total - exact) >= tol_v:
        raise ToleranceUnreachableError(
            f"approximate volume {total} vs exact {exact} differs by "
            f"{abs(total - exact):.3e} >= {tol_v:g}")
    return total


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------

def _incidence_set(mesh, curve, ids):
    """Indices (into ids) of active elements meeting the curve."""
    owners, _, _, _ = _clip_curve_to_mesh(mesh, curve, ids)
    mask = np.zeros(len(ids), dtype=bool)
    mask[owners] = True
    return mask


def _edge_neighbors(tris):
    """(n, 3) array of neighbour indices (-1 on the boundary)."""
    n = len(tris)
    edges = np.empty((3 * n, 2), dtype=np.int64)
    edges[0::3] = np.sort(tris[:, [0, 1]], axis=1)
    edges[1::3] = np.sort(tris[:, [1, 2]], axis=1)
    edges[2::3] = np.sort(tris[:, [0, 2]], axis=1)
    keys = edges[:, 0] * (tris.max() + 2) + edges[:, 1]
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    nbr = np.full(3 * n, -1, dtype=np.int64)
    same = sk[:-1] == sk[1:]
    i = np.flatnonzero(same)
    a, b = order[i], order[i + 1]
    nbr[a] = b // 3
    nbr[b] = a // 3
    return nbr.reshape(n, 3)


def adapt_to_interface(mesh: BulkMesh, curve: InterfaceCurve,
                       config: AdaptConfig, allow_coarsen=True) -> BulkMesh:
    """Drive the mesh to a fixed point of the mark/bisect/coarsen cycle.

    Elements meeting the curve (or edge-neighbouring one that does) are
    bisected while their area is at least twice the fine target; small
    elements away from the curve coarsen back towards the coarse target.
    Coarsening that would restore a parent due for immediate re-refinement
    is vetoed, so the cycle cannot oscillate.  Returns the same (mutated)
    mesh object.
    """
    for _ in range(300):
        ids = mesh.active_ids()
        areas = mesh.areas(ids)
        touch = _incidence_set(mesh, curve, ids)
        nbr = _edge_neighbors(mesh._tri[ids])
        near = touch.copy()
        valid = nbr >= 0
        near |= np.any(np.where(valid, touch[np.where(valid, nbr, 0)], False), axis=1)
        refine_mask = near & (areas >= 2 * config.vol_fine)
        if refine_mask.any():
            mesh.refine(ids[refine_mask])
            continue
        if not allow_coarsen:
            break
        coarsen_mask = (~near) & (areas <= 0.5 * config.vol_coarse)
        if not coarsen_mask.any():
            break
        marked = np.zeros(mesh.n_tris, dtype=bool)
        marked[ids[coarsen_mask]] = True
        _veto_coarsening(mesh, curve, config, marked, ids, touch, nbr)
        if not marked.any() or not mesh.coarsen(marked):
            break
    return mesh


def _veto_coarsening(mesh, curve, config, marked, ids, touch, nbr):
    """Drop coarsen marks whose restored parent would re-refine at once.

    A restored parent of area >= 2 vol_fine is due for refinement when it
    meets the curve itself or when an element next to its children does.
    """
    pos_of = {int(e): i for i, e in enumerate(ids)}
    cand = {}
    for e in ids[marked[ids]]:
        p = int(mesh._parent[e])
        if p >= 0:
            cand.setdefault(p, []).append(int(e))
    if not cand:
        return
    parents = np.array(sorted(cand), dtype=np.int64)
    big = mesh.areas(parents) >= 2 * config.vol_fine
    verts = curve.vertices
    nverts = np.roll(verts, -1, axis=0)
    grid = None
    for p in parents[big]:
        veto = False
        for e in cand[p]:
            i = pos_of[e]
            for j in nbr[i]:
                if j >= 0 and touch[j]:
                    veto = True
                    break
            if veto:
                break
        if not veto:
            tri = mesh._verts[mesh._tri[p]]
            box = (tri[:, 0].min(), tri[:, 0].max(), tri[:, 1].min(), tri[:, 1].max())
            if grid is None:
                cell = max(np.median(curve.segment_lengths()), 1e-12)
                grid = _SegmentGrid(curve, mesh.domain, cell)
            for s in grid.segments_near(box):
                if clip_segment_to_triangle(verts[s], nverts[s], tri) is not None:
                    veto = True
                    break
        if veto:
            for e in cand[p]:
                marked[e] = False
