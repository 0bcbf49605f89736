"""Polygonal interface geometry.

The interface between the two fluid phases is a closed oriented polygon.
Vertices are stored in counter-clockwise traversal order, so the enclosed
(inner) phase lies to the left of each segment and the per-segment unit
normals point into the outer phase.  All operations are value-semantic:
they never mutate a curve in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import (
    DegenerateGeometryError,
    OrientationError,
    VertexNormalError,
)

#: Below this, a vertex normal counts as degenerate.
OMEGA_TOL = 1e-12


class InterfaceCurve:
    """Closed polygon with CCW orientation (inner phase on the left).

    Segment ``j`` connects vertex ``j`` to vertex ``(j + 1) % n``; for a
    single closed curve the segment count equals the vertex count.
    """

    def __init__(self, vertices, _reorient=True):
        # float64 by default; an explicitly higher-precision dtype is kept
        # so geometric diagnostics can be evaluated at full accuracy
        dtype = getattr(np.asarray(vertices), "dtype", None)
        if dtype is None or dtype.kind != "f":
            dtype = np.float64
        verts = np.ascontiguousarray(vertices, dtype=dtype)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise DegenerateGeometryError(
                f"need at least 3 planar vertices, got shape {verts.shape}")
        if not np.all(np.isfinite(verts)):
            raise DegenerateGeometryError("non-finite vertex coordinates")
        lengths = np.linalg.norm(np.roll(verts, -1, axis=0) - verts, axis=1)
        if lengths.min() <= 0.0:
            raise DegenerateGeometryError(
                f"zero-length segment (min length {lengths.min():g})")
        if _shoelace(verts) < 0.0:
            if not _reorient:
                raise OrientationError("curve is clockwise")
            verts = verts[::-1].copy()
        self.vertices = verts
        self.n_vertices = verts.shape[0]
        self.n_segments = verts.shape[0]

    def segment_vectors(self):
        return np.roll(self.vertices, -1, axis=0) - self.vertices

    def segment_lengths(self):
        return np.linalg.norm(self.segment_vectors(), axis=1)

    def segment_midpoints(self):
        return 0.5 * (self.vertices + np.roll(self.vertices, -1, axis=0))

    def bbox(self):
        return (self.vertices[:, 0].min(), self.vertices[:, 0].max(),
                self.vertices[:, 1].min(), self.vertices[:, 1].max())

    def displaced(self, delta):
        """New curve with vertices moved by ``delta`` (same connectivity)."""
        return InterfaceCurve(self.vertices + delta, _reorient=False)

    @classmethod
    def circle(cls, center, radius, n):
        """Regular ``n``-gon inscribed in the given circle, CCW."""
        theta = 2.0 * np.pi * np.arange(n) / n
        pts = np.column_stack([center[0] + radius * np.cos(theta),
                               center[1] + radius * np.sin(theta)])
        return cls(pts)


@dataclass
class NormalData:
    """Per-segment unit normals and length-weighted vertex normals.

    ``vertex_normals[k]`` is the length-weighted average of the two
    adjacent segment normals (not unit length in general), and
    ``vertex_weights[k]`` is half the combined length of those segments,
    i.e. the lumped-quadrature weight attached to vertex ``k``.
    """

    segment_normals: np.ndarray
    vertex_normals: np.ndarray
    segment_lengths: np.ndarray
    vertex_weights: np.ndarray


def compute_normals(curve: InterfaceCurve) -> NormalData:
    """Segment normals (into the outer phase) and vertex normal averages."""
    vecs = curve.segment_vectors()
    lengths = np.linalg.norm(vecs, axis=1)
    if lengths.min() <= 0.0:
        raise DegenerateGeometryError("zero-length segment")
    tangents = vecs / lengths[:, None]
    seg_normals = np.column_stack([tangents[:, 1], -tangents[:, 0]])

    len_left = np.roll(lengths, 1)            # segment k-1, incident from the left
    nu_left = np.roll(seg_normals, 1, axis=0)
    weighted = len_left[:, None] * nu_left + lengths[:, None] * seg_normals
    star = len_left + lengths
    omega = weighted / star[:, None]

    # The normals must span the plane or the interface system is singular.
    # (cast: LAPACK has no extended-precision path, and the rank check
    # needs none)
    gram = (omega.T @ omega).astype(np.float64)
    sv = np.sqrt(np.maximum(np.linalg.eigvalsh(gram), 0.0))
    if sv[0] <= OMEGA_TOL * max(1.0, sv[1]):
        raise VertexNormalError(
            f"vertex normals are rank deficient (singular values {sv})")
    return NormalData(segment_normals=seg_normals,
                      vertex_normals=omega,
                      segment_lengths=lengths,
                      vertex_weights=0.5 * star)


def lumped_normal_matrix(curve: InterfaceCurve, normals: NormalData):
    """Vertex-diagonal normal matrix of the lumped inner product.

    Returns a CSR matrix of shape ``(K, 2K)``; the 1x2 block at vertex
    ``k`` (columns ``2k``, ``2k+1``) equals half the sum of the adjacent
    ``length * normal`` contributions, i.e. ``vertex_weights[k] *
    vertex_normals[k]``.
    """
    k = curve.n_vertices
    blocks = normals.vertex_weights[:, None] * normals.vertex_normals
    rows = np.repeat(np.arange(k), 2)
    cols = np.arange(2 * k)
    return sparse.csr_matrix((blocks.ravel(), (rows, cols)), shape=(k, 2 * k))


def surface_stiffness_scalar(curve: InterfaceCurve):
    """Scalar arclength stiffness matrix, ``(K, K)`` CSR."""
    k = curve.n_vertices
    lengths = curve.segment_lengths()
    inv = 1.0 / lengths
    i0 = np.arange(k)
    i1 = (i0 + 1) % k
    rows = np.concatenate([i0, i1, i0, i1])
    cols = np.concatenate([i0, i1, i1, i0])
    vals = np.concatenate([inv, inv, -inv, -inv])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(k, k))


def surface_stiffness(curve: InterfaceCurve):
    """Vector stiffness matrix ``(2K, 2K)``, identical per component."""
    return sparse.kron(surface_stiffness_scalar(curve),
                       sparse.eye(2, format="csr"), format="csr")


def discrete_curvature(curve: InterfaceCurve, normals: NormalData | None = None):
    """Pointwise curvature from the lumped variational identity.

    With the current polygon as its own parameterization, the stiffness
    residual at each vertex is balanced against the lumped normal there;
    projecting on the vertex normal gives one scalar per vertex.  The
    sign is negative where the inner phase is locally convex.
    """
    nd = normals if normals is not None else compute_normals(curve)
    omega_sq = np.einsum("kd,kd->k", nd.vertex_normals, nd.vertex_normals)
    if np.sqrt(omega_sq.min()) < OMEGA_TOL:
        raise VertexNormalError(
            f"vertex normal below {OMEGA_TOL:g}; curvature is singular")
    # Stiffness residual per vertex, written as a difference of unit
    # tangents to avoid cancellation between O(1) vertex/length ratios.
    vecs = curve.segment_vectors()
    tangents = vecs / nd.segment_lengths[:, None]
    resid = np.roll(tangents, 1, axis=0) - tangents
    proj = np.einsum("kd,kd->k", resid, nd.vertex_normals)
    return -proj / (nd.vertex_weights * omega_sq)


def refine_interface(curve: InterfaceCurve, vol_max: float) -> InterfaceCurve:
    """Split every segment of length >= 7/4 of ``vol_max`` at its midpoint.

    ``vol_max`` is the largest segment length of the initial interface,
    recorded once at the start of a run.  The polygon as a point set is
    unchanged; splitting repeats until no segment qualifies.
    """
    threshold = 1.75 * vol_max
    verts = curve.vertices
    while True:
        nxt = np.roll(verts, -1, axis=0)
        lengths = np.linalg.norm(nxt - verts, axis=1)
        marked = lengths >= threshold
        if not marked.any():
            break
        reps = np.where(marked, 2, 1)
        out = np.repeat(verts, reps, axis=0)
        mids = 0.5 * (verts[marked] + nxt[marked])
        idx = np.cumsum(reps) - 1
        out[idx[marked]] = mids
        verts = out
    if verts is curve.vertices:
        return curve
    return InterfaceCurve(verts, _reorient=False)


def mesh_ratio(curve: InterfaceCurve) -> float:
    """Longest over shortest segment length (>= 1)."""
    lengths = curve.segment_lengths()
    return float(lengths.max() / lengths.min())


def enclosed_area(curve: InterfaceCurve) -> float:
    """Area enclosed by the polygon via the boundary integral of x.nu / 2."""
    area = _shoelace(curve.vertices)
    if area <= 0.0:
        raise OrientationError(f"non-positive enclosed area {area:g}")
    return area


def polygon_perimeter(curve: InterfaceCurve) -> float:
    return float(curve.segment_lengths().sum())


def polygon_y_moment(curve: InterfaceCurve) -> float:
    """Integral of the vertical coordinate over the enclosed region.

    Exact divergence-theorem reduction of the area integral to the
    polygon boundary.
    """
    v = curve.vertices
    w = np.roll(v, -1, axis=0)
    cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
    return float(np.sum(cross * (v[:, 1] + w[:, 1])) / 6.0)


def check_self_intersection(curve: InterfaceCurve) -> bool:
    """True when any two non-adjacent segments properly intersect."""
    v = curve.vertices
    n = curve.n_segments
    p = v
    q = np.roll(v, -1, axis=0)
    idx = np.arange(n)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    mask = jj > ii + 1                       # skip self and right-adjacent
    mask &= ~((ii == 0) & (jj == n - 1))     # skip the wrap-around pair
    a, b = p[ii[mask]], q[ii[mask]]
    c, d = p[jj[mask]], q[jj[mask]]
    return bool(np.any(_segments_intersect(a, b, c, d)))


def write_snapshot(curve: InterfaceCurve, path, t: float):
    """Plain-text snapshot: header line, then one ``x y`` line per vertex."""
    with open(path, "w") as fh:
        fh.write(f"# t={float(t)!r} K={curve.n_vertices}\n")
        for x, y in curve.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def read_snapshot(path):
    """Inverse of :func:`write_snapshot`; returns ``(t, curve)``."""
    with open(path) as fh:
        header = fh.readline().split()
        t = float(header[1].split("=")[1])
        k = int(header[2].split("=")[1])
        pts = np.loadtxt(fh)
    pts = np.atleast_2d(pts)
    if pts.shape[0] != k:
        raise OrientationError(f"snapshot announced {k} vertices, found {pts.shape[0]}")
    return t, InterfaceCurve(pts, _reorient=False)


def _shoelace(verts):
    w = np.roll(verts, -1, axis=0)
    return 0.5 * float(np.sum(verts[:, 0] * w[:, 1] - w[:, 0] * verts[:, 1]))


def _segments_intersect(a, b, c, d):
    """Vectorized proper-or-touching intersection test for segment arrays."""
    def orient(p, q, r):
        return ((q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1])
                - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0]))

    d1 = orient(c, d, a)
    d2 = orient(c, d, b)
    d3 = orient(a, b, c)
    d4 = orient(a, b, d)
    proper = ((d1 * d2) < 0) & ((d3 * d4) < 0)

    def on_seg(p, q, r, dv):
        hit = dv == 0
        if not hit.any():
            return hit
        inside = ((np.minimum(p[:, 0], q[:, 0]) <= r[:, 0])
                  & (r[:, 0] <= np.maximum(p[:, 0], q[:, 0]))
                  & (np.minimum(p[:, 1], q[:, 1]) <= r[:, 1])
                  & (r[:, 1] <= np.maximum(p[:, 1], q[:, 1])))
        return hit & inside

    touching = (on_seg(c, d, a, d1) | on_seg(c, d, b, d2)
                | on_seg(a, b, c, d3) | on_seg(a, b, d, d4))
    return proper | touching
