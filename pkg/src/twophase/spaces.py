"""Finite element spaces on the bulk mesh and inter-mesh transfer.

Velocity lives in the continuous piecewise-quadratic vector space with
one scalar degree of freedom per vertex and per edge; pressure is one of
P1 (vertex), P0 (element) or their sum, optionally enriched by the
single characteristic function of the inner phase.  Transfer between the
element sets of consecutive steps walks the shared bisection forest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bulkmesh import BulkMesh
from .errors import ConfigError

P2P1, P2P0, P2P10 = "p2p1", "p2p0", "p2p1p0"
VARIANTS = (P2P1, P2P0, P2P10)

_VKEY_SHIFT = np.int64(1) << 31


@dataclass
class VelocitySpace:
    """Scalar P2 dof layout plus per-component constraint masks.

    Vector coefficients are stored component-major: entry ``c * n_dofs + i``
    is component ``c`` of scalar dof ``i``.  ``clamp`` has the same layout;
    clamped entries are fixed to zero (no-slip walls clamp both
    components, slip walls only the normal one).
    """

    n_dofs: int
    coords: np.ndarray          # (n_dofs, 2)
    elem_dofs: np.ndarray       # (n_elems, 6) local order: v0 v1 v2 m12 m20 m01
    clamp: np.ndarray           # (2 * n_dofs,) bool
    dof_keys: np.ndarray        # (n_dofs,) stable int64 key per dof
    n_vertex_dofs: int
    vertex_ids: np.ndarray      # mesh vertex id per vertex dof

    @property
    def n_vector_dofs(self):
        return 2 * self.n_dofs

    def free(self):
        return ~self.clamp

    def apply_constraints(self, u):
        """Zero all clamped entries (idempotent)."""
        out = np.array(u, dtype=float, copy=True)
        out[self.clamp] = 0.0
        return out


@dataclass
class PressureSpace:
    variant: str
    n_dofs: int                 # without the enrichment column
    elem_dofs: np.ndarray       # (n_elems, k) columns per element
    xfem: bool
    n_vertex_dofs: int = 0      # P1 block size (0 for pure P0)

    @property
    def n_columns(self):
        return self.n_dofs + (1 if self.xfem else 0)

    def kernel_vectors(self):
        """Coefficient vectors spanning constant pressure functions.

        For the combined P1+P0 pair the constants are representable in
        both blocks, so the kernel of the divergence constraint is two
        dimensional; the enrichment column never participates.
        """
        vecs = []
        if self.variant in (P2P1, P2P10):
            v = np.zeros(self.n_columns)
            v[:self.n_vertex_dofs] = 1.0
            vecs.append(v)
        if self.variant in (P2P0, P2P10):
            v = np.zeros(self.n_columns)
            v[self.n_vertex_dofs:self.n_dofs] = 1.0
            vecs.append(v)
        basis = np.column_stack(vecs)
        q, _ = np.linalg.qr(basis)
        return q


@dataclass
class FieldState:
    """Coefficient vectors carried from one step to the next."""

    u: np.ndarray               # (2 * K_U,) component-major velocity
    p: np.ndarray               # (K_P,) pressure (zero mean as a function)
    lam: float                  # enrichment coefficient (0 when disabled)
    kappa: np.ndarray           # (K_G,) interface curvature
    t: float


def build_spaces(mesh: BulkMesh, variant: str, xfem: bool):
    """Deterministic dof numbering for the current active element set."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown element variant {variant!r}; "
                          f"choose one of {VARIANTS}")
    ids = mesh.active_ids()
    tris = mesh._tri[ids]
    vids = np.unique(tris)
    vindex = {int(v): i for i, v in enumerate(vids)}

    pairs = np.concatenate([
        np.sort(tris[:, [1, 2]], axis=1),
        np.sort(tris[:, [2, 0]], axis=1),
        np.sort(tris[:, [0, 1]], axis=1),
    ])
    keys = pairs[:, 0] * _VKEY_SHIFT + pairs[:, 1]
    edge_keys, inverse = np.unique(keys, return_inverse=True)
    n_v, n_e = len(vids), len(edge_keys)
    n = len(tris)

    elem_dofs = np.empty((n, 6), dtype=np.int64)
    vmap = np.searchsorted(vids, tris)
    elem_dofs[:, :3] = vmap
    elem_dofs[:, 3] = n_v + inverse[:n]
    elem_dofs[:, 4] = n_v + inverse[n:2 * n]
    elem_dofs[:, 5] = n_v + inverse[2 * n:]

    ea = (edge_keys // _VKEY_SHIFT).astype(np.int64)
    eb = (edge_keys % _VKEY_SHIFT).astype(np.int64)
    coords = np.vstack([mesh._verts[vids],
                        0.5 * (mesh._verts[ea] + mesh._verts[eb])])
    dof_keys = np.concatenate([-(vids.astype(np.int64) + 1), edge_keys])

    clamp = _constraint_mask(mesh, coords, n_v + n_e)
    vspace = VelocitySpace(n_dofs=n_v + n_e, coords=coords,
                           elem_dofs=elem_dofs, clamp=clamp,
                           dof_keys=dof_keys, n_vertex_dofs=n_v,
                           vertex_ids=vids)

    if variant == P2P1:
        pspace = PressureSpace(P2P1, n_v, elem_dofs[:, :3].copy(), xfem,
                               n_vertex_dofs=n_v)
    elif variant == P2P0:
        pspace = PressureSpace(P2P0, n, np.arange(n, dtype=np.int64)[:, None],
                               xfem, n_vertex_dofs=0)
    else:
        pd = np.hstack([elem_dofs[:, :3],
                        n_v + np.arange(n, dtype=np.int64)[:, None]])
        pspace = PressureSpace(P2P10, n_v + n, pd, xfem, n_vertex_dofs=n_v)
    return vspace, pspace


def _constraint_mask(mesh, coords, n_dofs):
    x0, x1, y0, y1 = mesh.domain
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    on_dirichlet = (np.abs(coords[:, 1] - y0) <= tol) | (np.abs(coords[:, 1] - y1) <= tol)
    on_slip = (np.abs(coords[:, 0] - x0) <= tol) | (np.abs(coords[:, 0] - x1) <= tol)
    clamp = np.zeros(2 * n_dofs, dtype=bool)
    clamp[:n_dofs][on_dirichlet] = True            # x component
    clamp[n_dofs:][on_dirichlet] = True            # y component
    clamp[:n_dofs][on_slip] = True                 # normal = x on vertical walls
    return clamp


# ---------------------------------------------------------------------------
# P2 evaluation
# ---------------------------------------------------------------------------

def p2_values(lam):
    """P2 basis values at barycentric points ``lam`` of shape (..., 3)."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
    ], axis=-1)


def p2_ref_grads(lam):
    """Reference gradients of the P2 basis at points ``lam`` (..., 3) -> (..., 6, 2)."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    g0 = np.stack([-np.ones_like(l0), -np.ones_like(l0)], axis=-1)
    g1 = np.stack([np.ones_like(l0), np.zeros_like(l0)], axis=-1)
    g2 = np.stack([np.zeros_like(l0), np.ones_like(l0)], axis=-1)
    return np.stack([
        (4 * l0 - 1)[..., None] * g0,
        (4 * l1 - 1)[..., None] * g1,
        (4 * l2 - 1)[..., None] * g2,
        4 * (l1[..., None] * g2 + l2[..., None] * g1),
        4 * (l2[..., None] * g0 + l0[..., None] * g2),
        4 * (l0[..., None] * g1 + l1[..., None] * g0),
    ], axis=-2)


def barycentric(tri, p):
    d = np.array([tri[1] - tri[0], tri[2] - tri[0]])
    det = d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0]
    r = np.asarray(p, dtype=float) - tri[0]
    l1 = (r[0] * d[1, 1] - r[1] * d[1, 0]) / det
    l2 = (d[0, 0] * r[1] - d[0, 1] * r[0]) / det
    return np.array([1.0 - l1 - l2, l1, l2])


class SpaceSnapshot:
    """Frozen view of a velocity space and mesh front for transfers."""

    def __init__(self, mesh: BulkMesh, vspace: VelocitySpace):
        self.active = mesh.active_snapshot()
        self.vspace = vspace
        self.key_index = {int(k): i for i, k in enumerate(vspace.dof_keys)}
        ids = np.flatnonzero(self.active)
        self.elem_pos = {int(e): i for i, e in enumerate(ids)}
        self.elem_ids = ids

    def evaluate_p2(self, mesh, u, p):
        """Point value of a vector P2 field at ``p`` on the snapshot front."""
        e = mesh.locate(p, self.active)
        i = self.elem_pos[e]
        lam = barycentric(mesh._verts[mesh._tri[e]], p)
        phi = p2_values(lam)
        dofs = self.vspace.elem_dofs[i]
        n = self.vspace.n_dofs
        return np.array([phi @ u[dofs], phi @ u[n + dofs]])

    def evaluate_p1(self, mesh, vertex_values, p):
        e = mesh.locate(p, self.active)
        lam = barycentric(mesh._verts[mesh._tri[e]], p)
        i = self.elem_pos[e]
        dofs = self.vspace.elem_dofs[i, :3]
        return float(lam @ vertex_values[dofs])


def interpolate_velocity(mesh: BulkMesh, old: SpaceSnapshot, old_u,
                         new_space: VelocitySpace):
    """Nodal interpolation of the old P2 field onto the new dof set.

    Dofs whose stable key survives the mesh change copy their
    coefficient; only genuinely new dofs evaluate the old field through
    the bisection hierarchy.
    """
    n_new = new_space.n_dofs
    n_old = old.vspace.n_dofs
    out = np.zeros(2 * n_new)
    for i, key in enumerate(new_space.dof_keys):
        j = old.key_index.get(int(key))
        if j is not None:
            out[i] = old_u[j]
            out[n_new + i] = old_u[n_old + j]
        else:
            val = old.evaluate_p2(mesh, old_u, new_space.coords[i])
            out[i], out[n_new + i] = val
    return new_space.apply_constraints(out)


def project_density(mesh: BulkMesh, old_active, old_values, new_ids):
    """Element means of an old piecewise constant field on the new front.

    ``old_values`` maps positions in the old active front to values; the
    result aligns with ``new_ids``.  Elements finer than the old front
    inherit their ancestor's constant; coarser ones take the area
    weighted mean of their old descendants.
    """
    old_ids = np.flatnonzero(old_active)
    pos = {int(e): i for i, e in enumerate(old_ids)}
    out = np.empty(len(new_ids))
    for i, e in enumerate(new_ids):
        e = int(e)
        j = pos.get(e)
        if j is not None:
            out[i] = old_values[j]
            continue
        a = mesh.parent(e)
        while a >= 0 and a not in pos:
            a = mesh.parent(a)
        if a >= 0:
            out[i] = old_values[pos[a]]
            continue
        total, area = _subtree_mass(mesh, e, pos, old_values)
        out[i] = total / area
    return out


def _subtree_mass(mesh, e, pos, values):
    j = pos.get(int(e))
    area = float(mesh.areas(np.array([e]))[0])
    if j is not None:
        return values[j] * area, area
    ch = mesh.children(e)
    if ch is None:
        raise ConfigError(f"element {e} not covered by the old front")
    m0, a0 = _subtree_mass(mesh, ch[0], pos, values)
    m1, a1 = _subtree_mass(mesh, ch[1], pos, values)
    return m0 + m1, a0 + a1


def transfer_pressure(mesh, old: SpaceSnapshot, old_pspace, old_p,
                      new_space: VelocitySpace, new_pspace: PressureSpace,
                      new_ids=None):
    """Best-effort pressure transfer for the Krylov initial guess."""
    out = np.zeros(new_pspace.n_dofs)
    if old_pspace.variant != new_pspace.variant:
        return out
    nv_new = new_pspace.n_vertex_dofs
    nv_old = old_pspace.n_vertex_dofs
    if nv_new:
        old_vertex_vals = old_p[:nv_old]
        for i in range(nv_new):
            key = int(new_space.dof_keys[i])
            j = old.key_index.get(key)
            if j is not None and j < nv_old:
                out[i] = old_vertex_vals[j]
            else:
                out[i] = old.evaluate_p1(mesh, old_vertex_vals,
                                         new_space.coords[i])
    if new_pspace.variant in (P2P0, P2P10) and new_ids is not None:
        old_elem_vals = old_p[nv_old:]
        vals = project_density(mesh, old.active, old_elem_vals, new_ids)
        out[nv_new:] = vals
    return out
