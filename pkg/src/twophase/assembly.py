"""Assembly of the coupled bulk/interface linear system.

All bulk integrals use a 6-point degree-4 triangle rule, which is exact
for the mass, viscous, divergence and forcing terms (element-wise
constant coefficients, P2 trial/test).  The skew-symmetrized advection
block is antisymmetric by construction regardless of quadrature, which
is what the energy estimate needs.  Interface/bulk coupling integrals
use 3-point Simpson per clipped sub-segment, exact for the cubic
P2 x P1 integrand on straight segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse

from .bulkmesh import MINUS, PLUS, BulkMesh, ElementClassification
from .errors import ClippingError, ConfigError
from .interface import InterfaceCurve, NormalData, compute_normals
from .interface import lumped_normal_matrix, surface_stiffness
from .spaces import (
    PressureSpace, VelocitySpace, p2_ref_grads, p2_values,
)

MIDPOINT, VOLUME_FRACTION = "midpoint", "volume_fraction"

# 6-point degree-4 Dunavant rule on the reference triangle; the weights
# are scaled so that integrals come out as sum(w * f(q)) * |det J|
_A1, _A2 = 0.445948490915965, 0.091576213509771
_W1, _W2 = 0.223381589678011, 0.109951743655322
QUAD_BARY = np.array([
    [1 - 2 * _A1, _A1, _A1], [_A1, 1 - 2 * _A1, _A1], [_A1, _A1, 1 - 2 * _A1],
    [1 - 2 * _A2, _A2, _A2], [_A2, 1 - 2 * _A2, _A2], [_A2, _A2, 1 - 2 * _A2],
])
QUAD_W = 0.5 * np.array([_W1, _W1, _W1, _W2, _W2, _W2])

_PHI = p2_values(QUAD_BARY)            # (6q, 6i)
_GRAD_REF = p2_ref_grads(QUAD_BARY)    # (6q, 6i, 2)

# 3-point Gauss on [0, 1] for the slip-wall boundary term (degree 5)
_G1D_X = np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10])
_G1D_W = np.array([5 / 18, 8 / 18, 5 / 18])


@dataclass
class PhysParams:
    """Densities, viscosities, surface tension and body forces.

    ``f1`` scales with the local density, ``f2`` does not; both map
    ``(points, t) -> (n, 2)`` arrays.
    """

    rho_plus: float
    rho_minus: float
    mu_plus: float
    mu_minus: float
    gamma: float
    beta: float = 0.0
    f1: Optional[Callable] = None
    f2: Optional[Callable] = None

    def __post_init__(self):
        if self.mu_plus <= 0 or self.mu_minus <= 0:
            raise ConfigError("viscosities must be positive")
        if self.rho_plus < 0 or self.rho_minus < 0:
            raise ConfigError("densities must be non-negative")
        if self.gamma < 0:
            raise ConfigError("surface tension must be non-negative")
        if self.beta < 0:
            raise ConfigError("slip coefficient must be non-negative")


@dataclass
class DiscreteCoefficients:
    rho: np.ndarray          # per active element
    mu: np.ndarray
    rho_prev: np.ndarray     # projected previous density
    strategy: str


def discrete_coefficients(cls: ElementClassification, params: PhysParams,
                          strategy: str, rho_prev=None) -> DiscreteCoefficients:
    """Element-wise density/viscosity from the phase classification.

    Interface elements take the arithmetic mean of the phase values or
    the cut-volume weighted mean, depending on the strategy.
    """
    if strategy not in (MIDPOINT, VOLUME_FRACTION):
        raise ConfigError(f"unknown density strategy {strategy!r}")
    if strategy == VOLUME_FRACTION and not cls.has_fractions:
        raise ConfigError("volume_fraction strategy needs cut fractions; "
                          "classify with compute_fractions=True")
    if strategy == MIDPOINT:
        frac = np.where(cls.labels == MINUS, 1.0,
                        np.where(cls.labels == PLUS, 0.0, 0.5))
    else:
        frac = cls.minus_fraction
    rho = frac * params.rho_minus + (1.0 - frac) * params.rho_plus
    mu = frac * params.mu_minus + (1.0 - frac) * params.mu_plus
    if rho_prev is None:
        rho_prev = rho.copy()
    return DiscreteCoefficients(rho=rho, mu=mu, rho_prev=np.asarray(rho_prev),
                                strategy=strategy)


def minus_density(cls: ElementClassification, params: PhysParams,
                  strategy: str) -> np.ndarray:
    """Density field with the outer phase zeroed (rise-velocity weight)."""
    if strategy == MIDPOINT or not cls.has_fractions:
        frac = np.where(cls.labels == MINUS, 1.0,
                        np.where(cls.labels == PLUS, 0.0, 0.5))
    else:
        frac = cls.minus_fraction
    return frac * params.rho_minus


@dataclass
class AssembledSystem:
    """Sparse blocks of one time step's linear system."""

    b: sparse.csr_matrix                 # (2K_U, 2K_U) full velocity block
    c: sparse.csr_matrix                 # (2K_U, K_P)
    d: Optional[np.ndarray]              # (2K_U,) enrichment column
    n_bulk: sparse.csr_matrix            # (2K_U, K_G)
    n_gamma: sparse.csr_matrix           # (K_G, 2K_G) lumped normal matrix
    a_gamma: sparse.csr_matrix           # (2K_G, 2K_G)
    g: np.ndarray                        # (2K_U,)
    mass_u_diag: np.ndarray              # (2K_U,)
    mass_p_diag: np.ndarray              # (K_P,)
    free: np.ndarray                     # (2K_U,) bool
    # pieces retained for energy bookkeeping
    mass_rho: sparse.csr_matrix          # scalar, weight rho^m
    mass_rho_prev: sparse.csr_matrix     # scalar, weight projected rho^{m-1}
    visc: sparse.csr_matrix              # (2K_U, 2K_U) 2(mu D, D) block
    adv: sparse.csr_matrix               # (2K_U, 2K_U) antisymmetric block
    beta_block: Optional[sparse.csr_matrix]
    force: np.ndarray                    # (2K_U,) forcing part of g
    pressure_integral: np.ndarray        # (K_P,) integrals of pressure basis
    domain_area: float

    def quadratic_form_scalar(self, mat, u):
        n = len(u) // 2
        return float(u[:n] @ (mat @ u[:n]) + u[n:] @ (mat @ u[n:]))


def _scatter(rows_dofs, cols_dofs, local, shape):
    rows = np.repeat(rows_dofs, local.shape[2], axis=1).ravel()
    cols = np.tile(cols_dofs, (1, local.shape[1])).ravel()
    return sparse.csr_matrix((local.ravel(), (rows, cols)), shape=shape)


def assemble_bulk(mesh: BulkMesh, vspace: VelocitySpace, pspace: PressureSpace,
                  coeffs: DiscreteCoefficients, w, tau: float,
                  params: PhysParams, t_next: float) -> AssembledSystem:
    """All area integrals of the momentum/continuity blocks.

    ``w`` is the transported previous velocity (advection coefficient
    and part of the right-hand side).
    """
    if tau <= 0:
        raise ConfigError(f"time step must be positive, got {tau}")
    ids = mesh.active_ids()
    coords = mesh.tri_coords(ids)
    ne = len(ids)
    ku = vspace.n_dofs
    dofs = vspace.elem_dofs

    jac = np.stack([coords[:, 1] - coords[:, 0],
                    coords[:, 2] - coords[:, 0]], axis=-1)  # (ne,2,2) columns
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv_t = np.empty_like(jac)  # inverse transpose of the Jacobian
    inv_t[:, 0, 0] = jac[:, 1, 1]
    inv_t[:, 0, 1] = -jac[:, 1, 0]
    inv_t[:, 1, 0] = -jac[:, 0, 1]
    inv_t[:, 1, 1] = jac[:, 0, 0]
    inv_t /= det[:, None, None]
    grads = np.einsum("edr,qir->eqid", inv_t, _GRAD_REF)  # (ne, q, 6, 2)
    wdet = QUAD_W[None, :] * det[:, None]                 # (ne, q)

    m_ref = np.einsum("q,qi,qj->ij", QUAD_W, _PHI, _PHI)
    mass_plain = det[:, None, None] * m_ref[None]
    mass_rho_loc = coeffs.rho[:, None, None] * mass_plain
    mass_prev_loc = coeffs.rho_prev[:, None, None] * mass_plain

    gx = grads[..., 0]
    gy = grads[..., 1]
    kxx = np.einsum("eq,eqi,eqj->eij", wdet, gx, gx)
    kyy = np.einsum("eq,eqi,eqj->eij", wdet, gy, gy)
    kxy = np.einsum("eq,eqi,eqj->eij", wdet, gx, gy)  # [i from x, j from y]
    mu = coeffs.mu[:, None, None]
    visc_xx = mu * (2 * kxx + kyy)
    visc_yy = mu * (2 * kyy + kxx)
    # test x, trial y: mu * int dphi_j/dx dphi_i/dy
    visc_xy = mu * np.einsum("eq,eqi,eqj->eij", wdet, gy, gx)
    visc_yx = mu * np.einsum("eq,eqi,eqj->eij", wdet, gx, gy)

    wx = np.einsum("qi,ei->eq", _PHI, w[dofs])
    wy = np.einsum("qi,ei->eq", _PHI, w[ku:][dofs])
    conv = wx[..., None] * gx + wy[..., None] * gy        # (ne, q, 6) w.grad
    g_adv = np.einsum("eq,eqj,qi->eij", wdet * coeffs.rho[:, None], conv, _PHI)
    adv_loc = 0.5 * (g_adv - np.swapaxes(g_adv, 1, 2))

    shape_s = (ku, ku)
    mass_rho = _scatter(dofs, dofs, mass_rho_loc, shape_s)
    mass_prev = _scatter(dofs, dofs, mass_prev_loc, shape_s)
    mass_u = _scatter(dofs, dofs, mass_plain, shape_s)
    adv_s = _scatter(dofs, dofs, adv_loc, shape_s)

    k2 = 2 * ku
    dx = dofs
    dy = dofs + ku
    visc = (_scatter(dx, dx, visc_xx, (k2, k2))
            + _scatter(dy, dy, visc_yy, (k2, k2))
            + _scatter(dx, dy, visc_xy, (k2, k2))
            + _scatter(dy, dx, visc_yx, (k2, k2)))

    beta_block = None
    if params.beta > 0:
        beta_block = params.beta * _slip_boundary_mass(mesh, vspace)

    # pressure coupling: [C]_{(r,i),q} = -(d phi_i / d r, psi_q)
    if pspace.n_vertex_dofs:
        psi = QUAD_BARY                                    # P1 values (q, 3)
        cx1 = -np.einsum("eq,eqi,qj->eij", wdet, gx, psi)
        cy1 = -np.einsum("eq,eqi,qj->eij", wdet, gy, psi)
        pd1 = pspace.elem_dofs[:, :3]
    if pspace.variant == "p2p1":
        c_mat = (_scatter(dx, pd1, cx1, (k2, pspace.n_dofs))
                 + _scatter(dy, pd1, cy1, (k2, pspace.n_dofs)))
    else:
        cx0 = -np.einsum("eq,eqi->ei", wdet, gx)[:, :, None]
        cy0 = -np.einsum("eq,eqi->ei", wdet, gy)[:, :, None]
        pd0 = pspace.elem_dofs[:, -1:]
        c_mat = (_scatter(dx, pd0, cx0, (k2, pspace.n_dofs))
                 + _scatter(dy, pd0, cy0, (k2, pspace.n_dofs)))
        if pspace.variant == "p2p1p0":
            c_mat = c_mat + (_scatter(dx, pd1, cx1, (k2, pspace.n_dofs))
                             + _scatter(dy, pd1, cy1, (k2, pspace.n_dofs)))

    # right-hand side: mass-rate history plus body forces
    g_vec = np.zeros(k2)
    g_vec[:ku] = mass_prev @ w[:ku] / tau
    g_vec[ku:] = mass_prev @ w[ku:] / tau
    force = np.zeros(k2)
    if params.f1 is not None:
        f1v = np.asarray(params.f1(vspace.coords, t_next), dtype=float)
        force[:ku] += mass_rho @ f1v[:, 0]
        force[ku:] += mass_rho @ f1v[:, 1]
    if params.f2 is not None:
        f2v = np.asarray(params.f2(vspace.coords, t_next), dtype=float)
        force[:ku] += mass_u @ f2v[:, 0]
        force[ku:] += mass_u @ f2v[:, 1]
    g_vec += force

    rate = sparse.kron(sparse.eye(2, format="csr"),
                       (mass_rho + mass_prev) / (2 * tau), format="csr")
    b_mat = rate + visc + sparse.kron(sparse.eye(2, format="csr"), adv_s,
                                      format="csr")
    if beta_block is not None:
        b_mat = b_mat + beta_block

    mass_u_diag = np.tile(mass_u.diagonal(), 2)
    areas = 0.5 * det
    mass_p_diag = np.zeros(pspace.n_dofs)
    if pspace.n_vertex_dofs:
        p1_diag_loc = np.einsum("q,qi,qi->i", QUAD_W, QUAD_BARY, QUAD_BARY)
        np.add.at(mass_p_diag, pspace.elem_dofs[:, :3],
                  det[:, None] * p1_diag_loc[None, :])
    if pspace.variant in ("p2p0", "p2p1p0"):
        mass_p_diag[pspace.elem_dofs[:, -1]] += areas

    p_int = np.zeros(pspace.n_dofs)
    if pspace.n_vertex_dofs:
        np.add.at(p_int, pspace.elem_dofs[:, :3],
                  np.repeat(areas[:, None] / 3.0, 3, axis=1))
    if pspace.variant in ("p2p0", "p2p1p0"):
        p_int[pspace.elem_dofs[:, -1]] += areas

    return AssembledSystem(
        b=b_mat.tocsr(), c=c_mat.tocsr(), d=None,
        n_bulk=sparse.csr_matrix((k2, 1)), n_gamma=sparse.csr_matrix((1, 2)),
        a_gamma=sparse.csr_matrix((2, 2)), g=g_vec,
        mass_u_diag=mass_u_diag, mass_p_diag=mass_p_diag,
        free=vspace.free(), mass_rho=mass_rho, mass_rho_prev=mass_prev,
        visc=visc.tocsr(), adv=sparse.kron(sparse.eye(2), adv_s).tocsr(),
        beta_block=beta_block, force=force, pressure_integral=p_int,
        domain_area=float(areas.sum()))


def _slip_boundary_mass(mesh, vspace):
    """Tangential boundary mass on the slip walls (vertical, tangent e_y)."""
    ids = mesh.active_ids()
    tris = mesh._tri[ids]
    ku = vspace.n_dofs
    rows, cols, vals = [], [], []
    local_edges = ((1, 2, 3), (2, 0, 4), (0, 1, 5))
    for pos in range(len(ids)):
        for (la, lb, lm) in local_edges:
            a, b = int(tris[pos, la]), int(tris[pos, lb])
            if mesh.boundary_wall(a, b) != mesh.SLIP:
                continue
            pa, pb = mesh._verts[a], mesh._verts[b]
            h = np.linalg.norm(pb - pa)
            dloc = [vspace.elem_dofs[pos, la], vspace.elem_dofs[pos, lb],
                    vspace.elem_dofs[pos, lm]]
            # 1D quadratic basis at Gauss points on [0, 1]
            x = _G1D_X
            phi = np.stack([(1 - x) * (1 - 2 * x), x * (2 * x - 1),
                            4 * x * (1 - x)])
            m_loc = h * np.einsum("q,iq,jq->ij", _G1D_W, phi, phi)
            for i in range(3):
                for j in range(3):
                    rows.append(ku + dloc[i])
                    cols.append(ku + dloc[j])
                    vals.append(m_loc[i, j])
    return sparse.csr_matrix((vals, (rows, cols)),
                             shape=(2 * ku, 2 * ku))


def assemble_coupling(mesh: BulkMesh, vspace: VelocitySpace,
                      curve: InterfaceCurve, cls: ElementClassification,
                      normals: NormalData | None = None) -> sparse.csr_matrix:
    """Interface/velocity coupling with Simpson quadrature per sub-segment."""
    nd = normals if normals is not None else compute_normals(curve)
    ku = vspace.n_dofs
    kg = curve.n_vertices
    ns = len(cls.sub_owner)
    if ns == 0:
        return sparse.csr_matrix((2 * ku, kg))
    ids = cls.element_ids
    tri = mesh.tri_coords(ids[cls.sub_owner])
    p0 = cls.sub_p[:, 0]
    p1 = cls.sub_p[:, 1]
    pts = np.stack([0.5 * (p0 + p1), p0, p1], axis=1)      # (ns, 3, 2)
    lens = np.linalg.norm(p1 - p0, axis=1)
    wq = lens[:, None] * np.array([2 / 3, 1 / 6, 1 / 6])[None, :]

    lam = _bary_batch(tri, pts)
    if lam.min() < -1e-9:
        raise ClippingError(
            f"sub-segment point outside its owner element (bary {lam.min():g})")
    phi = p2_values(lam)                                    # (ns, 3, 6)
    t_mid = 0.5 * (cls.sub_t[:, 0] + cls.sub_t[:, 1])
    tq = np.stack([t_mid, cls.sub_t[:, 0], cls.sub_t[:, 1]], axis=1)
    chi = np.stack([1.0 - tq, tq], axis=-1)                # (ns, 3, 2 ends)
    nu = nd.segment_normals[cls.sub_segment]                # (ns, 2 comps)

    # contribution[s, i, end, comp]
    contrib = np.einsum("sq,sqi,sqe,sc->siec", wq, phi, chi, nu)
    edofs = vspace.elem_dofs[cls.sub_owner]                 # (ns, 6)
    seg = cls.sub_segment
    col_ends = np.stack([seg, (seg + 1) % kg], axis=1)      # (ns, 2)

    rows_x = np.broadcast_to(edofs[:, :, None], (ns, 6, 2)).ravel()
    cols = np.broadcast_to(col_ends[:, None, :], (ns, 6, 2)).ravel()
    out = sparse.csr_matrix(
        (contrib[..., 0].ravel(), (rows_x, cols)), shape=(2 * ku, kg))
    out += sparse.csr_matrix(
        (contrib[..., 1].ravel(), (ku + rows_x, cols)), shape=(2 * ku, kg))
    return out.tocsr()


def _bary_batch(tri, pts):
    d1 = tri[:, 1] - tri[:, 0]
    d2 = tri[:, 2] - tri[:, 0]
    det = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])[:, None]
    r = pts - tri[:, None, 0]
    l1 = (r[..., 0] * d2[:, None, 1] - r[..., 1] * d2[:, None, 0]) / det
    l2 = (d1[:, None, 0] * r[..., 1] - d1[:, None, 1] * r[..., 0]) / det
    return np.stack([1 - l1 - l2, l1, l2], axis=-1)


def assemble_xfem_column(n_bulk: sparse.csr_matrix) -> np.ndarray:
    """Enrichment column -<phi_i, nu>; exact since the hats sum to one."""
    return -np.asarray(n_bulk.sum(axis=1)).ravel()


def assemble_interface(curve: InterfaceCurve, normals: NormalData | None = None):
    nd = normals if normals is not None else compute_normals(curve)
    return lumped_normal_matrix(curve, nd), surface_stiffness(curve)


def assemble_system(mesh, vspace, pspace, curve, cls, coeffs, w, tau,
                    params, t_next, normals=None) -> AssembledSystem:
    """One-stop assembly of every block of the step's linear system."""
    nd = normals if normals is not None else compute_normals(curve)
    sys_ = assemble_bulk(mesh, vspace, pspace, coeffs, w, tau, params, t_next)
    sys_.n_bulk = assemble_coupling(mesh, vspace, curve, cls, nd)
    sys_.n_gamma, sys_.a_gamma = assemble_interface(curve, nd)
    if pspace.xfem:
        sys_.d = assemble_xfem_column(sys_.n_bulk)
    return sys_
