"""Solution of the coupled velocity/pressure/interface system.

The interface unknowns (curvature and vertex displacement) are
eliminated through a direct factorization of the small interface block;
the remaining velocity/pressure saddle problem is solved by Krylov
iteration with a block-triangular preconditioner: an exact solve for
the velocity block and a projected BFBt approximation for the pressure
Schur complement (built on the reduced velocity operator).  Velocity
constraints are eliminated, so all vectors here live on the free dofs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spilu

from .errors import ConfigError, SolverError, VertexNormalError


@dataclass
class SolverConfig:
    outer_method: str = "bicgstab"       # or "gmres"
    outer_tol: float = 1e-10
    outer_maxiter: int = 600
    inner_tol: float = 1e-12
    inner_maxiter: int = 2000
    velocity_precond: str = "direct"     # or "ssor"
    ssor_sweeps: int = 20
    projection_enabled: bool = True
    gmres_restart: int = 50

    def __post_init__(self):
        if not (0 < self.outer_tol < 1 and 0 < self.inner_tol < 1):
            raise ConfigError("solver tolerances must lie in (0, 1)")


class InterfaceBlock:
    """Direct factorization of the curvature/displacement block.

    The block couples the lumped normal matrix against the surface
    stiffness; it is nonsingular whenever the vertex normals span the
    plane, so a singular factorization is reported as that assumption
    failing.
    """

    def __init__(self, n_gamma, a_gamma, tau):
        self.tau = tau
        self.kg = n_gamma.shape[0]
        n = n_gamma.tocsr()
        top = sparse.hstack([sparse.csr_matrix((self.kg, self.kg)),
                             -(1.0 / tau) * n])
        bottom = sparse.hstack([n.T, a_gamma])
        self.matrix = sparse.vstack([top, bottom]).tocsc()
        try:
            self.lu = splu(self.matrix)
        except RuntimeError as exc:
            omegas = np.asarray(n.sum(axis=1)).reshape(-1, 2)
            sv = np.linalg.svd(omegas, compute_uv=False)
            raise VertexNormalError(
                "interface block is singular (vertex normal matrix has "
                f"singular values {sv[:2]}): {exc}") from exc

    def solve(self, rhs_kappa, rhs_x):
        z = self.lu.solve(np.concatenate([rhs_kappa, rhs_x]))
        return z[:self.kg], z[self.kg:]


def factor_interface_block(n_gamma, a_gamma, tau) -> InterfaceBlock:
    return InterfaceBlock(n_gamma, a_gamma, tau)


class ReducedOperator:
    """Velocity operator after eliminating the interface unknowns."""

    def __init__(self, system, block: InterfaceBlock, gamma: float):
        self.free = system.free
        self.b = system.b[self.free][:, self.free].tocsr()
        self.n_f = system.n_bulk[self.free].tocsr()
        self.block = block
        self.gamma = gamma
        self.n = self.b.shape[0]

    def matvec(self, u):
        out = self.b @ u
        if self.gamma != 0.0:
            kap, _ = self.block.solve(self.n_f.T @ u, np.zeros(2 * self.block.kg))
            out = out + self.gamma * (self.n_f @ kap)
        return out


def schur_apply(system, block: InterfaceBlock, gamma: float, u):
    """Single application of the reduced velocity operator (free dofs)."""
    return ReducedOperator(system, block, gamma).matvec(u)


class _Projector:
    def __init__(self, kernel):
        self.z = kernel  # orthonormal columns

    def __call__(self, v):
        if self.z is None:
            return v
        return v - self.z @ (self.z.T @ v)


def _pcg_projected(matvec, precond, project, b, tol, maxiter):
    """CG on the projected SPD system; returns the minimal-norm-ish solution."""
    b = project(b)
    x = np.zeros_like(b)
    r = b.copy()
    z = project(precond(r))
    p = z.copy()
    rz = r @ z
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x
    for _ in range(maxiter):
        ap = project(matvec(p))
        denom = p @ ap
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * bnorm:
            break
        z = project(precond(r))
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return project(x)


class SaddlePreconditioner:
    """Block triangular preconditioner for the reduced saddle problem.

    Applies an exact (or SSOR-swept) velocity solve and a projected BFBt
    pressure solve built from the unenriched divergence block; the
    single enrichment unknown gets its own exact 1x1 BFBt scale.
    """

    def __init__(self, op: ReducedOperator, system, config: SolverConfig,
                 kernel):
        self.op = op
        self.config = config
        free = system.free
        self.c_f = system.c[free].tocsr()
        self.d_f = system.d[free] if system.d is not None else None
        self.minv = 1.0 / system.mass_u_diag[free]
        self.kp = self.c_f.shape[1]

        if config.velocity_precond == "direct":
            self.b_lu = splu(op.b.tocsc())
            self.apply_b = self.b_lu.solve
        else:
            self.apply_b = _SsorSweeps(op.b, config.ssor_sweeps)

        k_p = (self.c_f.T.multiply(self.minv) @ self.c_f).tocsc()
        self.k_p = k_p.tocsr()
        shift = sparse.diags(1e-8 * np.maximum(k_p.diagonal(), 1e-300))
        try:
            ilu = spilu((k_p + shift).tocsc(), drop_tol=1e-5, fill_factor=20)
            self.k_precond = ilu.solve
        except RuntimeError:
            dinv = 1.0 / np.maximum(k_p.diagonal(), 1e-300)
            self.k_precond = lambda v: dinv * v
        self.project = _Projector(kernel if config.projection_enabled else None)

        if self.d_f is not None:
            z = self.minv * self.d_f
            dz = float(self.d_f @ z)
            az = float(z @ self.op.matvec(z))
            self.lam_scale = az / dz**2 if dz > 0 else 1.0
        else:
            self.lam_scale = 1.0

    def _k_solve(self, v):
        return _pcg_projected(lambda x: self.k_p @ x, self.k_precond,
                              self.project, v,
                              self.config.inner_tol, self.config.inner_maxiter)

    def schur_solve(self, q):
        """Approximate S^{-1} q by the projected BFBt formula."""
        t = self._k_solve(q)
        w = self.minv * (self.c_f @ t)
        v = self.op.matvec(w)
        y = self.c_f.T @ (self.minv * v)
        return self._k_solve(y)

    def apply(self, r):
        """Right preconditioner: solve the block upper-triangular system."""
        nu = self.op.n
        r_u = r[:nu]
        r_p = r[nu:nu + self.kp]
        p = -self.schur_solve(r_p)
        rhs_u = r_u - self.c_f @ p
        if self.d_f is not None:
            lam = -r[-1] / self.lam_scale
            rhs_u = rhs_u - self.d_f * lam
        else:
            lam = None
        u = self.apply_b(rhs_u)
        out = np.concatenate([u, p, [lam]]) if lam is not None else \
            np.concatenate([u, p])
        return out


class _SsorSweeps:
    """Symmetric Gauss-Seidel sweeps as an inexact velocity solve."""

    def __init__(self, mat, sweeps):
        csr = mat.tocsr()
        self.lower = sparse.tril(csr, 0).tocsr()
        self.upper = sparse.triu(csr, 0).tocsr()
        self.mat = csr
        self.sweeps = sweeps

    def __call__(self, b):
        from scipy.sparse.linalg import spsolve_triangular
        x = np.zeros_like(b)
        for _ in range(self.sweeps):
            r = b - self.mat @ x
            x = x + spsolve_triangular(self.lower, r, lower=True)
            r = b - self.mat @ x
            x = x + spsolve_triangular(self.upper, r, lower=False)
        return x


class _SaddleOperator:
    """Full reduced system matvec over (u, p[, lambda])."""

    def __init__(self, op: ReducedOperator, system):
        self.op = op
        free = system.free
        self.c_f = system.c[free].tocsr()
        self.d_f = system.d[free] if system.d is not None else None
        self.kp = self.c_f.shape[1]
        self.n = op.n + self.kp + (1 if self.d_f is not None else 0)

    def matvec(self, x):
        nu = self.op.n
        u = x[:nu]
        p = x[nu:nu + self.kp]
        top = self.op.matvec(u) + self.c_f @ p
        mid = self.c_f.T @ u
        if self.d_f is not None:
            top = top + self.d_f * x[-1]
            return np.concatenate([top, mid, [self.d_f @ u]])
        return np.concatenate([top, mid])


def _bicgstab(matvec, precond, b, x0, tol, maxiter):
    """Right-preconditioned BiCGSTAB converging on the true residual.

    The recursive residual triggers a true-residual check; if the two
    have drifted apart the iteration restarts from the current iterate.
    """
    x = x0.copy()
    bnorm = np.linalg.norm(b)
    scale = bnorm if bnorm > 0 else 1.0
    history = []
    iters = 0
    while iters <= maxiter:
        r = b - matvec(x)
        history.append(np.linalg.norm(r) / scale)
        if history[-1] <= tol:
            return x, history, True
        r0 = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros_like(b)
        p = np.zeros_like(b)
        restart = False
        while iters < maxiter and not restart:
            iters += 1
            rho_new = r0 @ r
            if abs(rho_new) < 1e-300 or abs(omega) < 1e-300:
                return x, history, False     # breakdown
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p = r + beta * (p - omega * v)
            phat = precond(p)
            v = matvec(phat)
            denom = r0 @ v
            if abs(denom) < 1e-300:
                return x, history, False
            alpha = rho / denom
            s = r - alpha * v
            if np.linalg.norm(s) / scale <= tol:
                x = x + alpha * phat
                restart = True
                break
            shat = precond(s)
            t = matvec(shat)
            tt = t @ t
            if tt == 0.0:
                return x, history, False
            omega = (t @ s) / tt
            x = x + alpha * phat + omega * shat
            r = s - omega * t
            history.append(np.linalg.norm(r) / scale)
            if history[-1] <= tol:
                restart = True
        if not restart:
            break
    return x, history, False


def _gmres_restarted(matvec, precond, b, x0, tol, maxiter, restart):
    """Right-preconditioned GMRES(restart)."""
    x = x0.copy()
    bnorm = np.linalg.norm(b)
    scale = bnorm if bnorm > 0 else 1.0
    history = []
    total = 0
    while total < maxiter:
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        history.append(beta / scale)
        if beta / scale <= tol:
            return x, history, True
        m = min(restart, maxiter - total)
        q = np.zeros((m + 1, len(b)))
        h = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        q[0] = r / beta
        k_done = 0
        for k in range(m):
            z = precond(q[k])
            w = matvec(z)
            for i in range(k + 1):
                h[i, k] = w @ q[i]
                w -= h[i, k] * q[i]
            h[k + 1, k] = np.linalg.norm(w)
            if h[k + 1, k] > 1e-300:
                q[k + 1] = w / h[k + 1, k]
            for i in range(k):
                tmp = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = tmp
            denom = np.hypot(h[k, k], h[k + 1, k])
            if denom == 0.0:
                k_done = k
                break
            cs[k], sn[k] = h[k, k] / denom, h[k + 1, k] / denom
            h[k, k] = denom
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_done = k + 1
            total += 1
            history.append(abs(g[k + 1]) / scale)
            if history[-1] <= tol:
                break
        if k_done:
            y = np.linalg.solve(h[:k_done, :k_done] + 1e-300 * np.eye(k_done),
                                g[:k_done])
            dx = sum(y[i] * precond(q[i]) for i in range(k_done))
            x = x + dx
        if np.linalg.norm(b - matvec(x)) / scale <= tol:
            return x, history, True
    return x, history, np.linalg.norm(b - matvec(x)) / scale <= tol


def reduced_rhs(system, block: InterfaceBlock, gamma: float, x_coeffs):
    """Right-hand side of the reduced system after elimination."""
    free = system.free
    g_f = system.g[free]
    if gamma != 0.0:
        a_x = system.a_gamma @ x_coeffs
        kap, _ = block.solve(np.zeros(block.kg), a_x)
        g_f = g_f - gamma * (system.n_bulk[free].tocsr() @ kap)
    return g_f


def solve_coupled(system, block: InterfaceBlock, config: SolverConfig,
                  gamma: float, x_coeffs, p0=None, lam0=0.0,
                  pspace=None, minus_area=0.0):
    """Solve for velocity, pressure and the enrichment coefficient.

    Returns full-length velocity coefficients (clamped dofs zeroed), the
    zero-mean pressure, the enrichment value and an info dict with the
    iteration history.
    """
    op = ReducedOperator(system, block, gamma)
    sad = _SaddleOperator(op, system)
    kernel = _pressure_kernel(system, pspace)
    pre = SaddlePreconditioner(op, system, config, kernel)

    g_f = reduced_rhs(system, block, gamma, x_coeffs)
    nb = np.zeros(sad.n)
    nb[:op.n] = g_f
    kp = sad.kp
    p_init = np.zeros(kp) if p0 is None else np.asarray(p0, dtype=float)
    x0 = np.zeros(sad.n)
    x0[:op.n] = pre.apply_b(g_f - pre.c_f @ p_init
                            - (pre.d_f * lam0 if pre.d_f is not None else 0.0))
    x0[op.n:op.n + kp] = p_init
    if pre.d_f is not None:
        x0[-1] = lam0

    if config.outer_method == "bicgstab":
        x, hist, ok = _bicgstab(sad.matvec, pre.apply, nb, x0,
                                config.outer_tol, config.outer_maxiter)
        if not ok:
            x, hist2, ok = _gmres_restarted(sad.matvec, pre.apply, nb, x,
                                            config.outer_tol,
                                            config.outer_maxiter,
                                            config.gmres_restart)
            hist = hist + hist2
    elif config.outer_method == "gmres":
        x, hist, ok = _gmres_restarted(sad.matvec, pre.apply, nb, x0,
                                       config.outer_tol, config.outer_maxiter,
                                       config.gmres_restart)
    else:
        raise ConfigError(f"unknown outer method {config.outer_method!r}")
    if not ok:
        raise SolverError(
            f"Krylov solver stalled at relative residual {hist[-1]:.3e} "
            f"after {len(hist)} iterations", residuals=hist)

    u_full = np.zeros(len(system.free))
    u_full[system.free] = x[:op.n]
    p = x[op.n:op.n + kp].copy()
    lam = float(x[-1]) if pre.d_f is not None else 0.0
    p = _zero_mean_pressure(system, pspace, p, lam, minus_area)
    info = {"iterations": len(hist) - 1, "residuals": hist,
            "residual": hist[-1], "rhs_norm": float(np.linalg.norm(nb))}
    return u_full, p, lam, info


def _pressure_kernel(system, pspace):
    """Orthonormal basis of constant-pressure coefficient vectors.

    The enrichment coefficient never participates (the characteristic
    function of the inner phase is not constant), so the kernel vectors
    are sliced to the unenriched pressure block the inner solves use.
    """
    if pspace is None:
        return None
    return pspace.kernel_vectors()[:system.c.shape[1]]


def _zero_mean_pressure(system, pspace, p, lam, minus_area=0.0):
    """Subtract the weighted mean so the pressure function integrates to 0."""
    if pspace is None:
        return p
    total = float(system.pressure_integral @ p) + lam * minus_area
    mean = total / system.domain_area
    out = p.copy()
    if pspace.n_vertex_dofs:
        out[:pspace.n_vertex_dofs] -= mean
    else:
        out -= mean
    return out


def recover_interface(block: InterfaceBlock, system, gamma, u_full, x_coeffs):
    """Back-substitute curvature and vertex displacement."""
    free = system.free
    rhs_top = -(system.n_bulk[free].tocsr().T @ u_full[free])
    rhs_bot = -(system.a_gamma @ x_coeffs)
    kappa, delta_x = block.solve(rhs_top, rhs_bot)
    return kappa, delta_x


def full_residual(system, block, gamma, u_full, p, lam, kappa, delta_x,
                  x_coeffs):
    """Residual of the unreduced block system, for verification."""
    free = system.free
    b_row = (system.b[free][:, free] @ u_full[free]
             + system.c[free] @ p
             - gamma * (system.n_bulk[free] @ kappa)
             - system.g[free])
    if system.d is not None:
        b_row = b_row + system.d[free] * lam
    c_row = system.c[free].T @ u_full[free]
    rows = [b_row, c_row]
    if system.d is not None:
        rows.append(np.atleast_1d(system.d[free] @ u_full[free]))
    n_row = (system.n_bulk[free].T @ u_full[free]
             - (1.0 / block.tau) * (system.n_gamma @ delta_x))
    x_row = (system.n_gamma.T @ kappa + system.a_gamma @ delta_x
             + system.a_gamma @ x_coeffs)
    rows += [n_row, x_row]
    return np.concatenate(rows)


def solve_monolithic_dense(system, block, gamma, x_coeffs, pspace,
                           minus_area=0.0):
    """Dense least-squares solve of the full block system (test oracle)."""
    free = system.free
    nf = int(free.sum())
    kp = system.c.shape[1]
    kg = block.kg
    has_d = system.d is not None
    n = nf + kp + (1 if has_d else 0) + kg + 2 * kg
    a = np.zeros((n, n))
    b_vec = np.zeros(n)
    iu = slice(0, nf)
    ip = slice(nf, nf + kp)
    il = nf + kp if has_d else None
    ik = slice(nf + kp + (1 if has_d else 0), nf + kp + (1 if has_d else 0) + kg)
    ix = slice(ik.stop, ik.stop + 2 * kg)
    a[iu, iu] = system.b[free][:, free].toarray()
    a[iu, ip] = system.c[free].toarray()
    a[iu, ik] = -gamma * system.n_bulk[free].toarray()
    a[ip, iu] = system.c[free].T.toarray()
    if has_d:
        a[iu, il] = system.d[free]
        a[il, iu] = system.d[free]
    a[ik, iu] = system.n_bulk[free].T.toarray()
    a[ik, ix] = -(1.0 / block.tau) * system.n_gamma.toarray()
    a[ix, ik] = system.n_gamma.T.toarray()
    a[ix, ix] = system.a_gamma.toarray()
    b_vec[iu] = system.g[free]
    b_vec[ix] = -(system.a_gamma @ x_coeffs)
    # the raw blocks span many orders of magnitude; equilibrate rows and
    # columns so the least-squares solve keeps its accuracy
    row = 1.0 / np.maximum(np.abs(a).max(axis=1), 1e-300)
    a_r = row[:, None] * a
    col = 1.0 / np.maximum(np.abs(a_r).max(axis=0), 1e-300)
    sol, *_ = np.linalg.lstsq(a_r * col[None, :], row * b_vec, rcond=None)
    sol *= col
    u_full = np.zeros(len(free))
    u_full[free] = sol[iu]
    lam = float(sol[il]) if has_d else 0.0
    p = _zero_mean_pressure(system, pspace, sol[ip], lam, minus_area)
    return u_full, p, lam, sol[ik], sol[ix]
