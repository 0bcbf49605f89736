import numpy as np
import pytest

from twophase import assembly as asm
from twophase import bulkmesh as bm
from twophase import spaces as sp
from twophase.errors import ConfigError
from twophase.interface import InterfaceCurve, compute_normals


def hysing1_params():
    return asm.PhysParams(rho_plus=1000.0, rho_minus=100.0,
                          mu_plus=10.0, mu_minus=1.0, gamma=24.5)


def setup_problem(n_mesh=8, n_curve=64, domain=(0, 1, 0, 2), xfem=True,
                  variant=sp.P2P1):
    mesh = bm.build_uniform(domain, n_mesh)
    curve = InterfaceCurve.circle((0.5, 0.5), 0.25, n_curve)
    cls = bm.classify_elements(mesh, curve)
    vspace, pspace = sp.build_spaces(mesh, variant, xfem)
    params = hysing1_params()
    coeffs = asm.discrete_coefficients(cls, params, asm.MIDPOINT)
    return mesh, curve, cls, vspace, pspace, params, coeffs


class TestDiscreteCoefficients:
    def test_interface_midpoint_values(self):
        mesh, curve, cls, *_ = setup_problem()
        coeffs = asm.discrete_coefficients(cls, hysing1_params(), asm.MIDPOINT)
        iface = cls.labels == bm.INTERFACE
        np.testing.assert_allclose(coeffs.rho[iface], 550.0)
        np.testing.assert_allclose(coeffs.mu[iface], 5.5)

    def test_volume_fraction_value(self):
        mesh, curve, cls, *_ = setup_problem()
        cls.minus_fraction[cls.labels == bm.INTERFACE] = 0.25
        cls.has_fractions = True
        coeffs = asm.discrete_coefficients(cls, hysing1_params(),
                                           asm.VOLUME_FRACTION)
        iface = cls.labels == bm.INTERFACE
        np.testing.assert_allclose(coeffs.rho[iface], 775.0)

    def test_pure_elements_both_strategies(self):
        mesh, curve, cls, *_ = setup_problem()
        for strat in (asm.MIDPOINT,):
            coeffs = asm.discrete_coefficients(cls, hysing1_params(), strat)
            np.testing.assert_allclose(coeffs.rho[cls.labels == bm.MINUS], 100.0)
            np.testing.assert_allclose(coeffs.rho[cls.labels == bm.PLUS], 1000.0)
            np.testing.assert_allclose(coeffs.mu[cls.labels == bm.MINUS], 1.0)

    def test_fraction_strategy_requires_fractions(self):
        mesh, curve, cls, *_ = setup_problem()
        with pytest.raises(ConfigError):
            asm.discrete_coefficients(cls, hysing1_params(), asm.VOLUME_FRACTION)

    def test_rho_prev_defaults_to_current(self):
        mesh, curve, cls, *_ = setup_problem()
        coeffs = asm.discrete_coefficients(cls, hysing1_params(), asm.MIDPOINT)
        np.testing.assert_array_equal(coeffs.rho, coeffs.rho_prev)


class TestBulkAssembly:
    def test_rejects_bad_timestep(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem()
        with pytest.raises(ConfigError):
            asm.assemble_bulk(mesh, vspace, pspace, coeffs,
                              np.zeros(vspace.n_vector_dofs), 0.0, params, 0.0)

    def test_advection_vanishes_for_zero_velocity(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(4, 32)
        sys_ = asm.assemble_bulk(mesh, vspace, pspace, coeffs,
                                 np.zeros(vspace.n_vector_dofs), 1e-3, params, 0.0)
        assert sys_.adv.nnz == 0 or abs(sys_.adv).max() == 0.0

    def test_advection_antisymmetric(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(4, 32)
        rng = np.random.default_rng(0)
        w = rng.normal(size=vspace.n_vector_dofs)
        sys_ = asm.assemble_bulk(mesh, vspace, pspace, coeffs, w, 1e-3, params, 0.0)
        at = (sys_.adv + sys_.adv.T)
        assert abs(at).max() < 1e-12 * abs(sys_.adv).max()
        for _ in range(5):
            xi = rng.normal(size=vspace.n_vector_dofs)
            q = xi @ (sys_.adv @ xi)
            assert abs(q) < 1e-12 * (xi @ xi) * max(1.0, abs(sys_.adv).max())

    def test_viscous_zero_for_translations(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(4, 32)
        sys_ = asm.assemble_bulk(mesh, vspace, pspace, coeffs,
                                 np.zeros(vspace.n_vector_dofs), 1e-3, params, 0.0)
        n = vspace.n_dofs
        cx = np.concatenate([np.ones(n), np.zeros(n)])
        cy = np.concatenate([np.zeros(n), np.ones(n)])
        for c in (cx, cy, 0.3 * cx - 1.7 * cy):
            assert abs(c @ (sys_.visc @ c)) < 1e-10

    def test_symmetric_part_positive_definite_on_free_dofs(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(4, 32)
        rng = np.random.default_rng(3)
        w = rng.normal(size=vspace.n_vector_dofs)
        sys_ = asm.assemble_bulk(mesh, vspace, pspace, coeffs, w, 1e-3, params, 0.0)
        free = sys_.free
        b_ff = sys_.b[free][:, free]
        for _ in range(20):
            xi = rng.normal(size=int(free.sum()))
            assert xi @ (b_ff @ xi) > 0

    def test_constant_pressure_column_annihilated(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(
            4, 32, variant=sp.P2P10)
        sys_ = asm.assemble_bulk(mesh, vspace, pspace, coeffs,
                                 np.zeros(vspace.n_vector_dofs), 1e-3, params, 0.0)
        free = sys_.free
        ones = pspace_ones = np.zeros(pspace.n_dofs)
        pspace_ones[:pspace.n_vertex_dofs] = 1.0
        col = sys_.c[free] @ pspace_ones
        assert np.abs(col).max() < 1e-12
        p0_ones = np.zeros(pspace.n_dofs)
        p0_ones[pspace.n_vertex_dofs:] = 1.0
        col = sys_.c[free] @ p0_ones
        assert np.abs(col).max() < 1e-12

    def test_mass_exactness_against_analytic(self):
        # single-phase density 1: integral of 1 over the domain
        mesh = bm.build_uniform((0, 1, 0, 2), 2)
        curve = InterfaceCurve.circle((0.5, 0.5), 0.25, 16)
        cls = bm.classify_elements(mesh, curve)
        vspace, pspace = sp.build_spaces(mesh, sp.P2P1, False)
        params = asm.PhysParams(1, 1, 1, 1, 0.0)
        coeffs = asm.discrete_coefficients(cls, params, asm.MIDPOINT)
        sys_ = asm.assemble_bulk(mesh, vspace, pspace, coeffs,
                                 np.zeros(vspace.n_vector_dofs), 1.0, params, 0.0)
        ones = np.ones(vspace.n_dofs)
        assert ones @ (sys_.mass_rho @ ones) == pytest.approx(2.0, abs=1e-12)

    def test_gravity_rhs_matches_weighted_area(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(4, 64)
        params.f1 = lambda pts, t: np.tile([0.0, -0.98], (len(pts), 1))
        sys_ = asm.assemble_bulk(mesh, vspace, pspace, coeffs,
                                 np.zeros(vspace.n_vector_dofs), 1e-3, params, 0.0)
        n = vspace.n_dofs
        total_fy = sys_.force[n:].sum()   # = -(0.98) * integral of rho^m
        rho_int = (coeffs.rho * mesh.areas(mesh.active_ids())).sum()
        assert total_fy == pytest.approx(-0.98 * rho_int, rel=1e-12)


class TestCoupling:
    def test_closed_curve_row_sum_zero(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(8, 64)
        n_bulk = asm.assemble_coupling(mesh, vspace, curve, cls)
        n = vspace.n_dofs
        ones_x = np.concatenate([np.ones(n), np.zeros(n)])
        ones_y = np.concatenate([np.zeros(n), np.ones(n)])
        total = n_bulk.T @ ones_x
        # sum_l <1, chi_l nu_x> = contour integral of nu_x = 0
        assert abs(total.sum()) < 1e-12
        assert abs((n_bulk.T @ ones_y).sum()) < 1e-12

    def test_simpson_matches_gauss_oracle(self):
        # randomized cut sub-segments, P2 x P1 integrand: Simpson is exact
        rng = np.random.default_rng(7)
        xg, wg = np.polynomial.legendre.leggauss(5)
        xg = 0.5 * (xg + 1)
        wg = 0.5 * wg
        mesh = bm.build_uniform((0, 1, 0, 1), 1)
        vspace, _ = sp.build_spaces(mesh, sp.P2P1, False)
        tri = mesh.tri_coords(mesh.active_ids()[:1])[0]
        for _ in range(1000):
            lam = rng.dirichlet((1, 1, 1), size=2)
            p0, p1 = lam @ tri
            seg = p1 - p0
            if np.linalg.norm(seg) < 1e-6:
                continue
            t0, t1 = sorted(rng.uniform(0, 1, 2))
            # Simpson as implemented: weights (2/3, 1/6, 1/6) on (mid, p0, p1)
            length = np.linalg.norm(p1 - p0)
            i_dof = rng.integers(0, 6)
            end = rng.integers(0, 2)

            def integrand(t):
                pt = p0 + t * (p1 - p0)
                lamt = sp.barycentric(tri, pt)
                phi = sp.p2_values(lamt)[i_dof]
                chi = (1 - (t0 + t * (t1 - t0))) if end == 0 else (t0 + t * (t1 - t0))
                return phi * chi

            simpson = length * (2 / 3 * integrand(0.5)
                                + 1 / 6 * integrand(0.0) + 1 / 6 * integrand(1.0))
            gauss = length * sum(w * integrand(x) for x, w in zip(xg, wg))
            assert simpson == pytest.approx(gauss, abs=1e-13)

    def test_matrix_simpson_matches_gauss(self):
        # full assembled coupling row equals a 5-point Gauss assembly
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(4, 16)
        nd = compute_normals(curve)
        n_bulk = asm.assemble_coupling(mesh, vspace, curve, cls, nd)
        xg, wg = np.polynomial.legendre.leggauss(5)
        xg = 0.5 * (xg + 1)
        wg = 0.5 * wg
        ku = vspace.n_dofs
        kg = curve.n_vertices
        ref = np.zeros((2 * ku, kg))
        ids = cls.element_ids
        for s in range(len(cls.sub_owner)):
            e = cls.sub_owner[s]
            tri = mesh.tri_coords(ids[e:e + 1])[0]
            dofs = vspace.elem_dofs[e]
            p0, p1 = cls.sub_p[s]
            t0, t1 = cls.sub_t[s]
            j = cls.sub_segment[s]
            nu = nd.segment_normals[j]
            length = np.linalg.norm(p1 - p0)
            for x, w in zip(xg, wg):
                pt = p0 + x * (p1 - p0)
                lamt = sp.barycentric(tri, pt)
                phi = sp.p2_values(lamt)
                tpar = t0 + x * (t1 - t0)
                for i in range(6):
                    ref[dofs[i], j] += w * length * phi[i] * (1 - tpar) * nu[0]
                    ref[dofs[i], (j + 1) % kg] += w * length * phi[i] * tpar * nu[0]
                    ref[ku + dofs[i], j] += w * length * phi[i] * (1 - tpar) * nu[1]
                    ref[ku + dofs[i], (j + 1) % kg] += w * length * phi[i] * tpar * nu[1]
        np.testing.assert_allclose(n_bulk.toarray(), ref, atol=1e-13)


class TestXfemColumn:
    def test_column_is_negative_row_sum(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(8, 64)
        n_bulk = asm.assemble_coupling(mesh, vspace, curve, cls)
        d = asm.assemble_xfem_column(n_bulk)
        np.testing.assert_array_equal(
            d, -np.asarray(n_bulk.sum(axis=1)).ravel())

    def test_constant_field_contraction_zero(self):
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(8, 64)
        n_bulk = asm.assemble_coupling(mesh, vspace, curve, cls)
        d = asm.assemble_xfem_column(n_bulk)
        n = vspace.n_dofs
        e1 = np.concatenate([np.ones(n), np.zeros(n)])
        assert abs(e1 @ d) < 1e-12

    def test_divergence_consistency_oracle(self):
        # (div xi, chi_minus) over the cut geometry vs the boundary column
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(8, 128)
        n_bulk = asm.assemble_coupling(mesh, vspace, curve, cls)
        d = asm.assemble_xfem_column(n_bulk)
        rng = np.random.default_rng(12)
        xi = rng.normal(size=vspace.n_vector_dofs)
        # volume oracle: integrate div(xi_h) over the minus phase by
        # subdividing every element and testing subcell centroids
        ids = mesh.active_ids()
        coords = mesh.tri_coords(ids)
        n = vspace.n_dofs
        total = 0.0
        levels = 5
        lam_corners = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        cells = [lam_corners]
        for _ in range(levels):
            nxt = []
            for cell in cells:
                m01 = 0.5 * (cell[0] + cell[1])
                m12 = 0.5 * (cell[1] + cell[2])
                m20 = 0.5 * (cell[2] + cell[0])
                nxt += [np.array([cell[0], m01, m20]),
                        np.array([m01, cell[1], m12]),
                        np.array([m20, m12, cell[2]]),
                        np.array([m01, m12, m20])]
            cells = nxt
        cents = np.array([c.mean(axis=0) for c in cells])     # (ncell, 3)
        grads_at = sp.p2_ref_grads(cents)                     # (ncell, 6, 2)
        frac_area = 1.0 / len(cells)
        for pos in range(len(ids)):
            tri = coords[pos]
            d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
            det = d1[0] * d2[1] - d1[1] * d2[0]
            inv_t = np.array([[d2[1], -d1[1]], [-d2[0], d1[0]]]) / det
            area = 0.5 * abs(det)
            pts = cents @ tri
            if cls.labels[pos] == bm.PLUS:
                continue
            if cls.labels[pos] == bm.MINUS:
                inside = np.ones(len(pts), dtype=bool)
            else:
                inside = bm._winding_bulk(curve, pts) != 0
            if not inside.any():
                continue
            gp = np.einsum("dr,cir->cid", inv_t, grads_at[:, :, :])
            dofs = vspace.elem_dofs[pos]
            div = (gp[..., 0] @ xi[dofs]) + (gp[..., 1] @ xi[n + dofs])
            total += area * frac_area * div[inside].sum()
        # the staircase phase boundary limits this oracle's accuracy
        assert -(d @ xi) == pytest.approx(total, abs=5e-3 * max(1.0, abs(total)))

    def test_divergence_identity_exact_for_polynomial_fields(self):
        # xi = (x, 0): div = 1, so the pairing equals the inner-phase area;
        # xi = (x^2/2, 0): pairing equals the inner-phase x moment.  Both
        # sides are exact for these P2-representable fields.
        mesh, curve, cls, vspace, pspace, params, coeffs = setup_problem(8, 128)
        n_bulk = asm.assemble_coupling(mesh, vspace, curve, cls)
        d = asm.assemble_xfem_column(n_bulk)
        n = vspace.n_dofs
        x = vspace.coords[:, 0]
        xi_lin = np.concatenate([x, np.zeros(n)])
        from twophase.interface import enclosed_area
        area = enclosed_area(curve)
        assert -(d @ xi_lin) == pytest.approx(area, abs=1e-12)
        xi_quad = np.concatenate([0.5 * x ** 2, np.zeros(n)])
        v = curve.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        x_moment = float(np.sum(cross * (v[:, 0] + w[:, 0])) / 6.0)
        assert -(d @ xi_quad) == pytest.approx(x_moment, abs=1e-12)


class TestInterfaceBlockAssembly:
    def test_shapes_and_symmetry(self):
        curve = InterfaceCurve.circle((0.5, 0.5), 0.25, 32)
        n_gamma, a_gamma = asm.assemble_interface(curve)
        assert n_gamma.shape == (32, 64)
        assert a_gamma.shape == (64, 64)
        assert abs(a_gamma - a_gamma.T).max() < 1e-14
