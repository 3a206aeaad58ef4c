import numpy as np
import pytest

from densityctl.errors import DimensionError
from densityctl.grid import (
    Boundary,
    Disc,
    Grid,
    Rect,
    build_advection,
    build_gradient,
    build_laplacian,
    integrate,
    mask_from_geometry,
)


def make_grid(n=64, size=4.0, boundary=Boundary.PERIODIC):
    return Grid(n, n, size / n, boundary=boundary)


class TestGridBasics:
    def test_validation(self):
        with pytest.raises(ValueError):
            Grid(2, 8, 0.1)
        with pytest.raises(ValueError):
            Grid(8, 8, 0.0)

    def test_flatten_unflatten_roundtrip(self):
        g = Grid(7, 5, 0.25)
        k = np.arange(g.n_cells)
        ix, iy = g.unflatten_index(k)
        assert np.array_equal(g.flatten_index(ix, iy), k)
        assert ix.max() == 6 and iy.max() == 4

    def test_cell_of_centers(self):
        g = make_grid(8, 4.0)
        xs, ys = g.cell_centers()
        for k in (0, 13, 63):
            assert g.cell_of((xs[k], ys[k])) == k

    def test_confine_periodic_wraps(self):
        g = make_grid(8, 4.0)
        p = g.confine(np.array([4.5, -0.5]))
        assert p == pytest.approx([0.5, 3.5])

    def test_confine_neumann_reflects(self):
        g = make_grid(8, 4.0, Boundary.NEUMANN)
        p = g.confine(np.array([4.5, -0.5]))
        assert p == pytest.approx([3.5, 0.5])


class TestLaplacian:
    @pytest.mark.parametrize("boundary", [Boundary.PERIODIC, Boundary.NEUMANN])
    def test_annihilates_constants(self, boundary):
        g = make_grid(16, 4.0, boundary)
        v = np.full(g.n_cells, 7.0)
        assert np.abs(build_laplacian(g) @ v).max() == 0.0

    def test_sine_is_discrete_eigenvector(self):
        # 1D stencil applied to sin(2 pi x / Lx) scales it by the discrete
        # Fourier eigenvalue -(2 - 2 cos(2 pi l / Lx)) / l^2
        g = make_grid(64, 4.0)
        xs, _ = g.cell_centers()
        lx = g.extent[0]
        v = np.sin(2.0 * np.pi * xs / lx)
        lam = -(2.0 - 2.0 * np.cos(2.0 * np.pi * g.spacing / lx)) / g.spacing**2
        bv = build_laplacian(g) @ v
        assert np.max(np.abs(bv - lam * v)) <= 1e-12 * np.max(np.abs(lam * v))

    def test_exact_on_quadratics_interior(self):
        g = make_grid(32, 4.0, Boundary.NEUMANN)
        xs, ys = g.cell_centers()
        v = xs**2 + ys**2
        bv = build_laplacian(g) @ v
        ix, iy = g.unflatten_index(np.arange(g.n_cells))
        interior = (ix > 0) & (ix < g.nx - 1) & (iy > 0) & (iy < g.ny - 1)
        assert np.abs(bv[interior] - 4.0).max() <= 1e-9

    @pytest.mark.parametrize("boundary", [Boundary.PERIODIC, Boundary.NEUMANN])
    def test_zero_row_sums(self, boundary):
        g = make_grid(12, 4.0, boundary)
        row_sums = np.asarray(build_laplacian(g).sum(axis=1)).ravel()
        assert np.abs(row_sums).max() <= 1e-12 / g.spacing**2

    def test_second_order_convergence(self):
        # periodic-compatible smooth field; halving the spacing should cut
        # the max stencil error by roughly 4
        errors = []
        for n in (32, 64):
            g = make_grid(n, 4.0)
            xs, ys = g.cell_centers()
            lx, ly = g.extent
            v = np.sin(2 * np.pi * xs / lx) * np.sin(4 * np.pi * ys / ly)
            exact = -((2 * np.pi / lx) ** 2 + (4 * np.pi / ly) ** 2) * v
            errors.append(np.abs(build_laplacian(g) @ v - exact).max())
        ratio = errors[0] / errors[1]
        assert 3.5 <= ratio <= 4.5

    def test_conservation_periodic(self):
        g = make_grid(16, 4.0)
        rng = np.random.default_rng(7)
        v = rng.random(g.n_cells)
        total = (build_laplacian(g) @ v).sum()
        scale = np.abs(build_laplacian(g) @ v).sum()
        assert abs(total) <= 1e-10 * max(scale, 1.0)

    def test_linearity_exact(self):
        # integer fields and power-of-two spacing make both sides bit-exact
        g = Grid(8, 8, 0.5)
        rng = np.random.default_rng(3)
        v = rng.integers(-8, 8, g.n_cells).astype(float)
        w = rng.integers(-8, 8, g.n_cells).astype(float)
        B = build_laplacian(g)
        left = B @ (2.0 * v + 4.0 * w)
        right = 2.0 * (B @ v) + 4.0 * (B @ w)
        assert np.array_equal(left, right)


class TestAdvection:
    def test_constant_kernel_gives_zero_columns(self):
        g = make_grid(16, 4.0)
        cols = build_advection(g, np.full(g.n_cells, 3.3))
        assert np.abs(cols).max() == 0.0

    def test_length_mismatch_raises(self):
        g = make_grid(8, 4.0)
        with pytest.raises(DimensionError):
            build_advection(g, np.ones(10))

    def test_linear_field_neumann_interior(self):
        g = make_grid(16, 4.0, Boundary.NEUMANN)
        xs, _ = g.cell_centers()
        cols = build_advection(g, xs)
        ix, iy = g.unflatten_index(np.arange(g.n_cells))
        interior = (ix > 0) & (ix < g.nx - 1)
        assert np.abs(cols[interior, 0] + 1.0).max() <= 1e-12

    def test_gaussian_gradient_convergence(self):
        # analytic gradient of a centered Gaussian as the oracle; refining
        # the grid by 2 must shrink the max error by at least 3.5
        sigma = 0.35
        errs = []
        for n in (64, 128):
            g = make_grid(n, 4.0)
            xs, ys = g.cell_centers()
            dx, dy = xs - 2.0, ys - 2.0
            kernel = np.exp(-(dx**2 + dy**2) / (2 * sigma**2))
            cols = build_advection(g, kernel)
            exact_x = (dx / sigma**2) * kernel  # -d/dx of the kernel
            errs.append(np.abs(cols[:, 0] - exact_x).max())
        assert errs[0] / errs[1] >= 3.5

    def test_conservation_periodic(self):
        g = make_grid(16, 4.0)
        rng = np.random.default_rng(11)
        kernel = rng.random(g.n_cells)
        cols = build_advection(g, kernel)
        for j in (0, 1):
            assert abs(cols[:, j].sum()) <= 1e-10 * np.abs(cols[:, j]).sum()


class TestIntegrateAndMasks:
    def test_unit_field_gives_domain_area(self):
        g = make_grid(64, 4.0)
        assert integrate(g, np.ones(g.n_cells)) == pytest.approx(16.0)

    def test_masked_unit_field_counts_cells(self):
        g = make_grid(16, 4.0)
        mask = mask_from_geometry(g, [Disc((2.0, 2.0), 0.6)])
        k = len(mask)
        assert k > 0
        assert integrate(g, np.ones(g.n_cells), mask) == pytest.approx(k * g.spacing**2)

    def test_gaussian_kernel_mass(self):
        # analytic mass of exp(-0.5 r^2 / sigma_p^2) is 2 pi sigma_p^2
        sigma_p = 0.15
        g = make_grid(64, 4.0)
        xs, ys = g.cell_centers()
        kernel = np.exp(-((xs - 2.0) ** 2 + (ys - 2.0) ** 2) / (2 * sigma_p**2))
        exact = 2.0 * np.pi * sigma_p**2
        assert integrate(g, kernel) == pytest.approx(exact, rel=0.01)

    def test_zero_radius_disc_empty(self):
        g = make_grid(16, 4.0)
        assert mask_from_geometry(g, [Disc((2.0, 2.0), 0.0)]).is_empty

    def test_full_domain_rect(self):
        g = make_grid(16, 4.0)
        mask = mask_from_geometry(g, [Rect(0.0, 0.0, 4.0, 4.0)])
        assert len(mask) == g.n_cells

    def test_disc_area_convergence(self):
        g = make_grid(64, 4.0)
        mask = mask_from_geometry(g, [Disc((2.0, 2.0), 0.5)])
        area = len(mask) * g.spacing**2
        assert area == pytest.approx(np.pi * 0.25, rel=0.05)

    def test_boundary_touch_flagged(self):
        g = make_grid(16, 4.0)
        with pytest.warns(UserWarning):
            mask = mask_from_geometry(g, [Disc((0.1, 0.1), 0.5)])
        assert mask.touches_boundary

    def test_membership_matches_geometry(self):
        g = make_grid(32, 4.0)
        shapes = [Disc((1.0, 2.5), 0.4), Rect(2.2, 0.4, 3.4, 1.2)]
        mask = mask_from_geometry(g, shapes)
        xs, ys = g.cell_centers()
        inside = np.zeros(g.n_cells, dtype=bool)
        for s in shapes:
            inside |= s.contains(xs, ys)
        assert np.array_equal(np.flatnonzero(inside), mask.indices)


class TestGradientOperators:
    def test_gradient_periodic_sine_accuracy(self):
        g = make_grid(128, 4.0)
        xs, _ = g.cell_centers()
        lx = g.extent[0]
        dx_op, _ = build_gradient(g)
        v = np.sin(2 * np.pi * xs / lx)
        k = 2 * np.pi / lx
        exact = k * np.cos(k * xs)
        # central differences of sin(kx) carry absolute error k (k l)^2 / 6
        assert np.abs(dx_op @ v - exact).max() <= 0.2 * k * (k * g.spacing) ** 2
