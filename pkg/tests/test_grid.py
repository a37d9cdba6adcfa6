from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magdiff import Distribution, ValidationError, build_grid
from magdiff.errors import GridMismatchError
from magdiff.grid import (
    MAXWELL_NORM,
    anisotropic_part,
    cyl_average,
    dump_distribution,
    flux,
    gyration,
    load_distribution,
    mass,
    maxwellian,
    partial_average,
    random_distribution,
    rotate,
    weighted_inner,
    weighted_norm,
)


def _vx_m(g):
    return Distribution(g, g.vx * g.maxwellian)


def _vy_m(g):
    return Distribution(g, g.vy * g.maxwellian)


class TestBuildGrid:
    def test_default_sizes(self, grid):
        assert grid.size == 8 * 16 * 16
        assert grid.nodes.shape == (grid.size, 3)
        assert np.all(grid.weights > 0)

    def test_truncation_deficit_small(self, grid):
        # mass outside the truncated cylinder
        assert 0.0 <= grid.truncation_deficit < 1e-6

    def test_mass_within_declared_tolerance(self, grid):
        assert abs(grid.deficit) <= grid.tol_mass

    def test_deficit_shrinks_with_refinement(self):
        coarse = build_grid(8, 16, 16, 6.0, 6.0)
        fine = build_grid(16, 16, 32, 8.0, 8.0)
        assert abs(fine.deficit) < abs(coarse.deficit)
        assert abs(fine.deficit) < 1e-6

    def test_coarse_grid_reports_large_deficit(self):
        g = build_grid(2, 2, 2, 1.0, 1.0)
        assert g.size == 8
        assert g.truncation_deficit > 0.5
        assert abs(g.deficit) <= g.tol_mass

    @pytest.mark.parametrize("args,field", [
        ((0, 16, 16, 6, 6), "n_radial"),
        ((8, 1, 16, 6, 6), "n_angle"),
        ((8, 16, -3, 6, 6), "n_parallel"),
        ((8, 16, 16, 0.0, 6), "v_max_perp"),
        ((8, 16, 16, 6, float("nan")), "v_max_par"),
    ])
    def test_rejects_bad_sizes(self, args, field):
        with pytest.raises(ValidationError) as exc:
            build_grid(*args)
        assert exc.value.field == field

    def test_angle_spacing_exact(self, grid):
        assert np.allclose(np.diff(grid.theta), 2 * np.pi / grid.n_angle, rtol=0, atol=1e-15)


class TestMaxwellian:
    def test_value_at_origin(self):
        g = build_grid(2, 4, 3)  # odd parallel count puts a node at v_z = 0
        m = maxwellian(g).values
        speed2 = np.sum(g.nodes**2, axis=1)
        np.testing.assert_allclose(m, (2 * np.pi) ** -1.5 * np.exp(-0.5 * speed2), rtol=1e-15)
        assert MAXWELL_NORM == pytest.approx(0.063493635934240969, rel=1e-15)

    def test_value_at_speed_sqrt2(self, grid):
        from magdiff.grid import maxwellian_values
        v = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, math.sqrt(2.0)]])
        np.testing.assert_allclose(maxwellian_values(v), (2 * np.pi) ** -1.5 * math.exp(-1.0), rtol=1e-15)

    def test_normalization(self, grid):
        assert abs(mass(maxwellian(grid)) - 1.0) <= grid.tol_mass


class TestRotate:
    def test_identity(self, grid, rng):
        f = random_distribution(grid, rng)
        np.testing.assert_array_equal(rotate(f, 0.0).values, f.values)

    def test_quarter_turn_vx_to_vy(self, grid):
        out = rotate(_vx_m(grid), np.pi / 2)
        np.testing.assert_allclose(out.values, _vy_m(grid).values, atol=1e-15)

    def test_full_turn(self, grid, rng):
        f = random_distribution(grid, rng)
        np.testing.assert_allclose(rotate(f, 2 * np.pi).values, f.values, rtol=0, atol=1e-15)

    def test_grid_multiple_is_permutation(self, grid, rng):
        f = random_distribution(grid, rng)
        out = rotate(f, 3 * grid.d_theta)
        assert sorted(out.values) == sorted(f.values)
        assert mass(out) == pytest.approx(mass(f), rel=1e-13)

    def test_off_grid_angle_matches_closed_form(self, grid):
        tau = 0.37
        out = rotate(_vx_m(grid), tau)
        # f(R(tau) v) for f = v_x M: first component of R(tau) v
        want = (math.cos(tau) * grid.vx + math.sin(tau) * grid.vy) * grid.maxwellian
        np.testing.assert_allclose(out.values, want, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_group_property(self, a, b):
        g = build_grid(3, 8, 4)
        f = random_distribution(g, np.random.default_rng(1), smooth=True)
        lhs = rotate(rotate(f, a), b).values
        rhs = rotate(f, a + b).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * np.max(np.abs(f.values)))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 2 * np.pi))
    def test_isometry_below_nyquist(self, tau):
        g = build_grid(3, 8, 4)
        f = random_distribution(g, np.random.default_rng(2), smooth=True)
        assert weighted_norm(rotate(f, tau)) == pytest.approx(weighted_norm(f), rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 2 * np.pi))
    def test_never_expands(self, tau):
        # the Nyquist mode has no sine partner and is damped by cos(K tau)
        g = build_grid(3, 8, 4)
        f = random_distribution(g, np.random.default_rng(2))
        assert weighted_norm(rotate(f, tau)) <= weighted_norm(f) * (1 + 1e-13)


class TestAverages:
    def test_maxwellian_fixed(self, grid):
        np.testing.assert_allclose(cyl_average(maxwellian(grid)).values, grid.maxwellian, rtol=1e-14)

    def test_odd_mode_vanishes(self, grid):
        assert np.max(np.abs(cyl_average(_vx_m(grid)).values)) < 1e-15 * np.max(grid.maxwellian)

    def test_projector(self, grid, rng):
        for _ in range(20):
            f = random_distribution(grid, rng)
            g = random_distribution(grid, rng)
            af = cyl_average(f)
            np.testing.assert_allclose(cyl_average(af).values, af.values, atol=1e-15)
            assert weighted_inner(af, g) == pytest.approx(weighted_inner(f, cyl_average(g)), rel=1e-12)

    def test_partial_average_endpoints(self, grid, rng):
        f = random_distribution(grid, rng)
        np.testing.assert_allclose(partial_average(f, 2 * np.pi).values, cyl_average(f).values, atol=1e-15)
        assert np.all(partial_average(f, 0.0).values == 0.0)

    def test_partial_average_half_turn_of_maxwellian(self, grid):
        np.testing.assert_allclose(partial_average(maxwellian(grid), np.pi).values,
                                   0.5 * grid.maxwellian, rtol=1e-14)

    def test_partial_average_closed_form(self, grid):
        # (1/2pi) int_0^tau (cos s v_x + sin s v_y) ds M
        tau = 1.1
        out = partial_average(_vx_m(grid), tau).values
        want = (math.sin(tau) * grid.vx + (1 - math.cos(tau)) * grid.vy) * grid.maxwellian / (2 * np.pi)
        np.testing.assert_allclose(out, want, atol=1e-15)

    @pytest.mark.parametrize("tau", [-0.1, 2 * np.pi + 1e-6])
    def test_partial_average_range(self, grid, tau):
        with pytest.raises(ValidationError):
            partial_average(maxwellian(grid), tau)


class TestGyration:
    def test_kernel(self, grid):
        assert np.max(np.abs(gyration(maxwellian(grid)).values)) < 1e-14 * np.max(grid.maxwellian)

    def test_vx_to_vy(self, grid):
        np.testing.assert_allclose(gyration(_vx_m(grid)).values, _vy_m(grid).values, atol=1e-15)

    def test_matches_finite_difference_of_rotation(self, grid, rng):
        f = random_distribution(grid, rng, smooth=True)
        h = 1e-5
        fd = (rotate(f, h).values - rotate(f, -h).values) / (2 * h)
        np.testing.assert_allclose(gyration(f).values, fd, atol=1e-9 * np.max(np.abs(f.values)))

    def test_skew_and_zero_mass(self, grid, rng):
        for _ in range(20):
            f = random_distribution(grid, rng)
            g = random_distribution(grid, rng)
            gf = gyration(f)
            assert abs(mass(gf)) < 1e-15
            assert abs(weighted_inner(gf, f)) < 1e-12 * weighted_norm(f) ** 2
            assert weighted_inner(gf, g) == pytest.approx(-weighted_inner(f, gyration(g)), abs=1e-12)

    def test_average_annihilates_gyration(self, grid, rng):
        f = random_distribution(grid, rng)
        assert np.max(np.abs(cyl_average(gyration(f)).values)) < 1e-15

    def test_kernel_equals_symmetric_functions(self, grid, rng):
        f = random_distribution(grid, rng)
        sym = cyl_average(f)
        assert np.max(np.abs(gyration(sym).values)) < 1e-15
        assert weighted_norm(gyration(anisotropic_part(f))) > 0.1 * weighted_norm(anisotropic_part(f))


class TestMoments:
    def test_norm_of_maxwellian(self, grid):
        assert abs(weighted_norm(maxwellian(grid)) ** 2 - 1) <= grid.tol_mass

    def test_odd_mass(self, grid):
        assert abs(mass(Distribution(grid, grid.vz * grid.maxwellian))) < 1e-16

    def test_second_moment(self, grid):
        # int v_z^2 M = 1 up to the quadrature error of the default grid
        fz = flux(Distribution(grid, grid.vz * grid.maxwellian))
        assert fz[2] == pytest.approx(1.0, abs=5e-4)
        fine = build_grid(16, 32, 32)
        assert flux(Distribution(fine, fine.vz * fine.maxwellian))[2] == pytest.approx(1.0, abs=1e-6)

    def test_grid_mismatch(self, grid, small_grid):
        with pytest.raises(GridMismatchError):
            weighted_inner(maxwellian(grid), maxwellian(small_grid))
        with pytest.raises(GridMismatchError):
            maxwellian(grid) + maxwellian(small_grid)


class TestDistribution:
    def test_rejects_nonfinite(self, grid):
        vals = np.zeros(grid.size)
        vals[3] = np.nan
        with pytest.raises(ValidationError):
            Distribution(grid, vals)

    def test_immutable(self, grid):
        f = maxwellian(grid)
        with pytest.raises(ValueError):
            f.values[0] = 1.0

    def test_csv_roundtrip(self, grid, rng, tmp_path):
        f = random_distribution(grid, rng)
        path = dump_distribution(f, tmp_path / "f.csv")
        assert path.read_text().splitlines()[0] == "v_x,v_y,v_z,weight,value"
        back = load_distribution(path, grid)
        np.testing.assert_array_equal(back.values, f.values)

    def test_csv_wrong_grid(self, grid, small_grid, tmp_path):
        path = dump_distribution(maxwellian(small_grid), tmp_path / "m.csv")
        with pytest.raises(GridMismatchError):
            load_distribution(path, grid)
