"""Terrain geometry, roughness, and curriculum schedule tests."""

import numpy as np
import pytest

from chimneyclimb.terrain import (
    CGCLConfig,
    InvalidSpec,
    OutOfBounds,
    TerrainProfile,
    TerrainSpec,
    curriculum_params,
    export_heightfield_csv,
    junction_x,
    make_terrain,
    surface_query,
)


class TestJunctionGeometry:
    def test_tangency_point(self):
        spec = TerrainSpec(wall_width=1.0, junction_r=0.3)
        assert np.isclose(junction_x(1.0, spec), 0.5, atol=1e-12)

    def test_half_height_value(self):
        spec = TerrainSpec(wall_width=1.0, junction_r=0.3)
        expected = 0.2 + 0.3 * np.sqrt(0.75)
        assert np.isclose(junction_x(0.5, spec), expected, atol=1e-12)

    @pytest.mark.parametrize("r", [0.05, 0.15, 0.3])
    def test_quarter_ellipse_identity(self, r):
        w = 1.0
        spec = TerrainSpec(wall_width=w, junction_r=r)
        z = np.linspace(1e-6, 1.0, 4001)
        x = junction_x(z, spec)
        lhs = ((np.abs(x) - (w / 2 - r)) / r) ** 2 + (z - 1.0) ** 2
        assert np.max(np.abs(lhs - 1.0)) < 1e-9

    def test_r_zero_vertical_walls(self):
        spec = TerrainSpec(wall_width=0.9, junction_r=0.0)
        z = np.linspace(0.0, 4.0, 2001)
        assert np.all(junction_x(z, spec) == 0.45)
        assert np.all(junction_x(z, spec, side="left") == -0.45)

    def test_mirror_symmetry(self):
        spec = TerrainSpec(wall_width=1.1, junction_r=0.2)
        z = np.linspace(0.0, 4.0, 101)
        assert np.allclose(
            junction_x(z, spec, "right"), -junction_x(z, spec, "left")
        )

    def test_continuity(self):
        spec = TerrainSpec(wall_width=1.0, junction_r=0.3)
        z = np.linspace(0.0, 2.0, 200001)
        x = junction_x(z, spec)
        # The ellipse meets the floor with a vertical x(z) tangent, so the
        # step bound scales like sqrt(dz) near z=0 and is linear elsewhere.
        assert np.max(np.abs(np.diff(x))) < 0.3 * np.sqrt(2.0 * (z[1] - z[0]))
        away = z[:-1] > 0.01
        assert np.max(np.abs(np.diff(x))[away]) < 1e-4

    def test_out_of_bounds(self):
        spec = TerrainSpec()
        with pytest.raises(OutOfBounds):
            junction_x(-0.5, spec)
        with pytest.raises(OutOfBounds):
            junction_x(spec.wall_height + 1.0, spec)

    def test_invalid_specs(self):
        with pytest.raises(InvalidSpec):
            TerrainSpec(wall_width=0.4, junction_r=0.3)
        with pytest.raises(InvalidSpec):
            TerrainSpec(roughness_amp=-0.01)
        with pytest.raises(InvalidSpec):
            TerrainSpec(wall_height=0.5)


class TestProfile:
    def test_smooth_profile_matches_junction(self):
        spec = TerrainSpec(wall_width=1.0, junction_r=0.3, roughness_amp=0.0)
        profile = make_terrain(spec)
        z = np.linspace(0.05, 3.9, 500)
        x = profile._surface_x(z, "right")
        assert np.max(np.abs(x - junction_x(z, spec))) < 1e-5
        # The floor/fillet part is checked through distance queries instead,
        # since x(z) interpolation is only defined on the z-monotone wall.
        zf = np.linspace(0.0, 1.0, 200)
        pts = np.column_stack([junction_x(zf, spec), zf])
        d, _ = profile.query_batch(pts)
        assert np.max(np.abs(d)) < profile.resolution

    def test_same_seed_identical(self):
        spec = TerrainSpec(roughness_amp=0.02, seed=42)
        p1, p2 = make_terrain(spec), make_terrain(spec)
        for side in ("left", "right"):
            assert np.array_equal(p1.surface_points(side), p2.surface_points(side))

    def test_different_seed_differs(self):
        a = make_terrain(TerrainSpec(roughness_amp=0.02, seed=1))
        b = make_terrain(TerrainSpec(roughness_amp=0.02, seed=2))
        assert not np.array_equal(a.surface_points("right"), b.surface_points("right"))

    def test_roughness_bounded(self):
        amp = 0.02
        spec = TerrainSpec(wall_width=1.0, junction_r=0.2, roughness_amp=amp, seed=7)
        profile = make_terrain(spec)
        smooth = make_terrain(
            TerrainSpec(wall_width=1.0, junction_r=0.2, roughness_amp=0.0)
        )
        for side in ("left", "right"):
            pts = profile.surface_points(side)
            idx = np.random.default_rng(0).integers(0, len(pts), size=10_000)
            # Displacement is along the local normal with |delta| <= amp, so
            # distance to the smooth surface is bounded by amp.
            d = np.abs(smooth.query_batch(pts[idx])[0])
            assert np.max(d) <= amp + 1e-9


class TestSurfaceQuery:
    def test_gap_center_vertical_section(self):
        profile = make_terrain(TerrainSpec(wall_width=1.0, junction_r=0.3))
        d, n = surface_query(profile, (0.0, 2.0))
        assert np.isclose(d, 0.5, atol=2e-3)
        assert np.isclose(abs(n[0]), 1.0, atol=1e-6)

    def test_point_on_surface(self):
        spec = TerrainSpec(wall_width=1.0, junction_r=0.3)
        profile = make_terrain(spec)
        x = junction_x(0.6, spec)
        d, _ = surface_query(profile, (x, 0.6))
        assert abs(d) < 1e-3

    def test_inside_solid_negative(self):
        profile = make_terrain(TerrainSpec(wall_width=1.0, junction_r=0.0))
        d, n = surface_query(profile, (0.6, 2.0))
        assert d < 0
        assert n[0] < 0  # free space is toward the gap

    def test_out_of_bounds(self):
        profile = make_terrain(TerrainSpec())
        with pytest.raises(OutOfBounds):
            profile.query((0.0, 100.0))

    def test_brute_force_oracle(self):
        spec = TerrainSpec(wall_width=1.0, junction_r=0.25, roughness_amp=0.015, seed=3)
        profile = make_terrain(spec)
        surface = np.concatenate(
            [profile.surface_points("left"), profile.surface_points("right")]
        )
        rng = np.random.default_rng(11)
        pts = np.column_stack(
            [rng.uniform(-0.7, 0.7, 1000), rng.uniform(0.05, 3.5, 1000)]
        )
        for p in pts:
            d, _ = profile.query(p)
            brute = np.min(np.linalg.norm(surface - p, axis=1))
            assert abs(abs(d) - brute) <= profile.resolution

    def test_wall_query_ignores_floor(self):
        profile = make_terrain(TerrainSpec(wall_width=1.0, junction_r=0.0))
        d, n = profile.wall_query((0.0, 0.05))  # near the floor, mid gap
        assert np.isclose(d, 0.5, atol=1e-3)
        assert np.isclose(abs(n[0]), 1.0, atol=1e-6)


class TestCurriculum:
    def test_endpoints(self):
        cfg = CGCLConfig()
        lv0 = curriculum_params(0, cfg)
        assert lv0.r_of_level == 0.3 and lv0.roughness_of_level == 0.0
        lvL = curriculum_params(cfg.levels, cfg)
        assert lvL.r_of_level == 0.0
        assert lvL.roughness_of_level == cfg.roughness_max

    def test_midpoint(self):
        cfg = CGCLConfig(levels=10)
        assert np.isclose(curriculum_params(5, cfg).r_of_level, 0.15)

    def test_monotone(self):
        cfg = CGCLConfig()
        rs = [curriculum_params(i, cfg).r_of_level for i in range(cfg.levels + 1)]
        amps = [
            curriculum_params(i, cfg).roughness_of_level
            for i in range(cfg.levels + 1)
        ]
        assert all(a > b for a, b in zip(rs, rs[1:]))
        assert all(a <= b for a, b in zip(amps, amps[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            curriculum_params(-1)
        with pytest.raises(ValueError):
            curriculum_params(CGCLConfig().levels + 1)


class TestExport:
    def test_vertical_wall_export(self, tmp_path):
        profile = make_terrain(TerrainSpec(wall_width=0.9, junction_r=0.0))
        path = tmp_path / "hf.csv"
        export_heightfield_csv(profile, path, meta="test")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == "z,x_left,x_right"
        for line in lines[2:]:
            z, xl, xr = (float(v) for v in line.split(","))
            if z > 0.0:
                assert np.isclose(xl, -0.45, atol=1e-9)
                assert np.isclose(xr, 0.45, atol=1e-9)
