import json

import numpy as np
import pytest

from mimopos.channel import (SPEED_OF_LIGHT, ArrayGeometry, Box, OFDMConfig,
                             PathParam, PathSet, arrival_direction,
                             generate_scene, load_scene, paths_for_position,
                             sample_gains, save_scene, sfcrm, steering,
                             steering_horizontal, steering_vertical)


class TestGeometry:
    def test_default_spacing_is_half_wavelength(self):
        geom = ArrayGeometry(rows=4, cols=8, wavelength=0.3)
        assert geom.spacing_v == pytest.approx(0.15)
        assert geom.spacing_h == pytest.approx(0.15)
        assert geom.n_antennas == 32

    def test_explicit_spacing_kept(self):
        geom = ArrayGeometry(rows=2, cols=2, wavelength=0.3, spacing_v=0.1)
        assert geom.spacing_v == pytest.approx(0.1)
        assert geom.spacing_h == pytest.approx(0.15)

    @pytest.mark.parametrize("kwargs", [
        {"rows": 0, "cols": 4},
        {"rows": 4, "cols": 0},
        {"rows": 4, "cols": 4, "wavelength": 0.0},
    ])
    def test_invalid_geometry_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ArrayGeometry(**kwargs)

    @pytest.mark.parametrize("kwargs", [
        {"n_subcarriers": 0, "guard_len": 1, "sample_interval": 1e-8},
        {"n_subcarriers": 64, "guard_len": 0, "sample_interval": 1e-8},
        {"n_subcarriers": 64, "guard_len": 65, "sample_interval": 1e-8},
        {"n_subcarriers": 64, "guard_len": 16, "sample_interval": 0.0},
    ])
    def test_invalid_ofdm_rejected(self, kwargs):
        with pytest.raises(ValueError):
            OFDMConfig(**kwargs)


class TestSteering:
    def test_entries_unit_modulus_and_first_one(self, geometry):
        vec = steering(geometry, 1.1, 0.4)
        assert vec.shape == (geometry.n_antennas,)
        np.testing.assert_allclose(np.abs(vec), 1.0, atol=1e-12)
        assert vec[0] == pytest.approx(1.0)

    def test_elementwise_phase_formula(self, geometry):
        # independent recomputation straight from the array layout
        elevation, azimuth = 1.2, 0.7
        vec = steering(geometry, elevation, azimuth)
        for m, n in [(0, 0), (1, 3), (5, 9), (7, 15)]:
            phase = -2 * np.pi * 0.5 * (m * np.cos(elevation)
                                        + n * np.sin(elevation)
                                        * np.cos(azimuth))
            expected = np.exp(1j * phase)
            assert vec[m * geometry.cols + n] == pytest.approx(expected)

    def test_kron_ordering(self, geometry):
        elevation, azimuth = 0.9, 2.2
        vert = steering_vertical(geometry, elevation)
        horiz = steering_horizontal(geometry, elevation, azimuth)
        vec = steering(geometry, elevation, azimuth)
        outer = np.outer(vert, horiz).ravel()
        np.testing.assert_allclose(vec, outer, atol=1e-12)

    def test_vertical_ignores_azimuth(self, geometry):
        a = steering_vertical(geometry, 1.0)
        assert a.shape == (geometry.rows,)


class TestGains:
    def test_shapes(self, three_paths, rng):
        assert sample_gains(three_paths, rng).shape == (3,)
        assert sample_gains(three_paths, rng, size=50).shape == (50, 3)

    def test_moments_match_powers(self, three_paths):
        rng = np.random.default_rng(7)
        draws = sample_gains(three_paths, rng, size=200_000)
        mean = draws.mean(axis=0)
        var = np.mean(np.abs(draws) ** 2, axis=0)
        np.testing.assert_allclose(np.abs(mean), 0.0, atol=5e-3)
        np.testing.assert_allclose(var, three_paths.powers, rtol=2e-2)

    def test_negative_power_rejected(self, rng):
        bad = PathSet(paths=[PathParam(1.0, 1.0, 2.0, -0.1)])
        with pytest.raises(ValueError):
            sample_gains(bad, rng)


class TestSfcrm:
    def test_against_elementwise_sum(self, geometry, ofdm, three_paths, rng):
        gains = sample_gains(three_paths, rng)
        h = sfcrm(three_paths, gains, geometry, ofdm)
        assert h.shape == (geometry.n_antennas, ofdm.n_subcarriers)
        # brute-force re-evaluation of a few entries
        for i, l in [(0, 0), (17, 5), (101, 63)]:
            total = 0.0
            for g, p in zip(gains, three_paths):
                total += (g * steering(geometry, p.elevation, p.azimuth)[i]
                          * np.exp(-2j * np.pi * l * p.delay
                                   / ofdm.n_subcarriers))
            assert h[i, l] == pytest.approx(total)

    def test_batched_matches_looped(self, geometry, ofdm, three_paths, rng):
        gains = sample_gains(three_paths, rng, size=4)
        batched = sfcrm(three_paths, gains, geometry, ofdm)
        assert batched.shape == (4, geometry.n_antennas, ofdm.n_subcarriers)
        for b in range(4):
            single = sfcrm(three_paths, gains[b], geometry, ofdm)
            np.testing.assert_allclose(batched[b], single, atol=1e-12)

    def test_gain_count_mismatch_rejected(self, geometry, ofdm, three_paths):
        with pytest.raises(ValueError):
            sfcrm(three_paths, np.ones(2), geometry, ofdm)


class TestScene:
    def test_generate_scene_respects_margin(self):
        bounds = Box((-5.0, -5.0, 0.0), (5.0, 5.0, 9.0))
        scene = generate_scene(bounds, (-100.0, 0.0, 25.0), 64, seed=3,
                               margin=20.0)
        assert scene.scatterers.shape == (64, 3)
        assert np.all(scene.scatterers[:, 0] >= -25.0)
        assert np.all(scene.scatterers[:, 0] <= 25.0)
        assert np.all(scene.scatterers[:, 2] >= 0.0)
        assert np.all(scene.scatterers[:, 2] <= 29.0)

    def test_generate_scene_deterministic(self):
        bounds = Box((-5.0, -5.0, 0.0), (5.0, 5.0, 9.0))
        a = generate_scene(bounds, (-100.0, 0.0, 25.0), 16, seed=11)
        b = generate_scene(bounds, (-100.0, 0.0, 25.0), 16, seed=11)
        c = generate_scene(bounds, (-100.0, 0.0, 25.0), 16, seed=12)
        np.testing.assert_array_equal(a.scatterers, b.scatterers)
        np.testing.assert_array_equal(a.gains_db, b.gains_db)
        assert not np.array_equal(a.scatterers, c.scatterers)

    def test_arrival_direction_known_vector(self):
        scene = generate_scene(Box((-1, -1, 0), (1, 1, 1)), (0.0, 0.0, 0.0),
                               1, seed=0)
        # direction (0, 1, 1): 45 degrees off vertical, along the array axis
        elevation, azimuth = arrival_direction(scene, (0.0, 1.0, 1.0))
        assert elevation == pytest.approx(np.pi / 4)
        assert azimuth == pytest.approx(0.0)
        # direction (1, 0, 0): horizontal, perpendicular to the array axis
        elevation, azimuth = arrival_direction(scene, (1.0, 0.0, 0.0))
        assert elevation == pytest.approx(np.pi / 2)
        assert azimuth == pytest.approx(np.pi / 2)

    def test_arrival_direction_vertical_is_degenerate(self):
        scene = generate_scene(Box((-1, -1, 0), (1, 1, 1)), (0.0, 0.0, 0.0),
                               1, seed=0)
        elevation, azimuth = arrival_direction(scene, (0.0, 0.0, 2.0))
        assert elevation == pytest.approx(0.0)
        assert azimuth == pytest.approx(np.pi / 2)


class TestPathsForPosition:
    @pytest.fixture
    def scene(self):
        bounds = Box((-5.0, -5.0, 0.0), (5.0, 5.0, 9.0))
        return generate_scene(bounds, (-100.0, 0.0, 25.0), 40, seed=5)

    @pytest.fixture
    def wide_ofdm(self):
        return OFDMConfig(n_subcarriers=128, guard_len=32,
                          sample_interval=5e-8)

    def test_powers_normalised_and_delays_in_guard(self, scene, wide_ofdm):
        paths = paths_for_position(scene, (1.0, 2.0, 1.5), wide_ofdm)
        assert paths.powers.sum() == pytest.approx(1.0)
        assert np.all(paths.delays < wide_ofdm.guard_len)
        assert np.all(paths.powers > 0)

    def test_delay_formula(self, scene, wide_ofdm):
        position = np.array([1.0, 2.0, 1.5])
        paths = paths_for_position(scene, position, wide_ofdm)
        # recompute the shortest path delay by hand: via its scatterer,
        # total length / (c * Ts)
        lengths = (np.linalg.norm(position - scene.scatterers, axis=1)
                   + np.linalg.norm(scene.scatterers - scene.bs_position,
                                    axis=1))
        expected = np.sort(lengths / (SPEED_OF_LIGHT
                                      * wide_ofdm.sample_interval))
        expected = expected[expected < wide_ofdm.guard_len]
        np.testing.assert_allclose(np.sort(paths.delays), expected,
                                   rtol=1e-12)

    def test_angles_independent_of_position(self, scene, wide_ofdm):
        a = paths_for_position(scene, (0.0, 0.0, 1.5), wide_ofdm)
        b = paths_for_position(scene, (4.0, -3.0, 7.5), wide_ofdm)
        # same surviving scatterers appear with identical angles
        angles_a = {(round(p.elevation, 12), round(p.azimuth, 12))
                    for p in a}
        angles_b = {(round(p.elevation, 12), round(p.azimuth, 12))
                    for p in b}
        assert angles_a & angles_b

    def test_snap_delays(self, scene, wide_ofdm):
        paths = paths_for_position(scene, (1.0, 2.0, 1.5), wide_ofdm,
                                   snap_delays=True)
        np.testing.assert_array_equal(paths.delays,
                                      np.rint(paths.delays))

    def test_outside_bounds_rejected(self, scene, wide_ofdm):
        with pytest.raises(ValueError):
            paths_for_position(scene, (50.0, 0.0, 1.5), wide_ofdm)

    def test_all_paths_beyond_guard_rejected(self, scene):
        tight = OFDMConfig(n_subcarriers=16, guard_len=1,
                           sample_interval=1e-9)
        with pytest.raises(ValueError):
            paths_for_position(scene, (1.0, 2.0, 1.5), tight)


class TestSceneSerialisation:
    def test_round_trip(self, tmp_path):
        bounds = Box((-5.0, -5.0, 0.0), (5.0, 5.0, 9.0))
        scene = generate_scene(bounds, (-100.0, 0.0, 25.0), 8, seed=21)
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        loaded = load_scene(path)
        np.testing.assert_array_equal(loaded.bs_position, scene.bs_position)
        np.testing.assert_array_equal(loaded.scatterers, scene.scatterers)
        np.testing.assert_array_equal(loaded.gains_db, scene.gains_db)
        assert loaded.bounds == scene.bounds
        assert loaded.pathloss_exponent == scene.pathloss_exponent
        assert loaded.seed == scene.seed

    def test_file_shape(self, tmp_path):
        bounds = Box((-1.0, -1.0, 0.0), (1.0, 1.0, 1.0))
        scene = generate_scene(bounds, (0.0, 0.0, 10.0), 2, seed=1)
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        payload = json.loads(path.read_text())
        assert set(payload) == {"bs_position", "scatterers", "bounds",
                                "pathloss_exponent", "seed"}
        assert {"position", "gain_db"} == set(payload["scatterers"][0])
