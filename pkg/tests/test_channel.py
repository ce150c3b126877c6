import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmarl.channel import (
    DBM_FLOOR,
    ChannelParams,
    PowerReading,
    calibrated_aperture,
    dbm_to_mw,
    lobe_exponent,
    mw_to_dbm,
    other_path,
    received_power,
    system_reward,
    tile_coefficient,
    tile_coefficients,
)
from hmarl.errors import InvalidArgument
from hmarl.geometry import build_grid, tile_normal, tile_normals

PARAMS = ChannelParams()


def reference_coefficient(tile, normal, ap, user, p: ChannelParams) -> complex:
    """Straight-line re-derivation of one tile's coefficient."""
    d1 = np.linalg.norm(ap - tile)
    d2 = np.linalg.norm(user - tile)
    incident = (tile - ap) / d1
    if np.dot(normal, ap - tile) <= 0 or np.dot(normal, user - tile) <= 0:
        return 0j
    mirrored = incident - 2 * np.dot(incident, normal) * normal
    cos_psi = np.dot(mirrored, (user - tile) / d2)
    g = cos_psi ** p.lobe_m if cos_psi > 0 else 0.0
    return p.aperture * g / (d1 * d2) * np.exp(-2j * np.pi * (d1 + d2) / p.wavelength)


class TestConversions:
    @given(st.floats(-130, 60))
    def test_round_trip(self, dbm):
        assert mw_to_dbm(dbm_to_mw(dbm)) == pytest.approx(dbm, rel=1e-12, abs=1e-12)

    def test_floor(self):
        assert mw_to_dbm(0.0) == DBM_FLOOR
        np.testing.assert_array_equal(mw_to_dbm(np.array([0.0, 1e-30])), [DBM_FLOOR, DBM_FLOOR])

    def test_lobe_half_power_at_beamwidth(self):
        bw = np.deg2rad(10)
        m = lobe_exponent(bw)
        assert (np.cos(bw) ** m) ** 2 == pytest.approx(0.5, rel=1e-12)

    def test_calibration_hits_target(self):
        a = calibrated_aperture(5.0, -65.0, 63, 5.0)
        assert mw_to_dbm(dbm_to_mw(5.0) * 63 * (a / 25.0) ** 2) == pytest.approx(-65.0, abs=1e-9)

    def test_power_reading(self):
        r = PowerReading.from_mw(1e-7)
        assert r.rssi_dbm == pytest.approx(-70.0)
        assert r.rssi_mw == pytest.approx(10 ** (r.rssi_dbm / 10), rel=1e-12)
        with pytest.raises(InvalidArgument):
            PowerReading.from_mw(float("nan"))

    @pytest.mark.parametrize("kw", [{"carrier_freq": 0.0}, {"tile_gain_beamwidth": 0.0}, {"wall_loss": -1.0}, {"aperture": -1.0}])
    def test_param_validation(self, kw):
        with pytest.raises(InvalidArgument):
            ChannelParams(**kw)


class TestTileCoefficient:
    def test_on_specular_ray_is_maximal(self):
        tile, ap, user = np.zeros(3), np.array([1.0, 0, 2]), np.array([-1.5, 0, 3])
        n = tile_normal(tile, user, ap).normal
        h = tile_coefficient(tile, n, ap, user, PARAMS)
        d1, d2 = np.linalg.norm(ap), np.linalg.norm(user)
        assert abs(h) == pytest.approx(PARAMS.aperture / (d1 * d2), rel=1e-12)
        off = tile_coefficient(tile, tile_normal(tile, user + [0.3, 0.2, 0], ap).normal, ap, user, PARAMS)
        assert abs(off) < abs(h)

    def test_back_face(self):
        tile, ap, user = np.zeros(3), np.array([0.0, 0, 2]), np.array([0.5, 0, 2])
        assert tile_coefficient(tile, np.array([0.0, 0, -1]), ap, user, PARAMS) == 0

    def test_half_wavelength_cancels(self):
        lam = PARAMS.wavelength
        ap = np.array([0.0, 0, 3.0])
        n = np.array([0.0, 0, 1.0])
        # two tiles on the AP axis at heights differing by lam/4, user straight above: path gap lam/2
        t1, t2 = np.zeros(3), np.array([0.0, 0, lam / 4])
        user = np.array([0.0, 0, 2.0])
        h1 = tile_coefficient(t1, n, ap, user, PARAMS)
        h2 = tile_coefficient(t2, n, ap, user, PARAMS)
        scale = abs(h1) * np.linalg.norm(ap - t1) * np.linalg.norm(user - t1)
        h2_equal = h2 / abs(h2) * abs(h1)
        assert abs(h1 + h2_equal) < 1e-9 * abs(h1)
        assert scale > 0

    def test_matches_reference(self, rng):
        for _ in range(200):
            tile, ap, user, focal = rng.uniform(-4, 4, (4, 3))
            normals, ok = tile_normals(tile, focal, ap)
            if not ok:
                continue
            got = tile_coefficient(tile, normals, ap, user, PARAMS)
            want = reference_coefficient(tile, normals, ap, user, PARAMS)
            # the phase k*(d1+d2) is thousands of radians, so summation order shows up near 1e-12
            assert abs(got) == pytest.approx(abs(want), rel=1e-12, abs=1e-300)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-300)

    @given(st.floats(0.5, 5), st.floats(0.5, 5))
    def test_swapping_path_lengths_keeps_magnitude(self, a, b):
        tile, n = np.zeros(3), np.array([0.0, 0, 1.0])
        ap = np.array([a * np.sin(0.3), 0, a * np.cos(0.3)])
        user = np.array([-b * np.sin(0.3), 0, b * np.cos(0.3)])
        ap2 = np.array([b * np.sin(0.3), 0, b * np.cos(0.3)])
        user2 = np.array([-a * np.sin(0.3), 0, a * np.cos(0.3)])
        h = tile_coefficient(tile, n, ap, user, PARAMS)
        h2 = tile_coefficient(tile, n, ap2, user2, PARAMS)
        assert abs(h) == pytest.approx(abs(h2), rel=1e-12)


class TestReceivedPower:
    def setup_method(self):
        self.grid = build_grid(5, 9, 0.05, (-4.8, 0, 2.0), (1, 0, 0), 1)
        self.ap = np.array([-2.0, 4.0, 2.5])

    def test_empty_no_other_path(self):
        p = ChannelParams(wall_loss=np.inf)
        r = received_power((1, 1, 1.5), [], self.ap, p)
        assert r.rssi_mw == 0.0 and r.rssi_dbm == DBM_FLOOR

    def test_empty_equals_other_path(self):
        user = np.array([1.0, 1, 1.5])
        r = received_power(user, [], self.ap, PARAMS)
        h = other_path(self.ap, user[None], PARAMS)[0]
        assert r.rssi_mw == pytest.approx(PARAMS.tx_power_mw * abs(h) ** 2, rel=1e-12)

    def test_coherent_sum_matches_accumulator(self, rng):
        user = np.array([0.5, -1.0, 1.5])
        focal = np.array([0.0, -0.5, 1.5])
        r = received_power(user, [(self.grid, 0, focal)], self.ap, PARAMS)
        acc = complex(other_path(self.ap, user[None], PARAMS)[0])
        for t in self.grid.segment_tiles(0):
            acc += reference_coefficient(t, tile_normal(t, focal, self.ap).normal, self.ap, user, PARAMS)
        assert r.rssi_mw == pytest.approx(PARAMS.tx_power_mw * abs(acc) ** 2, rel=1e-10)

    def test_focusing_beats_defocusing(self):
        rng = np.random.default_rng(3)
        wins = 0
        for _ in range(500):
            user = np.array([rng.uniform(-3, 4), rng.uniform(-4, 4), 1.5])
            d = rng.normal(size=3)
            away = user + 2.0 * d / np.linalg.norm(d)
            on = received_power(user, [(self.grid, 0, user)], self.ap, PARAMS).rssi_mw
            off = received_power(user, [(self.grid, 0, away)], self.ap, PARAMS).rssi_mw
            wins += on > off
        assert wins >= 495


class TestSystemReward:
    def setup_method(self):
        self.grid = build_grid(5, 9, 0.05, (-4.8, 0, 2.0), (1, 0, 0), 2)
        self.ap = np.array([-2.0, 4.0, 2.5])
        self.segments = [(self.grid, 0), (self.grid, 1)]

    def test_single_user_single_segment(self):
        users = np.array([[1.0, 0.5, 1.5]])
        focal = np.array([[0.5, 0.5, 1.5]])
        got = system_reward(users, [0], [(self.grid, 0)], focal, self.ap, PARAMS)
        want = received_power(users[0], [(self.grid, 0, focal[0])], self.ap, PARAMS).rssi_mw
        assert got == pytest.approx(want, rel=1e-12)

    def test_sum_of_per_user(self, rng):
        users = np.column_stack([rng.uniform(-3, 3, (2, 2)), [1.5, 1.5]])
        focals = rng.uniform(-2, 2, (2, 3))
        alloc = [1, 0]
        got = system_reward(users, alloc, self.segments, focals, self.ap, PARAMS)
        want = sum(
            received_power(users[k], [(g, s, focals[l]) for l, (g, s) in enumerate(self.segments) if alloc[l] == k],
                           self.ap, PARAMS).rssi_mw
            for k in range(2)
        )
        assert got == pytest.approx(want, rel=1e-12)

    def test_mirror_symmetry(self):
        # one row of tiles on the x=0 wall is symmetric about y=0; the AP sits on that plane
        grid = build_grid(1, 8, 0.05, (0, 0, 2.0), (1, 0, 0), 2)
        ap = np.array([3.0, 0.0, 2.5])
        users = np.array([[2.0, 1.0, 1.5], [2.0, -1.0, 1.5]])
        p = ChannelParams(wall_loss=np.inf)
        side = [int(np.argmax([grid.centroid(s)[1] * users[k, 1] for s in range(2)])) for k in range(2)]
        per = [system_reward(users[k:k + 1], [0], [(grid, side[k])], users[k:k + 1], ap, p) for k in range(2)]
        assert side[0] != side[1]
        assert per[0] == pytest.approx(per[1], rel=1e-12)

    def test_rejects_bad_allocation(self):
        users = np.array([[1.0, 0.5, 1.5]])
        with pytest.raises(InvalidArgument):
            system_reward(users, [0, 1], self.segments, np.zeros((2, 3)), self.ap, PARAMS)
        with pytest.raises(InvalidArgument):
            system_reward(users, [0], self.segments, np.zeros((2, 3)), self.ap, PARAMS)
