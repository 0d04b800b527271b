import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from gfdmcr.config import GfdmConfig, dbm_to_watts, qam_alphabet, qam_decide, random_qam, watts_to_dbm
from gfdmcr.errors import ConfigError


class TestGfdmConfig:
    def test_reference_defaults(self, default_config):
        assert default_config.N == 320
        assert default_config.p_s == 10.0
        assert default_config.rate_factor == pytest.approx(320 / 330)
        assert default_config.t_sample == pytest.approx(33.3e-6 / 64)

    def test_ofdm_preset(self, ofdm_config):
        assert ofdm_config.is_ofdm
        assert ofdm_config.N == 64
        assert ofdm_config.rate_factor == pytest.approx(64 / 74)

    @pytest.mark.parametrize(
        "changes",
        [
            {"K": 1},
            {"M": 0},
            {"n_cp": -1},
            {"mu": 3},
            {"rolloff": 1.5},
            {"rolloff": -0.1},
            {"t_s": 0.0},
            {"filter_kind": "gaussian"},
            {"K": 4, "M": 1, "n_cp": 5},
        ],
    )
    def test_rejects_invalid(self, changes):
        with pytest.raises(ConfigError):
            GfdmConfig(**changes)

    def test_with_returns_copy(self, default_config):
        other = default_config.with_(M=15)
        assert other.M == 15 and default_config.M == 5

    def test_hashable(self, default_config):
        assert hash(default_config) == hash(GfdmConfig())


class TestUnits:
    def test_reference_points(self):
        assert dbm_to_watts(30) == pytest.approx(1.0)
        assert dbm_to_watts(55) == pytest.approx(316.227766, rel=1e-9)
        assert watts_to_dbm(1e-3) == pytest.approx(0.0)

    def test_zero_and_infinity(self):
        assert watts_to_dbm(0.0) == -math.inf
        assert dbm_to_watts(math.inf) == math.inf

    @given(st.floats(-100, 100))
    def test_roundtrip(self, dbm):
        assert watts_to_dbm(dbm_to_watts(dbm)) == pytest.approx(dbm, abs=1e-9)


class TestQam:
    @pytest.mark.parametrize("mu", [2, 4, 6])
    def test_alphabet_power(self, mu):
        pts = qam_alphabet(mu)
        assert pts.size == 2**mu
        assert np.mean(np.abs(pts) ** 2) == pytest.approx(2 * (2**mu - 1) / 3)

    def test_random_symbols_in_alphabet(self, rng):
        s = random_qam(rng, 4, 1000)
        assert set(np.unique(s)) <= set(qam_alphabet(4))

    def test_decide_identity_on_alphabet(self):
        pts = qam_alphabet(4)
        assert_allclose(qam_decide(pts, 4), pts)

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_decide_is_nearest_point(self, re, im):
        z = complex(re, im)
        pts = qam_alphabet(4)
        nearest = pts[np.argmin(np.abs(pts - z))]
        assert abs(qam_decide(np.array([z]), 4)[0] - z) == pytest.approx(abs(nearest - z), abs=1e-12)
