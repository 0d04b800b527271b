import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from gfdmcr.channel import (
    apply_channel,
    awgn,
    channel_from_taps,
    draw_channel,
    draw_usable_channel,
    exponential_pdp,
    fde_equalize,
    has_deep_fade,
    make_rng,
    read_channel_csv,
    trial_seed,
)
from gfdmcr.core import add_cp, remove_cp
from gfdmcr.errors import DeepFadeError, DomainError

N = 320
NCP = 10


def _roundtrip(x, ch, n0=0.0, seed=None):
    y = apply_channel(add_cp(x, NCP), ch, n0, NCP, seed)
    return remove_cp(y, NCP, x.shape[0])


class TestPowerDelayProfile:
    def test_reference_profile(self):
        pdp = exponential_pdp(10)
        assert_allclose(pdp, 10.0 ** (-np.arange(10) / 9))
        assert np.all(np.diff(pdp) < 0)

    def test_normalized(self):
        assert exponential_pdp(10, normalize=True).sum() == pytest.approx(1.0)

    def test_single_tap(self):
        assert_array_equal(exponential_pdp(1), [1.0])

    def test_rejects_empty(self):
        with pytest.raises(DomainError):
            exponential_pdp(0)


class TestDrawChannel:
    def test_single_tap_is_flat(self):
        ch = draw_channel(1, np.ones(1), 3, N)
        assert_allclose(np.abs(ch.freq_response), np.abs(ch.taps[0]))

    def test_deterministic(self):
        a = draw_channel(10, exponential_pdp(10), 42, N)
        b = draw_channel(10, exponential_pdp(10), 42, N)
        assert_array_equal(a.taps, b.taps)

    def test_freq_response_is_padded_dft(self):
        ch = draw_channel(10, exponential_pdp(10), 1, N)
        assert_allclose(ch.freq_response, np.fft.fft(np.r_[ch.taps, np.zeros(N - 10)]))
        assert ch.memory == 9

    def test_tap_variances(self):
        rng = make_rng(7)
        pdp = exponential_pdp(10)
        taps = np.array([draw_channel(10, pdp, rng, 16).taps for _ in range(20000)])
        # 20000 exponential samples: relative std of the mean is 0.7%
        assert_allclose(np.mean(np.abs(taps) ** 2, axis=0), pdp, rtol=0.03)

    def test_bad_pdp(self):
        with pytest.raises(DomainError):
            draw_channel(3, np.ones(2), 0, N)
        with pytest.raises(DomainError):
            draw_channel(2, np.array([1.0, 0.0]), 0, N)

    def test_csv_roundtrip(self, tmp_path):
        ch = draw_channel(10, exponential_pdp(10), 5, N)
        path = tmp_path / "ch.csv"
        ch.to_csv(path)
        assert path.read_text().splitlines()[0] == "tap_index,re,im"
        assert_array_equal(read_channel_csv(path, N).taps, ch.taps)


class TestDeepFade:
    def test_detects_null(self):
        ch = channel_from_taps([1.0, 1.0], 2)
        assert has_deep_fade(ch)
        with pytest.raises(DeepFadeError):
            fde_equalize(np.ones(2), ch)

    def test_usable_channel_redraws(self):
        ch, rejected = draw_usable_channel(10, exponential_pdp(10), 11, N)
        assert not has_deep_fade(ch)
        assert rejected >= 0


class TestApplyChannel:
    def test_identity_channel(self, rng):
        x = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        assert_allclose(_roundtrip(x, channel_from_taps([1.0], N)), x)

    def test_unit_delay_rotates(self, rng):
        x = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        assert_allclose(_roundtrip(x, channel_from_taps([0.0, 1.0], N)), np.roll(x, 1))

    def test_circular_convolution(self, rng):
        ch = draw_channel(10, exponential_pdp(10), 2, N)
        x = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        y = _roundtrip(x, ch)
        assert_allclose(np.fft.fft(y), np.fft.fft(x) * ch.freq_response, atol=1e-8)

    def test_short_cp_rejected(self):
        ch = draw_channel(10, exponential_pdp(10), 2, N)
        with pytest.raises(DomainError):
            apply_channel(np.ones(N + 5), ch, 0.0, 5)

    def test_noise_variance(self):
        ch = draw_channel(10, exponential_pdp(10), 2, N)
        x = np.zeros((N + NCP, 3125))
        y = remove_cp(apply_channel(x, ch, 1.0, NCP, 9), NCP)
        assert np.mean(np.abs(y) ** 2) == pytest.approx(1.0, rel=0.02)

    def test_noise_seeded(self):
        ch = channel_from_taps([1.0], N)
        a = apply_channel(np.zeros(N + NCP), ch, 1.0, NCP, 4)
        b = apply_channel(np.zeros(N + NCP), ch, 1.0, NCP, 4)
        assert_array_equal(a, b)

    def test_negative_noise(self):
        with pytest.raises(DomainError):
            awgn(make_rng(0), -1.0, (3,))


class TestEqualizer:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_noiseless_roundtrip(self, seed):
        r = np.random.default_rng(seed)
        ch, _ = draw_usable_channel(10, exponential_pdp(10), r, N)
        x = r.standard_normal(N) + 1j * r.standard_normal(N)
        assert_allclose(fde_equalize(_roundtrip(x, ch), ch), x, atol=1e-8)

    def test_flat_scales(self, rng):
        y = rng.standard_normal(N) + 0j
        ch = channel_from_taps([0.5 - 0.25j], N)
        assert_allclose(fde_equalize(y, ch), y / (0.5 - 0.25j))

    def test_block_length_mismatch(self):
        with pytest.raises(DomainError):
            fde_equalize(np.ones(N - 1), channel_from_taps([1.0], N))

    def test_equalized_noise_variance(self):
        ch, _ = draw_usable_channel(10, exponential_pdp(10), 21, N)
        n0 = 0.7
        y = remove_cp(apply_channel(np.zeros((N + NCP, 400)), ch, n0, NCP, 3), NCP)
        u = fde_equalize(y, ch)
        expected = n0 / N * np.sum(1.0 / np.abs(ch.freq_response) ** 2)
        assert np.mean(np.abs(u) ** 2) == pytest.approx(expected, rel=0.03)

    def test_unbiased(self, rng):
        ch, _ = draw_usable_channel(10, exponential_pdp(10), 8, N)
        x = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        frames = np.repeat(x[:, None], 2000, axis=1)
        u = fde_equalize(remove_cp(apply_channel(add_cp(frames, NCP), ch, 0.1, NCP, 5), NCP), ch)
        spread = np.sqrt(0.1 / N * np.sum(1.0 / np.abs(ch.freq_response) ** 2) / 2000)
        assert np.max(np.abs(u.mean(axis=1) - x)) < 6 * spread


class TestSeeds:
    def test_trial_seed_deterministic(self):
        a = make_rng(trial_seed(5, 1, 2)).standard_normal(4)
        b = make_rng(trial_seed(5, 1, 2)).standard_normal(4)
        assert_array_equal(a, b)

    def test_trial_seeds_differ(self):
        a = make_rng(trial_seed(5, 1, 2)).standard_normal(4)
        b = make_rng(trial_seed(5, 2, 1)).standard_normal(4)
        assert not np.allclose(a, b)

    def test_nested_seed_sequence(self):
        parent = trial_seed(5, 1)
        assert_array_equal(make_rng(trial_seed(parent, 3)).integers(0, 10**9, 3),
                           make_rng(trial_seed(5, 1, 3)).integers(0, 10**9, 3))
