"""Frequency-selective block-fading channel, AWGN and one-tap FDE."""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import DeepFadeError, DomainError

DEEP_FADE_FLOOR = 1e-12


def make_rng(seed):
    """Return a ``numpy.random.Generator`` for an int, SeedSequence or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def trial_seed(master_seed, *index):
    """Deterministic child seed for trial ``index`` of a master seed.

    Uses numpy's counter-based ``SeedSequence`` spawn keys, so the stream of a
    trial depends only on ``(master_seed, index)`` and never on scheduling.
    A ``SeedSequence`` master is extended with ``index``.
    """
    key = tuple(int(i) for i in index)
    if isinstance(master_seed, np.random.SeedSequence):
        return np.random.SeedSequence(entropy=master_seed.entropy,
                                      spawn_key=tuple(master_seed.spawn_key) + key)
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)


def exponential_pdp(n_taps=10, normalize=False):
    """Tap variances ``10**(-i / (n_taps - 1))``; single tap gets variance 1."""
    if n_taps < 1:
        raise DomainError("channel needs at least one tap")
    if n_taps == 1:
        pdp = np.ones(1)
    else:
        pdp = 10.0 ** (-np.arange(n_taps) / (n_taps - 1))
    if normalize:
        pdp = pdp / pdp.sum()
    return pdp


@dataclass(frozen=True)
class ChannelRealization:
    taps: np.ndarray
    freq_response: np.ndarray
    pdp: np.ndarray

    @property
    def n_taps(self):
        return self.taps.shape[0]

    @property
    def memory(self):
        """Number of past samples the channel reaches into."""
        return self.n_taps - 1

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tap_index", "re", "im"])
            for i, h in enumerate(self.taps):
                w.writerow([i, repr(float(h.real)), repr(float(h.imag))])


def channel_from_taps(taps, n_fft, pdp=None):
    taps = np.asarray(taps, dtype=complex)
    if taps.shape[0] > n_fft:
        raise DomainError("channel longer than the transform size")
    if pdp is None:
        pdp = np.abs(taps) ** 2
    return ChannelRealization(taps, np.fft.fft(taps, n_fft), np.asarray(pdp, dtype=float))


def read_channel_csv(path, n_fft):
    taps = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            taps.append(float(row["re"]) + 1j * float(row["im"]))
    return channel_from_taps(taps, n_fft)


def draw_channel(n_taps, pdp, seed, n_fft) -> ChannelRealization:
    """Draw independent CN(0, pdp[i]) taps and their ``n_fft``-point response."""
    pdp = np.asarray(pdp, dtype=float)
    if n_taps < 1 or pdp.shape != (n_taps,):
        raise DomainError("pdp must hold one variance per tap")
    if np.any(pdp <= 0):
        raise DomainError("tap variances must be positive")
    rng = make_rng(seed)
    g = rng.standard_normal((n_taps, 2))
    taps = np.sqrt(pdp / 2.0) * (g[:, 0] + 1j * g[:, 1])
    return channel_from_taps(taps, n_fft, pdp)


def has_deep_fade(ch: ChannelRealization, floor=DEEP_FADE_FLOOR):
    return bool(np.min(np.abs(ch.freq_response)) < floor)


def draw_usable_channel(n_taps, pdp, seed, n_fft, max_redraws=1000):
    """Draw until no bin is in a deep fade.

    Returns ``(channel, n_rejected)``.
    """
    rng = make_rng(seed)
    for rejected in range(max_redraws + 1):
        ch = draw_channel(n_taps, pdp, rng, n_fft)
        if not has_deep_fade(ch):
            return ch, rejected
    raise DeepFadeError(f"no usable channel after {max_redraws} redraws")


def awgn(rng, n0, shape):
    """Circularly-symmetric complex Gaussian noise with variance ``n0`` per sample."""
    if n0 < 0:
        raise DomainError("noise density must be non-negative")
    if n0 == 0:
        return np.zeros(shape, dtype=complex)
    g = rng.standard_normal(tuple(shape) + (2,))
    return np.sqrt(n0 / 2.0) * (g[..., 0] + 1j * g[..., 1])


def apply_channel(x_cp, ch: ChannelRealization, n0, n_cp, seed=None):
    """Pass CP-extended frames through the channel and add noise.

    Each frame (column of a 2-D input) is convolved independently, so after
    ``remove_cp`` the output is ``h (*) x + w`` with circular convolution.
    """
    if n_cp < ch.memory:
        raise DomainError(
            f"cyclic prefix ({n_cp}) shorter than the channel memory ({ch.memory})"
        )
    x_cp = np.asarray(x_cp)
    y = lfilter(ch.taps, [1.0], x_cp, axis=0)
    if n0 > 0:
        y = y + awgn(make_rng(seed), n0, y.shape)
    elif n0 < 0:
        raise DomainError("noise density must be non-negative")
    return y


def fde_equalize(y, ch: ChannelRealization):
    """Zero-forcing one-tap equalizer ``IDFT(DFT(y) / H)`` per frame."""
    y = np.asarray(y)
    H = ch.freq_response
    if y.shape[0] != H.shape[0]:
        raise DomainError(f"block length {y.shape[0]} does not match the channel transform {H.shape[0]}")
    if has_deep_fade(ch):
        raise DeepFadeError("channel response has a bin below the deep-fade floor")
    if y.ndim == 2:
        H = H[:, None]
    return np.fft.ifft(np.fft.fft(y, axis=0) / H, axis=0)
