"""Waveform configuration and unit helpers."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

FILTER_KINDS = ("raised-cosine", "rectangular")


@dataclass(frozen=True)
class GfdmConfig:
    """GFDM waveform and system parameters.

    Parameters
    ----------
    K : int
        Number of subcarriers.
    M : int
        Number of subsymbols (time slots) per frame.
    n_cp : int
        Cyclic-prefix length in samples, one prefix per frame.
    mu : int
        Bits per symbol of the square 2**mu-QAM alphabet.
    rolloff : float
        Raised-cosine roll-off factor in [0, 1].
    t_s : float
        Subsymbol duration in seconds (subcarrier spacing is ``1 / t_s``).
    filter_kind : str
        ``"raised-cosine"`` or ``"rectangular"``.
    """

    K: int = 64
    M: int = 5
    n_cp: int = 10
    mu: int = 4
    rolloff: float = 0.15
    t_s: float = 33.3e-6
    filter_kind: str = "raised-cosine"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ConfigError(f"K must be an integer >= 2, got {self.K!r}")
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"M must be an integer >= 1, got {self.M!r}")
        if int(self.n_cp) != self.n_cp or self.n_cp < 0:
            raise ConfigError(f"n_cp must be a non-negative integer, got {self.n_cp!r}")
        if self.n_cp > self.K * self.M:
            raise ConfigError("n_cp may not exceed the frame length M*K")
        if int(self.mu) != self.mu or self.mu < 2 or self.mu % 2:
            raise ConfigError(f"mu must be a positive even integer, got {self.mu!r}")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ConfigError(f"rolloff must lie in [0, 1], got {self.rolloff!r}")
        if not self.t_s > 0:
            raise ConfigError(f"t_s must be positive, got {self.t_s!r}")
        if self.filter_kind not in FILTER_KINDS:
            raise ConfigError(f"filter_kind must be one of {FILTER_KINDS}, got {self.filter_kind!r}")

    @classmethod
    def ofdm(cls, K=64, n_cp=10, mu=4, t_s=33.3e-6):
        """OFDM preset: one subsymbol, rectangular pulse, CP per symbol."""
        return cls(K=K, M=1, n_cp=n_cp, mu=mu, rolloff=0.0, t_s=t_s, filter_kind="rectangular")

    @property
    def N(self):
        """Frame length in samples (without CP)."""
        return self.M * self.K

    @property
    def p_s(self):
        """Average power of the unnormalized 2**mu-QAM alphabet."""
        return 2.0 * (2**self.mu - 1) / 3.0

    @property
    def rate_factor(self):
        """CP rate penalty ``MK / (MK + n_cp)``."""
        return self.N / (self.N + self.n_cp)

    @property
    def t_sample(self):
        """Sampling interval of the critically sampled modulator."""
        return self.t_s / self.K

    @property
    def is_ofdm(self):
        return self.M == 1 and self.filter_kind == "rectangular"

    def with_(self, **changes):
        return replace(self, **changes)


def dbm_to_watts(p_dbm):
    """Convert dBm to linear watts; ``inf`` maps to ``inf``."""
    return 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0) / 1000.0


def watts_to_dbm(p_watts):
    """Convert watts to dBm. Zero power maps to ``-inf``."""
    p = np.asarray(p_watts, dtype=float)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(p * 1000.0)


def qam_alphabet(mu):
    """Unnormalized square 2**mu-QAM points with odd-integer coordinates.

    Average power is ``2 * (2**mu - 1) / 3``.
    """
    side = 2 ** (mu // 2)
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    re, im = np.meshgrid(levels, levels, indexing="ij")
    return (re + 1j * im).ravel()


def random_qam(rng, mu, size):
    """Draw i.i.d. uniform 2**mu-QAM symbols."""
    side = 2 ** (mu // 2)
    re = 2 * rng.integers(0, side, size=size) - (side - 1)
    im = 2 * rng.integers(0, side, size=size) - (side - 1)
    return re + 1j * im


def qam_decide(z, mu):
    """Nearest-point slicing onto the unnormalized square QAM grid."""
    side = 2 ** (mu // 2)
    lim = side - 1

    def _slice(v):
        return np.clip(2 * np.floor(v / 2) + 1, -lim, lim)

    return _slice(z.real) + 1j * _slice(z.imag)
