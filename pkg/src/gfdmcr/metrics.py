"""Closed-form receiver analytics for linear GFDM detection."""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .channel import ChannelRealization, has_deep_fade
from .config import GfdmConfig
from .core import build_modulation_matrix, build_prototype_filter, build_receiver_matrix
from .errors import DeepFadeError, DegenerateInputError, DomainError

NEGATIVE_VARIANCE_GUARD = 1e-9


@dataclass(frozen=True)
class InterferenceKernel:
    """Self-interference weights ``values[m', k', k]`` of a transmit/receive pair.

    ``sum_k alpha_k * values[m', k', k]`` is ``alpha_k'`` times the received
    power of symbol (m', k') before subtracting the desired part.
    """

    values: np.ndarray
    p_s: float

    @property
    def M(self):
        return self.values.shape[0]

    @property
    def K(self):
        return self.values.shape[1]

    def self_interference(self, alphas):
        """Interference power ``sum_k alpha_k f(k) - p_s alpha_k'`` as an (M, K) array."""
        alphas = np.asarray(alphas, dtype=float)
        return self.values @ alphas - self.p_s * alphas[None, :]

    def constraint_matrix(self):
        """Rows ``f_{m',k'}(k) - p_s [k == k']`` ordered ``m' + M*k'``."""
        rows = self.values - self.p_s * np.eye(self.K)[None, :, :]
        return rows.transpose(1, 0, 2).reshape(self.M * self.K, self.K)

    def interference_sums(self):
        """``sum_k f_{m',k'}(k) - p_s`` for every (m', k'); the uniform-power slope."""
        return self.values.sum(axis=2) - self.p_s


def interference_kernel(tx_taps, rx_taps, K, M, p_s) -> InterferenceKernel:
    """Evaluate ``p_s * sum_m |sum_n g_m[n] conj(g_rx_m'[n]) e^{j2pi(k-k')n/K}|^2``.

    The inner sum over ``n`` only depends on ``(k - k') mod K``; it is obtained
    by folding the product sequence onto ``K`` samples and taking an inverse DFT.
    """
    tx = np.asarray(tx_taps)
    rx = np.asarray(rx_taps)
    N = M * K
    if tx.shape != (N,) or rx.shape != (N,):
        raise DomainError("filters must have M*K taps")
    tx_shift = np.stack([np.roll(tx, m * K) for m in range(M)])
    rx_shift = np.stack([np.roll(rx, m * K) for m in range(M)])
    # prod[m', m, n] = g_m[n] conj(g_rx_m'[n])
    prod = tx_shift[None, :, :] * rx_shift.conj()[:, None, :]
    folded = prod.reshape(M, M, M, K).sum(axis=2)
    corr = K * np.fft.ifft(folded, axis=-1)          # corr[m', m, d]
    power = (np.abs(corr) ** 2).sum(axis=1)          # power[m', d]
    d = (np.arange(K)[None, :] - np.arange(K)[:, None]) % K   # d[k', k] = k - k'
    values = p_s * power[:, d]
    return InterferenceKernel(values, float(p_s))


def mf_kernel(config: GfdmConfig) -> InterferenceKernel:
    taps = build_prototype_filter(config).taps
    return interference_kernel(taps, taps, config.K, config.M, config.p_s)


def mf_interference_variance(kernel: InterferenceKernel, alphas, k, m):
    """Variance of the MF self-interference term on symbol (m, k)."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas[k] <= 0:
        raise DomainError("interference variance is undefined for an unpowered subcarrier")
    var = float(kernel.values[m, k] @ alphas) / alphas[k] - kernel.p_s
    if var < 0:
        if var < -NEGATIVE_VARIANCE_GUARD:
            raise ArithmeticError(f"negative interference variance {var:.3e}")
        var = 0.0
    return var


@dataclass(frozen=True)
class NoiseProfile:
    """Per-symbol noise gain of a receiver, independent of the channel.

    ``weights[r, p] = |Z_r[-p]|^2 / MK`` for row ``r`` of the receiver matrix,
    so that ``C_r = N0 * sum_p weights[r, p] / |H[p]|^2``.
    """

    weights: np.ndarray
    K: int
    M: int
    kind: str

    @classmethod
    def from_receiver(cls, B, K, M, kind):
        B = np.asarray(B)
        N = B.shape[0]
        z = N * np.fft.ifft(B, axis=1)            # z[r, p] = DFT(B_r)[-p]
        return cls(np.abs(z) ** 2 / N, K, M, kind.upper())

    @classmethod
    def for_config(cls, config: GfdmConfig, kind):
        A = build_modulation_matrix(config, build_prototype_filter(config))
        return cls.from_receiver(build_receiver_matrix(A, kind), config.K, config.M, kind)

    def base_terms(self, ch: ChannelRealization, n0):
        """``C[m', k'] = alpha_k' * sigma^2_w,eq`` for every symbol."""
        H = ch.freq_response
        if H.shape[0] != self.weights.shape[1]:
            raise DomainError("channel transform size does not match the frame length")
        if has_deep_fade(ch):
            raise DeepFadeError("channel response has a bin below the deep-fade floor")
        c = n0 * (self.weights @ (1.0 / np.abs(H) ** 2))
        return c.reshape(self.M, self.K)


def equivalent_noise_variance(rx_kind, config: GfdmConfig, ch: ChannelRealization, n0, k, m):
    """Base term ``C_{m,k}`` of the equivalent noise for an MF or ZF receiver."""
    return float(NoiseProfile.for_config(config, rx_kind).base_terms(ch, n0)[m, k])


@dataclass(frozen=True)
class LinkMetrics:
    sinr: np.ndarray
    noise_var: np.ndarray
    receiver_kind: str
    mu: int

    def to_csv(self, path):
        M, K = self.sinr.shape
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "k", "gamma", "noise_var"])
            for m in range(M):
                for k in range(K):
                    w.writerow([m, k, repr(float(self.sinr[m, k])), repr(float(self.noise_var[m, k]))])


def _ratio(num, den):
    num = np.broadcast_to(num, den.shape)
    out = np.zeros(den.shape)
    on = num > 0
    if np.any(on & (den <= 0)):
        raise DegenerateInputError("powered symbol sees neither noise nor interference")
    out[on] = num[on] / den[on]
    return out


def sinr_mf(kernel: InterferenceKernel, alphas, c_mf, rate_factor, mu) -> LinkMetrics:
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas < 0):
        raise DomainError("subcarrier powers must be non-negative")
    interference = np.maximum(kernel.self_interference(alphas), 0.0)
    num = rate_factor * kernel.p_s * alphas[None, :]
    return LinkMetrics(_ratio(num, interference + c_mf), np.asarray(c_mf), "MF", mu)


def snr_zf(alphas, c_zf, rate_factor, mu) -> LinkMetrics:
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas < 0):
        raise DomainError("subcarrier powers must be non-negative")
    p_s = 2.0 * (2**mu - 1) / 3.0
    c_zf = np.asarray(c_zf, dtype=float)
    num = rate_factor * p_s * alphas[None, :]
    return LinkMetrics(_ratio(num, c_zf), c_zf, "ZF", mu)


def ser_from_sinr(gamma, mu):
    """Average square-QAM symbol error probability over all entries of ``gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    e = erfc(np.sqrt(3.0 * gamma / (2.0 * (2**mu - 1))))
    a = (mu - 1) / mu
    p = 2.0 * a * e.mean() - a**2 * (e**2).mean()
    return float(np.clip(p, 0.0, 1.0))


def ser_mf(metrics: LinkMetrics):
    return ser_from_sinr(metrics.sinr, metrics.mu)


def ser_zf(metrics: LinkMetrics):
    return ser_from_sinr(metrics.sinr, metrics.mu)


def sum_rate(metrics: LinkMetrics):
    """Spectral efficiency ``mean(log2(1 + gamma))`` in bit/s/Hz."""
    return float(np.mean(np.log2(1.0 + np.asarray(metrics.sinr))))
