"""Spectra of non-uniformly powered GFDM and adjacent-channel leakage.

The continuous-time pulse is modelled by the prototype filter sampled
``oversample`` times faster than the modulator rate (``K / t_s``), so the
spectrum is resolved over ``oversample`` signal bandwidths and the two
adjacent channels are not aliased onto the occupied band.
"""

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import welch

from .channel import make_rng
from .config import GfdmConfig, random_qam
from .core import build_prototype_filter, modulation_columns, subcarrier_offsets
from .errors import DomainError

DEFAULT_OVERSAMPLE = 8
DEFAULT_NFFT = 65536


@dataclass(frozen=True)
class SpectralDensity:
    freqs: np.ndarray
    values: np.ndarray
    kind: str

    def to_db(self, reference=None):
        ref = np.max(self.values) if reference is None else reference
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.values / ref)

    def band_average(self, centers, width):
        """Mean PSD over ``[c - width/2, c + width/2)`` for each centre ``c``."""
        out = np.empty(len(centers))
        for i, c in enumerate(centers):
            sel = (self.freqs >= c - width / 2) & (self.freqs < c + width / 2)
            if not np.any(sel):
                raise DomainError(f"no grid points in the band around {c:g} Hz")
            out[i] = self.values[sel].mean()
        return out

    def integral(self):
        return float(np.trapezoid(self.values, self.freqs))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "psd_db"])
            with np.errstate(divide="ignore"):
                db = 10.0 * np.log10(self.values)
            for f, v in zip(self.freqs, db):
                w.writerow([repr(float(f)), repr(float(v))])


def _grid_nfft(K, oversample, nfft):
    """Smallest multiple of ``2*K*oversample`` not below ``nfft``.

    Subcarrier centres then fall on grid points, so frequency shifts are exact rolls.
    """
    step = 2 * K * oversample
    return int(-(-nfft // step) * step)


@lru_cache(maxsize=32)
def _sgg(config: GfdmConfig, oversample, nfft):
    filt = build_prototype_filter(config, oversample)
    t_l = config.t_s / (config.K * oversample)
    sgg = np.zeros(nfft)
    for m in range(config.M):
        G = t_l * np.fft.fft(filt.shifted(m, config.K), nfft)
        sgg += np.abs(G) ** 2
    sgg = np.fft.fftshift(sgg)
    freqs = (np.arange(nfft) - nfft // 2) / (nfft * t_l)
    sgg.setflags(write=False)
    freqs.setflags(write=False)
    return freqs, sgg


def filter_spectrum(config: GfdmConfig, oversample=DEFAULT_OVERSAMPLE, nfft=DEFAULT_NFFT):
    """``S_GG(f) = sum_m |G_m(f)|^2`` on a centred grid of ``nfft`` points.

    Returns ``(freqs, sgg)``; the grid spans ``oversample * K / t_s`` Hz.
    """
    nfft = _grid_nfft(config.K, oversample, nfft)
    return _sgg(config, int(oversample), nfft)


def analytic_psd(config: GfdmConfig, alphas, freqs=None, oversample=DEFAULT_OVERSAMPLE,
                 nfft=DEFAULT_NFFT) -> SpectralDensity:
    """PSD of the GFDM stream, ``p_s/(M t_s) sum_k alpha_k S_GG(f - f_k)``.

    Evaluated on the internal transform grid, or interpolated onto ``freqs``.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (config.K,):
        raise DomainError("allocation must have length K")
    grid, sgg = filter_spectrum(config, oversample, nfft)
    per_spacing = len(grid) // (config.K * oversample)
    psd = np.zeros(len(grid))
    for k, off in enumerate(subcarrier_offsets(config.K)):
        if alphas[k]:
            psd += alphas[k] * np.roll(sgg, int(round(off * per_spacing)))
    psd *= config.p_s / (config.M * config.t_s)
    if freqs is None:
        return SpectralDensity(np.array(grid), psd, "analytic")
    freqs = np.asarray(freqs, dtype=float)
    if freqs.min() < grid[0] or freqs.max() > grid[-1]:
        raise DomainError("requested grid extends beyond the modelled span")
    return SpectralDensity(freqs, np.interp(freqs, grid, psd), "analytic")


def estimate_psd(samples, fs, nfft=DEFAULT_NFFT, window="hann", overlap=0.5) -> SpectralDensity:
    """Averaged modified periodogram (Welch) of a complex sample stream.

    Density scaling: a complex exponential of power ``P`` integrates to ``P``.
    """
    samples = np.asarray(samples)
    if samples.ndim != 1 or samples.shape[0] < nfft:
        raise DomainError(f"need at least nfft={nfft} samples, got {samples.shape[0]}")
    freqs, pxx = welch(samples, fs=fs, window=window, nperseg=nfft,
                       noverlap=int(nfft * overlap), return_onesided=False,
                       detrend=False, scaling="density")
    return SpectralDensity(np.fft.fftshift(freqs), np.fft.fftshift(pxx), "estimated")


def synthesize_stream(config: GfdmConfig, alphas, n_frames, seed, oversample=DEFAULT_OVERSAMPLE,
                      chunk=256):
    """Concatenated GFDM frames (no CP) at ``oversample`` times the modulator rate.

    Returns ``(samples, fs)``.  Taking every ``oversample``-th sample of a
    frame gives the critically sampled modulator output.
    """
    rng = make_rng(seed)
    filt = build_prototype_filter(config, oversample)
    cols = modulation_columns(filt, config.K, config.M)
    amp = np.tile(np.sqrt(np.asarray(alphas, dtype=float)), config.M)[:, None]
    pieces = []
    done = 0
    while done < n_frames:
        n = min(chunk, n_frames - done)
        s = random_qam(rng, config.mu, (config.N, n))
        pieces.append((cols @ (amp * s)).T.ravel())
        done += n
    fs = config.K * oversample / config.t_s
    return np.concatenate(pieces), fs


@dataclass(frozen=True)
class PuGainProfile:
    """Per-bin power gains of the right and left primary-user links.

    Index ``j`` (0-based) is the ``j+1``-th bin away from the SU band edge.
    """

    right: np.ndarray
    left: np.ndarray

    @classmethod
    def flat(cls, K, gain=1.0):
        return cls(np.full(K, float(gain)), np.full(K, float(gain)))


def pu_bin_response(taps, K):
    """``|H(f_j)|^2`` of a tap vector at the adjacent-channel bin centres."""
    j = np.arange(1, K + 1)
    phase = np.exp(-2j * np.pi * np.outer(K / 2 + j - 0.5, np.arange(len(taps))) / K)
    return np.abs(phase @ np.asarray(taps)) ** 2


def draw_pu_gains(pdp, seed, K) -> PuGainProfile:
    """Two independent Rayleigh PU links with the given power-delay profile."""
    rng = make_rng(seed)
    pdp = np.asarray(pdp, dtype=float)
    gains = []
    for _ in range(2):
        g = rng.standard_normal((len(pdp), 2))
        taps = np.sqrt(pdp / 2.0) * (g[:, 0] + 1j * g[:, 1])
        gains.append(pu_bin_response(taps, K))
    return PuGainProfile(gains[0], gains[1])


@dataclass(frozen=True)
class AciCoefficients:
    """ACI power per unit subcarrier power at each adjacent PU."""

    t_right: np.ndarray
    t_left: np.ndarray

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "t_right", "t_left"])
            for k, (r, l) in enumerate(zip(self.t_right, self.t_left)):
                w.writerow([k, repr(float(r)), repr(float(l))])


def _band_integrals(config, oversample, nfft):
    """``(p_s/(M t_s)) * int S_GG`` over unit-spacing bands centred at ``d / t_s``.

    Returns an array indexed by ``d + 2K`` for ``d = -2K .. 2K``.
    """
    grid, sgg = filter_spectrum(config, oversample, nfft)
    P = len(grid) // (config.K * oversample)
    df = grid[1] - grid[0]
    centre = len(grid) // 2
    out = np.empty(4 * config.K + 1)
    for i, d in enumerate(range(-2 * config.K, 2 * config.K + 1)):
        lo = centre + d * P - P // 2
        seg = sgg[lo:lo + P + 1]
        out[i] = df * (seg.sum() - 0.5 * (seg[0] + seg[-1]))
    return out * config.p_s / (config.M * config.t_s)


@dataclass(frozen=True)
class AciGeometry:
    """Leakage of each subcarrier into each adjacent-channel bin.

    ``right[k, j]`` is the ACI power in right bin ``j`` per unit ``alpha_k`` with
    unit channel gain; ``left`` likewise.  Right bin ``j`` (0-based) is centred
    at ``K/(2 t_s) + (j + 1/2)/t_s``; left bins mirror it.
    """

    right: np.ndarray
    left: np.ndarray
    nfft: int

    @classmethod
    def build(cls, config: GfdmConfig, oversample=DEFAULT_OVERSAMPLE, nfft=DEFAULT_NFFT,
              rtol=1e-3, max_nfft=2**22):
        K = config.K
        if 2 * K + 1 > K * oversample // 2:
            raise DomainError("oversample too small to resolve both adjacent channels")
        nfft = _grid_nfft(K, oversample, nfft)
        while nfft // (K * oversample) < 64:
            nfft *= 2
        bands = _band_integrals(config, oversample, nfft)
        while True:
            finer = _band_integrals(config, oversample, 2 * nfft)
            used = np.r_[slice(0, 2 * K), slice(2 * K + 1, 4 * K + 1)]
            change = np.abs(finer[used] - bands[used]) / np.maximum(np.abs(finer[used]), 1e-300)
            nfft *= 2
            bands = finer
            if change.max() < rtol or nfft >= max_nfft:
                break
        k = np.arange(K)[:, None]
        j = np.arange(K)[None, :]
        right = bands[(K + j - k) + 2 * K]       # offset K + j - k spacings
        left = bands[-(j + 1 + k) + 2 * K]       # offset -(j + 1 + k) spacings
        return cls(right, left, nfft)


def aci_coefficients(config: GfdmConfig, gains: PuGainProfile, geometry=None,
                     oversample=DEFAULT_OVERSAMPLE, nfft=DEFAULT_NFFT) -> AciCoefficients:
    """``T_r(k)``, ``T_l(k)``: per-unit-power ACI at the right and left PU."""
    if geometry is None:
        geometry = AciGeometry.build(config, oversample, nfft)
    return AciCoefficients(geometry.right @ np.asarray(gains.right, dtype=float),
                           geometry.left @ np.asarray(gains.left, dtype=float))


def aci_power(coeffs: AciCoefficients, alphas):
    alphas = np.asarray(alphas, dtype=float)
    return float(alphas @ coeffs.t_right), float(alphas @ coeffs.t_left)
