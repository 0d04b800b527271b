"""GFDM transmitter and receiver building blocks.

Frames are laid out time-slot major: symbol ``s[m*K + k]`` rides on
subcarrier ``k`` of subsymbol ``m``.  All functions accept a single frame
(1-D) or a batch of frames stacked as columns (2-D, shape ``(MK, F)``).
"""

from dataclasses import dataclass

import numpy as np

from .config import GfdmConfig
from .errors import ConfigError, DomainError, SingularMatrixError

ZF_RCOND_FLOOR = 1e-12


@dataclass(frozen=True)
class PrototypeFilter:
    """Real prototype pulse sampled over one frame.

    ``taps`` holds ``M*K*oversample`` samples; with ``oversample == 1`` it is
    the unit-energy transmit filter of the critically sampled modulator.
    """

    taps: np.ndarray
    oversample: int = 1

    def shifted(self, m, K):
        """Circular shift by ``m`` subsymbols, i.e. ``g[(n - m*K*L) mod len]``."""
        return np.roll(self.taps, m * K * self.oversample)

    @property
    def energy(self):
        return float(np.sum(np.abs(self.taps) ** 2))


def _raised_cosine(t, beta):
    """Raised-cosine impulse response at times ``t`` in units of the symbol period."""
    t = np.asarray(t, dtype=float)
    out = np.sinc(t)
    if beta == 0:
        return out
    denom = 1.0 - (2.0 * beta * t) ** 2
    singular = np.isclose(denom, 0.0, atol=1e-12)
    safe = np.where(singular, 1.0, denom)
    out = out * np.cos(np.pi * beta * t) / safe
    # limit at |t| = 1/(2 beta)
    return np.where(singular, np.pi / 4.0 * np.sinc(1.0 / (2.0 * beta)), out)


def build_prototype_filter(config: GfdmConfig, oversample=1) -> PrototypeFilter:
    """Build the transmit prototype filter of a configuration.

    The raised-cosine pulse is sampled with ``K * oversample`` samples per
    subsymbol over the whole frame, centred circularly on ``n = 0``.  The
    rectangular pulse covers the frame.  Scaling is chosen so the critically
    sampled filter (``oversample == 1``) has unit energy; oversampled taps share
    that scale, so ``taps[::oversample]`` reproduces the critical filter.
    """
    if not 0.0 <= config.rolloff <= 1.0:
        raise ConfigError(f"rolloff must lie in [0, 1], got {config.rolloff!r}")
    if int(oversample) != oversample or oversample < 1:
        raise ConfigError("oversample must be a positive integer")
    K, M, L = config.K, config.M, int(oversample)
    N = M * K
    if N < 2:
        raise ConfigError("frame length must be at least 2 samples")

    if config.filter_kind == "rectangular":
        return PrototypeFilter(np.full(N * L, 1.0 / np.sqrt(N)), L)

    n = np.arange(N * L)
    centred = (n + (N * L) // 2) % (N * L) - (N * L) // 2
    taps = _raised_cosine(centred / (K * L), config.rolloff)
    crit = taps[::L]
    taps = taps / np.sqrt(np.sum(crit**2))
    return PrototypeFilter(taps, L)


def subcarrier_offsets(K):
    """Frequency offsets ``k - (K-1)/2`` in units of the subcarrier spacing."""
    return np.arange(K) - (K - 1) / 2.0


@dataclass(frozen=True)
class ModulationMatrix:
    """The ``MK x MK`` GFDM modulation matrix; column ``m*K + k`` is pulse (m, k)."""

    entries: np.ndarray
    K: int
    M: int

    def column_index(self, m, k):
        return m * self.K + k

    @property
    def shape(self):
        return self.entries.shape

    def to_csv(self, path):
        write_complex_matrix_csv(path, self.entries)


def modulation_columns(filt: PrototypeFilter, K, M):
    """Columns of the (possibly oversampled) modulation matrix.

    Returns an array of shape ``(M*K*L, M*K)``; with ``L == 1`` this is ``A``.
    """
    L = filt.oversample
    n = np.arange(M * K * L)
    phase = np.exp(2j * np.pi * np.outer(n, subcarrier_offsets(K)) / (K * L))
    cols = np.empty((M * K * L, M * K), dtype=complex)
    for m in range(M):
        cols[:, m * K:(m + 1) * K] = filt.shifted(m, K)[:, None] * phase
    return cols


def build_modulation_matrix(config: GfdmConfig, filt: PrototypeFilter) -> ModulationMatrix:
    if filt.oversample != 1 or filt.taps.shape != (config.N,):
        raise DomainError("modulation matrix needs a critically sampled filter of length M*K")
    return ModulationMatrix(modulation_columns(filt, config.K, config.M), config.K, config.M)


def _check_alloc(alphas, K):
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (K,):
        raise DomainError(f"allocation must have length K={K}, got shape {alphas.shape}")
    if np.any(alphas < 0):
        raise DomainError("subcarrier powers must be non-negative")
    return alphas


def modulate(frame, alphas, A: ModulationMatrix):
    """Map symbols to time samples: ``x = A @ (sqrt(alpha) * s)``."""
    s = np.asarray(frame)
    if s.shape[0] != A.K * A.M:
        raise DomainError(f"frame must have M*K={A.K * A.M} symbols, got {s.shape[0]}")
    amp = np.tile(np.sqrt(_check_alloc(alphas, A.K)), A.M)
    if s.ndim == 2:
        amp = amp[:, None]
    return A.entries @ (amp * s)


def add_cp(x, n_cp):
    """Prepend the last ``n_cp`` samples (along axis 0)."""
    x = np.asarray(x)
    if n_cp < 0 or n_cp > x.shape[0]:
        raise DomainError(f"cyclic prefix length {n_cp} invalid for {x.shape[0]} samples")
    if n_cp == 0:
        return x.copy()
    return np.concatenate([x[-n_cp:], x], axis=0)


def remove_cp(y, n_cp, frame_len=None):
    """Drop the first ``n_cp`` samples (along axis 0)."""
    y = np.asarray(y)
    if n_cp < 0 or n_cp > y.shape[0]:
        raise DomainError(f"cyclic prefix length {n_cp} invalid for {y.shape[0]} samples")
    if frame_len is not None and y.shape[0] != frame_len + n_cp:
        raise DomainError(f"expected {frame_len + n_cp} samples, got {y.shape[0]}")
    return y[n_cp:].copy()


def reciprocal_condition(matrix):
    """Reciprocal 2-norm condition number (0 for exactly singular input)."""
    s = np.linalg.svd(matrix, compute_uv=False)
    return 0.0 if s[0] == 0 else float(s[-1] / s[0])


def build_receiver_matrix(A: ModulationMatrix, kind):
    """Receiver matrix ``B``: ``A^H`` for ``"MF"``, ``A^-1`` for ``"ZF"``.

    Raises
    ------
    SingularMatrixError
        ZF requested and the reciprocal condition number is below 1e-12.
    """
    kind = kind.upper()
    if kind == "MF":
        return A.entries.conj().T
    if kind != "ZF":
        raise DomainError(f"receiver kind must be 'MF' or 'ZF', got {kind!r}")
    rcond = reciprocal_condition(A.entries)
    if rcond < ZF_RCOND_FLOOR:
        raise SingularMatrixError(
            f"modulation matrix is numerically singular (rcond={rcond:.3e})", rcond
        )
    return np.linalg.inv(A.entries)


def demodulate(u, B, alphas):
    """Linear detection ``s_hat = (B @ u) / sqrt(alpha_k)``."""
    u = np.asarray(u)
    B = np.asarray(B)
    N = B.shape[0]
    if u.shape[0] != N:
        raise DomainError(f"received block must have {N} samples, got {u.shape[0]}")
    alphas = np.asarray(alphas, dtype=float)
    K = alphas.shape[0]
    if N % K:
        raise DomainError("allocation length does not divide the frame length")
    if np.any(alphas <= 0):
        raise DomainError("every demodulated subcarrier needs strictly positive power")
    scale = np.tile(1.0 / np.sqrt(alphas), N // K)
    if u.ndim == 2:
        scale = scale[:, None]
    return (B @ u) * scale


def write_complex_matrix_csv(path, matrix):
    """Row-major CSV where each cell is ``re,im`` (quoted)."""
    matrix = np.atleast_2d(matrix)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in matrix:
            fh.write(",".join(f'"{v.real:.17g},{v.imag:.17g}"' for v in row))
            fh.write("\n")
