"""Band-to-band filters: time-domain RIR -> per-bin FIR along frames.

A length-L time-domain filter becomes, at every frequency bin k, a short
complex FIR filter acting along the frame axis. The kernel of the mapping
is the modulated cross-correlation of the analysis and synthesis windows,
sampled on the hop grid. Non-causal taps (one window of look-ahead) are
shifted into the causal part, which delays every filtered sequence by a
fixed ``frame_shift_taps`` frames; all consumers compensate with that one
documented constant.

Scaling note: the kernel is the cross-correlation of the analysis window
with the effective synthesis window of the transform (``synthesis /
frame_len``, since the inverse DFT carries the 1/N factor), rescaled so
the hop-sampled taps sum to one at every bin's center. Without the
rescale the band-to-band filters carry a deterministic gain deficit
(~0.73 for a Hamming window at quarter-frame hop) that the discarded
cross-band terms would supply; a least-squares fit of band-to-band
filters to signals absorbs exactly this factor, so the rescaled kernel is
the better model and is what every solver here consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .signals import Spectrogram, WindowPair


@dataclass(frozen=True)
class ZetaKernel:
    """Band-to-band kernel at one bin: dense sequence and hop-sampled taps.

    ``dense[i]`` is zeta_k(n) at n = i - (frame_len - 1), support
    |n| <= frame_len - 1. ``taps[i]`` is zeta_k(p*hop) at
    p = i - frame_shift_taps.
    """

    k: int
    dense: np.ndarray
    taps: np.ndarray
    frame_len: int
    hop: int

    @property
    def frame_shift_taps(self) -> int:
        return -(-self.frame_len // self.hop) - 1


@dataclass(frozen=True)
class CtfTensor:
    """Per-bin FIR filters along frames, shape (mics, sources, bins, taps).

    Tap index runs over [0, n_taps); the first ``frame_shift_taps`` taps
    hold the shifted non-causal part.
    """

    coeffs: np.ndarray
    frame_len: int
    hop: int

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim != 4:
            raise ValueError(f"coeffs must be 4-D (I, J, K, L), got shape {coeffs.shape}")
        if coeffs.shape[3] < 1:
            raise ValueError("filters must have at least one tap")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("filter coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n_mics(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_sources(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_bins(self) -> int:
        return self.coeffs.shape[2]

    @property
    def n_taps(self) -> int:
        return self.coeffs.shape[3]

    @property
    def frame_shift_taps(self) -> int:
        return -(-self.frame_len // self.hop) - 1


def kernel_synthesis_window(win: WindowPair) -> np.ndarray:
    """Synthesis window entering the kernel: scaled for unit center gain.

    Starting from ``synthesis / frame_len`` (the effective synthesis
    window of :func:`~ctfsep.signals.istft`), the window is divided by the
    sum of the hop-sampled cross-correlation taps so that the sampled
    kernel has unit gain at every band center.
    """
    n, hop = win.frame_len, win.hop
    ns = win.frame_shift_taps
    raw = np.correlate(win.synthesis / n, win.analysis, mode="full")
    center_gain = np.sum(raw[np.arange(-ns, ns + 1) * hop + n - 1])
    if center_gain <= 0:
        raise ValueError("degenerate window pair: non-positive band-center gain")
    return win.synthesis / (n * center_gain)


def window_cross_correlation(win: WindowPair) -> np.ndarray:
    """c(n) = sum_m w_a(m) * w_ker(n + m) on n in [-(N-1), N-1]."""
    # index i holds lag n = i - (N-1)
    return np.correlate(kernel_synthesis_window(win), win.analysis, mode="full")


def zeta_kernel(win: WindowPair, k: int) -> ZetaKernel:
    """Band-to-band kernel zeta_k(n) = exp(2j*pi*k*n/N) * c(n) at bin k."""
    n = win.frame_len
    if not 0 <= k <= n // 2:
        raise ValueError(f"bin index k must be in [0, {n // 2}], got {k}")
    c = window_cross_correlation(win)
    lags = np.arange(-(n - 1), n)
    dense = np.exp(2j * np.pi * k * lags / n) * c
    ns = win.frame_shift_taps
    p = np.arange(-ns, ns + 1)
    taps = np.exp(2j * np.pi * k * p * win.hop / n) * c[p * win.hop + n - 1]
    return ZetaKernel(k=k, dense=dense, taps=taps, frame_len=n, hop=win.hop)


def sampled_zeta_taps(win: WindowPair) -> np.ndarray:
    """Hop-sampled kernel taps for every bin, shape (n_bins, 2*ns + 1)."""
    n, hop = win.frame_len, win.hop
    ns = win.frame_shift_taps
    c = window_cross_correlation(win)
    p = np.arange(-ns, ns + 1)
    k = np.arange(n // 2 + 1)
    return np.exp(2j * np.pi * np.outer(k, p) * hop / n) * c[p * hop + n - 1]


def ctf_length(rir_len: int, frame_len: int, hop: int) -> int:
    """Tap count of a converted RIR: ceil((L + N - 1)/D) + ceil(N/D) - 1."""
    return -(-(rir_len + frame_len - 1) // hop) + (-(-frame_len // hop) - 1)


def rir_to_ctf(rirs: np.ndarray, win: WindowPair, rir_truncate: int | None = None) -> CtfTensor:
    """Convert time-domain filters to per-bin frame-domain filters.

    For each mic/source pair and bin k the taps are the convolution of the
    filter with the band-to-band kernel, evaluated on the hop grid, with
    the non-causal part shifted into the causal indices.

    Parameters
    ----------
    rirs : array, shape (n_mics, n_sources, rir_len)
    win : WindowPair
    rir_truncate : int, optional
        Use only the first ``rir_truncate`` samples of every filter.
    """
    rirs = np.asarray(rirs, dtype=np.float64)
    if rirs.ndim != 3:
        raise ValueError(f"rirs must be 3-D (I, J, L), got shape {rirs.shape}")
    if rir_truncate is not None:
        rirs = rirs[:, :, :rir_truncate]
    n_mics, n_sources, rir_len = rirs.shape
    if rir_len < 1:
        raise ValueError("rirs must have at least one sample")
    n, hop = win.frame_len, win.hop
    ns = win.frame_shift_taps
    n_bins = n // 2 + 1
    n_taps = ctf_length(rir_len, n, hop)
    c = window_cross_correlation(win)

    # taps[p] = e^{2pi i k pD/N} * DFT_k{ m -> a(m) c(pD - m) }, the DFT
    # evaluated by folding the (up to 2N-1 wide) windowed segment mod N.
    k = np.arange(n_bins)
    coeffs = np.zeros((n_mics, n_sources, n_bins, n_taps), dtype=np.complex128)
    m_all = np.arange(rir_len)
    for p_idx in range(n_taps):
        p = p_idx - ns
        lag = p * hop - m_all  # argument of c for each filter sample
        valid = np.abs(lag) <= n - 1
        if not np.any(valid):
            continue
        m = m_all[valid]
        weights = c[lag[valid] + n - 1]
        seg = rirs[:, :, m] * weights  # (I, J, n_valid)
        folded = np.zeros((n_mics, n_sources, n), dtype=np.float64)
        np.add.at(folded, (slice(None), slice(None), m % n), seg)
        twist = np.exp(2j * np.pi * k * (p * hop) / n)
        coeffs[:, :, :, p_idx] = np.fft.rfft(folded, axis=-1) * twist
    return CtfTensor(coeffs=coeffs, frame_len=n, hop=hop)


def ctf_convolve(ctf: CtfTensor, sources: Spectrogram) -> Spectrogram:
    """Mix source spectrograms through the filters (full convolution).

    Output has ``n_frames + n_taps - 1`` frames; because of the causal
    shift, output frame t corresponds to mic frame t - frame_shift_taps.
    """
    if sources.n_channels != ctf.n_sources:
        raise ValueError(
            f"filter tensor expects {ctf.n_sources} sources, got {sources.n_channels}"
        )
    if sources.n_bins != ctf.n_bins:
        raise ValueError(f"bin mismatch: {sources.n_bins} != {ctf.n_bins}")
    out = fftconvolve(ctf.coeffs, sources.coeffs[np.newaxis], axes=3).sum(axis=1)
    return sources.with_coeffs(out)


def ctf_adjoint(ctf: CtfTensor, residual: Spectrogram) -> Spectrogram:
    """Adjoint of :func:`ctf_convolve` under the standard inner product.

    Conjugate-transposes the mic/source indices and correlates along
    frames (valid part), mapping T frames to T - n_taps + 1.
    """
    if residual.n_channels != ctf.n_mics:
        raise ValueError(f"filter tensor expects {ctf.n_mics} mics, got {residual.n_channels}")
    if residual.n_bins != ctf.n_bins:
        raise ValueError(f"bin mismatch: {residual.n_bins} != {ctf.n_bins}")
    n_taps = ctf.n_taps
    t = residual.n_frames
    if t < n_taps:
        raise ValueError(f"residual needs at least {n_taps} frames, got {t}")
    rev = np.conj(ctf.coeffs[:, :, :, ::-1])
    full = fftconvolve(rev, residual.coeffs[:, np.newaxis], axes=3)
    out = full[:, :, :, n_taps - 1 : t].sum(axis=0)
    return residual.with_coeffs(out)


def ctf_energy(ctf: CtfTensor, j: int, k: int) -> float:
    """Filter energy of source j at bin k, summed over mics and taps."""
    return float(np.sum(np.abs(ctf.coeffs[:, j, k, :]) ** 2))
