"""Time-domain signal containers and the STFT/iSTFT transform pair.

All downstream processing runs on one-sided STFT tensors produced here.
The analysis window is a periodic Hamming window; the synthesis window is
its canonical dual, so the weighted overlap-add of the pair is exactly
constant and the transform pair is a perfect-reconstruction system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MultichannelSignal:
    """Real multichannel signal, shape (channels, n_samples)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2:
            raise ValueError(f"samples must be 1-D or 2-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class WindowPair:
    """Analysis/synthesis window pair with perfect overlap-add.

    ``synthesis`` is the canonical dual of ``analysis``:
    ``w(n) = w_a(n) / sum_m w_a(n + m*hop)**2``, which makes
    ``sum_m w_a(n + m*hop) * w(n + m*hop) == 1`` for every n.
    """

    analysis: np.ndarray
    synthesis: np.ndarray
    frame_len: int
    hop: int

    def __post_init__(self):
        if self.hop < 1 or self.hop * 4 > self.frame_len:
            raise ValueError(
                f"hop must satisfy 1 <= hop <= frame_len/4, got hop={self.hop}, "
                f"frame_len={self.frame_len}"
            )
        if len(self.analysis) != self.frame_len or len(self.synthesis) != self.frame_len:
            raise ValueError("window lengths must equal frame_len")
        ola = _overlap_add_profile(self.analysis * self.synthesis, self.hop)
        if np.max(np.abs(ola - 1.0)) > 1e-12:
            raise ValueError("windows do not satisfy perfect overlap-add")

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def frame_shift_taps(self) -> int:
        """Non-causal tap count ceil(N/D) - 1 of the band-to-band filters."""
        return -(-self.frame_len // self.hop) - 1


@dataclass(frozen=True)
class Spectrogram:
    """One-sided complex STFT tensor, shape (channels, n_bins, n_frames).

    ``n_samples`` records the time-domain length the tensor reconstructs to
    (the padding that :func:`stft` adds is trimmed again by :func:`istft`).
    """

    coeffs: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int
    n_samples: int

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim != 3:
            raise ValueError(f"coeffs must be 3-D, got shape {coeffs.shape}")
        if coeffs.shape[1] != self.frame_len // 2 + 1:
            raise ValueError(
                f"expected {self.frame_len // 2 + 1} frequency bins, got {coeffs.shape[1]}"
            )
        if coeffs.shape[2] < 1:
            raise ValueError("spectrogram must have at least one frame")
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n_channels(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_bins(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[2]

    def with_coeffs(self, coeffs: np.ndarray) -> "Spectrogram":
        """Same transform metadata, new coefficient tensor."""
        return Spectrogram(coeffs, self.frame_len, self.hop, self.sample_rate, self.n_samples)


def _overlap_add_profile(product: np.ndarray, hop: int) -> np.ndarray:
    """sum_m product[n + m*hop] for each residue n mod hop, evaluated on [0, N)."""
    n = len(product)
    out = np.empty(n)
    for r in range(hop):
        out[r::hop] = np.sum(product[r::hop])
    return out


def design_windows(frame_len: int, hop: int) -> WindowPair:
    """Design the periodic-Hamming analysis window and its canonical dual.

    Parameters
    ----------
    frame_len : int
        Window/DFT length N (even).
    hop : int
        Frame step D. Must satisfy D <= N/4 so that downsampling the
        band-to-band filters does not fold the window main lobe.

    Returns
    -------
    WindowPair
    """
    if frame_len < 4 or frame_len % 2 != 0:
        raise ValueError(f"frame_len must be even and >= 4, got {frame_len}")
    if hop < 1 or hop * 4 > frame_len:
        raise ValueError(f"hop must satisfy 1 <= hop <= frame_len/4, got {hop}")
    n = np.arange(frame_len)
    analysis = 0.54 - 0.46 * np.cos(2.0 * np.pi * n / frame_len)
    denom = _overlap_add_profile(analysis ** 2, hop)
    if np.any(denom <= 0.0):
        raise ValueError("overlap-add of squared analysis window has a non-positive tap")
    synthesis = analysis / denom
    return WindowPair(analysis=analysis, synthesis=synthesis, frame_len=frame_len, hop=hop)


def n_frames_for(n_samples: int, frame_len: int, hop: int) -> int:
    """Frame count of :func:`stft`: P = ceil((n_samples + N) / D).

    The signal is zero-padded by one frame on each side; frame p starts at
    sample p*D of the padded signal, and this count is exactly enough for
    every original sample to be covered by the full N/D overlapping frames.
    """
    return -(-(n_samples + frame_len) // hop)


def stft(signal: MultichannelSignal, win: WindowPair) -> Spectrogram:
    """One-sided STFT of every channel.

    The signal is zero-padded by ``frame_len`` on both ends, then frame p
    covers padded samples [p*D, p*D + N) and is windowed with the analysis
    window before an rFFT.
    """
    if signal.n_samples == 0:
        raise ValueError("cannot transform an empty signal")
    n_samp = signal.n_samples
    frame_len, hop = win.frame_len, win.hop
    n_fr = n_frames_for(n_samp, frame_len, hop)
    padded = np.pad(signal.samples, ((0, 0), (frame_len, frame_len)))
    # pad the tail so the last frame always fits
    need = (n_fr - 1) * hop + frame_len
    if need > padded.shape[1]:
        padded = np.pad(padded, ((0, 0), (0, need - padded.shape[1])))
    idx = np.arange(frame_len)[np.newaxis, :] + hop * np.arange(n_fr)[:, np.newaxis]
    frames = padded[:, idx] * win.analysis
    coeffs = np.fft.rfft(frames, axis=-1).transpose(0, 2, 1)
    return Spectrogram(
        coeffs=coeffs,
        frame_len=frame_len,
        hop=hop,
        sample_rate=signal.sample_rate,
        n_samples=n_samp,
    )


def istft(spec: Spectrogram, win: WindowPair, n_samples: int | None = None) -> MultichannelSignal:
    """Weighted overlap-add inverse of :func:`stft`.

    The one-sided spectrum is extended conjugate-symmetrically (via irfft),
    each frame is weighted with the synthesis window, overlap-added, and
    the stft padding is trimmed. ``n_samples`` overrides the length stored
    in the spectrogram metadata.
    """
    if spec.frame_len != win.frame_len or spec.hop != win.hop:
        raise ValueError(
            f"spectrogram metadata (N={spec.frame_len}, D={spec.hop}) does not match "
            f"window pair (N={win.frame_len}, D={win.hop})"
        )
    if n_samples is None:
        n_samples = spec.n_samples
    frame_len, hop = win.frame_len, win.hop
    n_ch, _, n_fr = spec.coeffs.shape
    frames = np.fft.irfft(spec.coeffs.transpose(0, 2, 1), n=frame_len, axis=-1)
    frames *= win.synthesis
    total = (n_fr - 1) * hop + frame_len
    out = np.zeros((n_ch, total))
    for p in range(n_fr):
        out[:, p * hop : p * hop + frame_len] += frames[:, p]
    if frame_len + n_samples > total:
        out = np.pad(out, ((0, 0), (0, frame_len + n_samples - total)))
    return MultichannelSignal(out[:, frame_len : frame_len + n_samples], spec.sample_rate)
