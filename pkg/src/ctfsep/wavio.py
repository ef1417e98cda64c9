"""File I/O: WAV tracks, filter tensors, and noise PSD tables."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .signals import MultichannelSignal, Spectrogram, WindowPair, stft

RIR_MAGIC = b"CTFR"


class WavFormatError(Exception):
    """A file could not be parsed as the expected format."""


def load_wav(path: str | Path) -> MultichannelSignal:
    """Read a RIFF WAVE file (16-bit PCM or 32/64-bit float).

    PCM samples are normalized to [-1, 1); the returned layout is
    channels by samples.
    """
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise WavFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.ndim == 1:
        data = data[:, np.newaxis]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    return MultichannelSignal(samples.T, int(rate))


def save_wav(signal: MultichannelSignal, path: str | Path, fmt: str = "float32") -> None:
    """Write a WAV file as 32-bit float (default) or 16-bit PCM."""
    data = signal.samples.T
    if fmt == "float32":
        wavfile.write(str(path), signal.sample_rate, data.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(data, -1.0, 32767.0 / 32768.0)
        wavfile.write(str(path), signal.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ValueError(f"fmt must be 'float32' or 'pcm16', got {fmt!r}")


def save_rir_tensor(rirs: np.ndarray, path: str | Path) -> None:
    """Write filters as a binary tensor: 16-byte header then float64 data.

    Header: magic b'CTFR', then three little-endian uint32 dims
    (mics, sources, taps); data is little-endian float64 in C order.
    """
    rirs = np.ascontiguousarray(np.asarray(rirs, dtype="<f8"))
    if rirs.ndim != 3:
        raise ValueError(f"rirs must be 3-D, got shape {rirs.shape}")
    with open(path, "wb") as fh:
        fh.write(RIR_MAGIC)
        fh.write(struct.pack("<III", *rirs.shape))
        fh.write(rirs.tobytes())


def load_rir_tensor(path: str | Path) -> np.ndarray:
    """Read a filter tensor written by :func:`save_rir_tensor`."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != RIR_MAGIC:
            raise WavFormatError(f"{path}: not a filter tensor file (bad header)")
        n_mics, n_sources, n_taps = struct.unpack("<III", header[4:])
        data = fh.read()
    expected = n_mics * n_sources * n_taps * 8
    if len(data) != expected:
        raise WavFormatError(
            f"{path}: truncated tensor data ({len(data)} bytes, expected {expected})"
        )
    return np.frombuffer(data, dtype="<f8").reshape(n_mics, n_sources, n_taps).copy()


def load_rir_wavs(paths: list[str | Path], sample_rate: int | None = None) -> np.ndarray:
    """Assemble a filter tensor from one multichannel WAV per source."""
    per_source = []
    for path in paths:
        sig = load_wav(path)
        if sample_rate is not None and sig.sample_rate != sample_rate:
            raise WavFormatError(
                f"{path}: sample rate {sig.sample_rate} does not match {sample_rate}"
            )
        per_source.append(sig.samples)
    lengths = {s.shape for s in per_source}
    if len(lengths) != 1:
        raise WavFormatError("filter WAVs disagree in shape across sources")
    return np.stack(per_source, axis=1)


def save_noise_psd_csv(psd: np.ndarray, path: str | Path) -> None:
    """Write per-bin per-mic noise PSDs, one bin per row."""
    psd = np.asarray(psd, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in psd:
            writer.writerow([repr(float(v)) for v in row])


def load_noise_psd_csv(path: str | Path) -> np.ndarray:
    """Read a PSD table written by :func:`save_noise_psd_csv`."""
    rows = []
    with open(path, newline="") as fh:
        for record in csv.reader(fh):
            if not record:
                continue
            rows.append([float(v) for v in record])
    if not rows:
        raise WavFormatError(f"{path}: empty PSD table")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise WavFormatError(f"{path}: ragged PSD table")
    return np.asarray(rows, dtype=np.float64)


def measure_noise_psd(noise: MultichannelSignal, win: WindowPair) -> np.ndarray:
    """Per-bin per-mic PSD by periodogram averaging of the noise STFT."""
    spec: Spectrogram = stft(noise, win)
    return np.mean(np.abs(spec.coeffs) ** 2, axis=2).T.copy()
