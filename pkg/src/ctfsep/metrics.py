"""Separation and enhancement metrics at desk scale.

SDR and SIR follow the projection convention: the estimate is decomposed
by least squares onto short-filtered copies of the references (32 taps by
default), so gain, small delays, and mild coloration count as allowed
distortion. Scores are capped at +/-60 dB. Output SNR is a plain power
ratio between a noise-free output and a noise-only output; for solvers
without a linear filter to re-apply, a projection-based decomposition
against the known ground truth stands in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import solve
from scipy.signal import fftconvolve

CAP_DB = 60.0
NPM_FLOOR_DB = -120.0


def _xcorr(a: np.ndarray, b: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """sum_t a(t) b(t + lag) on zero-extended signals, for each lag."""
    full = fftconvolve(a, b[::-1])
    center = len(b) - 1
    return full[center - lags]


def _fit_projection(
    estimate: np.ndarray, references: list[np.ndarray], filter_len: int
) -> list[np.ndarray]:
    """Least-squares filters f_r with estimate ~ sum_r conv(ref_r, f_r).

    Uses zero-extended correlations, so the Gram matrix is block-Toeplitz
    and positive semidefinite; a tiny ridge keeps the solve stable.
    """
    m = len(references)
    taps = np.arange(filter_len)
    gram = np.empty((m * filter_len, m * filter_len))
    rhs = np.empty(m * filter_len)
    for a in range(m):
        for b in range(m):
            lags = taps[:, np.newaxis] - taps[np.newaxis, :]  # tau_a - tau_b
            cc = _xcorr(references[a], references[b], np.arange(-filter_len + 1, filter_len))
            gram[a * filter_len : (a + 1) * filter_len, b * filter_len : (b + 1) * filter_len] = cc[
                lags + filter_len - 1
            ]
        rhs[a * filter_len : (a + 1) * filter_len] = _xcorr(estimate, references[a], -taps)
    ridge = 1e-10 * max(np.mean(np.diag(gram)), 1e-300)
    gram[np.diag_indices_from(gram)] += ridge
    coef = solve(gram, rhs, assume_a="pos")
    return [coef[a * filter_len : (a + 1) * filter_len] for a in range(m)]


def _trim_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = min(len(a), len(b))
    return a[:n], b[:n]


def energy_ratio_db(num: float, den: float, cap_db: float = CAP_DB) -> float:
    """10 log10(num/den) clipped to +/-cap_db, with zero-safe endpoints."""
    if num <= 0.0:
        return -cap_db
    if den <= 0.0:
        return cap_db
    return float(np.clip(10.0 * np.log10(num / den), -cap_db, cap_db))


_ratio_db = energy_ratio_db


def sdr(estimate: np.ndarray, reference: np.ndarray, filter_len: int = 32) -> float:
    """Signal-to-distortion ratio against one reference, in dB."""
    estimate, reference = _trim_pair(np.asarray(estimate), np.asarray(reference))
    (f,) = _fit_projection(estimate, [reference], filter_len)
    target = fftconvolve(reference, f)[: len(estimate)]
    return _ratio_db(float(np.sum(target ** 2)), float(np.sum((estimate - target) ** 2)))


def sir(
    estimate: np.ndarray,
    desired_reference: np.ndarray,
    interferer_references: list[np.ndarray],
    filter_len: int = 32,
) -> float:
    """Signal-to-interference ratio from a joint projection, in dB."""
    estimate = np.asarray(estimate)
    refs = [np.asarray(desired_reference)] + [np.asarray(r) for r in interferer_references]
    n = min(len(estimate), *(len(r) for r in refs))
    estimate = estimate[:n]
    refs = [r[:n] for r in refs]
    filters = _fit_projection(estimate, refs, filter_len)
    desired = fftconvolve(refs[0], filters[0])[:n]
    interference = np.zeros(n)
    for r, f in zip(refs[1:], filters[1:]):
        interference += fftconvolve(r, f)[:n]
    return _ratio_db(float(np.sum(desired ** 2)), float(np.sum(interference ** 2)))


def output_snr(clean_output: np.ndarray, noise_output: np.ndarray) -> float:
    """Power ratio of a noise-free output track to a noise-only output."""
    return _ratio_db(
        float(np.sum(np.asarray(clean_output) ** 2)),
        float(np.sum(np.asarray(noise_output) ** 2)),
    )


def output_snr_projection(
    estimate: np.ndarray, references: list[np.ndarray], filter_len: int = 32
) -> float:
    """Output SNR when the output cannot be split by re-filtering tracks.

    The estimate is decomposed onto short-filtered copies of the known
    clean references; everything that projection cannot explain counts as
    output noise.
    """
    estimate = np.asarray(estimate)
    refs = [np.asarray(r) for r in references]
    n = min(len(estimate), *(len(r) for r in refs))
    estimate = estimate[:n]
    refs = [r[:n] for r in refs]
    filters = _fit_projection(estimate, refs, filter_len)
    signal = np.zeros(n)
    for r, f in zip(refs, filters):
        signal += fftconvolve(r, f)[:n]
    return _ratio_db(float(np.sum(signal ** 2)), float(np.sum((estimate - signal) ** 2)))


def input_snr(images: np.ndarray, noise: np.ndarray) -> float:
    """Average single-source-to-noise ratio of a mixture, in dB."""
    images = np.asarray(images)
    noise_power = float(np.mean(np.asarray(noise) ** 2))
    per_source = np.mean(images ** 2, axis=(0, 2))
    if noise_power <= 0.0:
        return CAP_DB
    vals = [_ratio_db(float(p), noise_power) for p in per_source]
    return float(np.mean(vals))


def npm(a: np.ndarray, a_hat: np.ndarray) -> float:
    """Normalized projection misalignment between filter sets, in dB.

    The best scalar multiple of ``a_hat`` is removed from ``a`` before
    comparing, so pure rescaling scores at the -120 dB floor.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    a_hat = np.asarray(a_hat, dtype=np.float64).ravel()
    denom = float(np.dot(a_hat, a_hat))
    if denom == 0.0:
        return 0.0 if np.any(a) else NPM_FLOOR_DB
    residual = a - (np.dot(a, a_hat) / denom) * a_hat
    norm_a = np.linalg.norm(a)
    if norm_a == 0.0:
        return NPM_FLOOR_DB
    ratio = np.linalg.norm(residual) / norm_a
    if ratio <= 10.0 ** (NPM_FLOOR_DB / 20.0):
        return NPM_FLOOR_DB
    return float(max(20.0 * np.log10(ratio), NPM_FLOOR_DB))


@dataclass
class MetricsReport:
    """Per-run metric bundle; converts to plain JSON-ready data."""

    method: str
    sdr_db: list[float]
    sir_db: list[float | None]
    output_snr_db: float | None = None
    input_snr_db: float | None = None
    npm_db: list[float] = field(default_factory=list)
    runtime_s: float | None = None
    converged: bool | None = None
    notes: dict[str, Any] = field(default_factory=dict)

    def to_dict(self, include_runtime: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "method": self.method,
            "sdr_db": [_round(v) for v in self.sdr_db],
            "sir_db": [None if v is None else _round(v) for v in self.sir_db],
            "output_snr_db": None if self.output_snr_db is None else _round(self.output_snr_db),
            "input_snr_db": None if self.input_snr_db is None else _round(self.input_snr_db),
            "npm_db": [_round(v) for v in self.npm_db],
            "converged": self.converged,
            "notes": self.notes,
        }
        if include_runtime:
            out["runtime_s"] = None if self.runtime_s is None else round(self.runtime_s, 3)
        return out


def _round(v: float) -> float:
    return round(float(v), 6)
