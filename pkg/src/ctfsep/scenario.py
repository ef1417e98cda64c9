"""Synthetic desk-scale experiments: filters, sources, mixtures, noise.

Stands in for measured impulse responses and a speech corpus: filters are
a unit direct-path impulse at a random delay plus an exponentially
decaying Gaussian tail, and sources are dense trains of narrowband noise
bursts (speech-like activity in time, sparse per frequency bin). All
generation is deterministic under the scenario seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .metrics import npm
from .signals import MultichannelSignal


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of one synthetic scenario.

    ``snr_db=None`` means noise-free; ``npm_db=None`` means the solvers
    see the true filters. ``rir_tail_gain`` is the Gaussian tail's
    amplitude relative to the unit direct-path impulse and
    ``max_direct_delay`` bounds the random direct-path delay in samples.
    """

    n_mics: int
    n_sources: int
    duration_s: float
    rir_len: int
    rir_decay_s: float = 0.1
    sample_rate: int = 16000
    snr_db: float | None = None
    npm_db: float | None = None
    seed: int = 0
    rir_tail_gain: float = 0.35
    max_direct_delay: int = 32
    burst_density: float = 1.0

    def __post_init__(self):
        if self.n_mics < 1 or self.n_sources < 1:
            raise ValueError("need at least one mic and one source")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.rir_len < 1:
            raise ValueError("rir_len must be at least 1")
        if self.rir_decay_s <= 0:
            raise ValueError("rir_decay_s must be positive")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


@dataclass(frozen=True)
class MixResult:
    """Mixture tracks; images[i, j] is source j as seen at mic i."""

    mics: MultichannelSignal
    images: np.ndarray
    noise: np.ndarray
    noise_sigma2: float


@dataclass(frozen=True)
class Scenario:
    """Everything one experiment run needs."""

    spec: ScenarioSpec
    sources: MultichannelSignal
    rirs: np.ndarray
    mix: MixResult
    solver_rirs: np.ndarray
    npm_achieved_db: tuple[float, ...] = field(default=())


def synth_rir(spec: ScenarioSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random filters, shape (n_mics, n_sources, rir_len), unit l2 norm.

    Each filter is a unit impulse at a random integer delay plus a white
    Gaussian tail shaped by exp(-3 ln10 n / (fs * T60)), i.e. 60 dB decay
    at the T60-like ``rir_decay_s``.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n_mics, n_sources, length = spec.n_mics, spec.n_sources, spec.rir_len
    n = np.arange(length, dtype=np.float64)
    envelope = np.exp(-3.0 * np.log(10.0) * n / (spec.sample_rate * spec.rir_decay_s))
    rirs = np.zeros((n_mics, n_sources, length))
    for i in range(n_mics):
        for j in range(n_sources):
            delay = int(rng.integers(0, min(spec.max_direct_delay, length))) if length > 1 else 0
            h = np.zeros(length)
            h[delay] = 1.0
            if length > 1:
                tail = rng.standard_normal(length) * envelope * spec.rir_tail_gain
                tail[: delay + 1] = 0.0
                h += tail
            rirs[i, j] = h / np.linalg.norm(h)
    return rirs


def synth_sources(spec: ScenarioSpec, rng: np.random.Generator | None = None) -> MultichannelSignal:
    """Speech surrogates: overlapping narrowband bursts with brief pauses."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    fs = spec.sample_rate
    n = spec.n_samples
    out = np.zeros((spec.n_sources, n))
    for j in range(spec.n_sources):
        sig = np.zeros(n)
        t = 0
        while t < n:
            length = int(rng.uniform(0.08, 0.25) * fs)
            length = min(length, n - t)
            if length <= 64:
                break
            f0 = float(np.exp(rng.uniform(np.log(150.0), np.log(min(3800.0, fs / 2 * 0.9)))))
            hi = min(f0 * 1.3, fs / 2 - max(50.0, fs / 200))
            sos = butter(2, [f0 * 0.75, hi], "bandpass", fs=fs, output="sos")
            burst = sosfilt(sos, rng.standard_normal(length))
            sig[t : t + length] += burst * np.hanning(length) * rng.uniform(0.25, 1.0)
            t += int(length * rng.uniform(0.4, 0.9) / spec.burst_density)
            if rng.uniform() < 0.15:
                t += int(rng.uniform(0.05, 0.2) * fs)
        peak = np.max(np.abs(sig))
        if peak > 0:
            sig *= 0.7 / peak
        out[j] = sig
    return MultichannelSignal(out, fs)


def mix(
    sources: MultichannelSignal,
    rirs: np.ndarray,
    snr_db: float | None = None,
    seed: int = 0,
) -> MixResult:
    """Convolve, sum, and add white noise at the requested average SNR.

    SNR is the single-source image power over the noise power, averaged
    over sources in dB; the noise variance is solved accordingly.
    """
    rirs = np.asarray(rirs, dtype=np.float64)
    n_mics, n_sources, rir_len = rirs.shape
    if sources.n_channels != n_sources:
        raise ValueError(f"expected {n_sources} sources, got {sources.n_channels}")
    n_out = sources.n_samples + rir_len - 1
    images = np.zeros((n_mics, n_sources, n_out))
    for i in range(n_mics):
        for j in range(n_sources):
            images[i, j] = fftconvolve(rirs[i, j], sources.samples[j])
    clean = images.sum(axis=1)
    if snr_db is None:
        noise = np.zeros_like(clean)
        sigma2 = 0.0
    else:
        power = np.mean(images ** 2, axis=(0, 2))  # per-source image power
        if np.any(power <= 0):
            raise ValueError("cannot set an SNR against an all-zero source image")
        sigma2 = float(np.exp(np.mean(np.log(power))) * 10.0 ** (-snr_db / 10.0))
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(clean.shape) * np.sqrt(sigma2)
    mics = MultichannelSignal(clean + noise, sources.sample_rate)
    return MixResult(mics=mics, images=images, noise=noise, noise_sigma2=sigma2)


def perturb_rirs(
    rirs: np.ndarray, npm_db: float, seed: int = 0, tol_db: float = 0.01
) -> tuple[np.ndarray, tuple[float, ...]]:
    """Add scaled white Gaussian noise until each source's filters sit at
    the requested projection misalignment.

    The scale is solved per source by bisection on its logarithm; the
    achieved values (within ``tol_db``) are returned alongside.
    """
    rirs = np.asarray(rirs, dtype=np.float64)
    n_mics, n_sources, length = rirs.shape
    rng = np.random.default_rng(seed)
    out = np.empty_like(rirs)
    achieved = []
    for j in range(n_sources):
        a = rirs[:, j, :]
        g = rng.standard_normal(a.shape)
        lo, hi = -14.0, 4.0
        if npm(a, a + 10.0 ** hi * g) < npm_db:
            raise ValueError(f"requested NPM {npm_db} dB is not reachable")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = npm(a, a + 10.0 ** mid * g)
            if abs(val - npm_db) <= tol_db:
                break
            if val < npm_db:
                lo = mid
            else:
                hi = mid
        else:
            raise ValueError(f"NPM bisection did not reach {npm_db} dB")
        out[:, j, :] = a + 10.0 ** mid * g
        achieved.append(val)
    return out, tuple(achieved)


def make_scenario(spec: ScenarioSpec) -> Scenario:
    """Generate sources, filters, the mixture, and solver-side filters."""
    rng = np.random.default_rng(spec.seed)
    rirs = synth_rir(spec, rng)
    sources = synth_sources(spec, rng)
    mixed = mix(sources, rirs, spec.snr_db, seed=spec.seed + 1)
    if spec.npm_db is not None:
        solver_rirs, achieved = perturb_rirs(rirs, spec.npm_db, seed=spec.seed + 2)
    else:
        solver_rirs, achieved = rirs, ()
    return Scenario(
        spec=spec,
        sources=sources,
        rirs=rirs,
        mix=mixed,
        solver_rirs=solver_rirs,
        npm_achieved_db=achieved,
    )
