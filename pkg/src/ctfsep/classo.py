"""Constrained-Lasso source recovery by Douglas-Rachford splitting.

Per frequency bin, recover the J source coefficient sequences by
minimizing their entrywise l1 norm subject to the quadratic fitting
constraint ||A * s - x||^2 <= eps, where A * s is the frame-axis
convolution with the per-bin filters truncated to the observed frame
count. The constraint projection runs an accelerated dual iteration whose
step size comes from a power-iteration estimate of the operator norm.

The tolerance eps combines the expected noise energy (Erlang statistics,
minus two standard deviations) with one percent of the spectral-
subtraction estimate of the noise-free signal energy.

All bins are solved together on stacked arrays; bins drop out of the
iteration as they converge, and each bin's stopping decisions match the
single-bin reference functions exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.fft import next_fast_len

from .ctf import CtfTensor
from .signals import Spectrogram


@dataclass(frozen=True)
class ToleranceModel:
    """Per-bin constraint tolerances derived from noise PSDs.

    All arrays are indexed by frequency bin. ``eps_noise`` is the relaxed
    noise energy, ``gamma_signal`` the spectral-subtraction estimate of
    the noise-free energy, ``eps_signal`` its one-percent share, and
    ``eps`` their sum.
    """

    sigma2: np.ndarray
    n_frames: int
    eps_noise: np.ndarray
    gamma_signal: np.ndarray
    eps_signal: np.ndarray
    eps: np.ndarray


@dataclass(frozen=True)
class ClassoConfig:
    """Douglas-Rachford and projection parameters."""

    alpha: float = 1.0
    gamma: float = 0.01
    eta1: float = 0.01
    max_outer: int = 20
    mu_factor: float = 1.0
    max_inner: int = 300
    slack: float = 1.1

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must be in (0, 2), got {self.alpha}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.eta1 <= 0:
            raise ValueError("eta1 must be positive")
        if not 0.0 < self.mu_factor < 2.0:
            raise ValueError(f"mu_factor must be in (0, 2), got {self.mu_factor}")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.slack < 1.0:
            raise ValueError("slack must be at least 1")


class ClassoResult(NamedTuple):
    sources: Spectrogram
    feasible: np.ndarray
    outer_iterations: np.ndarray


class ProjectionResult(NamedTuple):
    projected: np.ndarray
    feasible: bool
    iterations: int


def compute_tolerance(noise_psd: np.ndarray, mics: Spectrogram) -> ToleranceModel:
    """Constraint tolerances from per-bin per-mic noise PSDs.

    The noise energy over P frames and I mics has mean sum_i P*sigma_i^2
    and variance sum_i P*sigma_i^4; two standard deviations are
    subtracted (clamped at zero) so that fitting tighter than the noise
    level, which would distort the sources, is unlikely.
    """
    noise_psd = np.asarray(noise_psd, dtype=np.float64)
    if noise_psd.ndim == 0:
        noise_psd = np.full((mics.n_bins, mics.n_channels), float(noise_psd))
    if noise_psd.shape != (mics.n_bins, mics.n_channels):
        raise ValueError(
            f"noise_psd must have shape ({mics.n_bins}, {mics.n_channels}), "
            f"got {noise_psd.shape}"
        )
    if np.any(noise_psd < 0):
        raise ValueError("noise PSDs must be non-negative")
    p = mics.n_frames
    mean = p * np.sum(noise_psd, axis=1)
    std = np.sqrt(p * np.sum(noise_psd ** 2, axis=1))
    eps_noise = np.maximum(mean - 2.0 * std, 0.0)
    x_energy = np.sum(np.abs(mics.coeffs) ** 2, axis=(0, 2))
    gamma_signal = np.maximum(x_energy - mean, 0.0)
    eps_signal = 0.01 * gamma_signal
    return ToleranceModel(
        sigma2=noise_psd,
        n_frames=p,
        eps_noise=eps_noise,
        gamma_signal=gamma_signal,
        eps_signal=eps_signal,
        eps=eps_noise + eps_signal,
    )


def shrinkage(z: np.ndarray, gamma: float) -> np.ndarray:
    """Entrywise complex soft threshold: scale each entry toward zero."""
    z = np.asarray(z)
    mag = np.abs(z)
    scale = np.zeros_like(mag)
    np.divide(np.maximum(mag - gamma, 0.0), mag, out=scale, where=mag > 0)
    return z * scale


def project_ball(u: np.ndarray, eps: float) -> np.ndarray:
    """Project onto {v : ||v||^2 <= eps} (Frobenius norm over the array)."""
    nrm = np.linalg.norm(u)
    if nrm == 0.0 or nrm * nrm <= eps:
        return u
    return u * (np.sqrt(eps) / nrm)


def power_iteration(
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    source_shape: tuple[int, ...],
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> float:
    """Largest spectral value of adjoint(forward(.)) by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(source_shape) + 1j * rng.standard_normal(source_shape)
    v /= np.linalg.norm(v)
    prev = 0.0
    nu = 0.0
    for _ in range(max_iter):
        w = adjoint(forward(v))
        nu = float(np.linalg.norm(w))
        if nu == 0.0:
            warnings.warn("power iteration hit a zero operator", RuntimeWarning, stacklevel=2)
            return 0.0
        if abs(nu - prev) <= tol * nu:
            return nu
        v = w / nu
        prev = nu
    return nu


class _BinOperator:
    """Same-length frame convolution with one bin's filters, via the FFT.

    forward: (J, T) -> (I, T), the first T frames of the full convolution;
    adjoint: (I, T) -> (J, T), ``sum_i conj(a_q) r[m + q]`` with the
    residual taken as zero beyond frame T.
    """

    def __init__(self, ctf_k: np.ndarray, n_frames: int):
        ctf_k = np.asarray(ctf_k, dtype=np.complex128)
        self.n_mics, self.n_sources, self.n_taps = ctf_k.shape
        self.n_frames = n_frames
        self.fft_len = next_fast_len(n_frames + self.n_taps - 1)
        self.ctf_f = np.fft.fft(ctf_k, self.fft_len, axis=-1)

    def forward(self, s: np.ndarray) -> np.ndarray:
        sf = np.fft.fft(s, self.fft_len, axis=-1)
        out = np.einsum("ijm,jm->im", self.ctf_f, sf)
        return np.fft.ifft(out, axis=-1)[:, : self.n_frames]

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        rf = np.fft.fft(r, self.fft_len, axis=-1)
        out = np.einsum("ijm,im->jm", np.conj(self.ctf_f), rf)
        return np.fft.ifft(out, axis=-1)[:, : self.n_frames]


def project_constraint(
    s: np.ndarray,
    ctf_k: np.ndarray,
    x: np.ndarray,
    eps: float,
    cfg: ClassoConfig | None = None,
    nu: float | None = None,
) -> ProjectionResult:
    """Move s toward the constraint set {p : ||A * p - x||^2 <= eps}.

    Accelerated dual iteration; stops as soon as the fitting cost drops
    below ``slack * eps`` (checked before each update, so a feasible s is
    returned unchanged), or after ``max_inner`` iterations with
    ``feasible=False``.
    """
    cfg = cfg or ClassoConfig()
    s = np.asarray(s, dtype=np.complex128)
    x = np.asarray(x, dtype=np.complex128)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(x))):
        raise ValueError("non-finite inputs")
    op = _BinOperator(ctf_k, x.shape[-1])
    if nu is None:
        nu = power_iteration(op.forward, op.adjoint, s.shape)
    if nu == 0.0:
        return ProjectionResult(s, float(np.sum(np.abs(x) ** 2)) <= cfg.slack * eps, 0)
    mu = cfg.mu_factor / nu
    p = s
    u = x.copy()
    t_prev = 1.0
    for it in range(cfg.max_inner):
        residual = op.forward(p) - x
        if float(np.sum(np.abs(residual) ** 2)) <= cfg.slack * eps:
            return ProjectionResult(p, True, it)
        v = u / mu + residual
        u_new = mu * (v - project_ball(v, eps))
        t = (1.0 + np.sqrt(1.0 + 4.0 * t_prev * t_prev)) / 2.0
        u_tilde = u + ((t_prev - 1.0) / t) * (u_new - u)
        p = s - op.adjoint(u_tilde)
        u = u_new
        t_prev = t
    residual = op.forward(p) - x
    feasible = float(np.sum(np.abs(residual) ** 2)) <= cfg.slack * eps
    return ProjectionResult(p, feasible, cfg.max_inner)


class _BatchState:
    """Active-bin bookkeeping for the stacked per-bin solvers."""

    def __init__(self, n_bins: int):
        self.active = np.arange(n_bins)

    def freeze(self, local_done: np.ndarray) -> np.ndarray:
        done_bins = self.active[local_done]
        self.active = self.active[~local_done]
        return done_bins


def _batch_forward(ctf_f: np.ndarray, s: np.ndarray, n_frames: int) -> np.ndarray:
    sf = np.fft.fft(s, ctf_f.shape[-1], axis=-1)
    out = np.einsum("kijm,kjm->kim", ctf_f, sf)
    return np.fft.ifft(out, axis=-1)[..., :n_frames]


def _batch_adjoint(ctf_f: np.ndarray, r: np.ndarray, n_frames: int) -> np.ndarray:
    rf = np.fft.fft(r, ctf_f.shape[-1], axis=-1)
    out = np.einsum("kijm,kim->kjm", np.conj(ctf_f), rf)
    return np.fft.ifft(out, axis=-1)[..., :n_frames]


def _batch_power_iteration(
    ctf_f: np.ndarray, n_sources: int, n_frames: int, seed: int, tol: float = 1e-6
) -> np.ndarray:
    n_bins = ctf_f.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n_bins, n_sources, n_frames)) + 1j * rng.standard_normal(
        (n_bins, n_sources, n_frames)
    )
    v /= np.linalg.norm(v, axis=(1, 2), keepdims=True)
    nu = np.zeros(n_bins)
    prev = np.zeros(n_bins)
    live = np.ones(n_bins, dtype=bool)
    for _ in range(100):
        w = _batch_adjoint(ctf_f, _batch_forward(ctf_f, v, n_frames), n_frames)
        nrm = np.linalg.norm(w, axis=(1, 2))
        nu = np.where(live, nrm, nu)
        live &= nrm > 0
        live &= np.abs(nrm - prev) > tol * np.maximum(nrm, 1e-300)
        if not np.any(live):
            break
        safe = np.where(nrm > 0, nrm, 1.0)
        v = w / safe[:, None, None]
        prev = nrm
    return nu


def _batch_project(
    ctf_f: np.ndarray,
    s: np.ndarray,
    x: np.ndarray,
    eps: np.ndarray,
    mu: np.ndarray,
    cfg: ClassoConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin constraint projection on stacked arrays.

    Mirrors :func:`project_constraint` bin by bin; returns the projected
    iterates and a per-bin feasibility flag.
    """
    n_frames = x.shape[-1]
    p_out = s.copy()
    feasible = np.zeros(len(s), dtype=bool)
    state = _BatchState(len(s))
    p = s
    u = x.copy()
    s_act, x_act, eps_act, mu_act = s, x, eps, mu
    ctf_act = ctf_f
    t_prev = 1.0
    for it in range(cfg.max_inner + 1):
        residual = _batch_forward(ctf_act, p, n_frames) - x_act
        res2 = np.sum(np.abs(residual) ** 2, axis=(1, 2))
        done = res2 <= cfg.slack * eps_act
        if np.any(done):
            frozen = state.freeze(done)
            p_out[frozen] = p[done]
            feasible[frozen] = True
            keep = ~done
            p, u, residual = p[keep], u[keep], residual[keep]
            s_act, x_act = s_act[keep], x_act[keep]
            eps_act, mu_act, ctf_act = eps_act[keep], mu_act[keep], ctf_act[keep]
            if len(state.active) == 0:
                return p_out, feasible
        if it == cfg.max_inner:
            break
        v = u / mu_act[:, None, None] + residual
        nrm = np.linalg.norm(v, axis=(1, 2))
        scale = np.minimum(1.0, np.sqrt(eps_act) / np.maximum(nrm, 1e-300))
        u_new = mu_act[:, None, None] * (v - scale[:, None, None] * v)
        t = (1.0 + np.sqrt(1.0 + 4.0 * t_prev * t_prev)) / 2.0
        u_tilde = u + ((t_prev - 1.0) / t) * (u_new - u)
        p = s_act - _batch_adjoint(ctf_act, u_tilde, n_frames)
        u = u_new
        t_prev = t
    p_out[state.active] = p
    return p_out, feasible


def solve_classo(
    ctf: CtfTensor,
    mics: Spectrogram,
    tol: ToleranceModel,
    cfg: ClassoConfig | None = None,
    seed: int = 0,
) -> ClassoResult:
    """Douglas-Rachford recovery of all sources, frequency by frequency.

    Starts from J copies of the first mic signal; each iteration projects
    onto the constraint set and applies the shrinkage reflection; stops
    per bin once the l1 norm of the driver iterate is stationary. The
    returned coefficients are the constraint-projected iterates, so each
    bin either satisfies ||A * s - x||^2 <= slack * eps or is flagged
    infeasible in ``feasible``.
    """
    cfg = cfg or ClassoConfig()
    if mics.n_channels != ctf.n_mics or mics.n_bins != ctf.n_bins:
        raise ValueError("mic spectrogram does not match the filter tensor")
    if len(tol.eps) != ctf.n_bins:
        raise ValueError("tolerance model does not match the filter tensor")
    n_bins, n_sources, n_frames = ctf.n_bins, ctf.n_sources, mics.n_frames
    x = mics.coeffs.transpose(1, 0, 2).copy()  # (K, I, T)
    eps = np.asarray(tol.eps, dtype=np.float64)

    out = np.zeros((n_bins, n_sources, n_frames), dtype=np.complex128)
    feasible = np.zeros(n_bins, dtype=bool)
    outer_iterations = np.zeros(n_bins, dtype=int)

    # zero is feasible and l1-minimal wherever the mics carry no more
    # energy than the tolerance
    x_energy = np.sum(np.abs(x) ** 2, axis=(1, 2))
    trivial = x_energy <= eps
    feasible[trivial] = True

    fft_len = next_fast_len(n_frames + ctf.n_taps - 1)
    ctf_f = np.fft.fft(ctf.coeffs.transpose(2, 0, 1, 3), fft_len, axis=-1)  # (K, I, J, M)
    nu = _batch_power_iteration(ctf_f, n_sources, n_frames, seed)
    mu = np.where(nu > 0, cfg.mu_factor / np.maximum(nu, 1e-300), 1.0)

    state = _BatchState(n_bins)
    state.freeze(trivial)
    idx = state.active
    s = np.tile(x[idx, :1, :], (1, n_sources, 1))
    x_act, eps_act, mu_act, ctf_act = x[idx], eps[idx], mu[idx], ctf_f[idx]
    prev_l1 = np.sum(np.abs(s), axis=(1, 2))
    for outer in range(1, cfg.max_outer + 1):
        if len(state.active) == 0:
            break
        z, feas = _batch_project(ctf_act, s, x_act, eps_act, mu_act, cfg)
        s = s + cfg.alpha * (shrinkage(2.0 * z - s, cfg.gamma) - z)
        new_l1 = np.sum(np.abs(s), axis=(1, 2))
        rel = np.abs(new_l1 - prev_l1) / np.maximum(new_l1, 1e-300)
        done = (rel < cfg.eta1) | (new_l1 == 0.0)
        if outer == cfg.max_outer:
            done = np.ones_like(done)
        if np.any(done):
            frozen = state.freeze(done)
            out[frozen] = z[done]
            feasible[frozen] = feas[done]
            outer_iterations[frozen] = outer
            keep = ~done
            s, x_act = s[keep], x_act[keep]
            eps_act, mu_act, ctf_act = eps_act[keep], mu_act[keep], ctf_act[keep]
            new_l1 = new_l1[keep]
        prev_l1 = new_l1
    sources = Spectrogram(
        out.transpose(1, 0, 2), mics.frame_len, mics.hop, mics.sample_rate, mics.n_samples
    )
    return ClassoResult(sources=sources, feasible=feasible, outer_iterations=outer_iterations)


def solve_lasso_fista(
    ctf: CtfTensor,
    mics: Spectrogram,
    lam: float,
    max_iter: int = 500,
    obj_tol: float = 1e-4,
    seed: int = 0,
) -> Spectrogram:
    """Unconstrained baseline: min ||A * s - x||^2 + lam * |s|_1.

    Accelerated proximal gradient from a zero start, operator step 1/nu
    per bin (threshold lam / (2 nu)), stopping per bin when the objective
    is stationary.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if mics.n_channels != ctf.n_mics or mics.n_bins != ctf.n_bins:
        raise ValueError("mic spectrogram does not match the filter tensor")
    n_bins, n_sources, n_frames = ctf.n_bins, ctf.n_sources, mics.n_frames
    x = mics.coeffs.transpose(1, 0, 2).copy()
    fft_len = next_fast_len(n_frames + ctf.n_taps - 1)
    ctf_f = np.fft.fft(ctf.coeffs.transpose(2, 0, 1, 3), fft_len, axis=-1)
    nu = _batch_power_iteration(ctf_f, n_sources, n_frames, seed)
    live = nu > 0

    out = np.zeros((n_bins, n_sources, n_frames), dtype=np.complex128)
    state = _BatchState(n_bins)
    state.freeze(~live)
    idx = state.active
    x_act, ctf_act, nu_act = x[idx], ctf_f[idx], nu[idx]
    s = np.zeros((len(idx), n_sources, n_frames), dtype=np.complex128)
    y = s.copy()
    prev_obj = np.sum(np.abs(x_act) ** 2, axis=(1, 2))  # objective at s = 0
    t_prev = 1.0
    for it in range(1, max_iter + 1):
        if len(state.active) == 0:
            break
        grad_pt = _batch_adjoint(
            ctf_act, _batch_forward(ctf_act, y, n_frames) - x_act, n_frames
        )
        step = (1.0 / nu_act)[:, None, None]
        s_new = _soft_threshold_rows(y - step * grad_pt, lam / (2.0 * nu_act))
        t = (1.0 + np.sqrt(1.0 + 4.0 * t_prev * t_prev)) / 2.0
        y = s_new + ((t_prev - 1.0) / t) * (s_new - s)
        s = s_new
        t_prev = t
        fit = _batch_forward(ctf_act, s, n_frames) - x_act
        obj = np.sum(np.abs(fit) ** 2, axis=(1, 2)) + lam * np.sum(np.abs(s), axis=(1, 2))
        done = np.abs(obj - prev_obj) <= obj_tol * np.maximum(prev_obj, 1e-300)
        if it == max_iter:
            done = np.ones_like(done)
        if np.any(done):
            frozen = state.freeze(done)
            out[frozen] = s[done]
            keep = ~done
            s, y, x_act = s[keep], y[keep], x_act[keep]
            ctf_act, nu_act, obj = ctf_act[keep], nu_act[keep], obj[keep]
        prev_obj = obj
    return Spectrogram(
        out.transpose(1, 0, 2), mics.frame_len, mics.hop, mics.sample_rate, mics.n_samples
    )


def _soft_threshold_rows(z: np.ndarray, gamma_per_bin: np.ndarray) -> np.ndarray:
    mag = np.abs(z)
    thr = gamma_per_bin[:, None, None]
    scale = np.zeros_like(mag)
    np.divide(np.maximum(mag - thr, 0.0), mag, out=scale, where=mag > 0)
    return z * scale
