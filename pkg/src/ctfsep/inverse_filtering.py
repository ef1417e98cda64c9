"""Per-bin multichannel inverse filtering (MINT and power-minimizing MPDR).

Both solvers work frequency by frequency on block-Toeplitz systems built
from the frame-domain filters. The inverse-filtering target is not an
impulse but the hop-sampled window cross-correlation taps (with leading
zeros as a modeling delay), so the target only asks for the response the
filter bank can actually excite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solve, toeplitz
from scipy.signal import fftconvolve

from .ctf import CtfTensor, sampled_zeta_taps
from .signals import Spectrogram, WindowPair


@dataclass(frozen=True)
class TargetSignal:
    """Inverse-filtering target: delay zeros, kernel taps, trailing zeros."""

    d: np.ndarray
    delay: int
    zeta_taps: np.ndarray

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be non-negative")
        if self.delay + len(self.zeta_taps) > len(self.d):
            raise ValueError(
                f"delay ({self.delay}) plus kernel taps ({len(self.zeta_taps)}) "
                f"exceed target length {len(self.d)}"
            )


@dataclass(frozen=True)
class InverseFilterSet:
    """Solved inverse filters, shape (n_bins, n_mics, filter_len).

    ``residuals`` holds the per-bin squared fitting error of the solve;
    ``degenerate_bins`` lists bins where the desired source had zero
    filter energy and the inverse filter was set to zero.
    """

    h: np.ndarray
    method: str
    desired_source: int
    regularization: float
    delay: int
    frame_len: int
    hop: int
    residuals: np.ndarray
    degenerate_bins: tuple[int, ...] = ()

    @property
    def filter_len(self) -> int:
        return self.h.shape[2]

    @property
    def frame_shift_taps(self) -> int:
        return -(-self.frame_len // self.hop) - 1


@dataclass(frozen=True)
class IfSolverConfig:
    """Solver parameters for the two inverse-filtering methods."""

    rho: float = 1.0
    varrho: float = 1.0
    delta: float = 1e-5
    kappa: float = 1e-1
    delay_mint: int = 6
    delay_mpdr: int = 3

    def __post_init__(self):
        if self.delta < 0 or self.kappa < 0:
            raise ValueError("regularization factors must be non-negative")
        if self.rho <= 0 or self.varrho <= 0:
            raise ValueError("column/row ratios must be positive")
        if self.delay_mint < 0 or self.delay_mpdr < 0:
            raise ValueError("modeling delays must be non-negative")


def filter_length(mode: str, n_mics: int, n_sources: int, n_taps: int, ratio: float) -> int:
    """Inverse filter length for a given column/row ratio of the system.

    mint: L_h = (L_a - 1) / (I / (ratio * J) - 1); mpdr uses J = 1.
    Rounded up, minimum 1.
    """
    if mode == "mint":
        j = n_sources
    elif mode == "mpdr":
        j = 1
    else:
        raise ValueError(f"mode must be 'mint' or 'mpdr', got {mode!r}")
    if ratio * j >= n_mics:
        raise ValueError(
            f"infinite filter length: ratio {ratio} must be < {n_mics / j} for {mode}"
        )
    # (La-1) / (I/(ratio J) - 1), rearranged to avoid float cancellation
    value = (n_taps - 1) * ratio * j / (n_mics - ratio * j)
    if abs(value - round(value)) < 1e-9:
        value = round(value)
    return max(1, math.ceil(value))


def convolution_matrix(seq: np.ndarray, filter_len: int) -> np.ndarray:
    """Toeplitz matrix T with T @ h == full convolution of seq and h."""
    seq = np.asarray(seq)
    col = np.concatenate([seq, np.zeros(filter_len - 1, dtype=seq.dtype)])
    row = np.zeros(filter_len, dtype=seq.dtype)
    row[0] = seq[0]
    return toeplitz(col, row)


def build_target(
    n_taps: int, filter_len: int, delay: int, zeta_taps: np.ndarray
) -> TargetSignal:
    """Assemble the target vector of length n_taps + filter_len - 1."""
    zeta_taps = np.asarray(zeta_taps, dtype=np.complex128)
    total = n_taps + filter_len - 1
    d = np.zeros(total, dtype=np.complex128)
    if delay < 0 or delay + len(zeta_taps) > total:
        raise ValueError(
            f"target of length {total} cannot hold {len(zeta_taps)} taps at delay {delay}"
        )
    d[delay : delay + len(zeta_taps)] = zeta_taps
    return TargetSignal(d=d, delay=delay, zeta_taps=zeta_taps)


def _clamped_delay(delay: int, n_taps: int, filter_len: int, n_zeta: int) -> int:
    """Largest usable modeling delay if the requested one does not fit."""
    room = n_taps + filter_len - 1 - n_zeta
    if room < 0:
        raise ValueError("target too short for the kernel taps; increase the filter length")
    return min(delay, room)


def _stacked_ctf_matrix(ctf_k: np.ndarray, filter_len: int) -> np.ndarray:
    """Stack conv matrices into the (J*(La+Lh-1), I*Lh) system matrix."""
    n_mics, n_sources, n_taps = ctf_k.shape
    rows = n_taps + filter_len - 1
    a = np.empty((n_sources * rows, n_mics * filter_len), dtype=np.complex128)
    for j in range(n_sources):
        for i in range(n_mics):
            a[j * rows : (j + 1) * rows, i * filter_len : (i + 1) * filter_len] = (
                convolution_matrix(ctf_k[i, j], filter_len)
            )
    return a


def solve_mint(
    ctf_k: np.ndarray, desired_source: int, delta: float, target: TargetSignal
) -> tuple[np.ndarray, float]:
    """Regularized MINT solve at one bin.

    Minimizes ||A h - g||^2 + delta * phi * ||h||^2 where g is zero except
    for the target at the desired source's block and phi is the desired
    source's filter energy. Returns (h of shape (I, Lh), residual).
    """
    ctf_k = np.asarray(ctf_k, dtype=np.complex128)
    if not np.all(np.isfinite(ctf_k)):
        raise ValueError("non-finite filter coefficients")
    n_mics, n_sources, n_taps = ctf_k.shape
    filter_len = len(target.d) - n_taps + 1
    if filter_len < 1:
        raise ValueError("target shorter than the filters")
    phi = float(np.sum(np.abs(ctf_k[:, desired_source]) ** 2))
    if phi == 0.0:
        return np.zeros((n_mics, filter_len), dtype=np.complex128), float(
            np.sum(np.abs(target.d) ** 2)
        )
    a = _stacked_ctf_matrix(ctf_k, filter_len)
    rows = n_taps + filter_len - 1
    a_des = a[desired_source * rows : (desired_source + 1) * rows]
    try:
        if delta * phi < 1e-6 * np.sum(np.abs(ctf_k) ** 2) / n_mics:
            # near-exact regime: the normal equations square the condition
            # number, so solve the (augmented) stacked system instead
            g = np.zeros(a.shape[0], dtype=np.complex128)
            g[desired_source * rows : (desired_source + 1) * rows] = target.d
            if delta > 0.0:
                ridge = np.sqrt(delta * phi) * np.eye(a.shape[1], dtype=np.complex128)
                h = np.linalg.lstsq(
                    np.vstack([a, ridge]),
                    np.concatenate([g, np.zeros(a.shape[1])]),
                    rcond=None,
                )[0]
            else:
                h = np.linalg.lstsq(a, g, rcond=None)[0]
        else:
            gram = a.conj().T @ a
            gram[np.diag_indices_from(gram)] += delta * phi
            h = solve(gram, a_des.conj().T @ target.d, assume_a="pos")
    except (LinAlgError, np.linalg.LinAlgError) as exc:
        raise ValueError(
            "singular MINT system; the filters are rank deficient, use delta > 0"
        ) from exc
    fit = a @ h
    fit[desired_source * rows : (desired_source + 1) * rows] -= target.d
    return h.reshape(n_mics, filter_len), float(np.sum(np.abs(fit) ** 2))


def solve_mpdr(
    ctf_desired_k: np.ndarray,
    mics_k: np.ndarray,
    kappa: float,
    target: TargetSignal,
) -> tuple[np.ndarray, float]:
    """Power-minimizing distortionless solve at one bin.

    Minimizes ||A_d h - d||^2 + kappa * (phi_a / phi_x) * ||X h||^2 using
    only the desired source's filters and the mic signals. Returns
    (h of shape (I, Lh), residual of the target fit).
    """
    ctf_desired_k = np.asarray(ctf_desired_k, dtype=np.complex128)
    mics_k = np.asarray(mics_k, dtype=np.complex128)
    if not (np.all(np.isfinite(ctf_desired_k)) and np.all(np.isfinite(mics_k))):
        raise ValueError("non-finite inputs")
    n_mics, n_taps = ctf_desired_k.shape
    filter_len = len(target.d) - n_taps + 1
    if filter_len < 1:
        raise ValueError("target shorter than the filters")
    phi_a = float(np.sum(np.abs(ctf_desired_k) ** 2))
    if phi_a == 0.0:
        return np.zeros((n_mics, filter_len), dtype=np.complex128), float(
            np.sum(np.abs(target.d) ** 2)
        )
    a = np.hstack([convolution_matrix(ctf_desired_k[i], filter_len) for i in range(n_mics)])
    phi_x = float(np.sum(np.abs(mics_k) ** 2))
    try:
        if kappa == 0.0:
            h = np.linalg.lstsq(a, target.d, rcond=None)[0]
        else:
            gram = a.conj().T @ a
            if phi_x > 0.0:
                x = np.hstack(
                    [convolution_matrix(mics_k[i], filter_len) for i in range(n_mics)]
                )
                gram += (kappa * phi_a / phi_x) * (x.conj().T @ x)
            else:
                # silent bin: the power term vanishes, keep the solve well posed
                gram[np.diag_indices_from(gram)] += kappa * phi_a
            h = solve(gram, a.conj().T @ target.d, assume_a="pos")
    except (LinAlgError, np.linalg.LinAlgError) as exc:
        raise ValueError(
            "singular MPDR system; the filters are rank deficient, use kappa > 0"
        ) from exc
    return h.reshape(n_mics, filter_len), float(np.sum(np.abs(a @ h - target.d) ** 2))


def design_mint_filters(
    ctf: CtfTensor,
    win: WindowPair,
    desired_source: int,
    delta: float,
    rho: float = 1.0,
    delay: int = 6,
) -> InverseFilterSet:
    """Solve the MINT filters of one source at every bin."""
    filter_len = filter_length("mint", ctf.n_mics, ctf.n_sources, ctf.n_taps, rho)
    taps = sampled_zeta_taps(win)
    delay = _clamped_delay(delay, ctf.n_taps, filter_len, taps.shape[1])
    h = np.zeros((ctf.n_bins, ctf.n_mics, filter_len), dtype=np.complex128)
    residuals = np.zeros(ctf.n_bins)
    degenerate = []
    for k in range(ctf.n_bins):
        target = build_target(ctf.n_taps, filter_len, delay, taps[k])
        if np.sum(np.abs(ctf.coeffs[:, desired_source, k]) ** 2) == 0.0:
            degenerate.append(k)
        h[k], residuals[k] = solve_mint(ctf.coeffs[:, :, k], desired_source, delta, target)
    return InverseFilterSet(
        h=h,
        method="mint",
        desired_source=desired_source,
        regularization=delta,
        delay=delay,
        frame_len=ctf.frame_len,
        hop=ctf.hop,
        residuals=residuals,
        degenerate_bins=tuple(degenerate),
    )


def design_mpdr_filters(
    ctf: CtfTensor,
    win: WindowPair,
    mics: Spectrogram,
    desired_source: int,
    kappa: float = 1e-1,
    varrho: float = 1.0,
    delay: int = 3,
) -> InverseFilterSet:
    """Solve the MPDR filters of one source at every bin."""
    if mics.n_channels != ctf.n_mics or mics.n_bins != ctf.n_bins:
        raise ValueError("mic spectrogram does not match the filter tensor")
    filter_len = filter_length("mpdr", ctf.n_mics, ctf.n_sources, ctf.n_taps, varrho)
    taps = sampled_zeta_taps(win)
    delay = _clamped_delay(delay, ctf.n_taps, filter_len, taps.shape[1])
    h = np.zeros((ctf.n_bins, ctf.n_mics, filter_len), dtype=np.complex128)
    residuals = np.zeros(ctf.n_bins)
    degenerate = []
    for k in range(ctf.n_bins):
        target = build_target(ctf.n_taps, filter_len, delay, taps[k])
        if np.sum(np.abs(ctf.coeffs[:, desired_source, k]) ** 2) == 0.0:
            degenerate.append(k)
        h[k], residuals[k] = solve_mpdr(
            ctf.coeffs[:, desired_source, k], mics.coeffs[:, k], kappa, target
        )
    return InverseFilterSet(
        h=h,
        method="mpdr",
        desired_source=desired_source,
        regularization=kappa,
        delay=delay,
        frame_len=ctf.frame_len,
        hop=ctf.hop,
        residuals=residuals,
        degenerate_bins=tuple(degenerate),
    )


def apply_inverse_filter(
    filt: InverseFilterSet, mics: Spectrogram, compensate: bool = True
) -> Spectrogram:
    """Filter and sum the mic spectrogram into one recovered source.

    With ``compensate`` the output is advanced by the modeling delay plus
    the causal-shift constant and cut back to the input frame count, so
    its frames line up with the source spectrogram.
    """
    if mics.n_channels != filt.h.shape[1] or mics.n_bins != filt.h.shape[0]:
        raise ValueError("mic spectrogram does not match the filter set")
    y = fftconvolve(filt.h, mics.coeffs.transpose(1, 0, 2), axes=2).sum(axis=1)
    if compensate:
        advance = filt.delay + filt.frame_shift_taps
        y = y[:, advance:]
        n_frames = mics.n_frames
        if y.shape[1] < n_frames:
            y = np.pad(y, ((0, 0), (0, n_frames - y.shape[1])))
        y = y[:, :n_frames]
    return mics.with_coeffs(y[np.newaxis])
