"""End-to-end orchestration: scenario/files -> solver -> tracks -> report.

The mic spectrogram handed to every solver is aligned to the full-
convolution filter model by prepending ``frame_shift_taps`` zero frames;
with that convention the inverse-filtering output compensation is the
modeling delay plus the same constant, and the sparse solver's output
frames line up with the source spectrogram directly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from scipy.signal import fftconvolve

from .classo import ClassoConfig, compute_tolerance, solve_classo, solve_lasso_fista
from .config import ConfigError, RunConfig
from .ctf import CtfTensor, rir_to_ctf
from .inverse_filtering import (
    InverseFilterSet,
    apply_inverse_filter,
    design_mint_filters,
    design_mpdr_filters,
)
from .metrics import (
    MetricsReport,
    _fit_projection,
    energy_ratio_db,
    input_snr,
    sdr,
    sir,
)
from .scenario import Scenario, ScenarioSpec, make_scenario
from .signals import MultichannelSignal, Spectrogram, WindowPair, design_windows, istft, stft
from .wavio import (
    load_noise_psd_csv,
    load_rir_tensor,
    load_rir_wavs,
    load_wav,
    measure_noise_psd,
    save_wav,
)

SCHEMA_VERSION = 1


@dataclass
class RunResult:
    report: MetricsReport
    estimates: MultichannelSignal
    scenario: Scenario | None
    output_files: list[str]


def align_to_filter_model(spec: Spectrogram, win: WindowPair) -> Spectrogram:
    """Prepend the causal-shift zero frames so frame t matches the model."""
    pad = win.frame_shift_taps
    return spec.with_coeffs(np.pad(spec.coeffs, ((0, 0), (0, 0), (pad, 0))))


def scenario_from_config(cfg: RunConfig) -> ScenarioSpec:
    return ScenarioSpec(
        n_mics=cfg.n_mics,
        n_sources=cfg.n_sources,
        duration_s=cfg.duration_s,
        rir_len=cfg.rir_len,
        rir_decay_s=cfg.rir_decay_s,
        sample_rate=cfg.sample_rate,
        snr_db=cfg.snr_db,
        npm_db=cfg.npm_db,
        seed=cfg.seed,
        rir_tail_gain=cfg.rir_tail_gain,
        max_direct_delay=cfg.max_direct_delay,
    )


def _load_file_inputs(cfg: RunConfig):
    mics = load_wav(cfg.mics_wav)
    if cfg.rir_file is not None:
        rirs = load_rir_tensor(cfg.rir_file)
    else:
        rirs = load_rir_wavs(list(cfg.rir_wavs), sample_rate=mics.sample_rate)
    if rirs.shape[0] != mics.n_channels:
        raise ConfigError(
            f"filter tensor has {rirs.shape[0]} mics but the recording has {mics.n_channels}"
        )
    references = load_wav(cfg.sources_wav) if cfg.sources_wav else None
    return mics, rirs, references


def _noise_psd(cfg: RunConfig, win: WindowPair, scenario: Scenario | None, n_bins: int, n_mics: int):
    if cfg.noise_psd_csv is not None:
        psd = load_noise_psd_csv(cfg.noise_psd_csv)
        if psd.shape != (n_bins, n_mics):
            raise ConfigError(
                f"noise PSD table has shape {psd.shape}, expected ({n_bins}, {n_mics})"
            )
        return psd
    if cfg.noise_wav is not None:
        return measure_noise_psd(load_wav(cfg.noise_wav), win)
    if scenario is not None and scenario.spec.snr_db is not None:
        noise = MultichannelSignal(scenario.mix.noise, cfg.sample_rate)
        return measure_noise_psd(noise, win)
    return np.zeros((n_bins, n_mics))


def _filtered_track_energy(
    filters: list[InverseFilterSet], track: np.ndarray, win: WindowPair, sample_rate: int
) -> float:
    """Total time-domain energy of the inverse-filtered track, all sources."""
    spec = align_to_filter_model(stft(MultichannelSignal(track, sample_rate), win), win)
    total = 0.0
    for filt in filters:
        y = istft(apply_inverse_filter(filt, spec), win)
        total += float(np.sum(y.samples ** 2))
    return total


def _projection_energies(
    estimate: np.ndarray, references: list[np.ndarray], filter_len: int = 32
) -> tuple[float, float]:
    n = min(len(estimate), *(len(r) for r in references))
    est = estimate[:n]
    refs = [r[:n] for r in references]
    filters = _fit_projection(est, refs, filter_len)
    signal = np.zeros(n)
    for r, f in zip(refs, filters):
        signal += fftconvolve(r, f)[:n]
    return float(np.sum(signal ** 2)), float(np.sum((est - signal) ** 2))


def run_separation(cfg: RunConfig, write: bool = True) -> RunResult:
    """Run one separation end to end; optionally write tracks and report."""
    cfg.validate()
    t_start = time.perf_counter()
    win = design_windows(cfg.frame_len, cfg.hop)

    scenario: Scenario | None = None
    if cfg.file_mode:
        mics, solver_rirs, references = _load_file_inputs(cfg)
        noise_track = None
        clean_track = None
    else:
        scenario = make_scenario(scenario_from_config(cfg))
        mics = scenario.mix.mics
        solver_rirs = scenario.solver_rirs
        references = scenario.sources
        noise_track = scenario.mix.noise if scenario.spec.snr_db is not None else None
        clean_track = scenario.mix.images.sum(axis=1)

    ctf = rir_to_ctf(solver_rirs, win)
    n_sources = ctf.n_sources
    x_raw = stft(mics, win)
    x_aligned = align_to_filter_model(x_raw, win)

    filters: list[InverseFilterSet] = []
    notes: dict[str, Any] = {}
    converged = True
    if cfg.method in ("mint", "mpdr"):
        # a square or wide system needs rho < I/J (varrho < I); when the
        # configured ratio is not admissible, back off to 0.8 of the bound
        rho = cfg.rho
        if cfg.method == "mint" and rho * n_sources >= ctf.n_mics:
            rho = 0.8 * ctf.n_mics / n_sources
            notes["rho_adjusted"] = round(rho, 6)
        varrho = cfg.varrho
        if cfg.method == "mpdr" and varrho >= ctf.n_mics:
            varrho = 0.8 * ctf.n_mics
            notes["varrho_adjusted"] = round(varrho, 6)
        estimates = []
        for j in range(n_sources):
            if cfg.method == "mint":
                filt = design_mint_filters(
                    ctf, win, j, delta=cfg.resolved_delta(), rho=rho, delay=cfg.delay_mint
                )
            else:
                filt = design_mpdr_filters(
                    ctf, win, x_aligned, j, kappa=cfg.kappa, varrho=varrho,
                    delay=cfg.delay_mpdr,
                )
            filters.append(filt)
            y = apply_inverse_filter(filt, x_aligned)
            estimates.append(istft(y, win).samples[0])
        estimates = np.stack(estimates)
        degenerate = sorted({k for f in filters for k in f.degenerate_bins})
        if degenerate:
            notes["degenerate_bins"] = len(degenerate)
    elif cfg.method in ("classo", "lasso"):
        psd = _noise_psd(cfg, win, scenario, win.n_bins, mics.n_channels)
        tol = compute_tolerance(psd, x_raw)
        if cfg.method == "classo":
            ccfg = ClassoConfig(
                alpha=cfg.alpha, gamma=cfg.gamma, eta1=cfg.eta1, max_outer=cfg.max_outer,
                mu_factor=cfg.mu_factor, max_inner=cfg.max_inner, slack=cfg.slack,
            )
            result = solve_classo(ctf, x_aligned, tol, ccfg, seed=cfg.seed)
            sources_spec = result.sources
            converged = bool(np.all(result.feasible))
            notes["feasible_bins"] = int(np.sum(result.feasible))
            notes["n_bins"] = int(len(result.feasible))
            notes["mean_outer_iterations"] = float(np.mean(result.outer_iterations))
        else:
            sources_spec = solve_lasso_fista(ctf, x_aligned, cfg.lam, seed=cfg.seed)
        estimates = istft(sources_spec, win, n_samples=mics.n_samples).samples
    else:  # pragma: no cover - validate() guards this
        raise ConfigError(f"unknown method {cfg.method!r}")

    runtime = time.perf_counter() - t_start

    # metrics against the dry references, when they exist
    sdr_db: list[float] = []
    sir_db: list[float | None] = []
    if references is not None and references.n_channels == n_sources:
        for j in range(n_sources):
            ref = references.samples[j]
            sdr_db.append(sdr(estimates[j], ref))
            if n_sources > 1:
                others = [references.samples[m] for m in range(n_sources) if m != j]
                sir_db.append(sir(estimates[j], ref, others))
            else:
                sir_db.append(None)
    elif references is not None:
        notes["reference_mismatch"] = (
            f"{references.n_channels} reference channels for {n_sources} sources"
        )

    out_snr = None
    in_snr = None
    if scenario is not None and scenario.spec.snr_db is not None:
        in_snr = input_snr(scenario.mix.images, scenario.mix.noise)
        if cfg.method in ("mint", "mpdr"):
            clean_energy = _filtered_track_energy(filters, clean_track, win, cfg.sample_rate)
            noise_energy = _filtered_track_energy(filters, noise_track, win, cfg.sample_rate)
            out_snr = energy_ratio_db(clean_energy, noise_energy)
        elif references is not None:
            sig_total = 0.0
            err_total = 0.0
            refs = [references.samples[m] for m in range(n_sources)]
            for j in range(n_sources):
                s_e, n_e = _projection_energies(estimates[j], refs)
                sig_total += s_e
                err_total += n_e
            out_snr = energy_ratio_db(sig_total, err_total)

    report = MetricsReport(
        method=cfg.method,
        sdr_db=sdr_db,
        sir_db=sir_db,
        output_snr_db=out_snr,
        input_snr_db=in_snr,
        npm_db=list(scenario.npm_achieved_db) if scenario is not None else [],
        runtime_s=runtime,
        converged=converged,
        notes=notes,
    )

    est_signal = MultichannelSignal(estimates, cfg.sample_rate)
    files: list[str] = []
    if write:
        files = write_run_outputs(cfg, report, est_signal)
    return RunResult(report=report, estimates=est_signal, scenario=scenario, output_files=files)


def report_payload(cfg: RunConfig, report: MetricsReport) -> dict[str, Any]:
    """JSON-ready report; excludes wall-clock time so runs are replayable
    byte for byte."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "metrics": report.to_dict(include_runtime=False),
    }


def write_run_outputs(
    cfg: RunConfig, report: MetricsReport, estimates: MultichannelSignal
) -> list[str]:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for j in range(estimates.n_channels):
        path = out_dir / f"source_{j + 1:02d}.wav"
        save_wav(MultichannelSignal(estimates.samples[j : j + 1], estimates.sample_rate), path)
        files.append(str(path))
    report_path = out_dir / "report.json"
    report_path.write_text(
        json.dumps(report_payload(cfg, report), indent=2, sort_keys=True) + "\n"
    )
    files.append(str(report_path))
    return files


@dataclass
class BenchSpec:
    """Cross product of condition values applied over a base config."""

    base: RunConfig
    sweep: dict[str, list[Any]]
    repeats: int = 1

    def conditions(self) -> list[dict[str, Any]]:
        combos: list[dict[str, Any]] = [{}]
        for key, values in self.sweep.items():
            combos = [dict(c, **{key: v}) for c in combos for v in values]
        return combos


def run_benchmark(bench: BenchSpec, out_dir: str | Path | None = None) -> dict[str, Any]:
    """Run every condition ``repeats`` times and average the metrics.

    The aggregate carries only deterministic fields, so repeated
    invocations with the same seed are byte-identical.
    """
    import dataclasses

    rows = []
    for condition in bench.conditions():
        per_repeat: list[MetricsReport] = []
        for r in range(bench.repeats):
            cfg = dataclasses.replace(bench.base, **condition, seed=bench.base.seed + r)
            cfg.validate()
            result = run_separation(cfg, write=False)
            per_repeat.append(result.report)
        row: dict[str, Any] = {"condition": condition, "repeats": bench.repeats}
        row["mean_sdr_db"] = _mean_of(per_repeat, lambda m: _mean_or_none(m.sdr_db))
        row["mean_sir_db"] = _mean_of(
            per_repeat, lambda m: _mean_or_none([v for v in m.sir_db if v is not None])
        )
        row["mean_output_snr_db"] = _mean_of(per_repeat, lambda m: m.output_snr_db)
        row["mean_input_snr_db"] = _mean_of(per_repeat, lambda m: m.input_snr_db)
        row["all_converged"] = all(m.converged for m in per_repeat)
        rows.append(row)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "base_config": bench.base.to_dict(),
        "sweep": bench.sweep,
        "repeats": bench.repeats,
        "rows": rows,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _write_bench_csv(out / "bench.csv", rows)
    return payload


def _write_bench_csv(path: Path, rows: list[dict[str, Any]]) -> None:
    import csv

    keys = sorted({k for row in rows for k in row["condition"]})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            keys + ["repeats", "mean_sdr_db", "mean_sir_db", "mean_output_snr_db",
                    "mean_input_snr_db", "all_converged"]
        )
        for row in rows:
            writer.writerow(
                [row["condition"].get(k) for k in keys]
                + [row["repeats"], row["mean_sdr_db"], row["mean_sir_db"],
                   row["mean_output_snr_db"], row["mean_input_snr_db"], row["all_converged"]]
            )


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _mean_of(reports: list[MetricsReport], getter) -> float | None:
    values = [getter(m) for m in reports]
    values = [v for v in values if v is not None]
    return round(float(np.mean(values)), 6) if values else None
