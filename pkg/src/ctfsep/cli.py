"""Command-line interface: separate, simulate, evaluate, bench.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_config, parse_config_file
from .metrics import sdr, sir
from .pipeline import SCHEMA_VERSION, BenchSpec, run_benchmark, run_separation
from .scenario import make_scenario
from .signals import MultichannelSignal
from .wavio import WavFormatError, load_wav, save_rir_tensor, save_wav

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--method", choices=("mint", "mpdr", "classo", "lasso"))
    for name, typ in [
        ("frame-len", int), ("hop", int), ("sample-rate", int), ("n-mics", int),
        ("n-sources", int), ("duration-s", float), ("rir-len", int),
        ("rir-decay-s", float), ("snr-db", float), ("npm-db", float), ("seed", int),
        ("delta", float), ("kappa", float), ("rho", float), ("varrho", float),
        ("delay-mint", int), ("delay-mpdr", int), ("alpha", float), ("gamma", float),
        ("eta1", float), ("max-outer", int), ("max-inner", int), ("mu-factor", float),
        ("slack", float), ("lam", float),
    ]:
        parser.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    for name in ["mics-wav", "rir-file", "sources-wav", "noise-psd-csv", "noise-wav", "out-dir"]:
        parser.add_argument(f"--{name}", dest=name.replace("-", "_"))
    parser.add_argument("--rir-wavs", help="comma-separated WAVs, one per source")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for key in RunConfig.__dataclass_fields__:
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "rir_wavs", None):
        overrides["rir_wavs"] = tuple(s.strip() for s in args.rir_wavs.split(","))
    return build_config(file_values, overrides)


def _cmd_separate(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    result = run_separation(cfg, write=True)
    print(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    for path in result.output_files:
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if cfg.file_mode:
        raise ConfigError("simulate generates a scenario; remove file inputs")
    from .pipeline import scenario_from_config

    scen = make_scenario(scenario_from_config(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_wav(scen.mix.mics, out / "mics.wav")
    save_wav(scen.sources, out / "sources.wav")
    if scen.spec.snr_db is not None:
        save_wav(MultichannelSignal(scen.mix.noise, cfg.sample_rate), out / "noise.wav")
    save_rir_tensor(scen.rirs, out / "rirs.bin")
    if scen.spec.npm_db is not None:
        save_rir_tensor(scen.solver_rirs, out / "rirs_perturbed.bin")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "npm_achieved_db": list(scen.npm_achieved_db),
        "noise_sigma2": scen.mix.noise_sigma2,
    }
    (out / "scenario.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"scenario written to {out}", file=sys.stderr)
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    estimate = load_wav(args.estimate)
    reference = load_wav(args.reference)
    interferers = []
    if args.interferers:
        for path in args.interferers.split(","):
            interferers.append(load_wav(path.strip()).samples[0])
    scores: dict[str, object] = {"schema_version": SCHEMA_VERSION, "sdr_db": [], "sir_db": []}
    n = min(estimate.n_channels, reference.n_channels)
    for ch in range(n):
        est, ref = estimate.samples[ch], reference.samples[ch]
        scores["sdr_db"].append(round(sdr(est, ref), 6))
        if interferers:
            scores["sir_db"].append(round(sir(est, ref, interferers), 6))
    print(json.dumps(scores, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    values = parse_config_file(args.config) if args.config else {}
    sweep: dict[str, list] = {}
    if args.sweep:
        for clause in args.sweep.split(";"):
            key, _, raw = clause.partition("=")
            key = key.strip()
            items = []
            for tok in raw.split(","):
                tok = tok.strip()
                if tok.lower() in ("none", "null"):
                    items.append(None)
                else:
                    try:
                        items.append(int(tok))
                    except ValueError:
                        try:
                            items.append(float(tok))
                        except ValueError:
                            items.append(tok)
            sweep[key] = items
    base = build_config(values, {})
    bench = BenchSpec(base=base, sweep=sweep, repeats=args.repeats)
    payload = run_benchmark(bench, out_dir=args.out_dir or base.out_dir)
    print(json.dumps({"rows": payload["rows"]}, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctfsep",
        description="Multichannel source separation in the frame-filter domain",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sep = sub.add_parser("separate", help="recover sources from a mixture")
    _add_override_flags(p_sep)
    p_sep.set_defaults(func=_cmd_separate)

    p_sim = sub.add_parser("simulate", help="generate a synthetic scenario")
    _add_override_flags(p_sim)
    p_sim.set_defaults(func=_cmd_simulate)

    p_eval = sub.add_parser("evaluate", help="score an estimate against references")
    p_eval.add_argument("--estimate", required=True)
    p_eval.add_argument("--reference", required=True)
    p_eval.add_argument("--interferers", help="comma-separated interferer WAVs")
    p_eval.add_argument("--out", help="also write the scores as JSON")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_bench = sub.add_parser("bench", help="sweep conditions and aggregate metrics")
    p_bench.add_argument("--config", help="base config file")
    p_bench.add_argument(
        "--sweep", help="semicolon-separated sweeps, e.g. 'n_mics=2,3,4;snr_db=none,10'"
    )
    p_bench.add_argument("--repeats", type=int, default=1)
    p_bench.add_argument("--out-dir")
    p_bench.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, WavFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
