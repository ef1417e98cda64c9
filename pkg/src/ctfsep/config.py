"""Run configuration: flat key=value files with CLI flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

METHODS = ("mint", "mpdr", "classo", "lasso")


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Everything one separation run needs.

    ``delta=None`` resolves at run time to 1e-5 for noise-free runs and
    1e-1 for noisy ones. File inputs (``mics_wav`` plus filters) switch a
    run from synthetic-scenario mode to file mode.
    """

    method: str = "mint"
    # transform
    frame_len: int = 1024
    hop: int = 256
    sample_rate: int = 16000
    # synthetic scenario
    n_mics: int = 4
    n_sources: int = 2
    duration_s: float = 2.0
    rir_len: int = 640
    rir_decay_s: float = 0.06
    snr_db: float | None = None
    npm_db: float | None = None
    seed: int = 0
    rir_tail_gain: float = 0.35
    max_direct_delay: int = 32
    # inverse filtering
    delta: float | None = None
    kappa: float = 0.1
    rho: float = 1.0
    varrho: float = 1.0
    delay_mint: int = 6
    delay_mpdr: int = 3
    # constrained lasso / fista
    alpha: float = 1.0
    gamma: float = 0.01
    eta1: float = 0.01
    max_outer: int = 20
    max_inner: int = 300
    mu_factor: float = 1.0
    slack: float = 1.1
    lam: float = 1e-4
    # file inputs
    mics_wav: str | None = None
    rir_file: str | None = None
    rir_wavs: tuple[str, ...] = ()
    sources_wav: str | None = None
    noise_psd_csv: str | None = None
    noise_wav: str | None = None
    # output
    out_dir: str = "ctfsep_out"

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.frame_len < 4 or self.frame_len % 2:
            raise ConfigError("frame_len must be even and >= 4")
        if self.hop < 1 or self.hop * 4 > self.frame_len:
            raise ConfigError("hop must satisfy 1 <= hop <= frame_len/4")
        if self.sample_rate < 1:
            raise ConfigError("sample_rate must be positive")
        if self.file_mode:
            if self.rir_file is None and not self.rir_wavs:
                raise ConfigError("file mode needs rir_file or rir_wavs")
        else:
            if self.n_mics < 1 or self.n_sources < 1:
                raise ConfigError("need at least one mic and one source")
            if self.duration_s <= 0 or self.rir_len < 1 or self.rir_decay_s <= 0:
                raise ConfigError("scenario sizes must be positive")
        for name in ("kappa", "rho", "varrho", "gamma", "eta1", "mu_factor", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.delta is not None and self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if not 0 < self.alpha < 2:
            raise ConfigError("alpha must be in (0, 2)")
        if self.slack < 1:
            raise ConfigError("slack must be >= 1")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigError("iteration caps must be >= 1")

    @property
    def file_mode(self) -> bool:
        return self.mics_wav is not None

    def resolved_delta(self) -> float:
        if self.delta is not None:
            return self.delta
        return 1e-1 if self.snr_db is not None else 1e-5

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["rir_wavs"] = list(self.rir_wavs)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_NONE_WORDS = {"none", "null", ""}


def _coerce(name: str, raw: str) -> Any:
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    if name == "rir_wavs":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    ftype = _FIELDS[name].type
    if "None" in ftype and raw.lower() in _NONE_WORDS:
        return None
    try:
        if ftype.startswith("int"):
            return int(raw)
        if ftype.startswith("float"):
            return float(raw)
        if ftype.startswith("bool"):
            return raw.lower() in ("1", "true", "yes", "on")
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from exc
    return raw


def parse_config_file(path: str | Path) -> dict[str, Any]:
    """Read ``key = value`` lines; '#' starts a comment; keys must exist."""
    values: dict[str, Any] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def build_config(
    file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Merge config-file values and CLI overrides (overrides win)."""
    merged: dict[str, Any] = {}
    merged.update(file_values or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg
