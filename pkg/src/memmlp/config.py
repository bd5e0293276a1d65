"""Run configuration: TOML file with one section per module, overridden by flags.

Recognized sections are ``run``, ``synth``, ``prior``, ``model``, ``train``,
``ik`` and ``bench``. The seed lives in ``[run]`` only, so a single value
controls every random draw of a command. Unknown sections or keys are
rejected before any work starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import DEFAULT_FPS, SYNTH_KINDS
from .errors import ConfigError
from .ik import LbfgsConfig
from .model import MemMLPConfig, TrainConfig
from .prior import PriorConfig

THREADS_ENV = "MEMMLP_THREADS"


@dataclass
class SynthConfig:
    kind: str = "walk"
    duration: float = 6.0
    fps: float = DEFAULT_FPS
    count: int = 1
    format: str = "json"

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ConfigError(f"unknown synth kind {self.kind!r}; expected one of {', '.join(SYNTH_KINDS)}")
        if self.duration <= 0 or self.fps <= 0 or self.count < 1:
            raise ConfigError("synth duration, fps and count must be positive")
        if self.format not in ("json", "mclp"):
            raise ConfigError(f"unknown clip format {self.format!r}")


@dataclass
class BenchConfig:
    frames: int = 500
    warmup: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.frames < 1 or self.warmup < 0 or self.threads < 1:
            raise ConfigError("bench needs frames >= 1, warmup >= 0, threads >= 1")


@dataclass
class RunSection:
    seed: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: MemMLPConfig = field(default_factory=MemMLPConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ik: LbfgsConfig = field(default_factory=LbfgsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def seed(self) -> int:
        return self.run.seed


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}
# the prior mirrors these model settings unless its own section sets them
_SHARED_WITH_MODEL = ("T", "d_zs", "K")


def _coerce(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        value = tuple(value)
    return value


def _build(section: str, cls, values: dict, extra: dict | None = None):
    base = cls()
    known = {f.name for f in fields(cls)}
    if section != "run":
        known.discard("seed")
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    kwargs = dict(extra or {})
    for key, value in values.items():
        kwargs[key] = _coerce(section, key, value, getattr(base, key))
    try:
        return replace(base, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for name, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
    run = _build("run", RunSection, raw.get("run", {}))
    seed = {"seed": run.seed}
    model = _build("model", MemMLPConfig, raw.get("model", {}), seed)
    shared = {k: getattr(model, k) for k in _SHARED_WITH_MODEL}
    return RunConfig(
        run=run,
        synth=_build("synth", SynthConfig, raw.get("synth", {})),
        prior=_build("prior", PriorConfig, raw.get("prior", {}), {**shared, **seed}),
        model=model,
        train=_build("train", TrainConfig, raw.get("train", {}), seed),
        ik=_build("ik", LbfgsConfig, raw.get("ik", {})),
        bench=_build("bench", BenchConfig, raw.get("bench", {})),
    )


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML file; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def with_overrides(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Return a copy with non-None flag values applied to one section."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    current = getattr(cfg, section)
    merged = {f.name: getattr(current, f.name) for f in fields(current)}
    merged.update(values)
    try:
        updated = type(current)(**merged)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    return replace(cfg, **{section: updated})


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    """Apply ``--seed`` everywhere a seed is consumed."""
    if seed is None:
        return cfg
    return replace(
        cfg,
        run=replace(cfg.run, seed=seed),
        prior=replace(cfg.prior, seed=seed),
        model=replace(cfg.model, seed=seed),
        train=replace(cfg.train, seed=seed),
    )


def env_threads() -> int:
    """Worker count for data-parallel stages, from ``MEMMLP_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n
