"""Run configuration: flat ``section.key=value`` text files, command-line
overrides, and per-stage seeds derived from one global seed."""
from __future__ import annotations

import inspect
import math
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import regressors
from .dataset import NDVI_THRESHOLD, SynthConfig
from .errors import ConfigError
from .evaluation import INPUT_KINDS
from .gan import GanTrainConfig

SEED_STREAMS = ("synth", "split", "gan", "forest", "mlp")
# stream used by each model kind's own randomness
MODEL_STREAM = {"lr": "forest", "knn": "forest", "dtree": "forest", "rforest": "forest", "mlp": "mlp"}

DEFAULT_FILES = {
    "samples": "samples.csv",
    "truth": "truth.csv",
    "pairs": "pairs.csv",
    "split": "split.csv",
    "generator": "generator.txt",
    "discriminator": "discriminator.txt",
    "gan_loss": "gan_loss.csv",
    "gan_ids": "gan_train_ids.txt",
    "reconstructed": "reconstructed.csv",
    "endmembers": "endmembers.csv",
    "report": "report.csv",
    "pearson": "pearson.csv",
    "model": "model.txt",
    "baselines": "baselines.csv",
    "soc_report": "soc_report.csv",
}


def derive_seed(global_seed: int, stream: str) -> int:
    """Stable 32-bit seed for a named stream; independent of other streams."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class PathsConfig:
    out_dir: str = "out"
    samples: str = ""
    truth: str = ""
    pairs: str = ""
    split: str = ""
    generator: str = ""
    discriminator: str = ""
    gan_loss: str = ""
    gan_ids: str = ""
    reconstructed: str = ""
    endmembers: str = ""
    tct: str = ""
    report: str = ""
    pearson: str = ""
    model: str = ""
    baselines: str = ""
    soc_report: str = ""


@dataclass
class PairingConfig:
    k: int = 3
    max_radius: float = math.inf


@dataclass
class SplitConfig:
    test_fraction: float = 0.2
    k_folds: int = 5
    seed: int = 0


@dataclass
class EvalConfig:
    kinds: tuple = INPUT_KINDS
    models: tuple = regressors.MODEL_KINDS
    features: tuple = (False, True)
    # single scenario for train-soc
    input_kind: str = "reconstructed_only"
    model: str = "rforest"
    with_features: bool = False


@dataclass
class SeedsConfig:
    forest: int = 0
    mlp: int = 0


@dataclass
class RunConfig:
    seed: int = 42
    n_bands: int = 7
    ndvi_threshold: float = NDVI_THRESHOLD
    paths: PathsConfig = field(default_factory=PathsConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    models: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    SECTIONS = ("paths", "pairing", "split", "gan", "synth", "eval", "seeds")
    # where each stream's seed lives
    SEED_KEYS = {"synth": "synth.seed", "split": "split.seed", "gan": "gan.seed",
                 "forest": "seeds.forest", "mlp": "seeds.mlp"}

    def path(self, name: str) -> Path:
        value = getattr(self.paths, name)
        if value:
            return Path(value)
        if name not in DEFAULT_FILES:
            raise ConfigError(f"paths.{name} must be set")
        return Path(self.paths.out_dir) / DEFAULT_FILES[name]

    def stream_seed(self, stream: str) -> int:
        return _get(self, self.SEED_KEYS[stream])

    def resolve_seeds(self) -> None:
        """Fill every seed not set explicitly from the global seed."""
        for stream, key in self.SEED_KEYS.items():
            if key not in self.explicit:
                _set(self, key, derive_seed(self.seed, stream))

    def model_seeds(self) -> dict:
        return {kind: self.stream_seed(stream) for kind, stream in MODEL_STREAM.items()}

    def validate(self) -> None:
        if self.n_bands < 1:
            raise ConfigError("n_bands must be positive")
        if self.pairing.k < 1:
            raise ConfigError("pairing.k must be at least 1")
        if self.pairing.max_radius < 0:
            raise ConfigError("pairing.max_radius must be non-negative")
        self.gan.validate()
        self.synth.validate()
        for k in self.eval.kinds + (self.eval.input_kind,):
            if k not in INPUT_KINDS:
                raise ConfigError(f"unknown input kind {k!r}")
        for m in self.eval.models + (self.eval.model,):
            if m not in regressors.MODEL_KINDS:
                raise ConfigError(f"unknown model kind {m!r}")
        for kind, params in self.models.items():
            try:
                regressors.make_model(regressors.FitSpec(kind, params=params))
            except TypeError as e:
                raise ConfigError(f"model.{kind}: {e}") from None


def _model_defaults(kind: str) -> dict:
    cls = {"lr": regressors.LinearRegression, "knn": regressors.KNNRegressor,
           "dtree": regressors.DecisionTree, "rforest": regressors.RandomForest,
           "mlp": regressors.MLPRegressor}[kind]
    sig = inspect.signature(cls.__init__)
    return {n: p.default for n, p in sig.parameters.items()
            if n not in ("self", "seed", "standardize")}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_scalar(text: str):
    t = text.strip()
    if t.lower() == "none":
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def _parse_like(default, text: str):
    """Convert ``text`` to the type of ``default``."""
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if default and isinstance(default[0], bool):
            return tuple(_parse_bool(p) for p in parts)
        if default and isinstance(default[0], float):
            return tuple(float(p) for p in parts)
        return tuple(_parse_scalar(p) for p in parts)
    if isinstance(default, str):
        return text.strip()
    return _parse_scalar(text)


def _get(cfg: RunConfig, key: str):
    obj = cfg
    for part in key.split("."):
        obj = getattr(obj, part)
    return obj


def _set(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        obj = getattr(obj, part)
    setattr(obj, parts[-1], value)


def _known_keys(cfg: RunConfig) -> list[str]:
    keys = ["seed", "n_bands", "ndvi_threshold"]
    for section in RunConfig.SECTIONS:
        keys += [f"{section}.{f.name}" for f in fields(getattr(cfg, section))]
    return keys


def apply_setting(cfg: RunConfig, key: str, text: str) -> None:
    key = key.strip()
    try:
        if key.startswith("model."):
            _, kind, param = (key.split(".") + ["", ""])[:3]
            if kind not in regressors.MODEL_KINDS:
                raise ConfigError(f"unknown model kind in {key!r}")
            defaults = _model_defaults(kind)
            if param not in defaults:
                raise ConfigError(f"unknown parameter {key!r}; expected one of {sorted(defaults)}")
            default = defaults[param]
            # string-or-number parameters such as max_features
            value = _parse_scalar(text) if default is None or isinstance(default, str) else _parse_like(default, text)
            cfg.models.setdefault(kind, {})[param] = value
        else:
            if key not in _known_keys(cfg):
                raise ConfigError(f"unknown config key {key!r}")
            _set(cfg, key, _parse_like(_get(cfg, key), text))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad value for {key}: {text!r} ({e})") from None
    cfg.explicit.add(key)


def parse_lines(cfg: RunConfig, lines, source: str = "<config>") -> None:
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.rstrip()!r}")
        key, value = line.split("=", 1)
        try:
            apply_setting(cfg, key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{n}: {e}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parse_lines(cfg, p.read_text().splitlines(), str(p))
    parse_lines(cfg, overrides, "--set")
    cfg.resolve_seeds()
    cfg.validate()
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_config(cfg: RunConfig) -> str:
    """Effective configuration; derived seeds are listed as comments."""
    seed_keys = set(RunConfig.SEED_KEYS.values())
    lines = []
    for key in _known_keys(cfg):
        line = f"{key}={_fmt(_get(cfg, key))}"
        if key in seed_keys and key not in cfg.explicit:
            line = f"# {line}  (derived)"
        lines.append(line)
    for kind in sorted(cfg.models):
        for param in sorted(cfg.models[kind]):
            lines.append(f"model.{kind}.{param}={_fmt(cfg.models[kind][param])}")
    return "\n".join(lines) + "\n"
