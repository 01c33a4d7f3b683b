"""Experiment configuration.

Config files use INI syntax: ``[section]`` headers followed by
``key = value`` lines.  Lists are comma separated, booleans accept
``true/false/yes/no/1/0``.  Unknown sections or keys are errors, so a typo
in a sweep file fails loudly instead of silently using a default.

Example::

    [run]
    mode = ablate
    seed = 3

    [quantizer]
    M = 5
    K = 128, 128
    D = 8

    [ablate]
    M = 1, 3, 5
    seeds = 3
"""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

__all__ = [
    "ConfigError",
    "MODES",
    "RunSection",
    "DataSection",
    "QuantizerSection",
    "ModelSection",
    "AnalyzeSection",
    "AblateSection",
    "ExperimentConfig",
    "load_config",
    "parse_config",
]

MODES = ("capacity", "posthoc", "train", "analyze", "ablate", "synth")
_MODE_ALIASES = {"train-dqae": "train"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    mode: str = "train"
    seed: int = 0
    out: str = "runs/out"
    # drop wall-clock fields so reruns give byte-identical reports
    reproducible: bool = False


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # synthetic | files
    files: str = ""  # glob of DQT1 tensors when source = files
    shape: tuple[int, ...] = (64, 8, 8)
    channel_redundancy: float = 0.9
    correlation_length: float = 0.0
    noise_scale: float = 0.1
    scale_spread: float = 1.0
    count: int = 256
    image_size: int = 16
    image_channels: int = 1
    image_detail: int = 8
    train_images: int = 2048
    test_images: int = 256


@dataclass(frozen=True)
class QuantizerSection:
    M: int = 5
    K: tuple[int, ...] = (256, 128)  # top -> bottom level for the autoencoder
    D: int = 64
    axes: tuple[str, ...] = ("channel", "pixel")
    gamma: float = 0.99
    epsilon: float = 1e-5
    epochs: int = 1
    batch_size: int = 16
    dead_every: int = 100
    dead_fraction: float = 0.01


@dataclass(frozen=True)
class ModelSection:
    num_levels: int = 2
    width: int = 32
    res_blocks: int = 2
    loss: str = "mse"
    beta: float = 0.25
    kl_weight: float = 0.0
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    steps: int = 1000
    use_ema: bool = True
    shared_codebook: bool = False
    top_to_decoder: bool = False
    dtype: str = "float32"


@dataclass(frozen=True)
class AnalyzeSection:
    checkpoint: str = ""  # empty: train a model first
    split: str = "test"


@dataclass(frozen=True)
class AblateSection:
    M: tuple[int, ...] = (1, 3, 5)
    K: tuple[int, ...] = (128,)
    # dq = independent codebooks, vq = one codebook shared by all slices
    variants: tuple[str, ...] = ("dq",)
    seeds: int = 3
    jobs: int = 1


_SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "quantizer": QuantizerSection,
    "model": ModelSection,
    "analyze": AnalyzeSection,
    "ablate": AblateSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def __post_init__(self):
        _validate(self)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(run={"seed": 2})`` returns a validated copy."""
        parts = {}
        for name, values in sections.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            current = getattr(self, name)
            known = {f.name for f in fields(current)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
            parts[name] = replace(current, **values)
        return replace(self, **parts)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: (list(v) if isinstance(v := getattr(sec, f.name), tuple) else v)
                         for f in fields(sec)}
        return out

    def to_ini(self) -> str:
        """Every field with its effective value; parses back to an equal config."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in _SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


_BOOLS = {"true": True, "yes": True, "on": True, "1": True,
          "false": False, "no": False, "off": False, "0": False}


def _convert(section: str, key: str, raw: str, hint):
    where = f"[{section}] {key} = {raw!r}"
    raw = raw.strip()
    try:
        if hint is bool:
            if raw.lower() not in _BOOLS:
                raise ValueError("expected a boolean")
            return _BOOLS[raw.lower()]
        if hint in (int, float, str):
            return hint(raw)
        if typing.get_origin(hint) is tuple:
            item = typing.get_args(hint)[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(item(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _validate(cfg: ExperimentConfig) -> None:
    r, d, q, m, ab = cfg.run, cfg.data, cfg.quantizer, cfg.model, cfg.ablate
    if r.mode not in MODES:
        raise ConfigError(f"[run] mode must be one of {', '.join(MODES)}, got {r.mode!r}")
    if d.source not in ("synthetic", "files"):
        raise ConfigError(f"[data] source must be synthetic or files, got {d.source!r}")
    if d.source == "files" and not d.files:
        raise ConfigError("[data] files must be set when source = files")
    if len(d.shape) < 2 or min(d.shape) < 1:
        raise ConfigError(f"[data] shape needs a channel axis and positive extents, got {d.shape}")
    if not 0.0 <= d.channel_redundancy <= 1.0:
        raise ConfigError("[data] channel_redundancy must lie in [0, 1]")
    for key in ("count", "image_size", "image_channels", "train_images", "test_images"):
        if getattr(d, key) < 1:
            raise ConfigError(f"[data] {key} must be >= 1")
    for key in ("M", "D", "epochs", "batch_size", "dead_every"):
        if getattr(q, key) < 1:
            raise ConfigError(f"[quantizer] {key} must be >= 1")
    if not q.K or min(q.K) < 1:
        raise ConfigError("[quantizer] K needs at least one positive entry")
    bad = set(q.axes) - {"channel", "pixel"}
    if bad or not q.axes:
        raise ConfigError(f"[quantizer] axes must be drawn from channel, pixel; got {q.axes}")
    if not 0.0 <= q.gamma < 1.0 or q.epsilon <= 0:
        raise ConfigError("[quantizer] need 0 <= gamma < 1 and epsilon > 0")
    if m.loss not in ("mse", "ce"):
        raise ConfigError(f"[model] loss must be mse or ce, got {m.loss!r}")
    if m.dtype not in ("float32", "float64"):
        raise ConfigError(f"[model] dtype must be float32 or float64, got {m.dtype!r}")
    for key in ("num_levels", "width", "batch_size", "steps"):
        if getattr(m, key) < 1:
            raise ConfigError(f"[model] {key} must be >= 1")
    if m.lr <= 0:
        raise ConfigError("[model] lr must be positive")
    if cfg.analyze.split not in ("train", "test"):
        raise ConfigError("[analyze] split must be train or test")
    if not ab.M or min(ab.M) < 1 or not ab.K or min(ab.K) < 1:
        raise ConfigError("[ablate] M and K need positive entries")
    if not ab.variants or set(ab.variants) - {"dq", "vq"}:
        raise ConfigError(f"[ablate] variants must be drawn from dq, vq; got {ab.variants}")
    if ab.seeds < 1 or ab.jobs < 1:
        raise ConfigError("[ablate] seeds and jobs must be >= 1")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive (M, K, D)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    parts = {}
    for name in cp.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = _SECTIONS[name]
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw in cp[name].items():
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            values[key] = _convert(name, key, raw, hints[key])
        if name == "run" and "mode" in values:
            values["mode"] = _MODE_ALIASES.get(values["mode"], values["mode"])
        parts[name] = cls(**values)
    return ExperimentConfig(**parts)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
