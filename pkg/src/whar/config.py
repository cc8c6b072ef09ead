"""Run configuration and its plain-text file format.

Grammar, one statement per line::

    # comment
    [section]
    key = value

Values are JSON literals (``4``, ``1e-4``, ``true``, ``"gelu"``, ``[3, 3]``) or bare
words, which are read as strings (``fusion = attention``). Keys outside a section
may also be written dotted (``mom.p = 0.5``). Unknown sections or keys are rejected
with the offending line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Union


class ConfigError(ValueError):
    pass


@dataclass
class MfeConfig:
    kernel: int = 4
    stride: int = 4
    channels: int = 32
    shared: bool = False


@dataclass
class MomConfig:
    p: float = 0.5
    alpha: float = 0.1
    axis: str = "temporal"
    eps: float = 1e-6
    enabled_pre_ltfe: bool = True
    enabled_pre_gta: bool = True


@dataclass
class LtfeConfig:
    kernel: int = 5
    activation: str = "gelu"


@dataclass
class CcfConfig:
    activation: str = "gelu"
    # "sensor_variable": one group per (sensor, variable); "variable": M groups spanning all sensors
    grouping: str = "sensor_variable"
    restore: bool = True


@dataclass
class CfbConfig:
    r: int = 4
    k: int = 2
    kernel: tuple[int, int] = (3, 3)


@dataclass
class FusionConfig:
    variable: str = "cfb"  # cfb | none
    sensor: str = "cfb"  # cfb | attention


@dataclass
class GtaConfig:
    state_size: int = 16
    conv_width: int = 4
    expand: int = 2


@dataclass
class AttentionConfig:
    d_k: int = 64
    scaled: bool = False


@dataclass
class ModelConfig:
    n_sensors: int = 6
    n_variables: int = 9
    seq_len: int = 100
    n_classes: int = 12
    mfe: MfeConfig = field(default_factory=MfeConfig)
    mom: MomConfig = field(default_factory=MomConfig)
    ltfe: LtfeConfig = field(default_factory=LtfeConfig)
    ccf: CcfConfig = field(default_factory=CcfConfig)
    cfb: CfbConfig = field(default_factory=CfbConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    gta: GtaConfig = field(default_factory=GtaConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    @property
    def embed_length(self) -> int:
        return (self.seq_len - self.mfe.kernel) // self.mfe.stride + 1

    def validate(self) -> None:
        if self.seq_len < self.mfe.kernel:
            raise ConfigError(f"seq_len {self.seq_len} shorter than mfe.kernel {self.mfe.kernel}")
        if self.ltfe.kernel % 2 == 0:
            raise ConfigError(f"ltfe.kernel must be odd for same padding, got {self.ltfe.kernel}")
        if self.fusion.variable not in ("cfb", "none"):
            raise ConfigError(f"fusion.variable must be cfb|none, got {self.fusion.variable!r}")
        if self.fusion.sensor not in ("cfb", "attention"):
            raise ConfigError(f"fusion.sensor must be cfb|attention, got {self.fusion.sensor!r}")
        if self.ccf.grouping not in ("sensor_variable", "variable"):
            raise ConfigError(f"ccf.grouping must be sensor_variable|variable, got {self.ccf.grouping!r}")
        if not 0.0 <= self.mom.p <= 1.0 or self.mom.alpha <= 0:
            raise ConfigError(f"mom needs 0 <= p <= 1 and alpha > 0, got p={self.mom.p}, alpha={self.mom.alpha}")
        uses_cfb = self.fusion.variable == "cfb" or self.fusion.sensor == "cfb"
        if uses_cfb and self.mfe.channels < self.cfb.r:
            raise ConfigError(f"cfb.r={self.cfb.r} exceeds channel count {self.mfe.channels} (squeeze width would be 0)")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    ablation: str = "full"  # baseline | +mom | +cfb | full
    repeats: int = 3

    def validate(self) -> None:
        if self.patience >= self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must be below max_epochs ({self.max_epochs})")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {list(ABLATIONS)}, got {self.ablation!r}")


@dataclass
class GenerateConfig:
    n_classes: int = 6
    n_sensors: int = 4
    n_variables: int = 3
    seq_len: int = 128
    train_domains: int = 4
    per_class_domain: int = 24
    val_fraction: float = 0.2
    noise: float = 0.3
    freq_base: float = 2.0  # cycles per window of class 0's fundamental
    freq_spacing: float = 0.1  # fundamental step between consecutive classes
    class_gain: tuple[float, float] = (0.4, 1.6)  # per-class amplitude, evenly spaced over this range
    phase_jitter: float = 0.25  # fraction of a full cycle
    domain_scale: tuple[float, float] = (0.9, 1.1)
    domain_offset: tuple[float, float] = (-0.2, 0.2)
    shift_scale: float = 2.0
    shift_offset: float = 0.5
    test_per_class: int = 48
    domain_disjoint: bool = True
    seed: int = 42


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)


ABLATIONS = {
    "baseline": dict(mom=False, cfb=False),
    "+mom": dict(mom=True, cfb=False),
    "+cfb": dict(mom=False, cfb=True),
    "full": dict(mom=True, cfb=True),
}


def apply_ablation(model: ModelConfig, variant: str) -> ModelConfig:
    """Copy of ``model`` with the MoM and CFB feature flags set for ``variant``."""
    try:
        flags = ABLATIONS[variant]
    except KeyError:
        raise ConfigError(f"unknown ablation {variant!r}; choose from {list(ABLATIONS)}") from None
    out = copy_config(model)
    out.mom.enabled_pre_ltfe = out.mom.enabled_pre_gta = flags["mom"]
    out.fusion.variable = "cfb" if flags["cfb"] else "none"
    out.fusion.sensor = "cfb" if flags["cfb"] else "attention"
    return out


# -- flat views ----------------------------------------------------------------

def to_flat(cfg: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = list(value) if isinstance(value, tuple) else value
    return out


def from_flat(cls, flat: dict[str, Any]):
    cfg = cls()
    for key, value in flat.items():
        set_key(cfg, key, value)
    return cfg


def copy_config(cfg):
    return from_flat(type(cfg), to_flat(cfg))


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(to_flat(cfg), sort_keys=True).encode()).hexdigest()[:16]


def set_key(cfg: Any, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
            raise KeyError(dotted)
        target = getattr(target, part)
    name = parts[-1]
    fields = {f.name: f for f in dataclasses.fields(target)}
    if name not in fields or dataclasses.is_dataclass(getattr(target, name)):
        raise KeyError(dotted)
    setattr(target, name, _coerce(getattr(target, name), value, dotted))


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(current):
            raise ConfigError(f"{key}: expected a list of {len(current)} values, got {value!r}")
        return tuple(_coerce(c, v, key) for c, v in zip(current, value))
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


# -- text format ---------------------------------------------------------------

_SECTION = re.compile(r"^\[([A-Za-z_][\w.]*)\]$")
_ASSIGN = re.compile(r"^([A-Za-z_][\w.]*)\s*=\s*(.+)$")
_BARE = re.compile(r"^[A-Za-z_+][\w.+-]*$")


def _parse_value(text: str, lineno: int) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if _BARE.match(text):
        return text
    raise ConfigError(f"line {lineno}: cannot parse value {text!r}")


def _assignments(text: str, cfg: RunConfig) -> Iterator[tuple[int, str, str, Any]]:
    """Yield (line number, key as written, full dotted key, value) for every assignment."""
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            try:
                _resolve_section(cfg, section)
            except KeyError:
                raise ConfigError(f"line {lineno}: unknown section [{section}]") from None
            continue
        m = _ASSIGN.match(line)
        if not m:
            raise ConfigError(f"line {lineno}: expected 'key = value' or '[section]', got {raw.strip()!r}")
        key = f"{section}.{m.group(1)}" if section else m.group(1)
        yield lineno, key, _full_key(key), _parse_value(m.group(2).strip(), lineno)


def parse_config_text(text: str, base: Union[RunConfig, None] = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, key, full, value in _assignments(text, cfg):
        try:
            set_key(cfg, full, value)
        except KeyError:
            raise ConfigError(f"line {lineno}: unknown key {key!r}") from None
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def assigned_keys(text: str) -> set[str]:
    """Full dotted names of every key ``text`` assigns."""
    return {full for _, _, full, _ in _assignments(text, RunConfig())}


def _resolve_section(cfg: RunConfig, section: str) -> None:
    target: Any = cfg
    for part in _full_key(section).split("."):
        if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
            raise KeyError(section)
        target = getattr(target, part)


_MODEL_SECTIONS = {"mfe", "mom", "ltfe", "ccf", "cfb", "fusion", "gta", "attention"}


def _full_key(key: str) -> str:
    # model sub-sections may be written without the "model." prefix
    head = key.split(".", 1)[0]
    return f"model.{key}" if head in _MODEL_SECTIONS else key


def load_config(path: Union[str, Path], base: Union[RunConfig, None] = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base)


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file grammar; ``parse_config_text`` reads it back unchanged."""
    lines: list[str] = []
    by_section: dict[str, list[tuple[str, Any]]] = {}
    for key, value in to_flat(cfg).items():
        section, name = key.rsplit(".", 1)
        if section.startswith("model."):
            section = section[len("model.") :]
        by_section.setdefault(section, []).append((name, value))
    for section, items in by_section.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{name} = {json.dumps(value)}" for name, value in items)
    return "\n".join(lines) + "\n"
