"""Model hyperparameters, named ablation variants and the ``key = value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class FuseConfig:
    # encoder
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64)
    growth: int = 16
    dense_layers: int = 4
    # cam
    fusion: str = "cam"  # cam | cnn | dense
    n_sa: int = 1  # self-attention blocks before and again after the shift
    n_ca: int = 1
    attention: str = "re_softmax"  # activation inside cross-attention
    shift: bool = True
    shift_offsets: tuple[int, int] | None = None  # None -> half the deep grid
    ca_qkv: str = "split"  # split | dense
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    # losses
    w_s: float = 1e4
    w_g: float = 10.0
    # training strategy
    two_stage: bool = True

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.shift_offsets is not None:
            self.shift_offsets = tuple(int(v) for v in self.shift_offsets)
        if self.fusion not in ("cam", "cnn", "dense"):
            raise ConfigError(f"unknown fusion module {self.fusion!r}")
        if self.attention not in ("re_softmax", "softmax"):
            raise ConfigError(f"unknown attention activation {self.attention!r}")
        if self.ca_qkv not in ("split", "dense"):
            raise ConfigError(f"unknown ca_qkv layout {self.ca_qkv!r}")
        if self.n_sa < 1 or self.n_ca < 1:
            raise ConfigError("attention block counts must be positive")
        if self.w_s <= 0 or self.w_g < 0:
            raise ConfigError("loss weights must be positive")

    @property
    def deep_channels(self) -> int:
        return self.stage_channels[-1]

    def to_text(self) -> str:
        return dump_text(self)

    @classmethod
    def from_text(cls, text: str) -> "FuseConfig":
        return cls(**parse_text(text, cls))


VARIANTS = ("s1-c1", "s2-c2", "s3-c3", "no-resoftmax", "no-shift", "fuse-cnn", "fuse-dense", "one-stage")


def variant_config(name: str, base: FuseConfig | None = None) -> FuseConfig:
    """Architecture switches for each ablation row."""
    base = base or FuseConfig()
    changes = {
        "s1-c1": dict(n_sa=1, n_ca=1),
        "s2-c2": dict(n_sa=2, n_ca=2),
        "s3-c3": dict(n_sa=3, n_ca=3),
        "no-resoftmax": dict(attention="softmax"),
        "no-shift": dict(shift=False),
        "fuse-cnn": dict(fusion="cnn"),
        "fuse-dense": dict(fusion="dense"),
        "one-stage": dict(two_stage=False),
    }
    if name not in changes:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return dataclasses.replace(base, **changes[name])


# ----------------------------------------------------------------------------
# key = value text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_text(obj) -> str:
    """Canonical text: one ``key = value`` line per field, sorted by key."""
    items = sorted((f.name, getattr(obj, f.name)) for f in fields(obj))
    return "".join(f"{k} = {_format(v)}\n" for k, v in items)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if raw.lower() == "none":
            return None
        if isinstance(default, tuple) or (default is None and "," in raw):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_text(text: str, cls, strict: bool = True) -> dict:
    """Parse ``key = value`` lines into constructor kwargs for dataclass ``cls``."""
    defaults = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            defaults[f.name] = f.default_factory()  # type: ignore[misc]
        else:
            defaults[f.name] = None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in defaults:
            if strict:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            continue
        out[key] = _coerce(raw, defaults[key], key)
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    """Raw ``key -> value`` strings from a config file (keys normalised to snake case)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
