"""INI run configuration: ``[stft]``, ``[mel]``, ``[model]``, ``[train]``, ``[data]``.

Every section and key is optional; omitted values take the library
defaults.  Unknown sections or keys are rejected so typos fail loudly.

Model layers use a compact syntax::

    [model]
    paths = h:9x1:32, v:1x11:32, l:3x3:32
    lflbs = 3x3:64:2x2, 3x3:96:2x2, 3x3:128:2x1, 3x3:160:gap
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path

from .errors import ConfigError
from .harness import TrainConfig
from .mfcc import MelConfig, StftConfig
from .model import LflbSpec, ModelConfig, PathSpec

DATA_KEYS = ("manifest", "cache_dir")


@dataclasses.dataclass
class RunConfig:
    stft: StftConfig = dataclasses.field(default_factory=StftConfig)
    mel: MelConfig = dataclasses.field(default_factory=MelConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: dict = dataclasses.field(default_factory=dict)


def _pair(text: str, what: str) -> tuple:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"{what}: expected AxB, got {text!r}") from None


def parse_paths(text: str) -> tuple:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(f"path spec {item!r}: expected role:KHxKW:filters[:SHxSW]")
        stride = _pair(parts[3], "path stride") if len(parts) == 4 else (1, 1)
        out.append(PathSpec(parts[0].strip(), _pair(parts[1], "path kernel"), int(parts[2]), stride))
    return tuple(out)


def parse_lflbs(text: str) -> tuple:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"LFLB spec {item!r}: expected KHxKW:filters:PHxPW|gap")
        pool = None if parts[2].strip().lower() == "gap" else _pair(parts[2], "LFLB pool")
        out.append(LflbSpec(_pair(parts[0], "LFLB kernel"), int(parts[1]), pool))
    return tuple(out)


def format_paths(paths) -> str:
    items = []
    for p in paths:
        s = f"{p.role}:{p.kernel[0]}x{p.kernel[1]}:{p.filters}"
        if tuple(p.stride) != (1, 1):
            s += f":{p.stride[0]}x{p.stride[1]}"
        items.append(s)
    return ", ".join(items)


def format_lflbs(lflbs) -> str:
    return ", ".join(f"{b.kernel[0]}x{b.kernel[1]}:{b.filters}:" + ("gap" if b.gap else f"{b.pool[0]}x{b.pool[1]}")
                     for b in lflbs)


def _convert(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value.strip()


def _section_kwargs(section, cls, special=None) -> dict:
    special = special or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    out = {}
    for key, value in section.items():
        if key in special:
            out[key] = special[key](value)
        elif key in fields:
            out[key] = _convert(value, getattr(defaults, key), f"{section.name}.{key}")
        else:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
    return out


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    known = {"stft", "mel", "model", "train", "data"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    if parser.defaults():
        raise ConfigError(f"{source}: keys outside a section are not allowed")
    sec = {name: parser[name] if parser.has_section(name) else {} for name in known}

    try:
        stft = StftConfig(**_section_kwargs(_named(sec["stft"], "stft"), StftConfig))
        mel = MelConfig(**_section_kwargs(_named(sec["mel"], "mel"), MelConfig))
        model_kw = _section_kwargs(_named(sec["model"], "model"), ModelConfig, {
            "paths": parse_paths,
            "lflbs": parse_lflbs,
            "body1_pool": lambda v: _pair(v, "body1_pool"),
        })
        model_kw.setdefault("input_mfcc", mel.n_mfcc)
        model = ModelConfig(**model_kw)
        train = TrainConfig(**_section_kwargs(_named(sec["train"], "train"), TrainConfig))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if mel.f_max > 8000.0:  # features are always computed at 16 kHz
        raise ConfigError(f"{source}: mel.f_max={mel.f_max} exceeds the 8000 Hz Nyquist limit")
    if model.input_mfcc != mel.n_mfcc:
        raise ConfigError(f"{source}: model.input_mfcc={model.input_mfcc} but mel.n_mfcc={mel.n_mfcc}")
    data = dict(sec["data"].items()) if sec["data"] else {}
    bad = set(data) - set(DATA_KEYS)
    if bad:
        raise ConfigError(f"unknown key(s) {sorted(bad)} in [data]")
    if "manifest" in data and source != "<string>" and not Path(data["manifest"]).is_absolute():
        data["manifest"] = str(Path(source).parent / data["manifest"])
    return RunConfig(stft, mel, model, train, data)


class _named(dict):
    """Plain mapping that remembers its section name for error messages."""

    def __init__(self, mapping, name: str):
        super().__init__(mapping.items() if hasattr(mapping, "items") else mapping)
        self.name = name


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` so that ``parse_config(dump_config(cfg)) == cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["stft"] = {k: str(v) for k, v in dataclasses.asdict(cfg.stft).items()}
    parser["mel"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in dataclasses.asdict(cfg.mel).items()}
    m = cfg.model
    parser["model"] = {
        "paths": format_paths(m.paths),
        "lflbs": format_lflbs(m.lflbs),
        "body1_pool": f"{m.body1_pool[0]}x{m.body1_pool[1]}",
        "num_classes": str(m.num_classes),
        "dropout": repr(m.dropout),
        "input_mfcc": str(m.input_mfcc),
        "bn_momentum": repr(m.bn_momentum),
        "bn_eps": repr(m.bn_eps),
        "zero_init_head": str(m.zero_init_head).lower(),
    }
    parser["train"] = {k: (str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
                       for k, v in cfg.train.to_dict().items()}
    if cfg.data:
        parser["data"] = dict(cfg.data)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
