"""Flat `section.key = value` run configuration.

One file fully determines a run: seed, dataset recipe, model dimensions,
objective toggles, schedule, and optimizer settings. The resolved config
is re-serialized into every run directory so a run is reproducible from
that file alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .consistency import SelfEQConfig
from .model import ModelConfig
from .objectives import Toggles


@dataclass
class DataConfig:
    path: str = ""
    n_train: int = 2000
    n_eval: int = 400
    image_size: int = 64
    region_fraction: float = 0.8
    paraphrase_fraction: float = 0.5
    hard_fraction: float = 0.5


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 2e-3
    batch_size: int = 32
    epochs: int = 6


@dataclass
class AugmentSettings:
    endpoint_url: str = ""
    timeout_s: float = 10.0
    retries: int = 1
    concurrency: int = 4
    mode: str = "object_centric"


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "baseline"  # baseline | selfeq
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig | None = None  # vocab_size resolved from the bundled vocabulary
    selfeq: SelfEQConfig = field(default_factory=SelfEQConfig)
    objectives: Toggles = field(default_factory=Toggles)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentSettings = field(default_factory=AugmentSettings)

    def resolved_model(self) -> ModelConfig:
        if self.model is not None:
            return self.model
        from .data import build_vocabulary

        return ModelConfig(vocab_size=len(build_vocabulary()), image_size=self.data.image_size)


class ConfigError(ValueError):
    pass


# config-file key -> dataclass field (where they differ)
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_ALIASES = {v: k for k, v in _KEY_ALIASES.items()}

_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "selfeq": SelfEQConfig,
    "objectives": Toggles,
    "optimizer": OptimizerConfig,
    "augment": AugmentSettings,
}
_TOP_KEYS = {"seed": int, "mode": str}


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if raw and raw[0] in "'\"" and raw[-1] == raw[0]:
        return raw[1:-1]
    return raw


def parse_config(text: str) -> RunConfig:
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key in _TOP_KEYS:
            top[key] = _parse_value(raw, _TOP_KEYS[key])
            continue
        if "." not in key:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        name = _KEY_ALIASES.get(name, name)
        cls = _SECTIONS[section]
        by_name = {f.name: f for f in fields(cls)}
        if name not in by_name:
            raise ConfigError(f"line {lineno}: unknown key {section}.{name}")
        ftype = by_name[name].type
        typ = {"int": int, "float": float, "bool": bool, "str": str}.get(str(ftype), None)
        if typ is None:
            typ = ftype if isinstance(ftype, type) else str
        values[section][name] = _parse_value(raw, typ)
    cfg = RunConfig(**top)
    for section, kwargs in values.items():
        if not kwargs:
            continue
        if section == "model":
            base = {"vocab_size": 0}
            base.update(kwargs)
            if base["vocab_size"] == 0:
                from .data import build_vocabulary

                base["vocab_size"] = len(build_vocabulary())
            cfg.model = ModelConfig(**base)
        else:
            setattr(cfg, section, _SECTIONS[section](**kwargs))
    if cfg.mode not in ("baseline", "selfeq"):
        raise ConfigError(f"mode must be baseline or selfeq, got {cfg.mode!r}")
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Canonical flat text for the resolved run configuration."""
    lines = [f"seed = {cfg.seed}", f"mode = {cfg.mode}"]
    sections = {
        "data": cfg.data,
        "model": cfg.resolved_model(),
        "selfeq": cfg.selfeq,
        "objectives": cfg.objectives,
        "optimizer": cfg.optimizer,
        "augment": cfg.augment,
    }
    for section in sorted(sections):
        obj = sections[section]
        for name, value in sorted(asdict(obj).items()):
            key = _FIELD_ALIASES.get(name, name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
