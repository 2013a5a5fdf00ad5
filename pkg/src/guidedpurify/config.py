"""Run configuration: one YAML document per run, namespaced by module.

Unknown keys are rejected and all values are validated before any command
does real work. ``--set section.key=value`` overrides are applied on top of the
file (flags win).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .attacks import MODES, AttackConfig
from .errors import ConfigError
from .finetune import FinetuneConfig
from .schedules import schedule_from_config

HOME_ENV = "GUIDEDPURIFY_HOME"
PKG_PREFIX = "pkg://"


@dataclass
class ScheduleSection:
    type: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class CodecSection:
    type: str = "identity"
    model_id: Optional[str] = None
    subfolder: Optional[str] = "vae"
    resize: Optional[int] = None


@dataclass
class CaptionSection:
    provider: str = "pretrained"
    model_id: str = "Salesforce/blip-image-captioning-base"
    template: str = "a photo of a {label}"
    text: str = ""
    class_names: Optional[List[str]] = None
    max_tokens: int = 77
    encoder: str = "pretrained"
    encoder_model_id: Optional[str] = None
    embed_dim: int = 32


@dataclass
class DiffusionSection:
    t_frac: float = 0.5
    guidance_scale: Optional[float] = None
    sampler_steps: Optional[int] = None


@dataclass
class DenoiserSection:
    type: str = "pretrained"
    checkpoint: Optional[str] = None
    model_id: Optional[str] = None
    subfolder: Optional[str] = "unet"


@dataclass
class AttackSection:
    mode: Optional[str] = None
    epsilon: Union[str, float] = "8/255"
    steps: int = 40
    step_size: Optional[float] = None
    eot_samples: int = 15
    seed: int = 0
    random_start: bool = True
    name: Optional[str] = None

    def build(self) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, steps=self.steps, step_size=self.step_size,
                            eot_samples=self.eot_samples, mode=self.mode, seed=self.seed,
                            random_start=self.random_start, name=self.name)


@dataclass
class FinetuneSection:
    epochs: int = 15
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 128
    seed: int = 0
    augment: bool = False
    dataset: Optional[str] = None

    def build(self) -> FinetuneConfig:
        return FinetuneConfig(epochs=self.epochs, learning_rate=self.learning_rate, optimizer=self.optimizer,
                              batch_size=self.batch_size, seed=self.seed, augment=self.augment)


@dataclass
class ClassifierSection:
    type: str = "toy"
    checkpoint: Optional[str] = None
    model_id: Optional[str] = None
    dataset: str = "cifar10"
    threat_model: str = "Linf"
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None


@dataclass
class HarnessSection:
    dataset: Optional[str] = None
    split: str = "test"
    subset_size: int = 2048
    batch_size: int = 256


@dataclass
class ToySection:
    n_train: int = 8192
    n_test: int = 512
    denoiser_epochs: int = 40
    classifier_epochs: int = 20
    hidden: int = 128
    finetune_samples: int = 2048


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    device: str = "cpu"
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    codec: CodecSection = field(default_factory=CodecSection)
    caption: CaptionSection = field(default_factory=CaptionSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    attack: List[AttackSection] = field(default_factory=list)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    harness: HarnessSection = field(default_factory=HarnessSection)
    toy: ToySection = field(default_factory=ToySection)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["attack"] = [dict(a) for a in d["attack"]]
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def resolve_path(self, p: Optional[str]) -> Optional[str]:
        return resolve_path(p)


def bundled_path(name: str) -> Path:
    """Path of a file shipped in the package's ``data`` directory."""
    return Path(str(resources.files("guidedpurify") / "data" / name))


def resolve_path(p: Optional[str]) -> Optional[str]:
    """``pkg://name`` points into the bundled data; other relative paths use ``$GUIDEDPURIFY_HOME`` if set."""
    if p is None:
        return None
    if p.startswith(PKG_PREFIX):
        return str(bundled_path(p[len(PKG_PREFIX):]))
    home = os.environ.get(HOME_ENV)
    if home and not os.path.isabs(p):
        return str(Path(home) / p)
    return p


_SECTIONS = {
    "schedule": ScheduleSection,
    "codec": CodecSection,
    "caption": CaptionSection,
    "diffusion": DiffusionSection,
    "denoiser": DenoiserSection,
    "finetune": FinetuneSection,
    "classifier": ClassifierSection,
    "harness": HarnessSection,
    "toy": ToySection,
}


def _coerce(value, annotation: str, where: str):
    if value is None:
        if annotation.startswith("Optional"):
            return None
        raise ConfigError(f"{where} may not be null")
    base = annotation
    if base.startswith("Optional[") and base.endswith("]"):
        base = base[len("Optional["):-1]
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if base.startswith("List["):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return list(value)
    return value


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, str(fields[k].type), f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def _set_dotted(doc: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur = doc
    for i, part in enumerate(parts[:-1]):
        if part == "attack":
            # attack.key applies to every declared attack (creating one if none).
            attacks = cur.get("attack")
            if attacks is None or attacks == {}:
                attacks = [{}]
            elif isinstance(attacks, dict):
                attacks = [attacks]
            cur["attack"] = attacks
            for a in attacks:
                _set_dotted(a, ".".join(parts[i + 1:]), value)
            return
        cur = cur.setdefault(part, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot override {dotted}: {part} is not a section")
    cur[parts[-1]] = value


def parse_overrides(pairs: List[str]) -> List[tuple]:
    out = []
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, raw = pair.split("=", 1)
        out.append((key.strip(), yaml.safe_load(raw) if raw != "" else None))
    return out


def load_config(path=None, overrides: Optional[List[str]] = None) -> RunConfig:
    """Read, override and validate a run config."""
    doc: Dict[str, Any] = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    for key, value in parse_overrides(overrides or []):
        _set_dotted(doc, key, value)
    return config_from_dict(doc)


def config_from_dict(doc: Dict[str, Any]) -> RunConfig:
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, doc.get(name), name)
    attack = doc.get("attack")
    if attack is None:
        attack = []
    elif isinstance(attack, dict):
        attack = [attack]
    kwargs["attack"] = [_build(AttackSection, a, f"attack[{i}]") for i, a in enumerate(attack)]
    for key in ("seed", "output_dir", "device"):
        if key in doc:
            kwargs[key] = _coerce(doc[key], "int" if key == "seed" else "str", key)
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Semantic checks that need no heavy computation."""
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    schedule_from_config(dataclasses.asdict(cfg.schedule))
    if not 0.0 <= cfg.diffusion.t_frac <= 1.0:
        raise ConfigError(f"diffusion.t_frac must lie in [0, 1], got {cfg.diffusion.t_frac}")
    if cfg.diffusion.sampler_steps is not None and cfg.diffusion.sampler_steps < 1:
        raise ConfigError("diffusion.sampler_steps must be >= 1")
    _choice(cfg.codec.type, ("identity", "pretrained"), "codec.type")
    _choice(cfg.caption.provider, ("pretrained", "constant", "label_template"), "caption.provider")
    _choice(cfg.caption.encoder, ("pretrained", "hash"), "caption.encoder")
    _choice(cfg.denoiser.type, ("pretrained", "toy", "stub", "none"), "denoiser.type")
    _choice(cfg.classifier.type, ("toy", "torchscript", "robustbench"), "classifier.type")
    if cfg.caption.provider == "label_template":
        if "{label}" not in cfg.caption.template:
            raise ConfigError("caption.template must contain '{label}'")
        if not cfg.caption.class_names:
            raise ConfigError("caption.class_names is required for label_template captions")
    if cfg.caption.max_tokens < 1:
        raise ConfigError("caption.max_tokens must be >= 1")
    names = set()
    for i, a in enumerate(cfg.attack):
        if a.mode is None:
            raise ConfigError(f"attack[{i}].mode is required ({', '.join(MODES)})")
        try:
            built = a.build()
        except ConfigError as exc:
            raise ConfigError(f"attack[{i}]: {exc}") from exc
        if built.name in names:
            raise ConfigError(f"duplicate attack name {built.name!r}")
        names.add(built.name)
    try:
        cfg.finetune.build()
    except ConfigError as exc:
        raise ConfigError(f"finetune: {exc}") from exc
    if cfg.harness.subset_size < 1 or cfg.harness.batch_size < 1:
        raise ConfigError("harness.subset_size and harness.batch_size must be >= 1")
    if (cfg.classifier.mean is None) != (cfg.classifier.std is None):
        raise ConfigError("classifier.mean and classifier.std must be given together")


def _choice(value, options, where):
    if value not in options:
        raise ConfigError(f"{where} must be one of {options}, got {value!r}")
