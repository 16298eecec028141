"""Campaign configuration: YAML files, named attack presets, CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from advbench.attacks import CW_TARGET, AttackConfig
from advbench.defense import SmoothingConfig
from advbench.errors import ValidationError

PRESETS = {
    "pgd-l2-35db": dict(algorithm="pgd", norm="L2", snr_target_db=35.0, steps=200, relative_lr=0.1),
    "pgd-l2-40db": dict(algorithm="pgd", norm="L2", snr_target_db=40.0, steps=200, relative_lr=0.1),
    "pgd-linf-5e3": dict(algorithm="pgd", norm="Linf", epsilon=0.005, steps=200, relative_lr=0.1),
    "pgd-linf-15e4": dict(algorithm="pgd", norm="Linf", epsilon=0.0015, steps=200, relative_lr=0.1),
    "cw-default": dict(
        algorithm="cw", norm="Linf", steps=2000, learning_rate=0.01, lam=1.0,
        alpha=0.7, max_decays=8, initial_epsilon=0.1, target_text=CW_TARGET,
    ),
    "lang-45db": dict(algorithm="lang_confusion", norm="L2", snr_target_db=45.0, steps=30, relative_lr=0.1, target_language="sr"),
    "universal-40db": dict(
        algorithm="universal_lang", norm="L2", snr_target_db=40.0, epochs=2000, relative_lr=0.001, target_language="sr",
    ),
    "wn-0db": dict(algorithm="white_noise", snr_target_db=0.0),
    "none": dict(algorithm="none"),
}


def attack_from_spec(spec) -> tuple[AttackConfig, str]:
    """Build an AttackConfig from a preset name or a mapping with optional ``preset`` key.

    Returns the config and a label for tables.
    """
    if spec is None:
        spec = "none"
    if isinstance(spec, str):
        spec = {"preset": spec}
    spec = dict(spec)
    label = spec.pop("label", None)
    preset = spec.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = dict(PRESETS[preset])
    if "epsilon" in spec and "snr_target_db" not in spec:
        base.pop("snr_target_db", None)
    if "snr_target_db" in spec and "epsilon" not in spec:
        base.pop("epsilon", None)
    base.update(spec)
    config = AttackConfig.from_dict(base)
    return config, label or preset or config.algorithm


@dataclass
class CampaignConfig:
    model: str
    manifests: list[str]
    output_dir: str
    attack: AttackConfig = field(default_factory=lambda: AttackConfig("none"))
    setting: str = "none"
    defense: SmoothingConfig | None = None
    train_manifest: str | None = None
    max_utterances: int | None = None
    max_train_utterances: int | None = None
    seed: int = 0
    workers: int = 1
    beam_size: int = 5
    source_language: str | None = None

    def __post_init__(self):
        if not self.manifests:
            raise ValidationError("campaign needs at least one manifest")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.attack.algorithm == "universal_lang" and not self.train_manifest:
            raise ValidationError("universal_lang campaigns need train_manifest")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attack"] = self.attack.to_dict()
        d["defense"] = self.defense.to_dict() if self.defense else None
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "CampaignConfig":
        d = dict(d)
        base = Path(base_dir) if base_dir else None

        def rel(p):
            if p is None:
                return None
            p = Path(p)
            return str(base / p) if base is not None and not p.is_absolute() else str(p)

        manifests = d.pop("manifests", None) or d.pop("manifest", None)
        if isinstance(manifests, str):
            manifests = [manifests]
        if not manifests:
            raise ValidationError("config needs 'manifest' or 'manifests'")
        attack, label = attack_from_spec(d.pop("attack", None))
        setting = d.pop("setting", None) or label
        defense = d.pop("defense", None)
        if defense is not None:
            defense = SmoothingConfig.from_dict(defense)
        if "model" not in d or "output_dir" not in d:
            raise ValidationError("config needs 'model' and 'output_dir'")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        d["output_dir"] = rel(d["output_dir"])
        d["train_manifest"] = rel(d.get("train_manifest"))
        return cls(manifests=[rel(m) for m in manifests], attack=attack, setting=setting, defense=defense, **d)


def load_config(path, **overrides) -> CampaignConfig:
    """Read a YAML campaign file; ``None``-valued overrides are ignored.

    Relative paths inside the file are resolved against its directory.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ValidationError(f"cannot parse {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ValidationError(f"{path} must contain a mapping")
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    return CampaignConfig.from_dict(raw, base_dir=path.resolve().parent)
