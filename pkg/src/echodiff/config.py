"""Hierarchical run configuration: defaults < YAML file < command-line overrides.

Unknown keys are rejected and every validation problem is reported at once.
The fully resolved configuration is echoed into each output directory along
with a fingerprint of the installed package sources, so any artifact can be
traced back to the exact code and settings that produced it.
"""

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .cascade import CascadeConfig
from .errors import ConfigurationError
from .nets import NetConfig
from .sampling import SamplerConfig
from .training import TrainConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> list[str]:
        problems = []
        if self.T < 1:
            problems.append(f"schedule.T must be >= 1, got {self.T}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            problems.append(
                f"schedule betas must satisfy 0 < start <= end < 1, got "
                f"({self.beta_start}, {self.beta_end})")
        return problems


@dataclass
class DataConfig:
    root: str = "data/toy"
    split_seed: int = 0
    split_ratios: tuple = (0.8, 0.1, 0.1)

    def validate(self) -> list[str]:
        if len(tuple(self.split_ratios)) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            return [f"data.split_ratios must be three values summing to 1, got {self.split_ratios}"]
        return []


@dataclass
class MetricsConfig:
    extractor: str = "toy"
    n_per_map: int = 10
    frame_backbone: str | None = None
    video_backbone: str | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.extractor not in ("toy", "standard"):
            problems.append(f"metrics.extractor must be 'toy' or 'standard', got {self.extractor!r}")
        if self.extractor == "standard" and not (self.frame_backbone and self.video_backbone):
            problems.append("metrics.extractor=standard requires frame_backbone and video_backbone paths")
        if self.n_per_map < 1:
            problems.append(f"metrics.n_per_map must be >= 1, got {self.n_per_map}")
        return problems


@dataclass
class RunConfig:
    model: NetConfig = field(default_factory=NetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)

    def validate(self, require_max_steps: bool = False) -> None:
        problems = []
        problems += [f"model: {p}" for p in self.model.validate()]
        problems += [f"schedule: {p}" for p in self.schedule.validate()]
        problems += [f"sample: {p}" for p in self.sample.validate()]
        problems += [f"data: {p}" for p in self.data.validate()]
        problems += [f"metrics: {p}" for p in self.metrics.validate()]
        problems += [f"cascade: {p}" for p in self.cascade.validate()]
        train_problems = self.train.validate()
        if not require_max_steps:
            train_problems = [p for p in train_problems if not p.startswith("max_steps")]
        problems += [f"train: {p}" for p in train_problems]
        if self.train.condition_mode != self.model.condition_mode:
            problems.append("train.condition_mode and model.condition_mode disagree")
        if problems:
            raise ConfigurationError(
                "configuration invalid:\n" + "\n".join(f"  - {p}" for p in problems))

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name))
                for name in ("model", "schedule", "train", "sample", "data", "metrics", "cascade")}

    def to_yaml(self) -> str:
        d = self.to_dict()
        for section in d.values():
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
        return yaml.safe_dump(d, sort_keys=True)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()


_SECTIONS = {
    "model": NetConfig, "schedule": ScheduleConfig, "train": TrainConfig,
    "sample": SamplerConfig, "data": DataConfig, "metrics": MetricsConfig,
    "cascade": CascadeConfig,
}


def _apply_section(obj, section: str, values: dict, problems: list[str]) -> None:
    known = {f.name for f in fields(obj)}
    for key, val in values.items():
        if key not in known:
            problems.append(f"unknown key {section}.{key}")
            continue
        if isinstance(val, list):
            val = tuple(val)
        current = getattr(obj, key)
        # YAML leaves exponent floats like 2e-4 as strings; coerce against
        # the field's current type
        try:
            if isinstance(current, bool):
                pass
            elif isinstance(current, float) and isinstance(val, (int, str)):
                val = float(val)
            elif isinstance(current, int) and isinstance(val, str):
                val = int(val)
        except ValueError:
            problems.append(f"{section}.{key}: cannot interpret {val!r}")
            continue
        setattr(obj, key, val)


def load_run_config(path: Path | str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus `section.key=value` overrides."""
    cfg = RunConfig()
    problems: list[str] = []
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping of sections")
        for section, values in raw.items():
            if section not in _SECTIONS:
                problems.append(f"unknown section {section!r}")
                continue
            if not isinstance(values, dict):
                problems.append(f"section {section!r} must be a mapping")
                continue
            _apply_section(getattr(cfg, section), section, values, problems)
    for item in overrides or []:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form section.key=value")
            continue
        dotted, raw_val = item.split("=", 1)
        if "." not in dotted:
            problems.append(f"override {item!r} is missing its section prefix")
            continue
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            problems.append(f"unknown section {section!r} in override {item!r}")
            continue
        _apply_section(getattr(cfg, section), section, {key: yaml.safe_load(raw_val)}, problems)
    if problems:
        raise ConfigurationError(
            "configuration invalid:\n" + "\n".join(f"  - {p}" for p in problems))
    return cfg


def code_fingerprint() -> str:
    """sha256 over the installed package sources, for provenance stamping."""
    pkg_dir = Path(__file__).parent
    h = hashlib.sha256()
    for src in sorted(pkg_dir.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return h.hexdigest()


def write_run_stamp(cfg: RunConfig, out_dir: Path | str) -> Path:
    """Echo the resolved config and code fingerprint into an output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = out_dir / "resolved_config.yaml"
    stamp.write_text(
        f"# code_fingerprint: {code_fingerprint()}\n"
        f"# config_fingerprint: {cfg.fingerprint()}\n" + cfg.to_yaml())
    return stamp
