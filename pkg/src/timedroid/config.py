"""Pipeline configuration: JSON file plus command-line overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .byol import ByolConfig
from .classifier import DEFAULT_GRID
from .dex import DEFAULT_FRAMEWORK_PREFIXES
from .errors import ConfigInvalid
from .features import MODALITIES


@dataclass
class Paths:
    workdir: str = "work"
    apks: str | None = None
    manifest: str | None = None
    tables: str | None = None
    cache: str | None = None


@dataclass
class FeaturizerConfig:
    n: int = 3
    include_unknown: bool = False
    api_list: str | None = None
    permission_list: str | None = None
    framework_prefixes: list = field(default_factory=lambda: list(DEFAULT_FRAMEWORK_PREFIXES))


@dataclass
class SplitConfig:
    test_year: int = 2024
    test_malware: int = 400
    test_benign: int = 3600


@dataclass
class ClassifierConfig:
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    folds: int = 5
    threshold: float = 0.5


@dataclass
class ReportConfig:
    offline: bool = True
    max_concurrent: int = 4


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    byol: dict = field(default_factory=dict)        # shared settings plus optional per-modality overrides
    split: SplitConfig = field(default_factory=SplitConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    strict_date: bool = False
    workers: int = 1
    seed: int | None = None

    def byol_for(self, modality):
        shared = {k: v for k, v in self.byol.items() if k not in MODALITIES}
        shared.update(self.byol.get(modality, {}))
        shared["seed"] = None if self.seed is None else self.seed + MODALITIES.index(modality)
        try:
            return ByolConfig.from_json({**ByolConfig().to_json(), **shared})
        except TypeError as exc:
            raise ConfigInvalid(f"byol config: {exc}") from exc

    def validate(self):
        if self.featurizer.n < 1:
            raise ConfigInvalid("featurizer.n must be >= 1")
        if not self.classifier.grid or any(c <= 0 for c in self.classifier.grid):
            raise ConfigInvalid("classifier.grid must hold positive regularisation strengths")
        if self.classifier.folds < 1:
            raise ConfigInvalid("classifier.folds must be >= 1")
        if not 0 < self.classifier.threshold < 1:
            raise ConfigInvalid("classifier.threshold must lie in (0, 1)")
        if self.split.test_malware < 0 or self.split.test_benign < 0:
            raise ConfigInvalid("split test counts must be non-negative")
        for m in MODALITIES:
            cfg = self.byol_for(m)
            try:
                if cfg.seed is not None:
                    cfg.validate()
            except ValueError as exc:
                raise ConfigInvalid(f"byol[{m}]: {exc}") from exc
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        sections = {"paths": Paths, "featurizer": FeaturizerConfig, "split": SplitConfig,
                    "classifier": ClassifierConfig, "report": ReportConfig}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in doc.items():
            if key not in known:
                raise ConfigInvalid(f"unknown config key {key!r}")
            if key in sections:
                sub = sections[key]
                allowed = {f.name for f in fields(sub)}
                bad = set(value) - allowed
                if bad:
                    raise ConfigInvalid(f"unknown {key} keys: {sorted(bad)}")
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(doc)

    def override(self, section, **values):
        """Return a copy with non-None ``values`` applied to ``section``
        (``None`` section means top-level fields)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section is None:
            return replace(self, **values)
        return replace(self, **{section: replace(getattr(self, section), **values)})
