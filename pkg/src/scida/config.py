"""Run configuration: a flat JSON object, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .datasets import SynthConfig
from .errors import ConfigError

MODES = ("scida", "source_only", "dwc_only")
EVAL_HEADS = ("c2", "lwc", "mean")
SELFCORR_TARGETS = ("dwc", "pseudo")


@dataclass
class RunConfig:
    # dataset: either a synthetic generator config or two MAI-layout directories
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    mai_source: str | None = None
    mai_target: str | None = None

    num_classes: int | None = None
    image_side: int = 64
    feature_dim: int = 128
    embed_dim: int = 64
    backbone_widths: tuple[int, ...] = (16, 32, 32, 32)
    classifier_hidden: int = 128
    embedding_path: str | None = None

    delta: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dis_weight: float = 1.0
    selfcorr_target: str = "dwc"
    selfcorr_dwc_weight: float = 1.0

    batch_size: int = 4
    lr_dwc: float = 0.001
    lr_lwc: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step_dwc: int = 10
    lr_step_lwc: int = 40
    lr_decay: float = 0.1
    max_epochs: int = 60
    n_inner: int = 4
    eps_conv: float = 0.01
    patience: int = 3

    seed: int = 0
    mode: str = "scida"
    eval_head: str = "c2"
    threshold: float = 0.5
    checkpoint_every: int = 1

    def validate(self) -> "RunConfig":
        if self.synthetic is None and not (self.mai_source and self.mai_target):
            raise ConfigError("need either 'synthetic' or both 'mai_source' and 'mai_target'")
        if self.synthetic is not None and (self.mai_source or self.mai_target):
            raise ConfigError("'synthetic' and 'mai_*' are mutually exclusive")
        if self.synthetic is not None:
            self.synthetic.validate()
            if self.synthetic.side != self.image_side:
                raise ConfigError(
                    f"synthetic side {self.synthetic.side} != image_side {self.image_side}"
                )
            if self.num_classes not in (None, self.synthetic.num_classes):
                raise ConfigError("num_classes disagrees with synthetic.num_classes")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.eval_head not in EVAL_HEADS:
            raise ConfigError(f"eval_head must be one of {EVAL_HEADS}, got {self.eval_head!r}")
        if self.selfcorr_target not in SELFCORR_TARGETS:
            raise ConfigError(f"selfcorr_target must be one of {SELFCORR_TARGETS}")
        if self.dis_weight < 0 or self.selfcorr_dwc_weight < 0:
            raise ConfigError("dis_weight and selfcorr_dwc_weight must be >= 0")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must be in (0, 1], got {self.delta}")
        for name in ("batch_size", "max_epochs", "patience", "feature_dim", "embed_dim",
                     "lr_step_dwc", "lr_step_lwc", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_inner < 0:
            raise ConfigError("n_inner must be >= 0")
        if self.image_side % (2 ** len(self.backbone_widths)):
            raise ConfigError("image_side must be divisible by 2**len(backbone_widths)")
        if self.lr_dwc <= 0 or self.lr_lwc <= 0:
            raise ConfigError("learning rates must be positive")
        return self

    # -- serialization -------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "synthetic" in data and data["synthetic"] is not None:
            data["synthetic"] = SynthConfig.from_dict(data["synthetic"])
        elif "synthetic" not in data and (data.get("mai_source") or data.get("mai_target")):
            data["synthetic"] = None
        if "backbone_widths" in data:
            data["backbone_widths"] = tuple(data["backbone_widths"])
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes).validate()


def full_scale(**overrides) -> RunConfig:
    """Hyperparameters as reported for the full-size experiments.

    The synthetic generator still has to be swapped for ``mai_source`` /
    ``mai_target`` and a pretrained backbone for this to mean anything.
    """
    base = dict(
        image_side=512,
        feature_dim=2048,
        embed_dim=300,
        batch_size=4,
        lr_dwc=0.001,
        lr_lwc=0.01,
        lr_step_dwc=30,
        lr_step_lwc=200,
        max_epochs=400,
        synthetic=None,
    )
    base.update(overrides)
    return RunConfig(**base)


def desk_scale(**overrides) -> RunConfig:
    """Settings the acceptance checks use on the synthetic pair (K=8, 64x64)."""
    base = dict(
        synthetic=SynthConfig(num_classes=8, source_per_class=100, num_target=400, side=64),
        backbone_widths=(8, 16, 16, 16),
        batch_size=16,
        lr_dwc=0.02,
        lr_lwc=0.05,
        dis_weight=0.1,
        n_inner=1,
        selfcorr_dwc_weight=0.005,
        max_epochs=10,
        lr_step_dwc=10,
        lr_step_lwc=40,
    )
    base.update(overrides)
    return RunConfig(**base).validate()
