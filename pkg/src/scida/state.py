"""Mutable training state and its checkpoint format.

A checkpoint is one binary file starting with the ``SCIDA1`` magic line and
followed by a ``torch.save`` payload, plus a JSON sidecar (same path with
``.json`` appended) holding ``{format, epoch, config_hash, rng_seed}``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .losses import FocalParams
from .models import SCIDANet, load_label_embedding

MAGIC = b"SCIDA1\n"
# each objective keeps its own momentum: with a shared buffer the source
# step's inertia outweighs the small discrepancy gradient and the adversarial
# steps move the discrepancy the wrong way
OPTIMIZERS = ("opt_g", "opt_c", "opt_lwc", "opt_c_max", "opt_g_min")
FORMAT = "SCIDA1"


@dataclass
class TrainingState:
    config: RunConfig
    model: SCIDANet
    opt_g: torch.optim.SGD
    opt_c: torch.optim.SGD
    opt_lwc: torch.optim.SGD
    opt_c_max: torch.optim.SGD  # classifiers, max-discrepancy step
    opt_g_min: torch.optim.SGD  # generator, min-discrepancy step
    class_weights: torch.Tensor
    adjacency: torch.Tensor
    categories: tuple[str, ...] = ()
    epoch: int = 0
    # trainer bookkeeping carried through checkpoints
    extra: dict = field(default_factory=dict)

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.class_weights, self.config.focal_alpha, self.config.focal_gamma)

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def set_epoch_lr(self, epoch: int) -> None:
        """Step schedule: multiply by ``lr_decay`` every ``lr_step_*`` epochs (0-based)."""
        cfg = self.config
        lr_dwc = cfg.lr_dwc * cfg.lr_decay ** (epoch // cfg.lr_step_dwc)
        lr_lwc = cfg.lr_lwc * cfg.lr_decay ** (epoch // cfg.lr_step_lwc)
        for name in OPTIMIZERS:
            lr = lr_lwc if name == "opt_lwc" else lr_dwc
            for g in getattr(self, name).param_groups:
                g["lr"] = lr


def _sgd(params, lr: float, cfg: RunConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def build_state(
    config: RunConfig, class_weights: np.ndarray, categories=None
) -> TrainingState:
    k = len(class_weights)
    categories = tuple(categories or [f"class_{c:02d}" for c in range(k)])
    embedding = None
    if config.embedding_path:
        embedding = load_label_embedding(config.embedding_path, categories)
    model = SCIDANet(
        num_classes=k,
        side=config.image_side,
        feature_dim=config.feature_dim,
        embed_dim=config.embed_dim,
        widths=config.backbone_widths,
        classifier_hidden=config.classifier_hidden,
        embedding=embedding,
        seed=config.seed,
    )
    heads = list(model.c1.parameters()) + list(model.c2.parameters())
    state = TrainingState(
        config=config,
        model=model,
        opt_g=_sgd(model.g_cm.parameters(), config.lr_dwc, config),
        opt_c=_sgd(heads, config.lr_dwc, config),
        opt_lwc=_sgd(
            list(model.g_t.parameters()) + list(model.fc_head.parameters()) + list(model.gcn.parameters()),
            config.lr_lwc,
            config,
        ),
        opt_c_max=_sgd(heads, config.lr_dwc, config),
        opt_g_min=_sgd(model.g_cm.parameters(), config.lr_dwc, config),
        class_weights=torch.as_tensor(np.asarray(class_weights), dtype=torch.float32),
        adjacency=torch.eye(k),
        categories=categories,
    )
    state.set_epoch_lr(0)
    return state


def save_checkpoint(state: TrainingState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": state.config.to_dict(),
        "model": state.model.state_dict(),
        "optimizers": {name: getattr(state, name).state_dict() for name in OPTIMIZERS},
        "class_weights": state.class_weights,
        "adjacency": state.adjacency,
        "categories": list(state.categories),
        "epoch": state.epoch,
        "extra": state.extra,
        "torch_rng": torch.get_rng_state(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(MAGIC + buf.getvalue())
    sidecar = {
        "format": FORMAT,
        "epoch": state.epoch,
        "config_hash": state.config.hash(),
        "rng_seed": state.config.seed,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_checkpoint(path: str | Path) -> TrainingState:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a {FORMAT} checkpoint")
    payload = torch.load(io.BytesIO(raw[len(MAGIC):]), weights_only=False)
    config = RunConfig.from_dict(payload["config"])
    state = build_state(config, payload["class_weights"].numpy(), payload["categories"])
    state.model.load_state_dict(payload["model"])
    for name in OPTIMIZERS:
        getattr(state, name).load_state_dict(payload["optimizers"][name])
    state.adjacency = payload["adjacency"]
    state.epoch = payload["epoch"]
    state.extra = payload["extra"]
    torch.set_rng_state(payload["torch_rng"])
    return state
