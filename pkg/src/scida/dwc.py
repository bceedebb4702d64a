"""Domain-wise branch: classifier-discrepancy adaptation and pseudo labels.

Each training step touches a fixed parameter set:

=========================  ======================
step                       updated groups
=========================  ======================
``step_source_supervised``  g_cm, c1, c2
``step_max_discrepancy``    c1, c2
``step_min_discrepancy``    g_cm (``n_inner`` times)
=========================  ======================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .datasets import ImageDataset
from .errors import ConfigError, ContractViolation, DivergenceError
from .losses import discrepancy_loss, weighted_focal_loss
from .models import to_nchw
from .state import TrainingState


@dataclass
class DomainBatch:
    source_images: torch.Tensor | None
    source_labels: torch.Tensor | None
    target_images: torch.Tensor | None
    target_ids: tuple[str, ...] = ()

    @property
    def batch_size(self) -> int:
        for t in (self.source_images, self.target_images):
            if t is not None:
                return t.shape[0]
        return 0

    def __post_init__(self):
        if (
            self.source_images is not None
            and self.target_images is not None
            and self.source_images.shape[0] != self.target_images.shape[0]
        ):
            raise ValueError("source and target sub-batches must have equal size")


def epoch_order(n: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    """Permutation of ``range(n)`` fixed by (seed, epoch, stream)."""
    return np.random.default_rng([seed, epoch, stream]).permutation(n)


def iterate_domain_batches(
    source: ImageDataset, target: ImageDataset, batch_size: int, seed: int, epoch: int
) -> Iterator[DomainBatch]:
    """Paired batches over one pass of the source; the target cycles as needed.

    Target labels are never copied into a batch.
    """
    if source.labels is None:
        raise ContractViolation("source dataset carries no labels")
    n_batches = max(1, len(source) // batch_size)
    s_order = epoch_order(len(source), seed, epoch, 0)
    t_order = epoch_order(len(target), seed, epoch, 1)
    reps = math.ceil(n_batches * batch_size / len(target))
    t_order = np.tile(t_order, reps)
    for b in range(n_batches):
        si = np.sort(s_order[b * batch_size : (b + 1) * batch_size])
        ti = t_order[b * batch_size : (b + 1) * batch_size]
        yield DomainBatch(
            source_images=to_nchw(source.images[si]),
            source_labels=torch.from_numpy(source.labels[si].astype(np.float32)),
            target_images=to_nchw(target.images[ti]),
            target_ids=tuple(target.ids[i] for i in ti),
        )


def _require(batch: DomainBatch, source: bool, target: bool, step: str) -> None:
    if source and (batch.source_images is None or batch.source_labels is None):
        raise ContractViolation(f"{step}: batch has no labeled source images")
    if target and batch.target_images is None:
        raise ContractViolation(f"{step}: batch has no target images")


def _finite(loss: torch.Tensor, step: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss in {step}: {loss.item()}")


def source_loss(state: TrainingState, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Focal loss of both heads on labeled source images (summed)."""
    l1, l2 = state.model.dwc_logits(images)
    params = state.focal
    return weighted_focal_loss(torch.sigmoid(l1), labels, params) + weighted_focal_loss(
        torch.sigmoid(l2), labels, params
    )


def target_discrepancy(state: TrainingState, images: torch.Tensor) -> torch.Tensor:
    l1, l2 = state.model.dwc_logits(images)
    return discrepancy_loss(torch.sigmoid(l1), torch.sigmoid(l2))


def step_source_supervised(state: TrainingState, batch: DomainBatch) -> float:
    _require(batch, source=True, target=False, step="step_source_supervised")
    state.opt_g.zero_grad(set_to_none=True)
    state.opt_c.zero_grad(set_to_none=True)
    loss = source_loss(state, batch.source_images, batch.source_labels)
    _finite(loss, "step_source_supervised")
    loss.backward()
    state.opt_g.step()
    state.opt_c.step()
    return loss.item()


def step_max_discrepancy(state: TrainingState, batch: DomainBatch) -> float:
    """Classifiers only: keep the source fit while pulling the heads apart on targets."""
    _require(batch, source=True, target=True, step="step_max_discrepancy")
    model = state.model
    state.opt_c_max.zero_grad(set_to_none=True)
    with torch.no_grad():
        f_s = model.g_cm(batch.source_images)
        f_t = model.g_cm(batch.target_images)
    params = state.focal
    wfl = weighted_focal_loss(torch.sigmoid(model.c1(f_s)), batch.source_labels, params)
    wfl = wfl + weighted_focal_loss(torch.sigmoid(model.c2(f_s)), batch.source_labels, params)
    dis = discrepancy_loss(torch.sigmoid(model.c1(f_t)), torch.sigmoid(model.c2(f_t)))
    loss = wfl - state.config.dis_weight * dis
    _finite(loss, "step_max_discrepancy")
    loss.backward()
    state.opt_c_max.step()
    return loss.item()


def step_min_discrepancy(state: TrainingState, batch: DomainBatch, n_inner: int | None = None) -> float:
    """Feature generator only: shrink the heads' target disagreement.

    Returns the discrepancy measured before the last update (before the only
    update when ``n_inner`` is 1; the unchanged value when it is 0).
    """
    _require(batch, source=False, target=True, step="step_min_discrepancy")
    n_inner = state.config.n_inner if n_inner is None else n_inner
    model = state.model
    if n_inner == 0:
        with torch.no_grad():
            return target_discrepancy(state, batch.target_images).item()
    for p in (*model.c1.parameters(), *model.c2.parameters()):
        p.requires_grad_(False)
    try:
        for _ in range(n_inner):
            state.opt_g_min.zero_grad(set_to_none=True)
            dis = target_discrepancy(state, batch.target_images)
            _finite(dis, "step_min_discrepancy")
            (state.config.dis_weight * dis).backward()
            state.opt_g_min.step()
    finally:
        for p in (*model.c1.parameters(), *model.c2.parameters()):
            p.requires_grad_(True)
    return dis.item()


# --------------------------------------------------------------------------
# pseudo labels


def n_delta(delta: float, num_classes: int) -> int:
    """Positives per pseudo label: ``delta * K`` rounded half-up."""
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"delta must be in (0, 1], got {delta}")
    n = int(math.floor(delta * num_classes + 0.5 + 1e-9))
    if n < 1:
        raise ConfigError(f"delta={delta} with K={num_classes} selects no labels")
    return min(n, num_classes)


@dataclass(frozen=True, eq=False)
class PseudoLabelSet:
    ids: tuple[str, ...]
    labels: np.ndarray  # (N, K) uint8, exactly n_delta ones per row
    probs: np.ndarray  # (N, K) float32 source probabilities
    delta: float

    def __len__(self) -> int:
        return len(self.ids)

    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "labels": {sid: np.flatnonzero(row).tolist() for sid, row in zip(self.ids, self.labels)},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, data: dict, num_classes: int) -> "PseudoLabelSet":
        ids = tuple(data["labels"])
        labels = np.zeros((len(ids), num_classes), dtype=np.uint8)
        for n, sid in enumerate(ids):
            labels[n, data["labels"][sid]] = 1
        return cls(ids, labels, labels.astype(np.float32), float(data["delta"]))


def select_top(probs: np.ndarray, n: int) -> np.ndarray:
    order = np.argsort(-probs, axis=1, kind="stable")[:, :n]
    labels = np.zeros(probs.shape, dtype=np.uint8)
    np.put_along_axis(labels, order, 1, axis=1)
    return labels


@torch.no_grad()
def predict_dwc(state: TrainingState, images: np.ndarray, head: str = "c2", batch_size: int = 64) -> np.ndarray:
    model = state.model
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        f = model.g_cm(to_nchw(images[start : start + batch_size]))
        out.append(torch.sigmoid(getattr(model, head)(f)).numpy())
    model.train(was_training)
    return np.concatenate(out).astype(np.float32)


def extract_pseudo_labels(state: TrainingState, target: ImageDataset, delta: float) -> PseudoLabelSet:
    """Top ``n_delta`` classes of ``sigmoid(C2(G_cm(x)))`` per target image."""
    n = n_delta(delta, state.num_classes)
    probs = predict_dwc(state, target.images, "c2")
    return PseudoLabelSet(target.ids, select_top(probs, n), probs, delta)
