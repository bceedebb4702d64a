"""Label-wise self-correction branch.

The adjacency fed to the GCN is the row-normalized co-occurrence of the
current pseudo labels.  Self-correction pulls the label-wise prediction and
the domain-wise ``C2`` prediction toward each other with a two-sided BCE;
``C1`` follows ``C2`` toward the label-wise output so the pair stays unified.
The two terms that move the domain-wise branch are scaled by
``selfcorr_dwc_weight``: early on the label-wise output is close to 0.5
everywhere and an unscaled pull drags ``C1``/``C2`` there too.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dwc import PseudoLabelSet
from .errors import ContractViolation, DivergenceError
from .losses import bce_loss
from .models import to_nchw
from .state import TrainingState


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    counts: np.ndarray  # (K, K) int64, symmetric
    normalized: np.ndarray  # (K, K) float64, rows sum to 1 or are all zero

    def to_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.normalized, dtype=torch.float32)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.normalized).tobytes()).hexdigest()[:16]

    def save_csv(self, path: str | Path, categories: Sequence[str] | None = None) -> None:
        k = self.counts.shape[0]
        names = list(categories) if categories else [str(i) for i in range(k)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", *names])
            for name, row in zip(names, self.counts):
                w.writerow([name, *row.tolist()])

    def save_json(self, path: str | Path, categories: Sequence[str] | None = None) -> None:
        doc = {"categories": list(categories) if categories else None, "normalized": self.normalized.tolist()}
        Path(path).write_text(json.dumps(doc))


def build_correlation_matrix(pseudo: PseudoLabelSet | np.ndarray) -> CorrelationMatrix:
    """Co-occurrence counts of pseudo labels, each row divided by its sum.

    ``counts[i, i]`` is the frequency of label ``i``; rows of labels that never
    occur stay zero.
    """
    labels = pseudo.labels if isinstance(pseudo, PseudoLabelSet) else np.asarray(pseudo)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ValueError("build_correlation_matrix needs a non-empty (N, K) label array")
    onehot = (labels != 0).astype(np.int64)
    counts = onehot.T @ onehot
    sums = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, sums, out=np.zeros(counts.shape), where=sums > 0)
    return CorrelationMatrix(counts, normalized)


def lwc_forward(state: TrainingState, target_images, adjacency: torch.Tensor | CorrelationMatrix) -> torch.Tensor:
    """Label-wise probabilities, one row per image."""
    if isinstance(adjacency, CorrelationMatrix):
        adjacency = adjacency.to_tensor()
    return torch.sigmoid(state.model.lwc_logits(to_nchw(target_images), adjacency))


@torch.no_grad()
def predict_lwc(state: TrainingState, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model = state.model
    was_training = model.training
    model.eval()
    out = [
        lwc_forward(state, images[s : s + batch_size], state.adjacency).numpy()
        for s in range(0, len(images), batch_size)
    ]
    model.train(was_training)
    return np.concatenate(out).astype(np.float32)


def self_correction_loss(state: TrainingState, images: torch.Tensor, pseudo: torch.Tensor | None = None) -> torch.Tensor:
    model = state.model
    y_lwc = lwc_forward(state, images, state.adjacency)
    l1, l2 = model.dwc_logits(images)
    p1, p2 = torch.sigmoid(l1), torch.sigmoid(l2)
    lwc_target = p2.detach() if pseudo is None else pseudo
    w = state.config.selfcorr_dwc_weight
    return bce_loss(y_lwc, lwc_target) + w * (bce_loss(p2, y_lwc.detach()) + bce_loss(p1, y_lwc.detach()))


def step_self_correction(
    state: TrainingState, images: torch.Tensor, ids: Sequence[str], pseudo: PseudoLabelSet
) -> float:
    """One joint update of both branches (every parameter group)."""
    index = pseudo.index()
    missing = [sid for sid in ids if sid not in index]
    if missing:
        raise ContractViolation(f"no pseudo label for target ids {missing[:5]}")
    opts = (state.opt_g, state.opt_c, state.opt_lwc)
    for opt in opts:
        opt.zero_grad(set_to_none=True)
    hard = None
    if state.config.selfcorr_target == "pseudo":
        hard = torch.from_numpy(pseudo.labels[[index[sid] for sid in ids]].astype(np.float32))
    loss = self_correction_loss(state, to_nchw(images), hard)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss in step_self_correction: {loss.item()}")
    loss.backward()
    for opt in opts:
        opt.step()
    return loss.item()
