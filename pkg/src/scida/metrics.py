"""Overall (micro-averaged) multi-label metrics: OP, OR, OF1, OF2.

Two binarization modes: ``all`` thresholds every per-class score, ``top3``
marks the three highest-scoring classes of each image positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("all", "top3")
DEFAULT_THRESHOLD = 0.5


def f_beta(precision: float, recall: float, beta: float, return_flag: bool = False):
    """F-beta score; ``P = R = 0`` gives 0 (flagged degenerate, no exception)."""
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise ValueError(f"precision/recall must lie in [0, 1], got {precision}, {recall}")
    b2 = beta * beta
    denom = b2 * precision + recall
    degenerate = denom == 0.0
    value = 0.0 if degenerate else (1 + b2) * precision * recall / denom
    return (value, degenerate) if return_flag else value


@dataclass
class MetricsReport:
    mode: str
    op: float
    or_: float
    of1: float
    of2: float
    threshold: float | None
    beta_values: tuple[int, int] = (1, 2)
    degenerate: dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "op": self.op,
            "or": self.or_,
            "of1": self.of1,
            "of2": self.of2,
            "threshold": self.threshold,
        }

    @classmethod
    def from_json(cls, data: dict) -> "MetricsReport":
        return cls(
            mode=data["mode"],
            op=data["op"],
            or_=data["or"],
            of1=data["of1"],
            of2=data["of2"],
            threshold=data["threshold"],
        )


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the ``k`` largest scores per row; ties go to the lower index."""
    scores = np.asarray(scores)
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape, dtype=np.uint8)
    np.put_along_axis(mask, order, 1, axis=1)
    return mask


def binarize(predictions: np.ndarray, mode: str, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if mode == "all":
        return (np.asarray(predictions) >= threshold).astype(np.uint8)
    if mode == "top3":
        return top_k_mask(predictions, 3)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def counts(predicted: np.ndarray, truths: np.ndarray) -> tuple[int, int, int]:
    """(true positives, predicted positives, actual positives) over everything."""
    predicted = np.asarray(predicted, dtype=bool)
    truths = np.asarray(truths, dtype=bool)
    return int((predicted & truths).sum()), int(predicted.sum()), int(truths.sum())


def evaluate(
    predictions: np.ndarray,
    truths: np.ndarray,
    mode: str = "all",
    threshold: float = DEFAULT_THRESHOLD,
) -> MetricsReport:
    """Micro-averaged OP/OR/OF1/OF2 for ``(N, K)`` scores against multi-hot truths."""
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths)
    if predictions.ndim != 2 or predictions.shape != truths.shape:
        raise ValueError(
            f"predictions {predictions.shape} and truths {truths.shape} must be equal (N, K)"
        )
    if predictions.shape[0] == 0:
        raise ValueError("empty evaluation set")
    tp, pp, ap = counts(binarize(predictions, mode, threshold), truths)
    if ap == 0:
        raise ValueError("evaluation set has no positive ground-truth labels")
    op_degenerate = pp == 0
    op = 0.0 if op_degenerate else tp / pp
    or_ = tp / ap
    of1, f1_flag = f_beta(op, or_, 1, return_flag=True)
    of2, f2_flag = f_beta(op, or_, 2, return_flag=True)
    return MetricsReport(
        mode=mode,
        op=op,
        or_=or_,
        of1=of1,
        of2=of2,
        threshold=threshold if mode == "all" else None,
        degenerate={"op": op_degenerate, "of1": f1_flag, "of2": f2_flag},
    )


def evaluate_macro(
    predictions: np.ndarray, truths: np.ndarray, mode: str = "all", threshold: float = DEFAULT_THRESHOLD
) -> dict[str, float]:
    """Per-class precision/recall averaged over classes (not used for reporting)."""
    pred = binarize(predictions, mode, threshold).astype(bool)
    truths = np.asarray(truths, dtype=bool)
    tp = (pred & truths).sum(axis=0)
    pp, ap = pred.sum(axis=0), truths.sum(axis=0)
    precision = np.divide(tp, pp, out=np.zeros(tp.shape), where=pp > 0)
    recall = np.divide(tp, ap, out=np.zeros(tp.shape), where=ap > 0)
    return {"cp": float(precision.mean()), "cr": float(recall.mean())}
