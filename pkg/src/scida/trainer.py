"""Two-stage training loop, evaluation runs and the delta sweep.

Per epoch: every paired batch runs the source, max-discrepancy and
min-discrepancy steps; then (``scida`` mode) pseudo labels are extracted, the
adjacency is rebuilt from them and one self-correction pass covers the target
set.  The epoch closes by re-extracting pseudo labels; training stops once the
fraction of images whose pseudo set changed stays below ``eps_conv`` for
``patience`` consecutive epochs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .datasets import (
    EVAL_ANNOTATIONS_FILE,
    ImageDataset,
    SynthConfig,
    class_frequencies,
    generate_synthetic_pair,
    load_mai,
    SOURCE,
    TARGET,
)
from .dwc import (
    PseudoLabelSet,
    epoch_order,
    extract_pseudo_labels,
    iterate_domain_batches,
    predict_dwc,
    step_max_discrepancy,
    step_min_discrepancy,
    step_source_supervised,
)
from .errors import ConfigError
from .lwc import CorrelationMatrix, build_correlation_matrix, predict_lwc, step_self_correction
from .metrics import MODES, MetricsReport, evaluate
from .models import to_nchw
from .state import TrainingState, build_state, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.scida"
Observer = Callable[[str, TrainingState], None]


@dataclass
class RunData:
    source: ImageDataset
    target: ImageDataset  # unlabeled view, the only target the steps see
    target_eval: ImageDataset | None


@lru_cache(maxsize=8)
def _synthetic_cached(cfg_json: str, seed: int) -> tuple[ImageDataset, ImageDataset]:
    return generate_synthetic_pair(SynthConfig.from_dict(json.loads(cfg_json)), seed)


def load_run_data(config: RunConfig) -> RunData:
    if config.synthetic is not None:
        cfg_json = json.dumps(config.synthetic.to_dict(), sort_keys=True)
        source, target = _synthetic_cached(cfg_json, config.seed)
        return RunData(source, target.unlabeled(), target)
    source = load_mai(config.mai_source, "train", config.image_side, domain=SOURCE)
    target = load_mai(config.mai_target, "train", config.image_side, domain=TARGET).unlabeled()
    target_eval = None
    if (Path(config.mai_target) / EVAL_ANNOTATIONS_FILE).exists():
        target_eval = load_mai(config.mai_target, "eval", config.image_side, domain=TARGET)
    if source.categories != target.categories:
        raise ConfigError("source and target category lists differ")
    return RunData(source, target, target_eval)


# --------------------------------------------------------------------------
# log


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    categories: list[str] = field(default_factory=list)
    correlation_counts: list[list[int]] | None = None
    stop_reason: str = ""

    def append(self, record: dict) -> None:
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        if not 0.0 <= record["churn"] <= 1.0:
            raise ValueError(f"churn {record['churn']} outside [0, 1]")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> dict:
        return self.records[-1]

    def final_metrics(self, mode: str = "all") -> MetricsReport | None:
        m = self.final.get("metrics")
        return MetricsReport.from_json(m[mode]) if m else None

    def to_json(self) -> dict:
        return {
            "records": self.records,
            "config": self.config,
            "categories": self.categories,
            "correlation_counts": self.correlation_counts,
            "stop_reason": self.stop_reason,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainLog":
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "TrainLog":
        return cls.from_json(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        blob = json.dumps(self.records, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def churn_rate(previous: np.ndarray, current: np.ndarray) -> float:
    """Fraction of images whose pseudo-label set changed."""
    return float((previous != current).any(axis=1).mean())


# --------------------------------------------------------------------------
# evaluation


def predict(state: TrainingState, images: np.ndarray, head: str | None = None) -> np.ndarray:
    """Per-class scores from the configured head (the DWC ``c2`` head unless the
    run trained the label-wise branch and asked for ``lwc`` or ``mean``)."""
    head = head or state.config.eval_head
    if state.config.mode != "scida":
        head = "c2"
    if head == "c2":
        return predict_dwc(state, images, "c2")
    if head == "lwc":
        return predict_lwc(state, images)
    return 0.5 * (predict_dwc(state, images, "c2") + predict_lwc(state, images))


def evaluate_run(
    state: TrainingState, dataset: ImageDataset, modes: Sequence[str] = MODES, head: str | None = None
) -> list[MetricsReport]:
    if dataset.labels is None:
        raise ValueError("evaluate_run needs a dataset with evaluation labels")
    scores = predict(state, dataset.images, head)
    return [evaluate(scores, dataset.labels, mode, state.config.threshold) for mode in modes]


# --------------------------------------------------------------------------
# training


def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


def _self_correction_pass(state: TrainingState, target: ImageDataset, pseudo: PseudoLabelSet, epoch: int) -> list[float]:
    cfg = state.config
    order = epoch_order(len(target), cfg.seed, epoch, 2)
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        idx = np.sort(order[start : start + cfg.batch_size])
        ids = [target.ids[i] for i in idx]
        losses.append(step_self_correction(state, to_nchw(target.images[idx]), ids, pseudo))
    return losses


def train(
    config: RunConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    data: RunData | None = None,
    observer: Observer | None = None,
) -> tuple[TrainingState, TrainLog]:
    """Run training; ``stop_after`` ends early after that many epochs (as an
    interruption would), leaving a resumable checkpoint in ``out_dir``."""
    config.validate()
    data = data or load_run_data(config)
    if config.num_classes not in (None, data.source.num_classes):
        raise ConfigError(f"num_classes={config.num_classes} but data has {data.source.num_classes}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
    notify = observer or (lambda phase, state: None)

    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.hash() != config.hash():
            raise ConfigError("checkpoint was written by a different configuration")
        state.config = config
        extra = state.extra
        train_log = TrainLog.from_json(extra["log"])
        previous = np.asarray(extra["previous_pseudo"], dtype=np.uint8)
        streak = extra["streak"]
    else:
        weights = class_frequencies(data.source)
        state = build_state(config, weights, data.source.categories)
        train_log = TrainLog(config=config.to_dict(), categories=list(data.source.categories))
        previous = extract_pseudo_labels(state, data.target, config.delta).labels
        streak = 0

    model = state.model
    # a finished run resumes to nothing but still rewrites its outputs
    first = config.max_epochs if train_log.stop_reason else state.epoch
    for epoch in range(first, config.max_epochs):
        state.set_epoch_lr(epoch)
        model.train()
        notify("epoch_start", state)
        wfl, dis = [], []
        for batch in iterate_domain_batches(data.source, data.target, config.batch_size, config.seed, epoch):
            wfl.append(step_source_supervised(state, batch))
            if config.mode != "source_only":
                step_max_discrepancy(state, batch)
                dis.append(step_min_discrepancy(state, batch))
        notify("dwc_done", state)

        selfcorr: list[float] = []
        if config.mode == "scida":
            pseudo_dwc = extract_pseudo_labels(state, data.target, config.delta)
            state.adjacency = build_correlation_matrix(pseudo_dwc).to_tensor()
            selfcorr = _self_correction_pass(state, data.target, pseudo_dwc, epoch)
        notify("selfcorr_done", state)

        pseudo = extract_pseudo_labels(state, data.target, config.delta)
        corr = build_correlation_matrix(pseudo)
        churn = churn_rate(previous, pseudo.labels)
        previous = pseudo.labels
        streak = streak + 1 if churn < config.eps_conv else 0

        record = {
            "epoch": epoch + 1,
            "wfl": _mean(wfl),
            "dis": _mean(dis),
            "selfcorr": _mean(selfcorr),
            "churn": churn,
            "adjacency_hash": corr.digest(),
            "metrics": None,
        }
        if data.target_eval is not None:
            reports = evaluate_run(state, data.target_eval)
            record["metrics"] = {r.mode: r.to_json() for r in reports}
        notify("eval_done", state)
        train_log.append(record)
        train_log.correlation_counts = corr.counts.tolist()
        state.epoch = epoch + 1
        log.info(
            "epoch %d wfl=%.4f dis=%s selfcorr=%s churn=%.3f",
            epoch + 1, record["wfl"], record["dis"], record["selfcorr"], churn,
        )

        if streak >= config.patience:
            train_log.stop_reason = f"converged: churn < {config.eps_conv} for {streak} epochs"
        elif state.epoch >= config.max_epochs:
            train_log.stop_reason = "max_epochs"
        state.extra = {
            "log": train_log.to_json(),
            "previous_pseudo": previous.tolist(),
            "streak": streak,
        }
        if out is not None and (state.epoch % config.checkpoint_every == 0 or train_log.stop_reason):
            save_checkpoint(state, out / CHECKPOINT_NAME)
        if train_log.stop_reason:
            break
        if stop_after is not None and state.epoch >= stop_after:
            break

    if out is not None:
        train_log.save(out / "trainlog.json")
        pseudo_final = extract_pseudo_labels(state, data.target, config.delta)
        pseudo_final.save(out / "pseudo_labels.json")
    return state, train_log


def final_pseudo_labels(state: TrainingState, target: ImageDataset) -> PseudoLabelSet:
    return extract_pseudo_labels(state, target, state.config.delta)


# --------------------------------------------------------------------------
# delta sweep


def ablate_delta(
    config: RunConfig, deltas: Sequence[float], out_dir: str | Path | None = None, data: RunData | None = None
) -> list[dict]:
    """One training run per delta (same seed); failed cells record their error."""
    data = data or load_run_data(config)
    rows = []
    for delta in deltas:
        row: dict = {"delta": float(delta)}
        try:
            cfg = config.with_(delta=float(delta))
            cell_dir = Path(out_dir) / f"delta_{delta:.2f}" if out_dir is not None else None
            _, run_log = train(cfg, out_dir=cell_dir, data=data)
            row["epochs"] = len(run_log)
            row["log_hash"] = run_log.hash()
            row["curve"] = [
                {"epoch": r["epoch"], **({m: r["metrics"][m] for m in MODES} if r["metrics"] else {})}
                for r in run_log.records
            ]
            final = run_log.final["metrics"]
            if final:
                row.update({mode: final[mode] for mode in MODES})
        except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the sweep
            log.warning("delta=%s failed: %s", delta, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    if out_dir is not None:
        from .report import write_ablation

        write_ablation(rows, out_dir)
    return rows


def table_digest(rows: Sequence[dict]) -> str:
    return hashlib.sha256(json.dumps(list(rows), sort_keys=True).encode()).hexdigest()


def checkpoint_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / CHECKPOINT_NAME

