"""Evaluation metrics, length alignment, label-space mappings, and filtered
scope aggregation.

All metric functions require pre-aligned inputs; use :func:`align_length` to
resample a prediction onto the ground-truth grid first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ContractError

THREE_WAY_LABELS = ("down", "neutral", "up")


def _as_pair(pred: Sequence[float], truth: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.ndim != 1 or t.ndim != 1:
        raise ContractError("metric inputs must be 1-d sequences")
    if len(p) != len(t):
        raise ContractError(f"length mismatch: pred={len(p)} truth={len(t)}; align first")
    if len(p) == 0:
        raise ContractError("metric inputs must be non-empty")
    return p, t


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _as_pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mse(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _as_pair(pred, truth)
    return float(np.mean(np.square(p - t)))


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    return float(np.sqrt(mse(pred, truth)))


def mape(pred: Sequence[float], truth: Sequence[float]) -> float | None:
    """Mean absolute percentage error, in percent.

    Undefined (returns None) when any ground-truth value is exactly zero.
    """
    p, t = _as_pair(pred, truth)
    if np.any(t == 0.0):
        return None
    return float(np.mean(np.abs((p - t) / t)) * 100.0)


def align_length(pred: Sequence[float], target_len: int) -> list[float]:
    """Resample ``pred`` to ``target_len`` points by linear interpolation on
    the normalized [0, 1] index grid.

    Identity when the lengths already match; endpoints are always preserved.
    """
    if len(pred) == 0:
        raise ContractError("cannot align an empty prediction")
    if target_len < 1:
        raise ContractError("target length must be >= 1")
    if target_len == len(pred):
        return [float(v) for v in pred]
    if len(pred) == 1:
        return [float(pred[0])] * target_len
    src = np.linspace(0.0, 1.0, len(pred))
    dst = np.linspace(0.0, 1.0, target_len)
    return [float(v) for v in np.interp(dst, src, np.asarray(pred, dtype=float))]


def map_5way_to_3way(label: str, label_space: Sequence[str]) -> str:
    """Collapse an ordered 5-way label space symmetrically onto down/neutral/up."""
    if len(label_space) != 5:
        raise ContractError(f"expected a 5-way label space, got {len(label_space)} labels")
    try:
        idx = list(label_space).index(label)
    except ValueError:
        raise ContractError(f"label {label!r} not in the 5-way space") from None
    return ("down", "down", "neutral", "up", "up")[idx]


def supervision_metric(task_type: str, scope: str) -> str:
    """Name of the metric used as the supervision loss for a scope.

    Forecasting defaults to MAE; weather forecasting and MACD-style indicator
    trajectories use MSE, as do named-scalar indicator tasks. Label tasks use
    0/1 accuracy.
    """
    if task_type in ("trend", "trend_past", "correlation", "mcqa"):
        return "accuracy"
    if task_type == "indicator":
        return "mse"
    scope_l = scope.lower()
    if "macd" in scope_l or scope_l.startswith("weather"):
        return "mse"
    return "mae"


@dataclass(frozen=True)
class MetricReport:
    """Per-sample metric values. Numeric tasks fill the error fields, label
    tasks fill ``correct``; ``mape`` is None when undefined."""

    n_points: int
    mae: float | None = None
    mape: float | None = None
    rmse: float | None = None
    mse: float | None = None
    correct: bool | None = None

    @property
    def is_label(self) -> bool:
        return self.correct is not None

    def value(self, metric: str) -> float | None:
        if metric == "accuracy":
            return None if self.correct is None else (1.0 if self.correct else 0.0)
        return getattr(self, metric)

    def to_dict(self) -> dict[str, Any]:
        if self.is_label:
            return {"correct": bool(self.correct), "n_points": self.n_points}
        return {
            "mae": self.mae,
            "mape": self.mape,
            "rmse": self.rmse,
            "mse": self.mse,
            "n_points": self.n_points,
        }


def numeric_report(pred: Sequence[float], truth: Sequence[float]) -> MetricReport:
    """Full numeric report over pre-aligned vectors."""
    return MetricReport(
        n_points=len(truth),
        mae=mae(pred, truth),
        mape=mape(pred, truth),
        rmse=rmse(pred, truth),
        mse=mse(pred, truth),
    )


def label_report(pred: str, truth: str) -> MetricReport:
    return MetricReport(n_points=1, correct=(pred == truth))


def task_loss(answer: Any, truth: Any, task_type: str, scope: str) -> float:
    """Supervision loss for one answer. Numeric answers are aligned to the
    ground-truth length before scoring; label answers score 0/1."""
    metric = supervision_metric(task_type, scope)
    if metric == "accuracy":
        return 0.0 if answer == truth else 1.0
    if task_type == "indicator":
        order = sorted(truth.keys())
        p = [float(answer[k]) for k in order]
        t = [float(truth[k]) for k in order]
        return mse(p, t)
    aligned = align_length([float(v) for v in answer], len(truth))
    t = [float(v) for v in truth]
    return mae(aligned, t) if metric == "mae" else mse(aligned, t)


@dataclass(frozen=True)
class Unscorable:
    """Marker for a row that cannot contribute to any aggregate."""

    reason: str = "unscorable"


@dataclass(frozen=True)
class SummaryPolicy:
    """Aggregation policy for one scope.

    ``threshold`` applies to the scope's supervision metric only; rows above
    it stay in the raw log but are excluded from the means.
    """

    supervision_metric: str = "mae"
    threshold: float | None = None
    unscorable_handling: str = "exclude"

    def __post_init__(self) -> None:
        if self.threshold is not None and self.threshold <= 0:
            raise ContractError("threshold must be positive")
        if self.unscorable_handling != "exclude":
            raise ContractError("only 'exclude' unscorable handling is supported")


@dataclass
class SummaryResult:
    scope: str
    metrics: dict[str, float]
    effective_n: int
    raw_n: int
    excluded: list[dict[str, Any]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.effective_n == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "scope": self.scope,
            "metrics": dict(self.metrics),
            "effective_n": self.effective_n,
            "raw_n": self.raw_n,
            "excluded": list(self.excluded),
        }


def summarize(
    rows: Iterable[MetricReport | Unscorable | None],
    policy: SummaryPolicy,
    scope: str = "",
) -> SummaryResult:
    """Aggregate one scope's rows under the official-style filtering policy.

    Unscorable rows are excluded; numeric rows whose supervision-metric value
    exceeds the threshold are excluded from the means but retained in raw_n.
    """
    rows = list(rows)
    raw_n = len(rows)
    excluded: list[dict[str, Any]] = []
    included: list[MetricReport] = []
    for i, row in enumerate(rows):
        if row is None or isinstance(row, Unscorable):
            reason = row.reason if isinstance(row, Unscorable) else "unscorable"
            excluded.append({"index": i, "reason": reason})
            continue
        if policy.threshold is not None:
            v = row.value(policy.supervision_metric)
            if v is not None and v > policy.threshold:
                excluded.append({"index": i, "reason": "over_threshold"})
                continue
        included.append(row)

    if not included:
        return SummaryResult(scope=scope, metrics={}, effective_n=0, raw_n=raw_n, excluded=excluded)

    metrics: dict[str, float] = {}
    if all(r.is_label for r in included):
        metrics["accuracy"] = float(np.mean([1.0 if r.correct else 0.0 for r in included]))
    else:
        numeric = [r for r in included if not r.is_label]
        for name in ("mae", "mse", "rmse"):
            vals = [getattr(r, name) for r in numeric if getattr(r, name) is not None]
            if vals:
                metrics[name] = float(np.mean(vals))
        mapes = [r.mape for r in numeric if r.mape is not None]
        if mapes:
            metrics["mape"] = float(np.mean(mapes))
    return SummaryResult(
        scope=scope,
        metrics=metrics,
        effective_n=len(included),
        raw_n=raw_n,
        excluded=excluded,
    )
