"""Shared domain types: task instances, typed artifacts, candidate
executions, and episode outcomes.

Ground truth is sealed behind a field-level capability gate: only holders of
an :class:`EvaluatorCapability` (exploration-only evaluators and the offline
scorer) may read it. Prompt assembly and inference code paths never hold one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from . import metrics
from .errors import CapabilityError, ContractError, GroundTruthSealedError


class TaskType(str, enum.Enum):
    FORECAST = "forecast"
    INDICATOR = "indicator"
    TREND = "trend"
    TREND_PAST = "trend_past"
    CORRELATION = "correlation"
    MCQA = "mcqa"


CLASSIFICATION_TYPES = frozenset(
    {TaskType.TREND, TaskType.TREND_PAST, TaskType.CORRELATION, TaskType.MCQA}
)
NUMERIC_TYPES = frozenset({TaskType.FORECAST, TaskType.INDICATOR})

# Named scalar fields an indicator answer must provide.
INDICATOR_FIELDS = ("max", "min", "diff")


class EvaluatorCapability:
    """Opaque token authorizing ground-truth access.

    Constructed only by exploration-time evaluation and offline scoring
    entry points; everything else works with sealed instances.
    """

    __slots__ = ()


class SealedAnswer:
    """Holds a ground-truth payload that only capability holders can read."""

    __slots__ = ("_value",)

    def __init__(self, value: Any):
        self._value = value

    def reveal(self, capability: EvaluatorCapability) -> Any:
        if not isinstance(capability, EvaluatorCapability):
            raise GroundTruthSealedError(
                "ground truth is sealed; an EvaluatorCapability is required"
            )
        return self._value

    def __repr__(self) -> str:  # never leak the payload through repr/str
        return "SealedAnswer(<sealed>)"

    __str__ = __repr__

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, SealedAnswer) and self._value == other._value

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class TextBlock:
    body: str
    date: Optional[str] = None  # ISO-8601 anchor, when known


@dataclass(frozen=True)
class TaskInstance:
    """One benchmark sample: series, optional text context, task type, and
    the scope key under which experience is stored."""

    id: str
    series: tuple[float, ...]
    task_type: TaskType
    horizon: int
    scope: str
    timestamps: Optional[tuple[str, ...]] = None
    text_context: Optional[tuple[TextBlock, ...]] = None
    label_space: Optional[tuple[str, ...]] = None
    ground_truth: Optional[SealedAnswer] = None

    def __post_init__(self) -> None:
        if not self.series:
            raise ContractError(f"instance {self.id}: series must be non-empty")
        if any(not math.isfinite(v) for v in self.series):
            raise ContractError(f"instance {self.id}: series values must be finite")
        if self.timestamps is not None:
            if len(self.timestamps) != len(self.series):
                raise ContractError(f"instance {self.id}: timestamps/series length mismatch")
            if any(a >= b for a, b in zip(self.timestamps, self.timestamps[1:])):
                raise ContractError(f"instance {self.id}: timestamps must strictly increase")
        if self.task_type in NUMERIC_TYPES and self.horizon < 1:
            raise ContractError(f"instance {self.id}: horizon must be >= 1 for numeric tasks")
        is_classification = self.task_type in CLASSIFICATION_TYPES
        if is_classification and not self.label_space:
            raise ContractError(f"instance {self.id}: classification tasks need a label space")
        if not is_classification and self.label_space:
            raise ContractError(f"instance {self.id}: label space only applies to classification")

    @property
    def has_ground_truth(self) -> bool:
        return self.ground_truth is not None

    def answer_key(self, capability: EvaluatorCapability) -> Any:
        """Reveal the ground truth to a capability holder."""
        if self.ground_truth is None:
            raise CapabilityError(f"instance {self.id} carries no ground truth")
        return self.ground_truth.reveal(capability)

    def public_dict(self) -> dict[str, Any]:
        """JSON-safe view with the ground truth withheld."""
        out: dict[str, Any] = {
            "id": self.id,
            "series": [float(v) for v in self.series],
            "task_type": self.task_type.value,
            "horizon": self.horizon,
            "scope": self.scope,
        }
        if self.timestamps is not None:
            out["timestamps"] = list(self.timestamps)
        if self.text_context is not None:
            out["text"] = [{"body": b.body, "date": b.date} for b in self.text_context]
        if self.label_space is not None:
            out["label_space"] = list(self.label_space)
        return out


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: Optional[str] = None


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_answer(answer: Any, instance: TaskInstance) -> Verdict:
    """Check an answer against the output contract of the instance's task type.

    Never raises for a malformed answer; returns an invalid verdict with a
    reason code instead. Forecast length mismatches are allowed here because
    alignment repairs them before scoring.
    """
    t = instance.task_type
    if t == TaskType.FORECAST:
        if not isinstance(answer, (list, tuple)):
            return Verdict(False, "not_a_sequence")
        if len(answer) == 0:
            return Verdict(False, "empty_sequence")
        if not all(_is_number(v) for v in answer):
            return Verdict(False, "non_numeric_element")
        return Verdict(True)
    if t == TaskType.INDICATOR:
        if not isinstance(answer, Mapping):
            return Verdict(False, "not_a_mapping")
        for name in INDICATOR_FIELDS:
            if name not in answer:
                return Verdict(False, f"missing_field:{name}")
            if not _is_number(answer[name]):
                return Verdict(False, f"non_numeric_field:{name}")
        return Verdict(True)
    # classification families
    if not isinstance(answer, str):
        return Verdict(False, "not_a_label")
    if answer not in (instance.label_space or ()):
        return Verdict(False, "label_not_in_space")
    return Verdict(True)


class EvidenceClass(str, enum.Enum):
    COMPARATIVE = "comparative"
    SINGLE_EXECUTION = "single_execution"
    FAILURE = "failure"


@dataclass(frozen=True)
class ToolCallRecord:
    tool_id: str
    args: Mapping[str, Any]
    artifact_id: str


@dataclass
class CandidateExecution:
    """One branch trajectory: its tool calls, final answer, and verdict."""

    branch_id: str
    slot: int
    tool_calls: tuple[ToolCallRecord, ...]
    final_answer: Any
    valid: bool
    quality: Optional[float] = None  # set only after ground-truth evaluation
    reasoning_text: str = ""
    substantive_chain: tuple[str, ...] = ()
    prior_guided: bool = False
    alternative: bool = False
    failure_reason: Optional[str] = None


@dataclass(frozen=True)
class LearningSummaryText:
    insight: str
    recommendation: str


@dataclass
class EpisodeOutcome:
    instance_id: str
    candidates: list[CandidateExecution]
    winner: Optional[str]
    evidence_class: EvidenceClass
    learning_summary: LearningSummaryText
    trace_path: Optional[str] = None
    eval_evidence: bool = False
    # recorded evaluation evidence per branch, and the raw strings (ground
    # truth / answer renderings) the cleaner must redact from evidence text
    eval_reports: dict[str, Any] = field(default_factory=dict)
    sensitive: tuple[str, ...] = ()
    tokens_used: int = 0
    gateway_calls: int = 0

    def __post_init__(self) -> None:
        if (self.winner is not None) == (self.evidence_class == EvidenceClass.FAILURE):
            raise ContractError("winner must be present exactly when the episode did not fail")

    def winning_candidate(self) -> Optional[CandidateExecution]:
        for c in self.candidates:
            if c.branch_id == self.winner:
                return c
        return None


def execution_quality(
    candidate: CandidateExecution,
    instance: TaskInstance,
    capability: EvaluatorCapability,
) -> float:
    """Signed quality q = -loss of a valid candidate against ground truth.

    Requires the exploration-evaluator capability; inference code paths can
    never call this.
    """
    if not candidate.valid:
        raise ContractError(f"candidate {candidate.branch_id} is not task-valid")
    truth = instance.answer_key(capability)
    loss = metrics.task_loss(
        candidate.final_answer, truth, instance.task_type.value, instance.scope
    )
    return -loss
