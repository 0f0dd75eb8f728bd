"""Prompt assembly in the fixed frame order (Objective -> Observation ->
Decision -> Available Tools), sample fingerprints, and applicability
matching for memory rules.

Prompt construction is pure: it profiles the series with the shared numeric
helpers directly and never touches ground truth (which is sealed anyway).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from . import seriesops
from .core import TaskInstance, TaskType
from .errors import ContractError

LEARNING_SUMMARY_TYPE = "learning_summary"

LENGTH_BANDS = ((100, "short"), (500, "medium"))


@dataclass(frozen=True)
class SampleFingerprint:
    """Compact numeric fingerprint of one instance, used for applicability
    matching and for the Observation section of every prompt."""

    length: int
    first: float
    last: float
    vmin: float
    vmax: float
    mean: float
    std: float
    dominant_period: Optional[int]
    period_significant: bool
    trend_class: str
    boundary_event: bool
    task_subtype: str

    @property
    def seasonal(self) -> bool:
        return self.period_significant

    @property
    def length_band(self) -> str:
        for cutoff, band in LENGTH_BANDS:
            if self.length < cutoff:
                return band
        return "long"

    def fields(self) -> dict[str, Any]:
        """The predicate vocabulary applicability conditions may reference."""
        return {
            "task_subtype": self.task_subtype,
            "seasonal": self.seasonal,
            "trend_class": self.trend_class,
            "boundary_event": self.boundary_event,
            "length_band": self.length_band,
        }


def _boundary_event(instance: TaskInstance) -> bool:
    if instance.timestamps is None or not instance.text_context:
        return False
    t0, t1 = instance.timestamps[0], instance.timestamps[-1]
    n = len(instance.timestamps)
    for block in instance.text_context:
        if block.date is None or not (t0 <= block.date <= t1):
            continue
        pos = sum(1 for ts in instance.timestamps if ts <= block.date)
        if pos / n >= 0.9:
            return True
    return False


def fingerprint(instance: TaskInstance) -> SampleFingerprint:
    values = list(instance.series)
    period, significant = seriesops.dominant_period(values)
    label, _slope, _norm = seriesops.trend_label(values)
    return SampleFingerprint(
        length=len(values),
        first=float(values[0]),
        last=float(values[-1]),
        vmin=float(np.min(values)),
        vmax=float(np.max(values)),
        mean=float(np.mean(values)),
        std=seriesops.population_std(values),
        dominant_period=period,
        period_significant=significant,
        trend_class=label,
        boundary_event=_boundary_event(instance),
        task_subtype=instance.task_type.value,
    )


def match(applicability: Mapping[str, Any], fp: SampleFingerprint) -> bool:
    """Conjunction of field predicates; absent fields are wildcards, unknown
    predicate keys never match (conservative)."""
    fields = fp.fields()
    for key, expected in applicability.items():
        if key not in fields:
            return False
        if fields[key] != expected:
            return False
    return True


@dataclass
class PromptBundle:
    system_text: str
    user_text: str
    declared_tools: list[dict[str, Any]]

    def declared_tool_names(self) -> list[str]:
        return sorted(t["name"] for t in self.declared_tools)


@dataclass(frozen=True)
class PromptLimits:
    max_layer_chars: int = 4000


def _cap(text: str, limits: PromptLimits) -> str:
    if len(text) <= limits.max_layer_chars:
        return text
    return text[: limits.max_layer_chars] + "\n...[truncated]"


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def task_prompt(instance: TaskInstance) -> str:
    t = instance.task_type
    h = instance.horizon
    if t == TaskType.FORECAST:
        return f"Predict the next {h} values of the series."
    if t == TaskType.INDICATOR:
        return f"Predict the max, min, and diff summary values of the next {h} steps."
    if t == TaskType.TREND:
        return f"Predict the trend label of the next {h} steps."
    if t == TaskType.TREND_PAST:
        return "Classify the trend already present in the observed series."
    if t == TaskType.CORRELATION:
        return "Judge how the text context relates to the future movement of the series."
    return "Answer the multiple-choice question using the series and text context."


def _series_preview(instance: TaskInstance, k: int = 5) -> str:
    vals = [float(v) for v in instance.series]
    if len(vals) <= 2 * k:
        body = ", ".join(_fmt(v) for v in vals)
    else:
        head = ", ".join(_fmt(v) for v in vals[:k])
        tail = ", ".join(_fmt(v) for v in vals[-k:])
        body = f"{head}, ..., {tail}"
    return f"[{body}]"


def _objective_section(
    instance: TaskInstance,
    required_final_type: str,
    execution_context: str,
    control_lines: Sequence[str],
) -> str:
    lines = [
        "## Objective",
        "### Task Prompt",
        task_prompt(instance),
        "### Task Boundary",
        f"- scope = {instance.scope}",
        f"- horizon = {instance.horizon}",
        f"- series_length = {len(instance.series)}",
        f"- series_preview = {_series_preview(instance)}",
        "### Execution Context",
        execution_context,
        "### Control Context",
        "- state = need_evidence",
        f"- required_final_type = {required_final_type}",
    ]
    lines.extend(control_lines)
    lines.append("### Output Contract")
    t = instance.task_type
    if t == TaskType.FORECAST:
        lines.append(f"- answer: JSON array of {instance.horizon} numbers")
    elif t == TaskType.INDICATOR:
        lines.append("- answer: JSON object with numeric fields max, min, diff")
    else:
        lines.append("- answer: exactly one label from the label space")
        lines.append(f"- label_space = {json.dumps(list(instance.label_space or ()))}")
    lines.append('- finish with JSON: {"answer_type": ..., "answer": ..., "reasoning": ...}')
    return "\n".join(lines)


def _fingerprint_lines(fp: SampleFingerprint) -> list[str]:
    period = (
        f"{fp.dominant_period} ({'significant' if fp.period_significant else 'weak'})"
        if fp.dominant_period is not None
        else "none"
    )
    return [
        f"- length = {fp.length}",
        f"- first = {_fmt(fp.first)}",
        f"- last = {_fmt(fp.last)}",
        f"- min = {_fmt(fp.vmin)}",
        f"- max = {_fmt(fp.vmax)}",
        f"- mean = {_fmt(fp.mean)}",
        f"- std = {_fmt(fp.std)}",
        f"- dominant_period = {period}",
        f"- trend_class = {fp.trend_class}",
        f"- boundary_event = {_fmt(fp.boundary_event)}",
        f"- task_subtype = {fp.task_subtype}",
        f"- length_band = {fp.length_band}",
    ]


def _profiling_lines(instance: TaskInstance, fp: SampleFingerprint) -> list[str]:
    values = list(instance.series)
    stationarity = seriesops.split_half_stationarity(values)
    _label, slope, norm = seriesops.trend_label(values)
    n_anomalies = sum(1 for z in seriesops.zscores(values) if abs(z) > 3.0)
    if fp.dominant_period is not None:
        r, _ = seriesops.lagged_correlation(values, fp.dominant_period)
        autocorr = f"best_lag = {fp.dominant_period}, r = {_fmt(r)}"
    else:
        autocorr = "undefined"
    return [
        f"- basic_stats: mean = {_fmt(fp.mean)}, std = {_fmt(fp.std)}, min = {_fmt(fp.vmin)}, max = {_fmt(fp.vmax)}",
        f"- autocorrelation: {autocorr}",
        (
            f"- stationarity_check: stationary = {_fmt(stationarity['stationary'])}, "
            f"mean_shift = {_fmt(stationarity['mean_shift'])}"
        ),
        f"- detect_trend: label = {fp.trend_class}, slope = {_fmt(slope)}, normalized = {_fmt(norm)}",
        f"- detect_anomaly: n_flagged = {n_anomalies}",
    ]


def render_memory_rules(rules: Sequence[Any], limits: PromptLimits) -> str:
    if not rules:
        return "(no injectable memory)"
    lines = []
    for r in rules:
        prefer = ", ".join(sorted(r.preferred_tools)) or "-"
        avoid = ", ".join(sorted(r.avoided_tools)) or "-"
        chi = json.dumps(r.applicability, sort_keys=True)
        lines.append(
            f"- [{r.rule_id}|{r.kind}|c={r.confidence:.2f}] prefer: {prefer}; avoid: {avoid}; when: {chi}"
        )
        lines.append(f"  {r.summary}")
    return _cap("\n".join(lines), limits)


def _support_lines(selection: Any, limits: PromptLimits) -> list[str]:
    """Skills, decision skills, and focused tool notes (user-prompt layers)."""
    lines: list[str] = []
    skills = getattr(selection, "skills_text", "") if selection is not None else ""
    decisions = getattr(selection, "skills_decision_text", "") if selection is not None else ""
    tool_notes = getattr(selection, "tool_notes", {}) if selection is not None else {}
    lines.append("#### Skills")
    lines.append(_cap(skills, limits) if skills else "(none)")
    lines.append("#### Decision Skills")
    lines.append(_cap(decisions, limits) if decisions else "(none)")
    lines.append("#### Focused Tool Notes")
    if tool_notes:
        for tool_id in sorted(tool_notes):
            lines.append(f"- {tool_id}:")
            for note_line in _cap(tool_notes[tool_id], limits).splitlines():
                lines.append(f"  {note_line}")
    else:
        lines.append("(none)")
    return lines


def _tools_section(declared: Sequence[Mapping[str, Any]]) -> str:
    lines = ["### Available Tools"]
    for schema in sorted(declared, key=lambda s: s["name"]):
        lines.append(f"- {schema['name']}: {schema.get('description', '')}")
    return "\n".join(lines)


def _system_text(soul: str, rules: Sequence[Any], limits: PromptLimits) -> str:
    return f"{soul.strip()}\n\n## Memory\n{render_memory_rules(rules, limits)}\n"


def _frame(objective: str, observation: str, decision: str, tools: str) -> str:
    return f"{objective}\n\n{observation}\n\n{decision}\n\n{tools}\n"


def _observation_section(
    instance: TaskInstance, fp: SampleFingerprint, selection: Any, limits: PromptLimits
) -> str:
    lines = ["## Observation", "### Sample Fingerprint"]
    lines.extend(_fingerprint_lines(fp))
    lines.append("### Profiling")
    lines.extend(_profiling_lines(instance, fp))
    lines.append("### Support")
    lines.extend(_support_lines(selection, limits))
    return "\n".join(lines)


def build_exploration_prompt(
    instance: TaskInstance,
    selection: Any,
    slots: Sequence[Any],
    declared_tools: Sequence[Mapping[str, Any]],
    soul: str = "",
    limits: PromptLimits = PromptLimits(),
    require_prior_and_alternative: bool = False,
) -> PromptBundle:
    """Main-agent exploration context: spawn/evaluate guidance, slot hints,
    and a learning_summary completion contract."""
    fp = fingerprint(instance)
    rules = list(getattr(selection, "rules", ())) if selection is not None else []
    objective = _objective_section(
        instance,
        LEARNING_SUMMARY_TYPE,
        "- exploration episode: compare candidate executions before finishing",
        control_lines=[f"- branch_slots = {len(slots)}"],
    )
    observation = _observation_section(instance, fp, selection, limits)

    decision_lines = [
        "## Decision",
        "### Spawn Guidance",
        "- Prefer spawn_subagent to explore multiple candidate branches for comparison.",
        f"- The first spawn round must create at least {max(2, len(slots))} distinct candidate branches.",
        "### Evaluate Guidance",
        "- evaluate_* tools are for post-hoc validation, not for solving the task itself.",
        "- Evaluate at least one task-valid candidate before finishing.",
        "- Compare at least 2 candidate paths before finishing when possible.",
        f'- If you finish the learning run itself, answer_type must be "{LEARNING_SUMMARY_TYPE}".',
    ]
    if require_prior_and_alternative and rules:
        decision_lines.append("### Prior Requirement")
        decision_lines.append(
            "- Include both a prior-guided candidate and an alternative candidate."
        )
    decision_lines.append("### Slot Hints")
    for slot in slots:
        visible = ", ".join(sorted(slot.visible_tools))
        role = "prior-guided" if slot.prior_guided else ("alternative" if slot.alternative else "open")
        decision_lines.append(
            f"- slot {slot.slot} ({role}): goal = {slot.goal}; hint = {slot.hint}; visible = {visible}"
        )
    decision = "\n".join(decision_lines)

    return PromptBundle(
        system_text=_system_text(soul, rules, limits),
        user_text=_frame(objective, observation, decision, _tools_section(declared_tools)),
        declared_tools=list(declared_tools),
    )


def build_branch_prompt(
    instance: TaskInstance,
    slot: Any,
    declared_tools: Sequence[Mapping[str, Any]],
    selection: Any = None,
    soul: str = "",
    limits: PromptLimits = PromptLimits(),
) -> PromptBundle:
    """Sub-agent variant: same frame plus a branch-local goal and slot-local
    tool hint; the branch finishes with an ordinary task answer."""
    fp = fingerprint(instance)
    rules = list(getattr(selection, "rules", ())) if selection is not None else []
    objective = _objective_section(
        instance,
        instance.task_type.value,
        "- exploration branch: produce one candidate execution",
        control_lines=[f"- slot = {slot.slot}"],
    )
    observation = _observation_section(instance, fp, selection, limits)
    decision = "\n".join(
        [
            "## Decision",
            "### Branch Goal",
            f"- slot = {slot.slot}",
            f"- goal = {slot.goal}",
            f"- hint = {slot.hint}",
            "- Use the hinted tool unless its output is unusable; then answer.",
        ]
    )
    return PromptBundle(
        system_text=_system_text(soul, rules, limits),
        user_text=_frame(objective, observation, decision, _tools_section(declared_tools)),
        declared_tools=list(declared_tools),
    )


def build_inference_prompt(
    instance: TaskInstance,
    selection: Any,
    declared_tools: Sequence[Mapping[str, Any]],
    soul: str = "",
    limits: PromptLimits = PromptLimits(),
) -> PromptBundle:
    """Inference context: reinjected experience, task-facing tools only, and
    an ordinary answer contract."""
    rules = list(getattr(selection, "rules", ())) if selection is not None else []
    for r in rules:
        if not r.injectable:
            raise ContractError(f"rule {r.rule_id} is not injectable and cannot be rendered")
    declared_names = {t["name"] for t in declared_tools}
    forbidden = {"spawn_subagent", "evaluate_against_gt", "evaluate_batch_against_gt"}
    if declared_names & forbidden:
        raise ContractError("exploration-only tools cannot be declared at inference")
    fp = fingerprint(instance)
    objective = _objective_section(
        instance,
        instance.task_type.value,
        "- inference: solve the task with previously distilled experience",
        control_lines=[],
    )
    observation = _observation_section(instance, fp, selection, limits)
    decision = "\n".join(
        [
            "## Decision",
            "### Decision Guidance",
            "- Follow remembered preferences when they apply; otherwise use the",
            "  simplest tool that satisfies the output contract.",
            "### Completion",
            f"- ordinary task answer contract (answer_type = {instance.task_type.value})",
            "- no learning_summary",
        ]
    )
    return PromptBundle(
        system_text=_system_text(soul, rules, limits),
        user_text=_frame(objective, observation, decision, _tools_section(declared_tools)),
        declared_tools=list(declared_tools),
    )
