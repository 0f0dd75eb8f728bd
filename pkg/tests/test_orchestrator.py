from __future__ import annotations

import json

import pytest

from timeclaw.core import EvidenceClass, SealedAnswer, TaskInstance, TaskType
from timeclaw.errors import ContractError
from timeclaw.gateway import AssistantReply, PolicyGateway, ToolCallRequest
from timeclaw.orchestrator import (
    EpisodeDeps,
    ExplorationConfig,
    assign_branch_slots,
    enforce_exploration_contract,
    read_trace,
    run_exploration_episode,
    run_inference,
)
from timeclaw.policy import inference_policy, policy_gateway
from timeclaw.registry import ToolRegistry, ToolUsageLedger
from timeclaw.store import ExperienceStore
from timeclaw.toolkit import builtin_toolkit


def _instance(series=None, horizon=3, gt=None, task_type=TaskType.FORECAST, labels=None, iid="e1"):
    series = series or [float(v) for v in range(1, 13)]
    return TaskInstance(
        id=iid,
        series=tuple(series),
        task_type=task_type,
        horizon=horizon,
        scope="synth_forecast_short" if task_type == TaskType.FORECAST else "synth_trend_short",
        label_space=tuple(labels) if labels else None,
        ground_truth=SealedAnswer(gt) if gt is not None else None,
    )


def _deps(tmp_path, gateway, with_store=True):
    toolkit = builtin_toolkit()
    registry = ToolRegistry(toolkit.descriptors(), ledger=ToolUsageLedger(tmp_path / "ledger.json"))
    store = ExperienceStore(tmp_path / "store", auto_snapshot=False) if with_store else None
    return EpisodeDeps(
        registry=registry,
        toolkit=toolkit,
        gateway=gateway,
        store=store,
        trace_dir=tmp_path / "traces",
    )


def _scripted_branch_policy(branch_answers, final_type="learning_summary", evaluate=True):
    """Build a deterministic policy that forces specific branch behavior.

    branch_answers: slot -> (tool or None, final answer payload)
    """

    def fn(exchange):
        first_user = next(m.content for m in exchange.messages if m.role == "user")
        last_user = [m.content for m in exchange.messages if m.role == "user"][-1]
        if "### Branch Goal" in first_user:
            slot = int(first_user.split("- slot = ")[1].split("\n")[0])
            tool, answer = branch_answers[slot]
            last = exchange.messages[-1]
            if tool is not None and last.role != "tool":
                horizon = int(first_user.split("- horizon = ")[1].split("\n")[0])
                return AssistantReply(
                    content="", tool_calls=(ToolCallRequest(tool=tool, args={"horizon": horizon}),)
                )
            return AssistantReply(
                content=json.dumps({"answer_type": "forecast", "answer": answer})
            )
        if "## Comparison Result" in last_user:
            return AssistantReply(
                content=json.dumps(
                    {
                        "answer_type": final_type,
                        "answer": {"insight": "i", "recommendation": "r"},
                    }
                )
            )
        if "## Candidates Ready" in last_user:
            if evaluate:
                return AssistantReply(
                    content="",
                    tool_calls=(ToolCallRequest(tool="evaluate_batch_against_gt", args={}),),
                )
            return AssistantReply(content="skipping evaluation")
        return AssistantReply(
            content="", tool_calls=(ToolCallRequest(tool="spawn_subagent", args={"n_tasks": 2}),)
        )

    return PolicyGateway(fn)


class TestEpisodeOutcomes:
    def test_comparative_outcome_with_hand_checked_quality(self, tmp_path):
        # branch 0 answers MAE 1.0 away, branch 1 MAE 2.0 away
        inst = _instance(gt=[13.0, 13.0, 13.0])
        gw = _scripted_branch_policy({0: (None, [14.0, 14.0, 14.0]), 1: (None, [15.0, 15.0, 15.0])})
        outcome = run_exploration_episode(inst, ExplorationConfig(seed=3), _deps(tmp_path, gw))
        assert outcome.evidence_class == EvidenceClass.COMPARATIVE
        assert outcome.winner == f"{inst.id}#b0"
        q = {c.branch_id: c.quality for c in outcome.candidates}
        assert q[f"{inst.id}#b0"] == pytest.approx(-1.0)
        assert q[f"{inst.id}#b1"] == pytest.approx(-2.0)

    def test_single_valid_candidate_is_single_execution(self, tmp_path):
        inst = _instance(gt=[13.0, 13.0, 13.0])
        gw = _scripted_branch_policy({0: (None, [14.0, 14.0, 14.0]), 1: (None, "garbage")})
        outcome = run_exploration_episode(inst, ExplorationConfig(seed=3), _deps(tmp_path, gw))
        assert outcome.evidence_class == EvidenceClass.SINGLE_EXECUTION
        assert outcome.winner == f"{inst.id}#b0"

    def test_two_malformed_answers_is_failure_with_no_winner(self, tmp_path):
        inst = _instance(gt=[13.0, 13.0, 13.0])
        gw = _scripted_branch_policy({0: (None, "bad"), 1: (None, "also bad")})
        outcome = run_exploration_episode(inst, ExplorationConfig(seed=3), _deps(tmp_path, gw))
        assert outcome.evidence_class == EvidenceClass.FAILURE
        assert outcome.winner is None
        assert not outcome.eval_evidence

    def test_failure_episode_commits_no_note(self, tmp_path):
        inst = _instance(gt=[13.0, 13.0, 13.0])
        gw = _scripted_branch_policy({0: (None, "bad"), 1: (None, "also bad")})
        deps = _deps(tmp_path, gw)
        run_exploration_episode(inst, ExplorationConfig(seed=3), deps)
        assert deps.store.notes(inst.scope) == []

    def test_winner_quality_is_exact_argmax(self, tmp_path):
        inst = _instance(gt=[13.0, 13.0, 13.0])
        gw = _scripted_branch_policy({0: (None, [10.0, 10.0, 10.0]), 1: (None, [12.5, 12.5, 12.5])})
        outcome = run_exploration_episode(inst, ExplorationConfig(seed=3), _deps(tmp_path, gw))
        winner_q = outcome.winning_candidate().quality
        assert all(winner_q >= c.quality for c in outcome.candidates if c.quality is not None)
        assert outcome.winner == f"{inst.id}#b1"

    def test_winner_tie_broken_by_shorter_chain_then_slot(self, tmp_path):
        inst = _instance(gt=[13.0, 13.0, 13.0])
        # identical answers but slot 1 uses a tool (longer substantive chain)
        gw = _scripted_branch_policy(
            {0: (None, [13.0, 13.0, 13.0]), 1: ("naive", [13.0, 13.0, 13.0])}
        )
        outcome = run_exploration_episode(inst, ExplorationConfig(seed=3), _deps(tmp_path, gw))
        assert outcome.winner == f"{inst.id}#b0"

    def test_token_budget_exhaustion_degrades_to_failure(self, tmp_path):
        inst = _instance(gt=[13.0, 13.0, 13.0])
        deps = _deps(tmp_path, policy_gateway("exploration"))
        config = ExplorationConfig(seed=3, token_budget=1)
        outcome = run_exploration_episode(inst, config, deps)  # must not raise
        assert outcome.evidence_class == EvidenceClass.FAILURE
        assert outcome.winner is None

    def test_ground_truth_required(self, tmp_path):
        inst = _instance(gt=None)
        with pytest.raises(ContractError):
            run_exploration_episode(
                inst, ExplorationConfig(), _deps(tmp_path, policy_gateway("exploration"))
            )

    def test_indicator_episode_scores_mse_over_fields(self, tmp_path):
        inst = TaskInstance(
            id="ind_ep",
            series=tuple(10.0 + (i % 4) for i in range(24)),
            task_type=TaskType.INDICATOR,
            horizon=8,
            scope="synth_indicator_short",
            ground_truth=SealedAnswer({"max": 13.0, "min": 10.0, "diff": 3.0}),
        )
        outcome = run_exploration_episode(
            inst, ExplorationConfig(seed=2), _deps(tmp_path, policy_gateway("exploration"))
        )
        assert outcome.winner is not None
        winner = outcome.winning_candidate()
        assert set(winner.final_answer) == {"max", "min", "diff"}
        assert winner.quality is not None and winner.quality <= 0.0

    def test_usage_recorded_for_substantive_tools_only(self, tmp_path):
        inst = _instance(gt=[13.0, 13.0, 13.0])
        gw = _scripted_branch_policy({0: ("naive", [13.0] * 3), 1: ("drift", [14.0] * 3)})
        deps = _deps(tmp_path, gw)
        run_exploration_episode(inst, ExplorationConfig(seed=3), deps)
        counts = deps.registry.ledger.counts(inst.scope)
        assert counts == {"naive": 1, "drift": 1}


class TestContractVerdicts:
    def _run_and_lint(self, tmp_path, gw, inst=None):
        inst = inst or _instance(gt=[13.0, 13.0, 13.0])
        deps = _deps(tmp_path, gw)
        outcome = run_exploration_episode(inst, ExplorationConfig(seed=3), deps)
        header, events = read_trace(outcome.trace_path)
        return enforce_exploration_contract(header, events)

    def test_compliant_trace_passes(self, tmp_path):
        gw = _scripted_branch_policy({0: (None, [14.0] * 3), 1: ("naive", [15.0] * 3)})
        verdict = self._run_and_lint(tmp_path, gw)
        assert verdict.satisfied
        assert verdict.violations == ()

    def test_identical_branches_flag_no_distinct_pair(self, tmp_path):
        gw = _scripted_branch_policy({0: (None, [14.0] * 3), 1: (None, [14.0] * 3)})
        verdict = self._run_and_lint(tmp_path, gw)
        assert verdict.violations == ("no_distinct_pair",)

    def test_wrong_final_type_detected(self, tmp_path):
        gw = _scripted_branch_policy(
            {0: (None, [14.0] * 3), 1: ("naive", [15.0] * 3)}, final_type="forecast"
        )
        verdict = self._run_and_lint(tmp_path, gw)
        assert verdict.violations == ("wrong_final_type",)

    def test_skipped_evaluation_flags_no_comparison(self, tmp_path):
        gw = _scripted_branch_policy(
            {0: (None, [14.0] * 3), 1: ("naive", [15.0] * 3)}, evaluate=False
        )
        verdict = self._run_and_lint(tmp_path, gw)
        assert "no_comparison" in verdict.violations

    def test_answers_differing_within_tolerance_are_not_distinct(self, tmp_path):
        gw = _scripted_branch_policy(
            {0: (None, [14.0, 14.0, 14.0]), 1: (None, [14.0, 14.0, 14.0 + 1e-12])}
        )
        verdict = self._run_and_lint(tmp_path, gw)
        assert "no_distinct_pair" in verdict.violations


class TestBranchSlots:
    def _registry(self, tmp_path):
        toolkit = builtin_toolkit()
        return ToolRegistry(toolkit.descriptors(), ledger=ToolUsageLedger())

    def test_fresh_scope_distinct_hints(self, tmp_path):
        inst = _instance(gt=[13.0] * 3)
        slots = assign_branch_slots(
            inst, ExplorationConfig(seed=1), False, self._registry(tmp_path), None, episode_seed=5
        )
        assert len(slots) == 2
        assert slots[0].hint != slots[1].hint

    def test_prior_guides_slot_zero_and_alternative_differs(self, tmp_path):
        from timeclaw.store import MemoryRule, Selection

        rule = MemoryRule(
            rule_id="r0001",
            kind="tool_preference",
            summary="s",
            applicability={},
            preferred_tools=("ses",),
            avoided_tools=(),
            rationale="",
            evidence=("n",),
            confidence=0.8,
            injectable=True,
            seq=1,
        )
        inst = _instance(gt=[13.0] * 3)
        slots = assign_branch_slots(
            inst,
            ExplorationConfig(seed=1),
            True,
            self._registry(tmp_path),
            Selection(rules=[rule]),
            episode_seed=5,
        )
        assert slots[0].prior_guided and slots[0].hint == "ses"
        assert slots[1].alternative and slots[1].hint != "ses"

    def test_hints_drawn_from_visible_subset(self, tmp_path):
        inst = _instance(gt=[13.0] * 3)
        registry = self._registry(tmp_path)
        for seed in range(10):
            for slot in assign_branch_slots(
                inst, ExplorationConfig(seed=seed), False, registry, None, episode_seed=seed
            ):
                assert slot.hint in slot.visible_tools

    def test_exactly_two_competitors_pigeonhole(self):
        from timeclaw.registry import ToolCategory, ToolDescriptor

        registry = ToolRegistry(
            [
                ToolDescriptor(tool_id="naive", category=ToolCategory.FORECASTING),
                ToolDescriptor(tool_id="drift", category=ToolCategory.FORECASTING),
            ],
            ledger=ToolUsageLedger(),
        )
        inst = _instance(gt=[13.0] * 3)
        for seed in range(20):
            slots = assign_branch_slots(
                inst, ExplorationConfig(seed=seed), False, registry, None, episode_seed=seed
            )
            assert {slots[0].hint, slots[1].hint} == {"naive", "drift"}


class TestInference:
    def test_empty_store_baseline_forecast(self, tmp_path):
        inst = _instance(gt=[13.0] * 3)
        deps = _deps(tmp_path, PolicyGateway(inference_policy), with_store=False)
        result = run_inference(inst, deps)
        assert not result.degraded
        assert len(result.prediction) == inst.horizon
        assert result.tool_chain == ("naive",)

    def test_trend_answer_always_in_label_space(self, tmp_path):
        inst = _instance(
            series=[5.0, 5.1, 4.9, 5.0, 5.2, 5.0],
            task_type=TaskType.TREND,
            labels=("decreasing", "increasing", "stable"),
            gt="stable",
            horizon=2,
        )
        deps = _deps(tmp_path, PolicyGateway(inference_policy), with_store=False)
        result = run_inference(inst, deps)
        assert result.prediction in inst.label_space

    def test_degraded_fallback_on_unusable_gateway(self, tmp_path):
        gw = PolicyGateway(lambda ex: AssistantReply(content="I refuse to answer properly"))
        inst = _instance(gt=[13.0] * 3)
        result = run_inference(inst, _deps(tmp_path, gw, with_store=False))
        assert result.degraded
        assert result.prediction == [12.0, 12.0, 12.0]  # naive fallback

    def test_degraded_fallback_label_is_first_alphabetical(self, tmp_path):
        gw = PolicyGateway(lambda ex: AssistantReply(content="nope"))
        inst = _instance(
            series=[1.0, 2.0, 3.0],
            task_type=TaskType.TREND,
            labels=("stable", "increasing", "decreasing"),
            gt="increasing",
            horizon=1,
        )
        result = run_inference(inst, _deps(tmp_path, gw, with_store=False))
        assert result.degraded
        assert result.prediction == "decreasing"

    def test_indicator_answers_named_scalars(self, tmp_path):
        inst = TaskInstance(
            id="ind1",
            series=tuple(10.0 + (i % 4) for i in range(24)),
            task_type=TaskType.INDICATOR,
            horizon=8,
            scope="synth_indicator_short",
            ground_truth=SealedAnswer({"max": 13.0, "min": 10.0, "diff": 3.0}),
        )
        deps = _deps(tmp_path, PolicyGateway(inference_policy), with_store=False)
        result = run_inference(inst, deps)
        assert not result.degraded
        assert set(result.prediction) == {"max", "min", "diff"}

    def test_mcqa_answer_is_a_legal_option(self, tmp_path):
        inst = TaskInstance(
            id="mc1",
            series=(1.0, 2.0, 3.0, 4.0),
            task_type=TaskType.MCQA,
            horizon=1,
            scope="synth_mcqa_short",
            label_space=("option_a", "option_b", "option_c", "option_d"),
            ground_truth=SealedAnswer("option_b"),
        )
        deps = _deps(tmp_path, PolicyGateway(inference_policy), with_store=False)
        result = run_inference(inst, deps)
        assert result.prediction in inst.label_space

    def test_no_store_or_ledger_writes(self, tmp_path):
        inst = _instance(gt=[13.0] * 3)
        deps = _deps(tmp_path, PolicyGateway(inference_policy), with_store=True)
        digest_before = deps.store.tree_digest()
        run_inference(inst, deps)
        assert deps.store.tree_digest() == digest_before
        assert deps.registry.ledger.counts(inst.scope) == {}

    def test_exploration_only_tool_requests_get_feedback_not_execution(self, tmp_path):
        calls = {"n": 0}

        def fn(exchange):
            calls["n"] += 1
            if calls["n"] == 1:
                return AssistantReply(
                    content="",
                    tool_calls=(ToolCallRequest(tool="evaluate_against_gt", args={}),),
                )
            return AssistantReply(
                content=json.dumps({"answer_type": "forecast", "answer": [1.0, 1.0, 1.0]})
            )

        inst = _instance(gt=[13.0] * 3)
        result = run_inference(inst, _deps(tmp_path, PolicyGateway(fn), with_store=False))
        header, events = read_trace(result.trace_path)
        tool_events = [e for e in events if e["kind"] == "tool_call"]
        assert tool_events == []  # the forbidden request never became a tool event
        assert result.prediction == [1.0, 1.0, 1.0]


class TestToolExposure:
    def test_exploration_minus_inference_is_exactly_the_special_categories(self, tmp_path):
        toolkit = builtin_toolkit()
        registry = ToolRegistry(toolkit.descriptors(), ledger=ToolUsageLedger())
        exploration = set(registry.exploration_visible())
        inference = set(registry.inference_visible())
        special = {
            d.tool_id
            for d in toolkit.descriptors()
            if d.category.value in ("exploration_only", "orchestration")
        }
        assert exploration - inference == special

    def test_inference_trace_never_contains_ground_truth(self, tmp_path):
        gt = [13.577, 14.211, 15.903]
        inst = _instance(gt=gt)
        deps = _deps(tmp_path, PolicyGateway(inference_policy), with_store=False)
        result = run_inference(inst, deps)
        trace_text = open(result.trace_path).read()
        for needle in ("13.577", "14.211", "15.903"):
            assert needle not in trace_text


class TestTraceDeterminism:
    def test_byte_identical_traces_across_runs(self, tmp_path):
        inst = _instance(gt=[13.0] * 3)
        texts = []
        for run in ("a", "b"):
            deps = _deps(tmp_path / run, policy_gateway("exploration"))
            outcome = run_exploration_episode(inst, ExplorationConfig(seed=9), deps)
            texts.append(open(outcome.trace_path).read())
        assert texts[0] == texts[1]
