"""Synthetic tool-prior-collapse simulation.

Models an exploration loop whose branch-tool selection is biased toward
historically used tools (rich-get-richer), then measures how task-aware
dropout changes tool coverage, top-k concentration, and usage entropy over
episode prefixes, averaged over seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .registry import ToolCategory, ToolDescriptor, ToolRegistry, ToolUsageLedger
from .util import stable_rng

SCOPE = "sim_collapse"


@dataclass(frozen=True)
class DropoutScenario:
    n_tools: int = 10
    episodes: int = 120
    branch_count: int = 2
    selection_bias: float = 2.5  # selection weight ~ (1 + count) ** bias
    alpha: float = 1.5
    noise: float = 0.05
    measure_every: int = 5
    top_k: int = 5
    quality_means: tuple[float, ...] = ()
    protected: tuple[str, ...] = ()

    def tool_ids(self) -> list[str]:
        return [f"tool_{i:02d}" for i in range(self.n_tools)]

    def qualities(self) -> dict[str, float]:
        means = list(self.quality_means)
        if not means:
            # one dominant tool family, the rest mediocre
            means = [1.0, 0.9, 0.8] + [0.4] * (self.n_tools - 3)
        if len(means) != self.n_tools:
            means = (means + [means[-1]] * self.n_tools)[: self.n_tools]
        return dict(zip(self.tool_ids(), means))


def scenario_from_dict(d: Mapping[str, Any]) -> DropoutScenario:
    return DropoutScenario(
        n_tools=int(d.get("n_tools", 10)),
        episodes=int(d.get("episodes", 120)),
        branch_count=int(d.get("branch_count", 2)),
        selection_bias=float(d.get("selection_bias", 2.5)),
        alpha=float(d.get("alpha", 1.5)),
        noise=float(d.get("noise", 0.05)),
        measure_every=int(d.get("measure_every", 5)),
        top_k=int(d.get("top_k", 5)),
        quality_means=tuple(d.get("quality_means", ())),
        protected=tuple(d.get("protected", ())),
    )


def _build_registry(scenario: DropoutScenario) -> ToolRegistry:
    protected = set(scenario.protected)
    descriptors = [
        ToolDescriptor(
            tool_id=t,
            category=ToolCategory.FORECASTING,
            protected_in=("*",) if t in protected else (),
        )
        for t in scenario.tool_ids()
    ]
    return ToolRegistry(descriptors, ledger=ToolUsageLedger())


@dataclass
class PrefixPoint:
    episodes: int
    coverage: float
    top_share: float
    entropy: float


def run_collapse_simulation(
    scenario: DropoutScenario, dropout_on: bool, seed: int
) -> list[PrefixPoint]:
    """One simulated exploration run; returns the diagnostic curve."""
    registry = _build_registry(scenario)
    qualities = scenario.qualities()
    # the selection stream is shared between ON and OFF so dropout is the
    # only difference; an all-protected pool then yields identical runs
    rng = stable_rng("simulate", seed)
    episode_tool_sets: list[set[str]] = []
    points: list[PrefixPoint] = []
    for episode in range(1, scenario.episodes + 1):
        counts = registry.ledger.counts(SCOPE)
        chosen: list[str] = []
        for slot in range(scenario.branch_count):
            if dropout_on:
                visible = sorted(
                    registry.sample_visible_subset(SCOPE, slot, seed * 7919 + episode, scenario.alpha)
                )
            else:
                visible = scenario.tool_ids()
            pool = [t for t in visible if t not in chosen] or visible
            weights = [(1.0 + counts.get(t, 0)) ** scenario.selection_bias for t in pool]
            chosen.append(rng.choices(pool, weights=weights, k=1)[0])
        # branch qualities decide nothing here beyond realism; usage is what
        # the collapse diagnostics read
        _scores = [qualities[t] + rng.gauss(0.0, scenario.noise) for t in chosen]
        registry.record_usage(SCOPE, chosen)
        episode_tool_sets.append(set(chosen))
        if episode % scenario.measure_every == 0 or episode == scenario.episodes:
            points.append(
                PrefixPoint(
                    episodes=episode,
                    coverage=registry.coverage_rate(SCOPE, episode_tool_sets),
                    top_share=registry.top_k_share(SCOPE, scenario.top_k) or 0.0,
                    entropy=registry.usage_entropy(SCOPE) or 0.0,
                )
            )
    return points


@dataclass
class ComparisonResult:
    prefixes: list[int]
    on: dict[str, list[float]] = field(default_factory=dict)
    off: dict[str, list[float]] = field(default_factory=dict)

    def mean_top_share_reduction(self) -> float:
        diffs = [o - n for o, n in zip(self.off["top_share"], self.on["top_share"])]
        return sum(diffs) / len(diffs) if diffs else 0.0

    def coverage_at(self, prefix: int, on: bool = True) -> Optional[float]:
        curve = self.on if on else self.off
        for p, c in zip(self.prefixes, curve["coverage"]):
            if p == prefix:
                return c
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "prefixes": self.prefixes,
            "on": self.on,
            "off": self.off,
            "mean_top_share_reduction": self.mean_top_share_reduction(),
        }


def compare_over_seeds(scenario: DropoutScenario, seeds: Sequence[int]) -> ComparisonResult:
    """Mean ON/OFF curves over seeds for coverage, top-k share, and entropy."""
    if not seeds:
        raise ValueError("at least one seed is required")
    per_mode: dict[bool, dict[str, list[list[float]]]] = {}
    prefixes: list[int] = []
    for dropout_on in (True, False):
        runs = [run_collapse_simulation(scenario, dropout_on, s) for s in seeds]
        prefixes = [p.episodes for p in runs[0]]
        per_mode[dropout_on] = {
            "coverage": [[p.coverage for p in run] for run in runs],
            "top_share": [[p.top_share for p in run] for run in runs],
            "entropy": [[p.entropy for p in run] for run in runs],
        }

    def means(rows: list[list[float]]) -> list[float]:
        return [sum(col) / len(col) for col in zip(*rows)]

    return ComparisonResult(
        prefixes=prefixes,
        on={k: means(v) for k, v in per_mode[True].items()},
        off={k: means(v) for k, v in per_mode[False].items()},
    )


def write_outputs(result: ComparisonResult, out_dir: Path) -> dict[str, str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "dropout_diag.csv"
    json_path = out_dir / "dropout_diag.json"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["prefix", "coverage_on", "coverage_off", "top_share_on", "top_share_off", "entropy_on", "entropy_off"]
        )
        for i, prefix in enumerate(result.prefixes):
            writer.writerow(
                [
                    prefix,
                    f"{result.on['coverage'][i]:.6f}",
                    f"{result.off['coverage'][i]:.6f}",
                    f"{result.on['top_share'][i]:.6f}",
                    f"{result.off['top_share'][i]:.6f}",
                    f"{result.on['entropy'][i]:.6f}",
                    f"{result.off['entropy'][i]:.6f}",
                ]
            )
    json_path.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    return {"csv": str(csv_path), "json": str(json_path)}
