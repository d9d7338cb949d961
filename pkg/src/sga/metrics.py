"""Diagnostics: tool familiarity between toolsets and per-cohort efficiency tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .core import ToolSchema
from .executor import EpisodeResult
from .store import Embedder, cosine


class EmptyToolset(ValueError):
    pass


@dataclass(frozen=True)
class FamiliarityReport:
    score: float
    per_target: tuple[tuple[str, str, float], ...]

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "per_target": [{"tool": t, "nearest_source": s, "cosine": c} for t, s, c in self.per_target],
        }


def functional_description(tool: ToolSchema) -> str:
    return f"{tool.name}: {tool.description}"


def tool_familiarity(source_tools: Sequence[ToolSchema], target_tools: Sequence[ToolSchema],
                     embedder: Embedder) -> FamiliarityReport:
    """Mean over target tools of the peak cosine to any source tool.

    Directional: every target looks for its nearest source, not the
    other way round. Ties for the nearest source go to the earlier one.
    """
    if not source_tools or not target_tools:
        raise EmptyToolset("both toolsets must be non-empty")
    src = [(t.name, embedder.embed(functional_description(t))) for t in source_tools]
    rows = []
    for tgt in target_tools:
        e = embedder.embed(functional_description(tgt))
        best_name, best = src[0][0], -np.inf
        for name, v in src:
            c = cosine(e, v)
            if c > best:
                best_name, best = name, c
        rows.append((tgt.name, best_name, float(best)))
    return FamiliarityReport(sum(r[2] for r in rows) / len(rows), tuple(rows))


# ---------------------------------------------------------------------------
# Efficiency


@dataclass(frozen=True)
class CohortStats:
    label: str
    count: int
    success_rate: float
    mean_tokens: float
    mean_steps: float
    mean_llm_calls: float

    def to_row(self) -> dict:
        return {
            "cohort": self.label,
            "count": self.count,
            "success_rate": self.success_rate,
            "mean_tokens": self.mean_tokens,
            "mean_steps": self.mean_steps,
            "mean_llm_calls": self.mean_llm_calls,
        }


CSV_COLUMNS = ("cohort", "count", "success_rate", "mean_tokens", "mean_steps", "mean_llm_calls")


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def cohort_stats(label: str, results: Sequence[EpisodeResult]) -> CohortStats:
    return CohortStats(
        label=label,
        count=len(results),
        success_rate=_mean([float(r.success) for r in results]),
        mean_tokens=_mean([float(r.total_tokens) for r in results]),
        mean_steps=_mean([float(r.steps) for r in results]),
        mean_llm_calls=_mean([float(r.llm_calls) for r in results]),
    )


def efficiency_report(results: Iterable[EpisodeResult], default_label: str = "all") -> dict[str, CohortStats]:
    """Arithmetic means per cohort (``EpisodeResult.label``); success_rate is a fraction.

    Empty input gives a single all-zero cohort with ``count == 0``.
    """
    groups: dict[str, list[EpisodeResult]] = {}
    for r in results:
        groups.setdefault(r.label or default_label, []).append(r)
    if not groups:
        return {default_label: cohort_stats(default_label, [])}
    return {label: cohort_stats(label, rs) for label, rs in groups.items()}


def write_csv(rows: Iterable[dict], columns: Sequence[str], out: TextIO) -> None:
    writer = csv.DictWriter(out, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c, "") for c in columns})


def report_csv(report: dict[str, CohortStats]) -> str:
    buf = io.StringIO()
    write_csv((s.to_row() for s in report.values()), CSV_COLUMNS, buf)
    return buf.getvalue()


EPISODE_COLUMNS = ("task_id", "label", "success", "steps", "tool_steps", "llm_calls", "reprompts",
                   "prompt_tokens", "completion_tokens")


def episodes_csv(results: Iterable[EpisodeResult]) -> str:
    buf = io.StringIO()
    write_csv((r.summary_row() for r in results), EPISODE_COLUMNS, buf)
    return buf.getvalue()
