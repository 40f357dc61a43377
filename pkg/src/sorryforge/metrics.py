"""Evaluation metrics and report rendering.

pass@k here is literal any-of-the-first-k over recorded sample outcomes,
not the combinatorial estimator: runs are cheap to rerun and the literal
form keeps the counting oracle trivial. Reports come in three formats;
markdown is the approach-group table, csv and json are lossless dumps.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import SorryForgeError
from .harness import ProverSpec, RunRecord

__all__ = [
    "InsufficientSamplesError",
    "ProverSpec",
    "ProverMetrics",
    "MetricsTable",
    "pass_at_k",
    "category_breakdown",
    "intersection_counts",
    "compute_metrics",
    "emit_report",
    "metrics_from_json",
    "GROUP_LABELS",
]

GROUP_LABELS = {
    "deterministic": "Deterministic",
    "general": "General-purpose",
    "specialized": "Specialized",
    "iterative": "Iterative",
}

_PERCENTILES = (50, 90, 99)


class InsufficientSamplesError(SorryForgeError):
    """A task carries fewer samples than the requested k."""


def pass_at_k(outcomes: Sequence[Sequence[bool]], k: int) -> float:
    """Fraction of tasks where any of the first k samples succeeded."""
    if k < 1:
        raise ValueError("k must be at least 1")
    for index, row in enumerate(outcomes):
        if len(row) < k:
            raise InsufficientSamplesError(f"task {index} has {len(row)} samples, need {k}")
    if not outcomes:
        return 0.0
    return sum(1 for row in outcomes if any(row[:k])) / len(outcomes)


def category_breakdown(runs: Iterable[RunRecord]) -> dict[str, dict[str, float]]:
    """Success rate per (prover, category); cells with no tasks are absent."""
    totals: dict[tuple[str, str], int] = {}
    solved: dict[tuple[str, str], int] = {}
    for run in runs:
        key = (run.prover_id, run.category)
        totals[key] = totals.get(key, 0) + 1
        if run.solved:
            solved[key] = solved.get(key, 0) + 1
    table: dict[str, dict[str, float]] = {}
    for (prover_id, category), total in sorted(totals.items()):
        table.setdefault(prover_id, {})[category] = solved.get((prover_id, category), 0) / total
    return table


def intersection_counts(runs: Iterable[RunRecord]) -> dict[frozenset[str], int]:
    """Tasks solved by exactly each prover subset; keys are non-empty."""
    solvers: dict[str, set[str]] = {}
    for run in runs:
        if run.solved:
            solvers.setdefault(run.sorry_id, set()).add(run.prover_id)
    counts: dict[frozenset[str], int] = {}
    for provers in solvers.values():
        key = frozenset(provers)
        counts[key] = counts.get(key, 0) + 1
    return counts


def _nearest_rank(values: list[int], percentile: int) -> int:
    ordered = sorted(values)
    rank = max(1, -(-percentile * len(ordered) // 100))  # ceil
    return ordered[min(rank, len(ordered)) - 1]


@dataclass(frozen=True)
class ProverMetrics:
    prover_id: str
    label: str
    group: str
    total: int
    solved_count: int
    pass_at_1: float
    pass_at_k: float | None = None
    k: int | None = None

    def as_json(self) -> dict[str, Any]:
        return {
            "prover_id": self.prover_id,
            "label": self.label,
            "group": self.group,
            "total": self.total,
            "solved_count": self.solved_count,
            "pass_at_1": self.pass_at_1,
            "pass_at_k": self.pass_at_k,
            "k": self.k,
        }


@dataclass(frozen=True)
class MetricsTable:
    provers: tuple[ProverMetrics, ...]
    categories: dict[str, dict[str, float]]
    combined_count: int
    total_tasks: int
    intersections: tuple[tuple[tuple[str, ...], int], ...]
    token_percentiles: dict[str, dict[str, int]] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetricsTable):
            return NotImplemented
        return self.as_json() == other.as_json()

    def as_json(self) -> dict[str, Any]:
        return {
            "provers": [p.as_json() for p in self.provers],
            "categories": self.categories,
            "combined_count": self.combined_count,
            "total_tasks": self.total_tasks,
            "intersections": [
                {"provers": list(provers), "count": count} for provers, count in self.intersections
            ],
            "token_percentiles": self.token_percentiles,
        }


def metrics_from_json(obj: Mapping[str, Any]) -> MetricsTable:
    provers = tuple(
        ProverMetrics(
            prover_id=entry["prover_id"],
            label=entry["label"],
            group=entry["group"],
            total=entry["total"],
            solved_count=entry["solved_count"],
            pass_at_1=entry["pass_at_1"],
            pass_at_k=entry.get("pass_at_k"),
            k=entry.get("k"),
        )
        for entry in obj["provers"]
    )
    return MetricsTable(
        provers=provers,
        categories={k: dict(v) for k, v in obj.get("categories", {}).items()},
        combined_count=obj["combined_count"],
        total_tasks=obj["total_tasks"],
        intersections=tuple(
            (tuple(entry["provers"]), entry["count"]) for entry in obj.get("intersections", [])
        ),
        token_percentiles={k: dict(v) for k, v in obj.get("token_percentiles", {}).items()},
    )


def compute_metrics(runs: Sequence[RunRecord], specs: Sequence[ProverSpec]) -> MetricsTable:
    """Aggregate run records into the metrics table.

    Sampling provers (``pass_k`` set) get any-of-k rates over per-task
    outcome rows ordered by iteration; single-trial provers report their
    solved fraction as pass@1.
    """
    by_prover: dict[str, list[RunRecord]] = {}
    for run in runs:
        by_prover.setdefault(run.prover_id, []).append(run)

    provers: list[ProverMetrics] = []
    token_percentiles: dict[str, dict[str, int]] = {}
    for spec in specs:
        rows = by_prover.get(spec.prover_id, [])
        total = len(rows)
        solved_count = sum(1 for run in rows if run.solved)
        if spec.pass_k:
            outcomes = [_outcome_row(run, spec.pass_k) for run in rows]
            p1 = pass_at_k(outcomes, 1) if outcomes else 0.0
            pk = pass_at_k(outcomes, spec.pass_k) if outcomes else 0.0
            provers.append(
                ProverMetrics(
                    prover_id=spec.prover_id,
                    label=spec.label,
                    group=spec.group,
                    total=total,
                    solved_count=solved_count,
                    pass_at_1=p1,
                    pass_at_k=pk,
                    k=spec.pass_k,
                )
            )
        else:
            rate = solved_count / total if total else 0.0
            provers.append(
                ProverMetrics(
                    prover_id=spec.prover_id,
                    label=spec.label,
                    group=spec.group,
                    total=total,
                    solved_count=solved_count,
                    pass_at_1=rate,
                )
            )
        spent = [
            sum(attempt.tokens.total for attempt in run.attempts)
            for run in rows
            if run.solved
        ]
        if spent:
            token_percentiles[spec.prover_id] = {
                f"p{percentile}": _nearest_rank(spent, percentile) for percentile in _PERCENTILES
            }

    solved_ids = {run.sorry_id for run in runs if run.solved}
    intersections = tuple(
        (tuple(sorted(provers_set)), count)
        for provers_set, count in sorted(
            intersection_counts(runs).items(), key=lambda item: tuple(sorted(item[0]))
        )
    )
    total_tasks = len({run.sorry_id for run in runs})
    return MetricsTable(
        provers=tuple(provers),
        categories=category_breakdown(runs),
        combined_count=len(solved_ids),
        total_tasks=total_tasks,
        intersections=intersections,
        token_percentiles=token_percentiles,
    )


def _outcome_row(run: RunRecord, k: int) -> list[bool]:
    row = [False] * max(k, len(run.attempts))
    for attempt in run.attempts:
        if attempt.proposal.iteration < len(row):
            row[attempt.proposal.iteration] = attempt.verdict.accepted
    return row


def _percent(rate: float | None) -> str:
    if rate is None:
        return "n/a"
    return f"{rate * 100:.1f}%"


def emit_report(metrics: MetricsTable, format: str = "markdown") -> str:
    """Render the metrics table. Output is byte-deterministic."""
    if format == "markdown":
        return _emit_markdown(metrics)
    if format == "csv":
        return _emit_csv(metrics)
    if format == "json":
        return json.dumps(metrics.as_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    raise ValueError(f"unknown report format: {format}")


def _emit_markdown(metrics: MetricsTable) -> str:
    ks = sorted({p.k for p in metrics.provers if p.k})
    k_header = f"Pass@{ks[0]}" if len(ks) == 1 else "Pass@k"
    lines = [
        f"| Approach | Pass@1 | {k_header} |",
        "| --- | --- | --- |",
    ]
    for group_key, group_label in GROUP_LABELS.items():
        members = [p for p in metrics.provers if p.group == group_key]
        if not members:
            continue
        lines.append(f"| *{group_label}* |  |  |")
        for prover in members:
            lines.append(f"| {prover.label} | {_percent(prover.pass_at_1)} | {_percent(prover.pass_at_k)} |")
    combined_rate = metrics.combined_count / metrics.total_tasks if metrics.total_tasks else 0.0
    lines.append(f"| **Combined** | {_percent(combined_rate)} |  |")
    lines.append("")
    lines.append(f"Tasks: {metrics.total_tasks}. Distinct tasks solved by any prover: {metrics.combined_count}.")

    if metrics.categories:
        lines.append("")
        lines.append("## Success rate by repository category")
        lines.append("")
        categories = sorted({c for table in metrics.categories.values() for c in table})
        lines.append("| Prover | " + " | ".join(categories) + " |")
        lines.append("| --- |" + " --- |" * len(categories))
        for prover in metrics.provers:
            table = metrics.categories.get(prover.prover_id, {})
            cells = [_percent(table[c]) if c in table else "n/a" for c in categories]
            lines.append(f"| {prover.label} | " + " | ".join(cells) + " |")

    if metrics.intersections:
        lines.append("")
        lines.append("## Tasks solved by exactly each prover set")
        lines.append("")
        lines.append("| Provers | Tasks |")
        lines.append("| --- | --- |")
        for provers, count in metrics.intersections:
            lines.append(f"| {' + '.join(provers)} | {count} |")

    if metrics.token_percentiles:
        lines.append("")
        lines.append("## Token totals over solved tasks")
        lines.append("")
        lines.append("| Prover | p50 | p90 | p99 |")
        lines.append("| --- | --- | --- | --- |")
        for prover_id, table in sorted(metrics.token_percentiles.items()):
            lines.append(f"| {prover_id} | {table['p50']} | {table['p90']} | {table['p99']} |")
    return "\n".join(lines) + "\n"


def _emit_csv(metrics: MetricsTable) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["section", "prover", "key", "metric", "value"])
    for prover in metrics.provers:
        writer.writerow(["prover", prover.prover_id, "", "label", prover.label])
        writer.writerow(["prover", prover.prover_id, "", "group", prover.group])
        writer.writerow(["prover", prover.prover_id, "", "total", prover.total])
        writer.writerow(["prover", prover.prover_id, "", "solved_count", prover.solved_count])
        writer.writerow(["prover", prover.prover_id, "", "pass_at_1", repr(prover.pass_at_1)])
        if prover.k:
            writer.writerow(["prover", prover.prover_id, "", "k", prover.k])
            writer.writerow(["prover", prover.prover_id, "", "pass_at_k", repr(prover.pass_at_k)])
    for prover_id, table in sorted(metrics.categories.items()):
        for category, rate in sorted(table.items()):
            writer.writerow(["category", prover_id, category, "rate", repr(rate)])
    for provers, count in metrics.intersections:
        writer.writerow(["intersection", "", "+".join(provers), "count", count])
    for prover_id, table in sorted(metrics.token_percentiles.items()):
        for name, value in sorted(table.items()):
            writer.writerow(["tokens", prover_id, name, "value", value])
    writer.writerow(["summary", "", "", "combined_count", metrics.combined_count])
    writer.writerow(["summary", "", "", "total_tasks", metrics.total_tasks])
    return buffer.getvalue()
