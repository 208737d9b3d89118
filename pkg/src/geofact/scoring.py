"""Accuracy scoring, outcome distributions, baselines, rankings, reports.

Per-category accuracies are micro (item-weighted within the category);
the overall score is the unweighted macro mean of the three categories.
Items without a record count as incorrect, so partial runs are penalized
consistently.
"""

from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from .benchmark import BenchmarkItem, Category
from .errors import GeofactError
from .harness import INSTRUCTION_VIOLATION, EvalRecord

OUTCOMES = (
    "Factual",
    "EntityFabrication",
    "EntityOmission",
    "RelationFabrication",
    "RelationOmission",
    "AttributeConfusion",
    "Abstain",
    INSTRUCTION_VIOLATION,
)

CATEGORY_ORDER = (Category.ENTITY, Category.RELATION, Category.ATTRIBUTE)


class ScoringError(GeofactError):
    """Records and benchmark disagree structurally."""


@dataclass(frozen=True)
class CategoryScores:
    entity_acc: float
    relation_acc: float
    attribute_acc: float
    overall: float

    @classmethod
    def from_categories(cls, entity: float, relation: float, attribute: float) -> "CategoryScores":
        return cls(entity, relation, attribute, (entity + relation + attribute) / 3.0)

    def as_dict(self) -> dict:
        return {
            "entity": self.entity_acc,
            "relation": self.relation_acc,
            "attribute": self.attribute_acc,
            "overall": self.overall,
        }


@dataclass(frozen=True)
class TypeDistribution:
    fractions: Mapping[str, float]  # keyed by OUTCOMES, sums to 1 over records

    def __getitem__(self, outcome: str) -> float:
        return self.fractions[outcome]


@dataclass(frozen=True)
class RankEntry:
    model: str
    overall: float
    rank: int  # 1-based
    percentile: float | None  # 1 - (rank-1)/(n-1); None for a single model


@dataclass(frozen=True)
class Ranking:
    entries: tuple[RankEntry, ...]

    def entry(self, model: str) -> RankEntry:
        for e in self.entries:
            if e.model == model:
                return e
        raise KeyError(model)


def score_run(benchmark: Sequence[BenchmarkItem], records: Sequence[EvalRecord]) -> CategoryScores:
    """Micro accuracy per first-level category; overall is their macro mean.

    ``records`` may cover a subset of the benchmark; missing items count as
    incorrect. A record for an unknown item is an error.
    """
    by_id = {item.item_id: item for item in benchmark}
    correct_ids: set[str] = set()
    seen: set[str] = set()
    for record in records:
        item = by_id.get(record.item_id)
        if item is None:
            raise ScoringError(f"record references unknown item {record.item_id!r}")
        if record.item_id in seen:
            raise ScoringError(f"duplicate record for item {record.item_id!r}")
        seen.add(record.item_id)
        if record.outcome == "Factual":
            correct_ids.add(record.item_id)

    totals = {c: 0 for c in CATEGORY_ORDER}
    correct = {c: 0 for c in CATEGORY_ORDER}
    for item in benchmark:
        cat = item.task.category
        totals[cat] += 1
        if item.item_id in correct_ids:
            correct[cat] += 1

    def acc(cat: Category) -> float:
        return correct[cat] / totals[cat] if totals[cat] else 0.0

    return CategoryScores.from_categories(
        acc(Category.ENTITY), acc(Category.RELATION), acc(Category.ATTRIBUTE)
    )


def type_distribution(records: Sequence[EvalRecord]) -> TypeDistribution:
    """Outcome counts normalized by the total record count."""
    counts = {outcome: 0 for outcome in OUTCOMES}
    for record in records:
        if record.outcome not in counts:
            raise ScoringError(f"unknown outcome {record.outcome!r}")
        counts[record.outcome] += 1
    total = len(records)
    fractions = {o: (counts[o] / total if total else 0.0) for o in OUTCOMES}
    return TypeDistribution(fractions)


def random_baseline(
    benchmark: Sequence[BenchmarkItem], seed: int = 0, trials: int = 100
) -> CategoryScores:
    """Simulated uniform-choice answering, averaged over ``trials`` runs."""
    if trials < 1:
        raise ScoringError("trials must be >= 1")
    rng = random.Random(f"baseline|{seed}")
    sums = {c: 0.0 for c in CATEGORY_ORDER}
    totals = {c: 0 for c in CATEGORY_ORDER}
    for item in benchmark:
        totals[item.task.category] += 1
    for _ in range(trials):
        correct = {c: 0 for c in CATEGORY_ORDER}
        for item in benchmark:
            if rng.choice(item.labels()) == item.answer_label:
                correct[item.task.category] += 1
        for c in CATEGORY_ORDER:
            if totals[c]:
                sums[c] += correct[c] / totals[c]
    accs = {c: sums[c] / trials for c in CATEGORY_ORDER}
    return CategoryScores.from_categories(
        accs[Category.ENTITY], accs[Category.RELATION], accs[Category.ATTRIBUTE]
    )


def rank_models(named_scores: Sequence[tuple[str, CategoryScores]]) -> Ranking:
    """Rank by overall, descending; ties break alphabetically by model name."""
    ordered = sorted(named_scores, key=lambda pair: (-pair[1].overall, pair[0]))
    n = len(ordered)
    entries = []
    for i, (model, scores) in enumerate(ordered):
        rank = i + 1
        percentile = 1.0 - (rank - 1) / (n - 1) if n >= 2 else None
        entries.append(RankEntry(model=model, overall=scores.overall, rank=rank, percentile=percentile))
    return Ranking(tuple(entries))


def percentile_shift(ranking_a: Ranking, ranking_b: Ranking) -> dict[str, float]:
    """Per-model percentile deltas between two rankings (b minus a)."""
    deltas = {}
    a = {e.model: e for e in ranking_a.entries}
    b = {e.model: e for e in ranking_b.entries}
    for model in a:
        if model not in b:
            continue
        pa, pb = a[model].percentile, b[model].percentile
        if pa is None or pb is None:
            raise ScoringError("percentiles need at least two models per ranking")
        deltas[model] = pb - pa
    return deltas


# ---------------------------------------------------------------------------
# Reports

_SCORE_COLUMNS = ("Entity", "Relation", "Attribute", "Overall", "Ranking")


def _score_row(scores: CategoryScores) -> list[str]:
    return [
        f"{scores.entity_acc:.4f}",
        f"{scores.relation_acc:.4f}",
        f"{scores.attribute_acc:.4f}",
        f"{scores.overall:.4f}",
    ]


def emit_report(
    scores: Sequence[tuple[str, CategoryScores]] = (),
    distribution: TypeDistribution | None = None,
    ranking: Ranking | None = None,
    fmt: str = "markdown",
) -> str:
    """Render scores/distribution/ranking with a stable column order."""
    if fmt == "json":
        payload: dict = {}
        if scores:
            payload["scores"] = {name: s.as_dict() for name, s in scores}
        if distribution is not None:
            payload["distribution"] = dict(distribution.fractions)
        if ranking is not None:
            payload["ranking"] = [
                {
                    "model": e.model,
                    "overall": e.overall,
                    "rank": e.rank,
                    "percentile": e.percentile,
                }
                for e in ranking.entries
            ]
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    ranks = {e.model: e.rank for e in ranking.entries} if ranking else {}

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("Model",) + _SCORE_COLUMNS)
        for name, s in scores:
            writer.writerow([name] + _score_row(s) + [ranks.get(name, "")])
        if distribution is not None:
            writer.writerow([])
            writer.writerow(["Outcome", "Fraction"])
            for outcome in OUTCOMES:
                writer.writerow([outcome, f"{distribution[outcome]:.4f}"])
        return buf.getvalue()

    if fmt == "markdown":
        lines = []
        lines.append("| Model | " + " | ".join(_SCORE_COLUMNS) + " |")
        lines.append("|" + "---|" * (len(_SCORE_COLUMNS) + 1))
        for name, s in scores:
            rank = ranks.get(name)
            lines.append(
                "| " + " | ".join([name] + _score_row(s) + [str(rank) if rank else "-"]) + " |"
            )
        if distribution is not None:
            lines.append("")
            lines.append("| Outcome | Fraction |")
            lines.append("|---|---|")
            for outcome in OUTCOMES:
                lines.append(f"| {outcome} | {distribution[outcome]:.4f} |")
        if ranking is not None and not scores:
            lines.append("")
            lines.append("| Rank | Model | Overall | Percentile |")
            lines.append("|---|---|---|---|")
            for e in ranking.entries:
                pct = f"{e.percentile:.4f}" if e.percentile is not None else "-"
                lines.append(f"| {e.rank} | {e.model} | {e.overall:.4f} | {pct} |")
        return "\n".join(lines) + "\n"

    raise ScoringError(f"unknown report format {fmt!r}")
