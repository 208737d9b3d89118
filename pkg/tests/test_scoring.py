from __future__ import annotations

import json
import math
import random
from pathlib import Path

import pytest

from geofact.benchmark import Category, GenerationConfig, TaskKind, generate_benchmark
from geofact.harness import EvalRecord, FixedMapEndpoint, UniformRandomEndpoint, run_eval
from geofact.scoring import (
    OUTCOMES,
    CategoryScores,
    Ranking,
    ScoringError,
    TypeDistribution,
    emit_report,
    percentile_shift,
    random_baseline,
    rank_models,
    score_run,
    type_distribution,
)

GOLDEN = Path(__file__).parent / "golden"


def _record(item, label=None, raw=None):
    """A synthetic record answering `label` (default: the key)."""
    label = label or item.answer_label
    outcome = item.option_types.get(label, "InstructionViolation")
    return EvalRecord(
        item_id=item.item_id,
        raw_response=raw if raw is not None else label,
        extracted=label if label in item.option_types else "InstructionViolation",
        outcome=outcome,
        latency_ms=0.0,
    )


@pytest.fixture(scope="module")
def twelve_items(mini_city):
    """Hand-countable fixture: 6 Entity, 4 Relation, 2 Attribute items."""
    config = GenerationConfig(
        seed=77,
        counts={TaskKind.POI_EXISTENCE: 6, TaskKind.POI_NEAR_POI: 4, TaskKind.AOI_AREA: 2},
    )
    items = generate_benchmark(mini_city, config)
    assert len(items) == 12
    return items


@pytest.fixture(scope="module")
def twelve_records(twelve_items):
    """Entity 3/6 correct, Relation 1/4, Attribute 1/2."""
    entity = [i for i in twelve_items if i.task.category is Category.ENTITY]
    relation = [i for i in twelve_items if i.task.category is Category.RELATION]
    attribute = [i for i in twelve_items if i.task.category is Category.ATTRIBUTE]
    records = []
    for k, item in enumerate(entity):
        records.append(_record(item) if k < 3 else _record(item, _wrong_label(item)))
    for k, item in enumerate(relation):
        records.append(_record(item) if k < 1 else _record(item, _wrong_label(item)))
    for k, item in enumerate(attribute):
        records.append(_record(item) if k < 1 else _record(item, _wrong_label(item)))
    return records


def _wrong_label(item):
    return next(lab for lab in item.labels() if lab != item.answer_label)


# ---------------------------------------------------------------------------
# score_run


def test_all_correct_records_score_one(twelve_items):
    records = [_record(item) for item in twelve_items]
    assert score_run(twelve_items, records) == CategoryScores(1.0, 1.0, 1.0, 1.0)


def test_hand_counted_twelve_item_fixture(twelve_items, twelve_records):
    scores = score_run(twelve_items, twelve_records)
    assert scores.entity_acc == 0.5
    assert scores.relation_acc == 0.25
    assert scores.attribute_acc == 0.5
    assert abs(scores.overall - (0.5 + 0.25 + 0.5) / 3) < 1e-15
    assert scores.overall == pytest.approx(0.41667, abs=5e-6)


def test_empty_records_score_zero(twelve_items):
    assert score_run(twelve_items, []) == CategoryScores(0.0, 0.0, 0.0, 0.0)


def test_missing_items_count_as_incorrect(twelve_items):
    # answer only the entity items, all correctly
    entity = [i for i in twelve_items if i.task.category is Category.ENTITY]
    scores = score_run(twelve_items, [_record(i) for i in entity])
    assert scores.entity_acc == 1.0
    assert scores.relation_acc == 0.0
    assert scores.attribute_acc == 0.0


def test_unknown_item_record_is_an_error(twelve_items):
    bogus = EvalRecord("nope-0001", "A", "A", "Factual", 0.0)
    with pytest.raises(ScoringError, match="unknown item"):
        score_run(twelve_items, [bogus])


def test_score_run_is_permutation_invariant(twelve_items, twelve_records):
    rng = random.Random(5)
    shuffled = list(twelve_records)
    rng.shuffle(shuffled)
    assert score_run(twelve_items, shuffled) == score_run(twelve_items, twelve_records)


def test_abstain_and_violation_never_count_correct(twelve_items):
    from geofact.benchmark import abstain_benchmark

    items = abstain_benchmark(twelve_items)
    abstain_records = [_record(i, i.options[-1][0]) for i in items]
    violation_records = [_record(i, "no idea", raw="no idea") for i in items]
    assert score_run(items, abstain_records).overall == 0.0
    assert score_run(items, violation_records).overall == 0.0


def test_macro_overall_invariant_to_category_duplication(twelve_items, twelve_records):
    base = score_run(twelve_items, twelve_records)
    # duplicate every Attribute item (and its record) under fresh ids
    import dataclasses

    extra_items, extra_records = [], []
    by_id = {i.item_id: i for i in twelve_items}
    for record in twelve_records:
        item = by_id[record.item_id]
        if item.task.category is Category.ATTRIBUTE:
            clone_id = item.item_id + "-dup"
            extra_items.append(dataclasses.replace(item, item_id=clone_id))
            extra_records.append(dataclasses.replace(record, item_id=clone_id))
    doubled = score_run(list(twelve_items) + extra_items, list(twelve_records) + extra_records)
    assert doubled.attribute_acc == base.attribute_acc
    assert doubled.overall == base.overall
    assert len(extra_items) == 2  # micro totals really did change


def test_accuracies_bounded(twelve_items, twelve_records):
    scores = score_run(twelve_items, twelve_records)
    for value in (scores.entity_acc, scores.relation_acc, scores.attribute_acc, scores.overall):
        assert 0.0 <= value <= 1.0


# ---------------------------------------------------------------------------
# type distribution


def test_type_distribution_all_factual(twelve_items):
    dist = type_distribution([_record(i) for i in twelve_items])
    assert dist["Factual"] == 1.0
    assert all(dist[o] == 0.0 for o in OUTCOMES if o != "Factual")


def test_type_distribution_known_counts(twelve_items):
    entity = [i for i in twelve_items if i.task.category is Category.ENTITY]
    records = [_record(entity[0])]
    records.append(_record(entity[1], _wrong_label(entity[1])))
    records.append(_record(entity[2], "gibberish", raw="gibberish"))
    dist = type_distribution(records)
    assert dist["Factual"] == pytest.approx(1 / 3)
    assert dist["InstructionViolation"] == pytest.approx(1 / 3)
    wrong_type = entity[1].option_types[_wrong_label(entity[1])]
    assert dist[wrong_type] == pytest.approx(1 / 3)


def test_type_distribution_sums_to_one_for_random_records(twelve_items, tmp_path):
    records = run_eval(UniformRandomEndpoint(seed=1), twelve_items, tmp_path / "r.jsonl")
    dist = type_distribution(records)
    assert abs(sum(dist.fractions.values()) - 1.0) < 1e-12


def test_type_distribution_empty_is_all_zero():
    dist = type_distribution([])
    assert all(v == 0.0 for v in dist.fractions.values())


# ---------------------------------------------------------------------------
# random baseline


def test_random_baseline_converges_to_one_third(big_city):
    config = GenerationConfig.uniform(154, seed=13)
    items = generate_benchmark(big_city, config)
    assert len(items) >= 2000
    scores = random_baseline(items, seed=3, trials=20)
    se = math.sqrt((1 / 3) * (2 / 3) / len(items))
    assert abs(scores.overall - 1 / 3) < 3 * se * 3  # generous: trials average


def test_random_baseline_deterministic(twelve_items):
    assert random_baseline(twelve_items, seed=9, trials=30) == random_baseline(
        twelve_items, seed=9, trials=30
    )
    assert random_baseline(twelve_items, seed=9, trials=30) != random_baseline(
        twelve_items, seed=10, trials=30
    )


def test_random_baseline_matches_uniform_mock_within_se(mini_city, tmp_path):
    items = generate_benchmark(mini_city, GenerationConfig.uniform(10, seed=2))
    baseline = random_baseline(items, seed=4, trials=50)
    records = run_eval(UniformRandomEndpoint(seed=4), items, tmp_path / "r.jsonl")
    mock_scores = score_run(items, records)
    se = math.sqrt((1 / 3) * (2 / 3) / len(items))
    assert abs(baseline.overall - mock_scores.overall) < 4 * se


# ---------------------------------------------------------------------------
# ranking


def test_rank_single_model():
    ranking = rank_models([("only", CategoryScores.from_categories(0.5, 0.5, 0.5))])
    assert ranking.entries[0].rank == 1
    assert ranking.entries[0].percentile is None


def test_rank_ties_break_alphabetically():
    s = CategoryScores.from_categories(0.4, 0.4, 0.4)
    ranking = rank_models([("zeta", s), ("alpha", s)])
    assert [e.model for e in ranking.entries] == ["alpha", "zeta"]
    assert [e.rank for e in ranking.entries] == [1, 2]


def test_percentile_shift_third_to_first_among_five():
    def scores(x):
        return CategoryScores.from_categories(x, x, x)

    before = rank_models(
        [("m1", scores(0.9)), ("m2", scores(0.8)), ("target", scores(0.7)), ("m4", scores(0.6)), ("m5", scores(0.5))]
    )
    after = rank_models(
        [("m1", scores(0.9)), ("m2", scores(0.8)), ("target", scores(0.95)), ("m4", scores(0.6)), ("m5", scores(0.5))]
    )
    assert before.entry("target").rank == 3
    assert after.entry("target").rank == 1
    deltas = percentile_shift(before, after)
    assert deltas["target"] == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# reports


def _report_fixture():
    s1 = CategoryScores.from_categories(0.5, 0.25, 0.5)
    s2 = CategoryScores.from_categories(1.0, 1.0, 1.0)
    s3 = CategoryScores.from_categories(0.41, 0.388, 0.268)
    named = [("model-a", s1), ("model-b", s2), ("random", s3)]
    ranking = rank_models(named)
    dist = TypeDistribution({o: (0.5 if o == "Factual" else 0.5 / 7) for o in OUTCOMES})
    return named, dist, ranking


@pytest.mark.parametrize("fmt,ext", [("markdown", "md"), ("csv", "csv"), ("json", "json")])
def test_report_matches_golden_file(fmt, ext):
    named, dist, ranking = _report_fixture()
    assert emit_report(named, dist, ranking, fmt) == (GOLDEN / f"report_full.{ext}").read_text()


def test_csv_column_order_is_stable():
    named, dist, ranking = _report_fixture()
    first = emit_report(named, dist, ranking, "csv").splitlines()[0]
    assert first == "Model,Entity,Relation,Attribute,Overall,Ranking"


def test_empty_report_has_headers_only():
    assert emit_report((), None, None, "csv") == "Model,Entity,Relation,Attribute,Overall,Ranking\n"
    md = emit_report((), None, None, "markdown")
    assert "| Model |" in md and md.count("\n") == 2


def test_json_report_round_trips():
    named, dist, ranking = _report_fixture()
    payload = json.loads(emit_report(named, dist, ranking, "json"))
    assert payload["scores"]["model-a"]["overall"] == pytest.approx((0.5 + 0.25 + 0.5) / 3)
    assert payload["ranking"][0]["model"] == "model-b"
    assert payload["distribution"]["Factual"] == 0.5


def test_unknown_format_is_an_error():
    with pytest.raises(ScoringError):
        emit_report((), None, None, "yaml")
