from __future__ import annotations

import json
import random

import pytest

from geofact.benchmark import (
    ABSTAIN_OPTION,
    NONE_OPTION,
    BenchmarkItem,
    Category,
    FabricationParseError,
    GenerationConfig,
    GenerationError,
    HallucinationType,
    TaskKind,
    abstain_benchmark,
    assemble_item,
    confuse_attribute,
    fabricate_entity_names,
    fabricate_relation,
    fabrication_prompt,
    filter_against_kg,
    generate_benchmark,
    load_benchmark,
    make_abstain_variant,
    parse_fabrications,
    save_benchmark,
    strip_abstain_option,
)
from geofact.kg import RelationKind, normalize_name
from oracles import scan_benchmark_invariants


class CannedEndpoint:
    def __init__(self, response: str):
        self.response = response
        self.requests = []

    def complete(self, messages):
        self.requests.append(messages)
        return self.response


# ---------------------------------------------------------------------------
# taxonomy


def test_task_taxonomy_counts():
    entity = [t for t in TaskKind if t.category is Category.ENTITY]
    relation = [t for t in TaskKind if t.category is Category.RELATION]
    attribute = [t for t in TaskKind if t.category is Category.ATTRIBUTE]
    assert len(entity) == 3
    assert len(relation) == 5
    assert len(attribute) == 5
    assert len(list(TaskKind)) == 13
    assert len(list(HallucinationType)) == 5


def test_task_tags():
    assert TaskKind.POI_CATEGORY.tag == "[POI_Category]"
    assert TaskKind.POI_LOCATE_AT_AOI.tag == "[POI_LocateAt_AOI]"


# ---------------------------------------------------------------------------
# fabrication


def test_llm_fabrication_parses_marker_wrapped_name():
    endpoint = CannedEndpoint("[Hallucination] Silver Spoon Cafe [Hallucination]")
    names = fabricate_entity_names("poi", ["Haidian Library"], 5, mode="llm", endpoint=endpoint)
    assert names == ["Silver Spoon Cafe"]
    # the request embedded the example names
    assert "Haidian Library" in endpoint.requests[0][0]["content"]


def test_llm_fabrication_parses_multiple_names():
    raw = (
        "[Hallucination] Silver Spoon Cafe [Hallucination]\n"
        "[Hallucination] Moonlit Fern Bakery [Hallucination]\n"
    )
    assert parse_fabrications(raw) == ["Silver Spoon Cafe", "Moonlit Fern Bakery"]


def test_llm_fabrication_without_markers_is_a_parse_error():
    endpoint = CannedEndpoint("I'd be happy to help, here are some names: Foo, Bar")
    with pytest.raises(FabricationParseError) as err:
        fabricate_entity_names("poi", ["Haidian Library"], 5, mode="llm", endpoint=endpoint)
    assert "happy to help" in err.value.raw_response


def test_fabrication_prompt_mentions_count_and_format():
    prompt = fabrication_prompt("road", ["Chang'an Avenue"])
    assert "five hallucinated names" in prompt
    assert "[Hallucination]" in prompt
    assert "Chang'an Avenue" in prompt


def test_template_fabrication_is_deterministic_and_distinct():
    a = fabricate_entity_names("poi", ["x"], 20, rng_seed=5)
    b = fabricate_entity_names("poi", ["x"], 20, rng_seed=5)
    assert a == b
    assert len(set(a)) == 20
    c = fabricate_entity_names("poi", ["x"], 20, rng_seed=6)
    assert a != c


def test_template_fabrication_requires_example():
    with pytest.raises(GenerationError):
        fabricate_entity_names("poi", [], 3)


def test_filter_against_kg(mini_city):
    real = next(iter(mini_city.pois.values())).name
    candidates = [real, "  " + real.upper() + " ", "Totally Novel Name"]
    assert filter_against_kg(candidates, mini_city) == ["Totally Novel Name"]


def test_fabricate_relation_mini_city_absent_by_edge_scan(mini_city):
    edges = {(e.head_id, e.kind, e.tail_id) for e in mini_city.edges}
    for seed, edge in enumerate(mini_city.edges[:25]):
        fact = (edge.head_id, edge.kind.value, edge.tail_id)
        distractor = fabricate_relation(mini_city, fact, seed)
        assert mini_city.entity_class(distractor) == edge.kind.tail_class
        assert (edge.head_id, edge.kind, distractor) not in edges
        assert (distractor, edge.kind, edge.head_id) not in edges
        assert distractor != edge.head_id


def test_fabricate_relation_two_tail_graph_picks_the_unrelated_one(mini_city):
    # constructed: head relates to exactly one AOI (LocateAt); any other AOI works
    edge = next(e for e in mini_city.edges if e.kind is RelationKind.POI_LOCATE_AT_AOI)
    related = {
        e.tail_id
        for e in mini_city.edges
        if e.kind is RelationKind.POI_LOCATE_AT_AOI and e.head_id == edge.head_id
    }
    distractor = fabricate_relation(mini_city, (edge.head_id, edge.kind.value, edge.tail_id), 0)
    assert distractor not in related


def test_fabricate_relation_exhausted_tails_is_an_error():
    import citygen
    from geofact.kg import RegionThresholds

    # near threshold so huge every POI is near every other: no eligible distractor
    graph = citygen.build_city_graph(2, thresholds=RegionThresholds(near_poi_m=1e7))
    edge = next(e for e in graph.edges if e.kind is RelationKind.POI_NEAR_POI)
    with pytest.raises(GenerationError, match="no eligible"):
        fabricate_relation(graph, (edge.head_id, edge.kind.value, edge.tail_id), 1)


# ---------------------------------------------------------------------------
# attribute confusion


def test_numeric_confusion_threshold_definition(mini_city):
    v = confuse_attribute(1000.0, TaskKind.ROAD_LENGTH, 0.5, mini_city, 3)
    assert v <= 500.0 or v >= 1500.0
    assert v > 0


def test_numeric_confusion_predicate_over_1000_draws(mini_city):
    theta = 0.5
    for seed in range(1000):
        v = confuse_attribute(840.0, TaskKind.AOI_AREA, theta, mini_city, seed)
        assert v > 0
        assert abs(v - 840.0) / 840.0 >= theta


def test_numeric_confusion_with_theta_above_one(mini_city):
    for seed in range(50):
        v = confuse_attribute(100.0, TaskKind.ROAD_LENGTH, 1.5, mini_city, seed)
        assert v >= 250.0  # only the upside satisfies theta >= 1 with v > 0


def test_categorical_confusion_uses_other_top_level(mini_city):
    true = "Dining > Restaurant > Noodle House"
    for seed in range(30):
        wrong = confuse_attribute(true, TaskKind.POI_CATEGORY, 0.5, mini_city, seed)
        assert wrong.split(">")[0].strip() != "Dining"


def test_binary_land_use_vocabulary_picks_the_other_value():
    import citygen
    from geofact.kg import build_graph, derive_relations, ingest_entities, RegionThresholds

    records = citygen.grid_city_records(2)
    for rec in records:
        if rec["kind"] == "aoi":
            rec["land_use"] = "residential"
    records[0]["land_use"] = "industrial"
    lines = [json.dumps(r) for r in records]
    entities, _ = ingest_entities(lines, "Two", citygen.city_bbox(2))
    graph = build_graph("Two", entities, derive_relations(entities, RegionThresholds()), RegionThresholds())
    assert confuse_attribute("residential", TaskKind.AOI_LAND_USE, 0.5, graph, 1) == "industrial"
    # a single-value vocabulary cannot produce a distractor
    single = [json.dumps(r) for r in records if r["kind"] != "aoi" or r["id"] == "aoi_0_0"]
    entities2, _ = ingest_entities(single, "One", citygen.city_bbox(2))
    graph2 = build_graph("One", entities2, [], RegionThresholds())
    with pytest.raises(GenerationError, match="single value"):
        confuse_attribute("industrial", TaskKind.AOI_LAND_USE, 0.5, graph2, 1)


def test_address_confusion_differs_after_normalization(mini_city):
    poi = next(iter(mini_city.pois.values()))
    for seed in range(20):
        wrong = confuse_attribute(poi.address, TaskKind.POI_ADDRESS, 0.5, mini_city, seed)
        assert normalize_name(wrong) != normalize_name(poi.address)
        assert wrong in {p.address for p in mini_city.pois.values()}


# ---------------------------------------------------------------------------
# item assembly


def _existence_item(seed=0):
    return assemble_item(
        TaskKind.POI_EXISTENCE,
        {"factual_text": "Haidian Library", "fact_key": "PoiExistence|p1"},
        ["Silver Spoon Cafe"],
        seed,
        item_id="beijing-PoiExistence-0000",
        city="Beijing",
    )


def test_assemble_poi_existence_item_types():
    item = _existence_item()
    assert len(item.options) == 3
    texts = {text: item.option_types[lab] for lab, text in item.options}
    assert texts["Haidian Library"] == "Factual"
    assert texts["Silver Spoon Cafe"] == "EntityFabrication"
    assert texts[NONE_OPTION] == "EntityOmission"
    assert item.option_text(item.answer_label) == "Haidian Library"
    assert item.question == "Which of the following is a point of interest in Beijing?"


def test_assemble_is_deterministic_per_seed():
    assert _existence_item(7) == _existence_item(7)
    reshuffled = {_existence_item(s).options for s in range(12)}
    assert len(reshuffled) > 1  # the seed really drives option order


def test_attribute_item_has_no_void_option(mini_city):
    item = assemble_item(
        TaskKind.ROAD_LENGTH,
        {"factual_text": "170 meters", "subject": "Chaoyang Route H0-0", "fact_key": "RoadLength|road_h_0_0"},
        ["513 meters", "48 meters"],
        3,
        item_id="gridtown-RoadLength-0000",
        city="Gridtown",
    )
    assert all(text != NONE_OPTION for _, text in item.options)
    assert sorted(item.option_types.values()) == [
        "AttributeConfusion",
        "AttributeConfusion",
        "Factual",
    ]


def test_assemble_rejects_wrong_distractor_arity():
    with pytest.raises(GenerationError):
        assemble_item(
            TaskKind.POI_EXISTENCE,
            {"factual_text": "A", "fact_key": "k"},
            ["b", "c"],
            0,
            item_id="x",
            city="C",
        )


def test_make_abstain_variant():
    item = _existence_item()
    abstain = make_abstain_variant(item)
    assert len(abstain.options) == 4
    assert abstain.options[-1] == ("D", ABSTAIN_OPTION)
    assert abstain.answer_label == item.answer_label
    assert abstain.option_types["D"] == "Abstain"
    with pytest.raises(GenerationError):
        make_abstain_variant(abstain)


def test_strip_abstain_recovers_standard_item_exactly():
    item = _existence_item(11)
    assert strip_abstain_option(make_abstain_variant(item)) == item


# ---------------------------------------------------------------------------
# full generation


def test_generate_benchmark_zero_counts_is_empty(mini_city):
    config = GenerationConfig(seed=1, counts={})
    assert generate_benchmark(mini_city, config) == []


def test_generate_mini_city_benchmark_passes_invariant_scan(mini_city):
    config = GenerationConfig.uniform(10, seed=42)
    items = generate_benchmark(mini_city, config)
    assert len(items) == 130
    per_task = {}
    for item in items:
        per_task[item.task] = per_task.get(item.task, 0) + 1
    assert all(count == 10 for count in per_task.values())
    assert len(per_task) == 13
    assert len({item.item_id for item in items}) == 130
    scan_benchmark_invariants(items, mini_city, config.theta_attr)
    scan_benchmark_invariants(abstain_benchmark(items), mini_city, config.theta_attr)


def test_generate_benchmark_shortfall_names_task(mini_city):
    config = GenerationConfig.uniform(10, seed=1)
    config.counts[TaskKind.AOI_EXISTENCE] = 999
    with pytest.raises(GenerationError, match="AoiExistence"):
        generate_benchmark(mini_city, config)


def test_generate_benchmark_same_seed_byte_identical_file(tmp_path, mini_city):
    config = GenerationConfig.uniform(6, seed=9)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for path in (p1, p2):
        items = generate_benchmark(mini_city, config)
        save_benchmark(items, path, city=mini_city.city, variant="Standard", seed=9)
    assert p1.read_bytes() == p2.read_bytes()
    different = tmp_path / "c.jsonl"
    save_benchmark(
        generate_benchmark(mini_city, GenerationConfig.uniform(6, seed=10)),
        different,
        city=mini_city.city,
        variant="Standard",
        seed=10,
    )
    assert p1.read_bytes() != different.read_bytes()


def test_benchmark_file_round_trip(tmp_path, mini_city):
    items = generate_benchmark(mini_city, GenerationConfig.uniform(4, seed=2))
    path = tmp_path / "bench.jsonl"
    save_benchmark(items, path, city=mini_city.city, variant="Standard", seed=2)
    loaded, header = load_benchmark(path)
    assert loaded == items
    assert header["format"] == "geohalubench"
    assert header["version"] == 1


def test_fabricated_names_never_in_graph(mini_city):
    items = generate_benchmark(mini_city, GenerationConfig.uniform(10, seed=4))
    known = mini_city.normalized_names()
    for item in items:
        for label, text in item.options:
            if item.option_types[label] == "EntityFabrication":
                assert normalize_name(text) not in known
