"""Multiple-choice factuality benchmark generation from a knowledge graph.

Each item is a question with labeled options, exactly one of which is the
factual answer; every other option is typed by the kind of error a model
commits by choosing it. Generation is a pure function of (graph, config):
repeated runs produce byte-identical files.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import GeofactError
from .kg import GeoKnowledgeGraph, RelationKind, SamplingError, normalize_name, sample_pattern

BENCH_FORMAT = "geohalubench"
BENCH_VERSION = 1

NONE_OPTION = "None of the other options"
ABSTAIN_OPTION = "Cannot Determine"

FACTUAL = "Factual"
ABSTAIN = "Abstain"

LABELS = ("A", "B", "C", "D", "E")


class GenerationError(GeofactError):
    """Benchmark generation cannot satisfy the requested configuration."""


class FabricationParseError(GeofactError):
    """A model response carried no parseable fabricated names."""

    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response


class HallucinationType(str, Enum):
    ENTITY_FABRICATION = "EntityFabrication"
    ENTITY_OMISSION = "EntityOmission"
    RELATION_FABRICATION = "RelationFabrication"
    RELATION_OMISSION = "RelationOmission"
    ATTRIBUTE_CONFUSION = "AttributeConfusion"


class Category(str, Enum):
    ENTITY = "Entity"
    RELATION = "Relation"
    ATTRIBUTE = "Attribute"


class TaskKind(str, Enum):
    POI_EXISTENCE = "PoiExistence"
    AOI_EXISTENCE = "AoiExistence"
    ROAD_EXISTENCE = "RoadExistence"
    POI_LOCATE_AT_AOI = "PoiLocateAtAoi"
    POI_NEAR_POI = "PoiNearPoi"
    AOI_NEAR_AOI = "AoiNearAoi"
    AOI_CONNECT_TO_ROAD = "AoiConnectToRoad"
    ROAD_INTERSECT_ROAD = "RoadIntersectRoad"
    POI_ADDRESS = "PoiAddress"
    POI_CATEGORY = "PoiCategory"
    AOI_LAND_USE = "AoiLandUse"
    AOI_AREA = "AoiArea"
    ROAD_LENGTH = "RoadLength"

    @property
    def category(self) -> Category:
        if self in _EXISTENCE_TASKS:
            return Category.ENTITY
        if self in _RELATION_TASKS:
            return Category.RELATION
        return Category.ATTRIBUTE

    @property
    def tag(self) -> str:
        """Bracketed task label used in training-set files, e.g. [POI_Category]."""
        return "[%s]" % _TASK_TAGS[self]


_EXISTENCE_TASKS = (TaskKind.POI_EXISTENCE, TaskKind.AOI_EXISTENCE, TaskKind.ROAD_EXISTENCE)
_RELATION_TASKS = (
    TaskKind.POI_LOCATE_AT_AOI,
    TaskKind.POI_NEAR_POI,
    TaskKind.AOI_NEAR_AOI,
    TaskKind.AOI_CONNECT_TO_ROAD,
    TaskKind.ROAD_INTERSECT_ROAD,
)
_ATTRIBUTE_TASKS = (
    TaskKind.POI_ADDRESS,
    TaskKind.POI_CATEGORY,
    TaskKind.AOI_LAND_USE,
    TaskKind.AOI_AREA,
    TaskKind.ROAD_LENGTH,
)

_TASK_TAGS = {
    TaskKind.POI_EXISTENCE: "POI_Existence",
    TaskKind.AOI_EXISTENCE: "AOI_Existence",
    TaskKind.ROAD_EXISTENCE: "Road_Existence",
    TaskKind.POI_LOCATE_AT_AOI: "POI_LocateAt_AOI",
    TaskKind.POI_NEAR_POI: "POI_Near_POI",
    TaskKind.AOI_NEAR_AOI: "AOI_Near_AOI",
    TaskKind.AOI_CONNECT_TO_ROAD: "AOI_ConnectTo_Road",
    TaskKind.ROAD_INTERSECT_ROAD: "Road_Intersect_Road",
    TaskKind.POI_ADDRESS: "POI_Address",
    TaskKind.POI_CATEGORY: "POI_Category",
    TaskKind.AOI_LAND_USE: "AOI_LandUse",
    TaskKind.AOI_AREA: "AOI_Area",
    TaskKind.ROAD_LENGTH: "Road_Length",
}

TASK_TO_RELATION = {
    TaskKind.POI_LOCATE_AT_AOI: RelationKind.POI_LOCATE_AT_AOI,
    TaskKind.POI_NEAR_POI: RelationKind.POI_NEAR_POI,
    TaskKind.AOI_NEAR_AOI: RelationKind.AOI_NEAR_AOI,
    TaskKind.AOI_CONNECT_TO_ROAD: RelationKind.AOI_CONNECT_TO_ROAD,
    TaskKind.ROAD_INTERSECT_ROAD: RelationKind.ROAD_INTERSECT_ROAD,
}

_QUESTIONS = {
    TaskKind.POI_EXISTENCE: "Which of the following is a point of interest in {city}?",
    TaskKind.AOI_EXISTENCE: "Which of the following is an area of interest in {city}?",
    TaskKind.ROAD_EXISTENCE: "Which of the following is a road in {city}?",
    TaskKind.POI_LOCATE_AT_AOI: "Which area of interest is the POI {subject} located at in {city}?",
    TaskKind.POI_NEAR_POI: "Which of the following POIs is near the POI {subject} in {city}?",
    TaskKind.AOI_NEAR_AOI: "Which of the following AOIs is near the AOI {subject} in {city}?",
    TaskKind.AOI_CONNECT_TO_ROAD: "Which road does the AOI {subject} connect to in {city}?",
    TaskKind.ROAD_INTERSECT_ROAD: "Which road does the road {subject} intersect in {city}?",
    TaskKind.POI_ADDRESS: "What is the address of the POI {subject} in {city}?",
    TaskKind.POI_CATEGORY: "What is the category of the POI {subject} in {city}?",
    TaskKind.AOI_LAND_USE: "What is the type of land use of the AOI {subject} in {city}?",
    TaskKind.AOI_AREA: "What is the area of the AOI {subject} in {city}?",
    TaskKind.ROAD_LENGTH: "What is the length of the road {subject} in {city}?",
}

TASK_TO_ATTRIBUTE_PATTERN = {
    TaskKind.POI_ADDRESS: "attribute:poi_address",
    TaskKind.POI_CATEGORY: "attribute:poi_category",
    TaskKind.AOI_LAND_USE: "attribute:aoi_land_use",
    TaskKind.AOI_AREA: "attribute:aoi_area",
    TaskKind.ROAD_LENGTH: "attribute:road_length",
}

_EXISTENCE_ENTITY_CLASS = {
    TaskKind.POI_EXISTENCE: "poi",
    TaskKind.AOI_EXISTENCE: "aoi",
    TaskKind.ROAD_EXISTENCE: "road",
}


@dataclass(frozen=True)
class BenchmarkItem:
    item_id: str
    city: str
    task: TaskKind
    question: str
    options: tuple[tuple[str, str], ...]  # ordered (label, text)
    answer_label: str
    option_types: Mapping[str, str]  # label -> Factual | HallucinationType | Abstain
    variant: str  # "Standard" | "Abstain"
    fact_key: str  # canonical key of the factual fact; drives leakage checks

    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    def option_text(self, label: str) -> str:
        for lab, text in self.options:
            if lab == label:
                return text
        raise KeyError(label)


def fact_key_for(task: TaskKind, ids: Sequence[str]) -> str:
    """Canonical fact identity: the task kind plus the sorted participant ids.

    The task kind pins both the first-level category and, for attribute
    tasks, the attribute in question, so equality is a pure set-membership
    test for leakage checking.
    """
    return task.value + "|" + "|".join(sorted(ids))


# ---------------------------------------------------------------------------
# Fabrication

_POI_FIRST = (
    "Silver", "Golden", "Crimson", "Jade", "Willow", "Amber", "Ivory", "Velvet",
    "Misty", "Radiant", "Twilight", "Emerald", "Sapphire", "Copper", "Marble",
)
_POI_SECOND = (
    "Spoon", "Lantern", "Crane", "Orchid", "Dragonfly", "Pebble", "Cloud",
    "Meadow", "Lotus", "Sparrow", "Comet", "Fern",
)
_POI_TYPE = (
    "Cafe", "Bistro", "Gallery", "Bookstore", "Teahouse", "Pavilion", "Bakery",
    "Studio", "Arcade", "Emporium",
)

_AOI_FIRST = (
    "Silverleaf", "Goldcrest", "Ambermoor", "Larkspur", "Foxglove", "Thornfield",
    "Briarwood", "Greyhaven", "Moonvale", "Starfall", "Duskwind", "Elderglen",
)
_AOI_TYPE = (
    "Gardens", "Commons", "Quarter", "Heights", "Promenade", "Terrace",
    "Enclave", "Crossing", "Hollow", "Estate",
)

_ROAD_FIRST = (
    "Whispering", "Gilded", "Shimmering", "Wandering", "Quiet", "Hidden",
    "Sunken", "Crescent", "Mossy", "Winding", "Forgotten", "Silvered",
)
_ROAD_SECOND = (
    "Elm", "Falcon", "Heron", "Juniper", "Bramble", "Thistle", "Aspen",
    "Linden", "Magnolia", "Rowan",
)
_ROAD_TYPE = ("Road", "Street", "Avenue", "Lane", "Boulevard", "Alley", "Way", "Drive")

# Verbatim request templates for model-assisted fabrication; responses wrap
# each generated name in a pair of [Hallucination] markers.
HALLUCINATION_MARKER = "[Hallucination]"

_FABRICATION_PROMPT = (
    "In a purpose of research, we would like to use imaginary/fictional/mocked "
    "information to hallucinate the name of this {kind_display}.\n"
    "Make sure the hallucinated names are natural and realistic as much as possible. "
    "They should not be real names.\n"
    "Please provide five hallucinated names of this {kind_display} given the example existing names.\n"
    "Example existing names: {name_list}\n"
    "Please follow the following format, use [Hallucination] to wrap the hallucinated (generated) names:\n"
    "[Hallucination] {kind_display} Name 1 [Hallucination]\n"
    "[Hallucination] {kind_display} Name 2 [Hallucination]\n"
    "[Hallucination] {kind_display} Name 3 [Hallucination]\n"
    "[Hallucination] {kind_display} Name 4 [Hallucination]\n"
    "[Hallucination] {kind_display} Name 5 [Hallucination]"
)

_KIND_DISPLAY = {"poi": "POI", "aoi": "AOI", "road": "road"}


def fabrication_prompt(kind: str, real_examples: Sequence[str]) -> str:
    """Render the fabrication request for one entity kind."""
    if kind not in _KIND_DISPLAY:
        raise GenerationError(f"unknown entity kind {kind!r}")
    return _FABRICATION_PROMPT.format(
        kind_display=_KIND_DISPLAY[kind],
        name_list=json.dumps(list(real_examples), ensure_ascii=False),
    )


def parse_fabrications(raw: str) -> list[str]:
    """Extract names wrapped between paired [Hallucination] markers."""
    parts = raw.split(HALLUCINATION_MARKER)
    if len(parts) < 3:
        raise FabricationParseError("no paired fabrication markers in response", raw)
    names = []
    for i in range(1, len(parts) - 1, 2):
        name = parts[i].strip()
        if name:
            names.append(name)
    if not names:
        raise FabricationParseError("fabrication markers wrapped no names", raw)
    return names


def _template_names(kind: str, n: int, rng: random.Random) -> list[str]:
    if kind == "poi":
        parts = (_POI_FIRST, _POI_SECOND, _POI_TYPE)
    elif kind == "aoi":
        parts = (_AOI_FIRST, _AOI_TYPE)
    elif kind == "road":
        parts = (_ROAD_FIRST, _ROAD_SECOND, _ROAD_TYPE)
    else:
        raise GenerationError(f"unknown entity kind {kind!r}")
    total = 1
    for p in parts:
        total *= len(p)
    if n > total:
        raise GenerationError(f"template lexicon for {kind!r} has only {total} combinations")
    picks = rng.sample(range(total), n)
    names = []
    for index in picks:
        words = []
        for p in reversed(parts):
            index, slot = divmod(index, len(p))
            words.append(p[slot])
        names.append(" ".join(reversed(words)))
    return names


def fabricate_entity_names(
    kind: str,
    real_examples: Sequence[str],
    n: int,
    mode: str = "template",
    rng_seed: int | str = 0,
    endpoint=None,
) -> list[str]:
    """Produce plausible but non-existent entity names.

    Template mode composes names deterministically from a curated lexicon.
    LLM-assisted mode sends the fabrication prompt to a chat endpoint and
    parses the marker-wrapped names out of the response.
    """
    if not real_examples:
        raise GenerationError("fabrication needs at least one real example name")
    if mode == "template":
        rng = random.Random(f"fabricate|{rng_seed}|{kind}")
        return _template_names(kind, n, rng)
    if mode == "llm":
        if endpoint is None:
            raise GenerationError("llm fabrication mode requires a chat endpoint")
        prompt = fabrication_prompt(kind, real_examples)
        raw = endpoint.complete([{"role": "user", "content": prompt}])
        names = parse_fabrications(raw)
        return names[:n] if 0 <= n < len(names) else names
    raise GenerationError(f"unknown fabricator mode {mode!r}")


def filter_against_kg(candidates: Sequence[str], graph: GeoKnowledgeGraph) -> list[str]:
    """Drop candidates whose normalized name already exists in the graph."""
    known = graph.normalized_names()
    return [c for c in candidates if normalize_name(c) not in known]


def fabricate_relation(
    graph: GeoKnowledgeGraph, true_fact: tuple[str, str, str], rng_seed: int | str
) -> str:
    """Pick a real entity of the tail class that is NOT related to the head.

    Returns the distractor entity id; deterministic per seed.
    """
    head_id, kind_value, _ = true_fact
    kind = RelationKind(kind_value)
    pool = {"poi": graph.pois, "aoi": graph.aois, "road": graph.roads}[kind.tail_class]
    eligible = [
        tid
        for tid in sorted(pool)
        if tid != head_id and not graph.has_edge(head_id, kind, tid)
    ]
    if not eligible:
        raise GenerationError(
            f"no eligible relation distractor: every {kind.tail_class} relates to {head_id!r} by {kind.value}"
        )
    rng = random.Random(f"relation|{rng_seed}|{head_id}|{kind.value}")
    return rng.choice(eligible)


def _category_top_level(path: str) -> str:
    return path.split(">")[0].strip()


def confuse_attribute(
    true_value,
    attr: TaskKind,
    theta_attr: float,
    graph: GeoKnowledgeGraph,
    rng_seed: int | str,
):
    """Produce a wrong attribute value that is clearly not close to the truth.

    Numeric attributes return v > 0 with |v - true| / true >= theta_attr.
    Categorical attributes return an observed value from a different
    top-level class; addresses return another entity's address.
    """
    rng = random.Random(f"confuse|{rng_seed}|{attr.value}")
    if attr in (TaskKind.AOI_AREA, TaskKind.ROAD_LENGTH):
        true = float(true_value)
        if true <= 0:
            raise GenerationError(f"true numeric attribute must be positive, got {true}")
        up = rng.random() < 0.5
        if theta_attr >= 1.0:
            up = True  # shrinking by >= 100% cannot stay positive
        if up:
            factor = 1.0 + theta_attr * (1.0 + rng.random())
        else:
            hi = max(0.0, 1.0 - theta_attr)
            factor = hi * rng.random()
            if true * factor <= 0 or factor == 0.0:
                factor = 1.0 + theta_attr * (1.0 + rng.random())
        return true * factor
    if attr is TaskKind.POI_CATEGORY:
        true_top = _category_top_level(str(true_value))
        vocab = sorted(
            {p.category for p in graph.pois.values() if p.category.strip()}
        )
        eligible = [c for c in vocab if _category_top_level(c) != true_top]
        if not eligible:
            raise GenerationError("category vocabulary has a single top-level class")
        return rng.choice(eligible)
    if attr is TaskKind.AOI_LAND_USE:
        vocab = sorted({a.land_use for a in graph.aois.values()})
        eligible = [v for v in vocab if v != true_value]
        if not eligible:
            raise GenerationError("land-use vocabulary has a single value")
        return rng.choice(eligible)
    if attr is TaskKind.POI_ADDRESS:
        true_norm = normalize_name(str(true_value))
        vocab = sorted(
            {p.address for p in graph.pois.values() if p.address.strip()}
        )
        eligible = [a for a in vocab if normalize_name(a) != true_norm]
        if not eligible:
            raise GenerationError("address vocabulary has a single value")
        return rng.choice(eligible)
    raise GenerationError(f"{attr.value} is not an attribute task")


def format_attribute(attr: TaskKind, value) -> str:
    if attr is TaskKind.AOI_AREA:
        return f"{round(float(value))} square meters"
    if attr is TaskKind.ROAD_LENGTH:
        return f"{round(float(value))} meters"
    return str(value)


_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def parse_numeric_option(text: str) -> float:
    """Read the number back out of a formatted numeric option."""
    m = _NUMBER.search(text)
    if m is None:
        raise GenerationError(f"option {text!r} carries no number")
    return float(m.group())


# ---------------------------------------------------------------------------
# Item assembly


def assemble_item(
    task: TaskKind,
    true_fact: Mapping,
    distractors: Sequence[str],
    rng_seed: int | str,
    *,
    item_id: str,
    city: str,
) -> BenchmarkItem:
    """Turn one factual fact and its typed distractors into a labeled item.

    ``true_fact`` carries ``factual_text``, ``fact_key``, and for non-existence
    tasks a ``subject`` name used in the question. Existence and relation
    tasks get a void option typed as the omission hallucination; attribute
    tasks use exactly two confused values.
    """
    factual_text = true_fact["factual_text"]
    category = task.category
    if category is Category.ENTITY:
        if len(distractors) != 1:
            raise GenerationError(f"{task.value} needs exactly 1 fabricated name")
        typed = [
            (factual_text, FACTUAL),
            (distractors[0], HallucinationType.ENTITY_FABRICATION.value),
            (NONE_OPTION, HallucinationType.ENTITY_OMISSION.value),
        ]
    elif category is Category.RELATION:
        if len(distractors) != 1:
            raise GenerationError(f"{task.value} needs exactly 1 fabricated tail")
        typed = [
            (factual_text, FACTUAL),
            (distractors[0], HallucinationType.RELATION_FABRICATION.value),
            (NONE_OPTION, HallucinationType.RELATION_OMISSION.value),
        ]
    else:
        if len(distractors) != 2:
            raise GenerationError(f"{task.value} needs exactly 2 confused values")
        typed = [
            (factual_text, FACTUAL),
            (distractors[0], HallucinationType.ATTRIBUTE_CONFUSION.value),
            (distractors[1], HallucinationType.ATTRIBUTE_CONFUSION.value),
        ]
    texts = [t for t, _ in typed]
    if len(set(texts)) != len(texts):
        raise GenerationError(f"duplicate option text in {item_id}: {texts}")

    rng = random.Random(f"assemble|{rng_seed}|{item_id}")
    rng.shuffle(typed)
    options = tuple((LABELS[i], text) for i, (text, _) in enumerate(typed))
    option_types = {LABELS[i]: type_ for i, (_, type_) in enumerate(typed)}
    answer_label = next(lab for lab, t in option_types.items() if t == FACTUAL)

    question = _QUESTIONS[task].format(city=city, subject=true_fact.get("subject", ""))
    return BenchmarkItem(
        item_id=item_id,
        city=city,
        task=task,
        question=question,
        options=options,
        answer_label=answer_label,
        option_types=option_types,
        variant="Standard",
        fact_key=true_fact["fact_key"],
    )


def make_abstain_variant(item: BenchmarkItem) -> BenchmarkItem:
    """Append the abstain option; the answer key is unchanged."""
    if item.variant == "Abstain":
        raise GenerationError(f"item {item.item_id} already has an abstain option")
    next_label = LABELS[len(item.options)]
    options = item.options + ((next_label, ABSTAIN_OPTION),)
    option_types = dict(item.option_types)
    option_types[next_label] = ABSTAIN
    return replace(item, options=options, option_types=option_types, variant="Abstain")


def strip_abstain_option(item: BenchmarkItem) -> BenchmarkItem:
    """Inverse of :func:`make_abstain_variant`."""
    if item.variant != "Abstain":
        raise GenerationError(f"item {item.item_id} has no abstain option")
    option_types = {k: v for k, v in item.option_types.items() if v != ABSTAIN}
    return replace(
        item, options=item.options[:-1], option_types=option_types, variant="Standard"
    )


# ---------------------------------------------------------------------------
# Full benchmark generation


def default_counts() -> dict[TaskKind, int]:
    counts: dict[TaskKind, int] = {}
    for task in _EXISTENCE_TASKS:
        counts[task] = 200
    for task in _RELATION_TASKS:
        counts[task] = 250
    for task in _ATTRIBUTE_TASKS:
        counts[task] = 50
    return counts


@dataclass
class GenerationConfig:
    seed: int = 0
    counts: dict[TaskKind, int] = field(default_factory=default_counts)
    theta_attr: float = 0.5
    fabricator: str = "template"  # "template" | "llm"
    llm_endpoint: object | None = None

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.counts.values()):
            raise GenerationError("per-task counts must be >= 0")
        if self.theta_attr <= 0:
            raise GenerationError("theta_attr must be > 0")

    @classmethod
    def uniform(cls, per_task: int, seed: int = 0, **kwargs) -> "GenerationConfig":
        return cls(seed=seed, counts={task: per_task for task in TaskKind}, **kwargs)


def _slug(city: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", city.casefold()).strip("-") or "city"


def _fabricated_name(
    graph: GeoKnowledgeGraph, kind: str, config: GenerationConfig, seed: str
) -> str:
    examples = {
        "poi": [p.name for p in graph.pois.values()],
        "aoi": [a.name for a in graph.aois.values()],
        "road": [r.name for r in graph.roads.values()],
    }[kind][:10]
    for attempt in range(8):
        candidates = fabricate_entity_names(
            kind,
            examples,
            n=5,
            mode=config.fabricator,
            rng_seed=f"{seed}|{attempt}",
            endpoint=config.llm_endpoint,
        )
        survivors = filter_against_kg(candidates, graph)
        if survivors:
            return survivors[0]
    raise GenerationError(f"could not fabricate a novel {kind} name after 8 rounds")


def _existence_items(
    graph: GeoKnowledgeGraph, task: TaskKind, count: int, config: GenerationConfig
) -> list[BenchmarkItem]:
    kind = _EXISTENCE_ENTITY_CLASS[task]
    facts = _sample_for_task(graph, task, f"entity:{kind}", count, config.seed)
    items = []
    for i, (_, eid) in enumerate(facts):
        seed = f"{config.seed}|{task.value}|{i}"
        fabricated = _fabricated_name(graph, kind, config, seed)
        items.append(
            assemble_item(
                task,
                {
                    "factual_text": graph.entity_name(eid),
                    "fact_key": fact_key_for(task, [eid]),
                },
                [fabricated],
                seed,
                item_id=_item_id(graph.city, task, i),
                city=graph.city,
            )
        )
    return items


def _relation_items(
    graph: GeoKnowledgeGraph, task: TaskKind, count: int, config: GenerationConfig
) -> list[BenchmarkItem]:
    kind = TASK_TO_RELATION[task]
    facts = _sample_for_task(graph, task, f"relation:{kind.value}", count, config.seed)
    items = []
    for i, fact in enumerate(facts):
        head_id, _, tail_id = fact
        seed = f"{config.seed}|{task.value}|{i}"
        distractor_id = fabricate_relation(graph, fact, seed)
        items.append(
            assemble_item(
                task,
                {
                    "factual_text": graph.entity_name(tail_id),
                    "subject": graph.entity_name(head_id),
                    "fact_key": fact_key_for(task, [head_id, tail_id]),
                },
                [graph.entity_name(distractor_id)],
                seed,
                item_id=_item_id(graph.city, task, i),
                city=graph.city,
            )
        )
    return items


def _attribute_items(
    graph: GeoKnowledgeGraph, task: TaskKind, count: int, config: GenerationConfig
) -> list[BenchmarkItem]:
    pattern = TASK_TO_ATTRIBUTE_PATTERN[task]
    facts = _sample_for_task(graph, task, pattern, count, config.seed)
    numeric = task in (TaskKind.AOI_AREA, TaskKind.ROAD_LENGTH)
    items = []
    for i, (eid, _, value) in enumerate(facts):
        seed = f"{config.seed}|{task.value}|{i}"
        true_text = format_attribute(task, value)
        confused: list[str] = []
        attempt = 0
        while len(confused) < 2:
            if attempt > 50:
                raise GenerationError(
                    f"could not draw two distinct confusions for task {task.value}"
                )
            wrong = confuse_attribute(value, task, config.theta_attr, graph, f"{seed}|{attempt}")
            text = format_attribute(task, wrong)
            attempt += 1
            if text == true_text or text in confused:
                continue
            if numeric:
                shown = parse_numeric_option(text)
                if shown <= 0 or not _violates_threshold(
                    shown, parse_numeric_option(true_text), config.theta_attr
                ):
                    continue  # rounding pulled the value inside the band or to zero
            confused.append(text)
        items.append(
            assemble_item(
                task,
                {
                    "factual_text": true_text,
                    "subject": graph.entity_name(eid),
                    "fact_key": fact_key_for(task, [eid]),
                },
                confused,
                seed,
                item_id=_item_id(graph.city, task, i),
                city=graph.city,
            )
        )
    return items


def _violates_threshold(value: float, true: float, theta: float) -> bool:
    return true > 0 and abs(value - true) / true >= theta


def _item_id(city: str, task: TaskKind, index: int) -> str:
    return f"{_slug(city)}-{task.value}-{index:04d}"


def _sample_for_task(
    graph: GeoKnowledgeGraph, task: TaskKind, pattern: str, count: int, seed: int
) -> list[tuple]:
    try:
        return sample_pattern(graph, pattern, count, f"{seed}|{task.value}")
    except SamplingError as exc:
        raise GenerationError(f"task {task.value}: {exc}") from exc


def generate_benchmark(
    graph: GeoKnowledgeGraph, config: GenerationConfig
) -> list[BenchmarkItem]:
    """Generate the full multiple-choice benchmark, deterministically."""
    items: list[BenchmarkItem] = []
    for task in TaskKind:
        count = config.counts.get(task, 0)
        if count == 0:
            continue
        if task.category is Category.ENTITY:
            items.extend(_existence_items(graph, task, count, config))
        elif task.category is Category.RELATION:
            items.extend(_relation_items(graph, task, count, config))
        else:
            items.extend(_attribute_items(graph, task, count, config))
    return items


def abstain_benchmark(items: Sequence[BenchmarkItem]) -> list[BenchmarkItem]:
    return [make_abstain_variant(item) for item in items]


# ---------------------------------------------------------------------------
# Persistence


def _item_to_obj(item: BenchmarkItem) -> dict:
    return {
        "item_id": item.item_id,
        "city": item.city,
        "task": item.task.value,
        "question": item.question,
        "options": [[lab, text] for lab, text in item.options],
        "answer_label": item.answer_label,
        "option_types": dict(item.option_types),
        "variant": item.variant,
        "fact_key": item.fact_key,
    }


def _item_from_obj(obj: dict) -> BenchmarkItem:
    return BenchmarkItem(
        item_id=obj["item_id"],
        city=obj["city"],
        task=TaskKind(obj["task"]),
        question=obj["question"],
        options=tuple((lab, text) for lab, text in obj["options"]),
        answer_label=obj["answer_label"],
        option_types=dict(obj["option_types"]),
        variant=obj["variant"],
        fact_key=obj["fact_key"],
    )


def save_benchmark(
    items: Sequence[BenchmarkItem], path: str | Path, *, city: str, variant: str, seed: int
) -> None:
    header = {
        "format": BENCH_FORMAT,
        "version": BENCH_VERSION,
        "city": city,
        "variant": variant,
        "seed": seed,
        "items": len(items),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for item in items:
            fh.write(json.dumps(_item_to_obj(item), sort_keys=True) + "\n")


def load_benchmark(path: str | Path) -> tuple[list[BenchmarkItem], dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise GenerationError(f"benchmark file {path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != BENCH_FORMAT:
        raise GenerationError(f"not a {BENCH_FORMAT} file: {path}")
    if header.get("version") != BENCH_VERSION:
        raise GenerationError(f"unsupported benchmark version {header.get('version')!r}")
    items = [_item_from_obj(json.loads(line)) for line in lines[1:] if line.strip()]
    return items, header
