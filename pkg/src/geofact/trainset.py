"""Labeled fine-tuning dataset for factuality alignment.

Facts are drawn from the knowledge graph, rendered into natural-language
narratives by per-subtask templates, and labeled desirable (states the
graph-true fact) or undesirable (states a fabricated or confused one).
Every sample carries a canonical fact key so leakage against a benchmark
is a set-membership test.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .benchmark import (
    BenchmarkItem,
    Category,
    GenerationError,
    TaskKind,
    TASK_TO_ATTRIBUTE_PATTERN,
    TASK_TO_RELATION,
    _EXISTENCE_ENTITY_CLASS,
    confuse_attribute,
    fabricate_entity_names,
    fact_key_for,
    filter_against_kg,
    format_attribute,
)
from .errors import GeofactError
from .kg import GeoKnowledgeGraph, SamplingError, normalize_name, _pattern_population

DESIRABLE = "Desirable"
UNDESIRABLE = "Undesirable"


class AlignsetError(GeofactError):
    """Dataset generation cannot satisfy the requested configuration."""


@dataclass(frozen=True)
class TrainingSample:
    sample_id: str
    task_tag: str  # Entity | Relation | Attribute
    subtask: TaskKind
    prompt: str
    completion: str
    label: str  # Desirable | Undesirable
    fact_key: str


@dataclass
class AlignsetConfig:
    seed: int = 0
    counts: dict[str, int] = field(
        default_factory=lambda: {"entity": 1500, "relation": 2000, "attribute": 2000}
    )
    paraphrase: bool = True
    negative_ratio: float = 0.5
    theta_attr: float = 0.5

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.counts.values()):
            raise AlignsetError("counts must be >= 0")
        if not 0.0 <= self.negative_ratio <= 1.0:
            raise AlignsetError("negative_ratio must be in [0, 1]")


_EXISTENCE_NOUN = {
    TaskKind.POI_EXISTENCE: "point of interest",
    TaskKind.AOI_EXISTENCE: "area of interest",
    TaskKind.ROAD_EXISTENCE: "road",
}

# >= 3 prompt variants per subtask; paraphrase mode rotates through them
_PROMPTS: dict[TaskKind, tuple[str, ...]] = {
    TaskKind.POI_EXISTENCE: (
        "Is there a point of interest named {name} in {city}?",
        "Does {city} have a point of interest called {name}?",
        "Can you confirm whether {name} is a point of interest in {city}?",
    ),
    TaskKind.AOI_EXISTENCE: (
        "Is there an area of interest named {name} in {city}?",
        "Does {city} have an area of interest called {name}?",
        "Can you confirm whether {name} is an area of interest in {city}?",
    ),
    TaskKind.ROAD_EXISTENCE: (
        "Is there a road named {name} in {city}?",
        "Does {city} have a road called {name}?",
        "Can you confirm whether {name} is a road in {city}?",
    ),
    TaskKind.POI_LOCATE_AT_AOI: (
        "Which area of interest is the POI {name} located at in {city}?",
        "In {city}, what AOI contains the POI {name}?",
        "Name the area of interest where the POI {name} in {city} is located.",
    ),
    TaskKind.POI_NEAR_POI: (
        "Which POI is near the POI {name} in {city}?",
        "Name a point of interest close to {name} in {city}.",
        "In {city}, what POI can be found near {name}?",
    ),
    TaskKind.AOI_NEAR_AOI: (
        "Which AOI is near the AOI {name} in {city}?",
        "Name an area of interest close to {name} in {city}.",
        "In {city}, what AOI can be found near {name}?",
    ),
    TaskKind.AOI_CONNECT_TO_ROAD: (
        "Which road does the AOI {name} connect to in {city}?",
        "Name a road connected to the AOI {name} in {city}.",
        "In {city}, what road links up with the AOI {name}?",
    ),
    TaskKind.ROAD_INTERSECT_ROAD: (
        "Which road does the road {name} intersect in {city}?",
        "Name a road crossing {name} in {city}.",
        "In {city}, what road does {name} intersect?",
    ),
    TaskKind.POI_ADDRESS: (
        "What is the address of the POI {name} in {city}?",
        "Where is the POI {name} in {city} located, by address?",
        "State the address of the POI {name} in {city}.",
    ),
    TaskKind.POI_CATEGORY: (
        "What category does the following POI (Point of Interest) in {city} belong to: {name}?",
        "What is the category of the POI {name} in {city}?",
        "Which category best describes the POI {name} in {city}?",
    ),
    TaskKind.AOI_LAND_USE: (
        "What is the type of land use of the AOI {name} in {city}?",
        "What land use does the AOI {name} in {city} have?",
        "Which land-use type applies to the AOI {name} in {city}?",
    ),
    TaskKind.AOI_AREA: (
        "What is the area of the AOI {name} in {city}?",
        "How large is the AOI {name} in {city}?",
        "State the area of the AOI {name} in {city}.",
    ),
    TaskKind.ROAD_LENGTH: (
        "What is the length of the road {name} in {city}?",
        "How long is the road {name} in {city}?",
        "State the length of the road {name} in {city}.",
    ),
}

_CATEGORY_SUBTASKS = {
    "entity": (TaskKind.POI_EXISTENCE, TaskKind.AOI_EXISTENCE, TaskKind.ROAD_EXISTENCE),
    "relation": (
        TaskKind.POI_LOCATE_AT_AOI,
        TaskKind.POI_NEAR_POI,
        TaskKind.AOI_NEAR_AOI,
        TaskKind.AOI_CONNECT_TO_ROAD,
        TaskKind.ROAD_INTERSECT_ROAD,
    ),
    "attribute": (
        TaskKind.POI_ADDRESS,
        TaskKind.POI_CATEGORY,
        TaskKind.AOI_LAND_USE,
        TaskKind.AOI_AREA,
        TaskKind.ROAD_LENGTH,
    ),
}


def _existence_completion(subtask: TaskKind, name: str, city: str) -> str:
    return f"Yes, {name} is a {_EXISTENCE_NOUN[subtask]} in {city}."


def _prompt_for(subtask: TaskKind, variant: int, paraphrase: bool, name: str, city: str) -> str:
    templates = _PROMPTS[subtask]
    idx = variant % len(templates) if paraphrase else 0
    return templates[idx].format(name=name, city=city)


def _split_evenly(total: int, buckets: int) -> list[int]:
    base, rem = divmod(total, buckets)
    return [base + (1 if i < rem else 0) for i in range(buckets)]


def benchmark_fact_keys(benchmark: Sequence[BenchmarkItem]) -> set[str]:
    return {item.fact_key for item in benchmark}


def _subtask_pattern(subtask: TaskKind) -> str:
    if subtask.category is Category.ENTITY:
        return f"entity:{_EXISTENCE_ENTITY_CLASS[subtask]}"
    if subtask.category is Category.RELATION:
        return f"relation:{TASK_TO_RELATION[subtask].value}"
    return TASK_TO_ATTRIBUTE_PATTERN[subtask]


def _fact_ids(subtask: TaskKind, fact: tuple) -> list[str]:
    if subtask.category is Category.ENTITY:
        return [fact[1]]
    if subtask.category is Category.RELATION:
        return [fact[0], fact[2]]
    return [fact[0]]


def _generate_subtask(
    graph: GeoKnowledgeGraph,
    subtask: TaskKind,
    target: int,
    config: AlignsetConfig,
    bench_keys: set[str],
) -> list[TrainingSample]:
    if target == 0:
        return []
    rng = random.Random(f"alignset|{config.seed}|{subtask.value}")
    population = _pattern_population(graph, _subtask_pattern(subtask))
    rng.shuffle(population)
    eligible = [
        fact
        for fact in population
        if fact_key_for(subtask, _fact_ids(subtask, fact)) not in bench_keys
    ]
    n_undesirable = round(target * config.negative_ratio)
    n_desirable = target - n_undesirable
    if len(eligible) < max(n_desirable, n_undesirable):
        raise AlignsetError(
            f"subtask {subtask.value}: population {len(eligible)} after leakage filtering "
            f"cannot cover {target} samples"
        )

    city = graph.city
    samples: list[TrainingSample] = []

    def desirable_sample(i: int, fact: tuple) -> TrainingSample:
        key = fact_key_for(subtask, _fact_ids(subtask, fact))
        if subtask.category is Category.ENTITY:
            name = graph.entity_name(fact[1])
            prompt = _prompt_for(subtask, i, config.paraphrase, name, city)
            completion = _existence_completion(subtask, name, city)
        elif subtask.category is Category.RELATION:
            head, tail = graph.entity_name(fact[0]), graph.entity_name(fact[2])
            prompt = _prompt_for(subtask, i, config.paraphrase, head, city)
            completion = tail
        else:
            name = graph.entity_name(fact[0])
            prompt = _prompt_for(subtask, i, config.paraphrase, name, city)
            completion = format_attribute(subtask, fact[2])
        return TrainingSample(
            sample_id=f"{subtask.value}-pos-{i:05d}",
            task_tag=subtask.category.value,
            subtask=subtask,
            prompt=prompt,
            completion=completion,
            label=DESIRABLE,
            fact_key=key,
        )

    def undesirable_sample(i: int, fact: tuple) -> TrainingSample:
        seed = f"alignset|{config.seed}|{subtask.value}|{i}"
        if subtask.category is Category.ENTITY:
            kind = _EXISTENCE_ENTITY_CLASS[subtask]
            examples = [graph.entity_name(fact[1])]
            fabricated = None
            for attempt in range(8):
                names = fabricate_entity_names(kind, examples, 5, rng_seed=f"{seed}|{attempt}")
                survivors = filter_against_kg(names, graph)
                if survivors:
                    fabricated = survivors[0]
                    break
            if fabricated is None:
                raise AlignsetError(f"could not fabricate a novel {kind} name")
            prompt = _prompt_for(subtask, i, config.paraphrase, fabricated, city)
            completion = _existence_completion(subtask, fabricated, city)
            key = fact_key_for(subtask, [normalize_name(fabricated)])
        elif subtask.category is Category.RELATION:
            from .benchmark import fabricate_relation

            head = graph.entity_name(fact[0])
            wrong_tail_id = fabricate_relation(graph, fact, seed)
            prompt = _prompt_for(subtask, i, config.paraphrase, head, city)
            completion = graph.entity_name(wrong_tail_id)
            key = fact_key_for(subtask, [fact[0], wrong_tail_id])
        else:
            name = graph.entity_name(fact[0])
            wrong = confuse_attribute(fact[2], subtask, config.theta_attr, graph, seed)
            prompt = _prompt_for(subtask, i, config.paraphrase, name, city)
            completion = format_attribute(subtask, wrong)
            if completion == format_attribute(subtask, fact[2]):
                wrong = confuse_attribute(fact[2], subtask, config.theta_attr, graph, seed + "|retry")
                completion = format_attribute(subtask, wrong)
            key = fact_key_for(subtask, _fact_ids(subtask, fact))
        return TrainingSample(
            sample_id=f"{subtask.value}-neg-{i:05d}",
            task_tag=subtask.category.value,
            subtask=subtask,
            prompt=prompt,
            completion=completion,
            label=UNDESIRABLE,
            fact_key=key,
        )

    for i in range(n_desirable):
        samples.append(desirable_sample(i, eligible[i]))
    # undesirable samples reuse the leading facts so relation/attribute
    # negatives share a prompt with a positive (pairable for diagnostics)
    for i in range(n_undesirable):
        samples.append(undesirable_sample(i, eligible[i % len(eligible)]))
    return samples


def generate_alignment_dataset(
    graph: GeoKnowledgeGraph,
    benchmark: Sequence[BenchmarkItem],
    config: AlignsetConfig,
) -> list[TrainingSample]:
    """Generate the labeled alignment dataset, leak-free against a benchmark."""
    bench_keys = benchmark_fact_keys(benchmark)
    samples: list[TrainingSample] = []
    for kind in ("entity", "relation", "attribute"):
        total = config.counts.get(kind, 0)
        subtasks = _CATEGORY_SUBTASKS[kind]
        for subtask, target in zip(subtasks, _split_evenly(total, len(subtasks))):
            try:
                samples.extend(_generate_subtask(graph, subtask, target, config, bench_keys))
            except (SamplingError, GenerationError) as exc:
                raise AlignsetError(f"subtask {subtask.value}: {exc}") from exc
    return samples


@dataclass(frozen=True)
class LeakageReport:
    clean: bool
    collisions: tuple[tuple[str, str], ...]  # (sample_id, item_id)


def leakage_check(
    samples: Sequence[TrainingSample], benchmark: Sequence[BenchmarkItem]
) -> LeakageReport:
    """A collision is a sample whose fact key equals an item's factual key."""
    by_key: dict[str, list[str]] = {}
    for item in benchmark:
        by_key.setdefault(item.fact_key, []).append(item.item_id)
    collisions = []
    for sample in samples:
        for item_id in by_key.get(sample.fact_key, ()):
            collisions.append((sample.sample_id, item_id))
    return LeakageReport(clean=not collisions, collisions=tuple(collisions))


# ---------------------------------------------------------------------------
# Persistence: line-delimited sample objects


def save_dataset(samples: Sequence[TrainingSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "sample_id": s.sample_id,
                        "task": s.subtask.tag,
                        "task_tag": s.task_tag,
                        "subtask": s.subtask.value,
                        "prompt": s.prompt,
                        "completion": s.completion,
                        "label": s.label,
                        "fact_key": s.fact_key,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_dataset(path: str | Path) -> list[TrainingSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                samples.append(
                    TrainingSample(
                        sample_id=obj["sample_id"],
                        task_tag=obj["task_tag"],
                        subtask=TaskKind(obj["subtask"]),
                        prompt=obj["prompt"],
                        completion=obj["completion"],
                        label=obj["label"],
                        fact_key=obj["fact_key"],
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise AlignsetError(f"{path}:{line_no}: bad sample line: {exc}") from exc
    return samples
