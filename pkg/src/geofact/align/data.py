"""Tokenization and dataset plumbing for the toy training loop.

Includes a deterministic whitespace tokenizer, converters from labeled
training samples to token sequences, prompt-grouped pairing utilities,
and a synthetic separable dataset generator whose desirable and
undesirable completions come from overlapping but statistically distinct
token distributions, so a small n-gram policy can learn to tell them
apart on held-out facts.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import GeofactError
from ..trainset import DESIRABLE, TrainingSample, UNDESIRABLE
from ..benchmark import TaskKind
from .losses import FactPair, PreferencePair, SequenceSample


class TokenizerError(GeofactError):
    pass


class WhitespaceTokenizer:
    """Splits on whitespace; vocabulary is the sorted set of observed tokens."""

    def __init__(self, vocab: Sequence[str]):
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise TokenizerError("vocabulary has duplicate tokens")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "WhitespaceTokenizer":
        seen = set()
        for text in texts:
            seen.update(text.split())
        if not seen:
            raise TokenizerError("no tokens in input texts")
        return cls(sorted(seen))

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "WhitespaceTokenizer":
        return cls.from_texts([s.prompt for s in samples] + [s.completion for s in samples])

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self.index[tok] for tok in text.split())
        except KeyError as exc:
            raise TokenizerError(f"token {exc.args[0]!r} not in vocabulary") from exc

    def decode(self, tokens: Sequence[int]) -> str:
        return " ".join(self.vocab[t] for t in tokens)

    def __len__(self) -> int:
        return len(self.vocab)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"vocab": self.vocab}) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "WhitespaceTokenizer":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(payload["vocab"])


def samples_to_sequences(
    samples: Sequence[TrainingSample], tokenizer: WhitespaceTokenizer
) -> list[SequenceSample]:
    out = []
    for s in samples:
        out.append(
            SequenceSample(
                prompt=tokenizer.encode(s.prompt),
                completion=tokenizer.encode(s.completion),
                desirable=s.label == DESIRABLE,
                task_tag=s.task_tag,
            )
        )
    return out


def _group_by_prompt(samples: Sequence[TrainingSample]):
    groups: dict[str, tuple[list[TrainingSample], list[TrainingSample]]] = {}
    order: list[str] = []
    for s in samples:
        if s.prompt not in groups:
            groups[s.prompt] = ([], [])
            order.append(s.prompt)
        groups[s.prompt][0 if s.label == DESIRABLE else 1].append(s)
    return groups, order


def fact_pairs_from_samples(
    samples: Sequence[TrainingSample], tokenizer: WhitespaceTokenizer
) -> list[FactPair]:
    """Pair desirable with undesirable completions sharing a prompt.

    Samples with no counterpart on the same prompt (e.g. fabricated-entity
    negatives, whose prompt names the fabricated entity) are skipped.
    """
    groups, order = _group_by_prompt(samples)
    pairs = []
    for prompt in order:
        desirables, undesirables = groups[prompt]
        for pos, neg in zip(desirables, undesirables):
            pairs.append(
                FactPair(
                    prompt=tokenizer.encode(prompt),
                    factual=tokenizer.encode(pos.completion),
                    hallucinated=tokenizer.encode(neg.completion),
                    category=pos.task_tag,
                )
            )
    return pairs


def preference_pairs_from_samples(
    samples: Sequence[TrainingSample], tokenizer: WhitespaceTokenizer
) -> list[PreferencePair]:
    """(chosen, rejected) pairs on shared prompts; a small test utility."""
    pairs = []
    for fp in fact_pairs_from_samples(samples, tokenizer):
        pairs.append(PreferencePair(prompt=fp.prompt, chosen=fp.factual, rejected=fp.hallucinated))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic separable dataset

_REAL_FIRST = ("north", "south", "east", "west", "old", "new", "upper", "lower")
_REAL_SECOND = ("harbor", "garden", "market", "square", "temple", "station", "bridge", "tower")
_FAKE_FIRST = ("silver", "crystal", "velvet", "amber", "echo", "misty", "gilded", "shadow")
_FAKE_SECOND = ("spoon", "lantern", "orchid", "crane", "comet", "fern", "pebble", "cloud")

_DISTRICTS = (
    "riverside", "hillcrest", "lakeview", "midtown", "easton",
    "weston", "norton", "sutton", "calder", "marsh",
)
_HUBS = _DISTRICTS[:3]  # most facts point at a few hub districts

_LAND_USES = ("residential", "commercial", "industrial", "public")
_LAND_USE_WEIGHTS = (0.70, 0.15, 0.10, 0.05)


def _pick_weighted(rng: random.Random, values, weights) -> str:
    return rng.choices(values, weights=weights, k=1)[0]


def separable_dataset(n: int, seed: int = 0) -> list[TrainingSample]:
    """A labeled dataset with learnable desirable/undesirable token statistics.

    Entity negatives use a disjoint name lexicon, relation facts favor hub
    districts while negatives are uniform, and attribute facts skew toward
    one land use. Each fact yields one desirable and one undesirable sample
    on the same prompt, so every fact is pairable for the diagnostics.
    """
    if n < 6:
        raise GeofactError("separable dataset needs n >= 6")
    rng = random.Random(f"separable|{seed}")
    n_pairs = (n + 1) // 2
    base, rem = divmod(n_pairs, 3)
    pair_counts = {"Entity": base + (1 if rem > 0 else 0), "Relation": base + (1 if rem > 1 else 0), "Attribute": base}

    def pair(tag: str, subtask: TaskKind, i: int, prompt: str, good: str, bad: str):
        common = dict(task_tag=tag, subtask=subtask, prompt=prompt, fact_key=f"syn-{tag.lower()}-{i}")
        return (
            TrainingSample(sample_id=f"syn-{tag.lower()}-pos-{i:04d}", completion=good, label=DESIRABLE, **common),
            TrainingSample(sample_id=f"syn-{tag.lower()}-neg-{i:04d}", completion=bad, label=UNDESIRABLE, **common),
        )

    def entity_pair(i: int):
        real = f"{rng.choice(_REAL_FIRST)} {rng.choice(_REAL_SECOND)}"
        fake = f"{rng.choice(_FAKE_FIRST)} {rng.choice(_FAKE_SECOND)}"
        return pair(
            "Entity",
            TaskKind.POI_EXISTENCE,
            i,
            "name a point of interest in gridtown",
            f"yes {real} is a point of interest here",
            f"yes {fake} is a point of interest here",
        )

    def relation_pair(i: int):
        poi = f"{rng.choice(_REAL_FIRST)} {rng.choice(_REAL_SECOND)}"
        true_district = rng.choice(_HUBS) if rng.random() < 0.8 else rng.choice(_DISTRICTS)
        wrong_district = rng.choice([d for d in _DISTRICTS if d != true_district])
        return pair(
            "Relation",
            TaskKind.POI_LOCATE_AT_AOI,
            i,
            f"which area contains the place {poi}",
            f"it is inside district {true_district}",
            f"it is inside district {wrong_district}",
        )

    def attribute_pair(i: int):
        area = f"{rng.choice(_REAL_FIRST)} {rng.choice(_REAL_SECOND)}"
        true_use = _pick_weighted(rng, _LAND_USES, _LAND_USE_WEIGHTS)
        wrong_use = rng.choice([u for u in _LAND_USES if u != true_use])
        return pair(
            "Attribute",
            TaskKind.AOI_LAND_USE,
            i,
            f"what is the land use of the area {area}",
            f"the land use is {true_use}",
            f"the land use is {wrong_use}",
        )

    makers = {"Entity": entity_pair, "Relation": relation_pair, "Attribute": attribute_pair}
    # interleave pairs across tags so any contiguous split stays stratified
    samples: list[TrainingSample] = []
    for i in range(max(pair_counts.values())):
        for tag in ("Entity", "Relation", "Attribute"):
            if i < pair_counts[tag]:
                samples.extend(makers[tag](i))
    return samples[:n]
