"""Geospatial knowledge graph: typed entities, relation derivation, persistence.

The graph is the factual ground truth for everything downstream. Entities come
in as line-delimited JSON records (one object per line), are validated and
deduplicated, and relations between them are derived geometrically under
configurable distance thresholds. Built graphs are immutable.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import GeofactError
from .geometry import (
    GeoPoint,
    GeometryError,
    haversine_distance,
    point_in_polygon,
    point_segment_distance,
    polygon_area,
    polygon_self_intersects,
    polygon_vertex_centroid,
    polyline_length,
    segments_intersect,
)

GRAPH_FORMAT = "geokg"
GRAPH_VERSION = 1

LAND_USES = ("industrial", "residential", "commercial", "public", "other")

AREA_TOLERANCE = 0.05   # stated area_m2 may deviate from geometry by 5%
LENGTH_TOLERANCE = 0.01  # stated length_m may deviate from geometry by 1%

_WS = re.compile(r"\s+")


class IngestError(GeofactError):
    """Fatal ingestion failure (unreadable stream); bad records never raise."""


class GraphIntegrityError(GeofactError):
    """An edge or entity violates the graph's structural invariants."""


class GraphFormatError(GeofactError):
    """A persisted graph file is malformed or has the wrong version."""


class SamplingError(GeofactError):
    """A sampling request exceeds the available population."""


def normalize_name(name: str) -> str:
    """Canonical form used for deduplication and fabrication filtering:
    case-folded, trimmed, internal whitespace collapsed."""
    return _WS.sub(" ", name.strip()).casefold()


@dataclass(frozen=True)
class PoiEntity:
    id: str
    name: str
    location: GeoPoint
    address: str = ""
    category: str = ""  # hierarchical path, levels joined by " > "

    def __post_init__(self) -> None:
        if not normalize_name(self.name):
            raise GraphIntegrityError(f"poi {self.id!r} has an empty name")


@dataclass(frozen=True)
class AoiEntity:
    id: str
    name: str
    boundary: tuple[GeoPoint, ...]  # open ring, first != last, closure implied
    land_use: str = "other"
    area_m2: float = 0.0

    def __post_init__(self) -> None:
        if not normalize_name(self.name):
            raise GraphIntegrityError(f"aoi {self.id!r} has an empty name")
        if len(set(self.boundary)) < 3:
            raise GraphIntegrityError(f"aoi {self.id!r} needs >= 3 distinct vertices")
        if self.boundary[0] == self.boundary[-1]:
            raise GraphIntegrityError(f"aoi {self.id!r} ring must be stored open")
        if self.land_use not in LAND_USES:
            raise GraphIntegrityError(f"aoi {self.id!r} has unknown land use {self.land_use!r}")
        if self.area_m2 <= 0:
            raise GraphIntegrityError(f"aoi {self.id!r} area must be positive")

    def centroid(self) -> GeoPoint:
        return polygon_vertex_centroid(self.boundary)


@dataclass(frozen=True)
class RoadEntity:
    id: str
    name: str
    path: tuple[GeoPoint, ...]
    length_m: float = 0.0

    def __post_init__(self) -> None:
        if not normalize_name(self.name):
            raise GraphIntegrityError(f"road {self.id!r} has an empty name")
        if len(self.path) < 2:
            raise GraphIntegrityError(f"road {self.id!r} needs >= 2 path points")
        if self.length_m <= 0:
            raise GraphIntegrityError(f"road {self.id!r} length must be positive")


Entity = PoiEntity | AoiEntity | RoadEntity


class RelationKind(str, Enum):
    POI_LOCATE_AT_AOI = "PoiLocateAtAoi"
    POI_NEAR_POI = "PoiNearPoi"
    AOI_NEAR_AOI = "AoiNearAoi"
    AOI_CONNECT_TO_ROAD = "AoiConnectToRoad"
    ROAD_INTERSECT_ROAD = "RoadIntersectRoad"

    @property
    def symmetric(self) -> bool:
        return self in (
            RelationKind.POI_NEAR_POI,
            RelationKind.AOI_NEAR_AOI,
            RelationKind.ROAD_INTERSECT_ROAD,
        )

    @property
    def head_class(self) -> str:
        return {"P": "poi", "A": "aoi", "R": "road"}[self.value[0]]

    @property
    def tail_class(self) -> str:
        return {
            RelationKind.POI_LOCATE_AT_AOI: "aoi",
            RelationKind.POI_NEAR_POI: "poi",
            RelationKind.AOI_NEAR_AOI: "aoi",
            RelationKind.AOI_CONNECT_TO_ROAD: "road",
            RelationKind.ROAD_INTERSECT_ROAD: "road",
        }[self]


@dataclass(frozen=True)
class RelationEdge:
    head_id: str
    kind: RelationKind
    tail_id: str

    def canonical(self) -> "RelationEdge":
        """Symmetric kinds are stored once, with ids in lexicographic order."""
        if self.kind.symmetric and self.tail_id < self.head_id:
            return RelationEdge(self.tail_id, self.kind, self.head_id)
        return self


@dataclass(frozen=True)
class RegionThresholds:
    near_poi_m: float = 200.0
    near_aoi_m: float = 500.0
    connect_m: float = 30.0

    def __post_init__(self) -> None:
        for name in ("near_poi_m", "near_aoi_m", "connect_m"):
            if getattr(self, name) <= 0:
                raise GraphIntegrityError(f"threshold {name} must be strictly positive")


@dataclass(frozen=True)
class BoundingBox:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def contains(self, p: GeoPoint) -> bool:
        return self.min_lat <= p.lat <= self.max_lat and self.min_lon <= p.lon <= self.max_lon


@dataclass
class EntitySet:
    pois: list[PoiEntity] = field(default_factory=list)
    aois: list[AoiEntity] = field(default_factory=list)
    roads: list[RoadEntity] = field(default_factory=list)

    def all_entities(self) -> Iterator[Entity]:
        yield from self.pois
        yield from self.aois
        yield from self.roads


@dataclass(frozen=True)
class Rejection:
    line_no: int
    reason: str
    detail: str = ""


# reason codes emitted by ingest_entities
REJECT_EMPTY_NAME = "empty_name"
REJECT_OUT_OF_BBOX = "out_of_bbox"
REJECT_MALFORMED = "malformed_geometry"
REJECT_DUPLICATE = "duplicate_id"
REJECT_BAD_RECORD = "malformed_record"
REJECT_INCONSISTENT = "inconsistent_attribute"


def _parse_point_pair(raw: object) -> GeoPoint:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 2):
        raise GeometryError(f"expected [lon, lat] pair, got {raw!r}")
    lon, lat = raw
    if not (isinstance(lon, (int, float)) and isinstance(lat, (int, float))):
        raise GeometryError(f"non-numeric coordinates {raw!r}")
    return GeoPoint(float(lat), float(lon))


def _record_to_entity(rec: dict) -> Entity:
    """Build a validated entity from one parsed record, recomputing any
    missing numeric attribute from geometry. Raises on any malformation."""
    kind = rec.get("kind")
    eid = rec.get("id")
    name = rec.get("name")
    if not isinstance(eid, str) or not eid:
        raise GraphFormatError("record is missing a string id")
    if not isinstance(name, str):
        raise GraphFormatError(f"record {eid!r} is missing a name")

    if kind == "poi":
        if "lat" not in rec or "lon" not in rec:
            raise GeometryError(f"poi {eid!r} lacks lat/lon")
        loc = GeoPoint(float(rec["lat"]), float(rec["lon"]))
        return PoiEntity(
            id=eid,
            name=name,
            location=loc,
            address=str(rec.get("address", "")),
            category=str(rec.get("category", "")),
        )
    if kind == "aoi":
        ring = tuple(_parse_point_pair(p) for p in rec.get("ring", []))
        if len(ring) < 3:
            raise GeometryError(f"aoi {eid!r} ring has {len(ring)} vertices")
        if ring[0] == ring[-1]:
            ring = ring[:-1]
        if len(set(ring)) < 3:
            raise GeometryError(f"aoi {eid!r} ring has fewer than 3 distinct vertices")
        if polygon_self_intersects(ring):
            raise GeometryError(f"aoi {eid!r} ring self-intersects")
        computed = polygon_area(ring)
        if computed <= 0:
            raise GeometryError(f"aoi {eid!r} has zero area")
        stated = rec.get("area_m2")
        area = computed if stated is None else float(stated)
        if stated is not None and abs(area - computed) > AREA_TOLERANCE * computed:
            raise _Inconsistent(f"aoi {eid!r} states area {area:.1f}, geometry gives {computed:.1f}")
        land_use = str(rec.get("land_use", "other"))
        return AoiEntity(id=eid, name=name, boundary=ring, land_use=land_use, area_m2=area)
    if kind == "road":
        path = tuple(_parse_point_pair(p) for p in rec.get("path", []))
        if len(path) < 2:
            raise GeometryError(f"road {eid!r} path has {len(path)} points")
        computed = polyline_length(path)
        if computed <= 0:
            raise GeometryError(f"road {eid!r} has zero length")
        stated = rec.get("length_m")
        length = computed if stated is None else float(stated)
        if stated is not None and abs(length - computed) > LENGTH_TOLERANCE * computed:
            raise _Inconsistent(
                f"road {eid!r} states length {length:.1f}, geometry gives {computed:.1f}"
            )
        return RoadEntity(id=eid, name=name, path=path, length_m=length)
    raise GraphFormatError(f"record {eid!r} has unknown kind {kind!r}")


class _Inconsistent(GeofactError):
    pass


def _entity_points(entity: Entity) -> Sequence[GeoPoint]:
    if isinstance(entity, PoiEntity):
        return (entity.location,)
    if isinstance(entity, AoiEntity):
        return entity.boundary
    return entity.path


def ingest_entities(
    lines: Iterable[str], city: str, bbox: BoundingBox
) -> tuple[EntitySet, list[Rejection]]:
    """Validate and deduplicate a stream of line-delimited entity records.

    Bad records are collected in the rejection report with a reason code and
    never abort the run; an unreadable stream raises :class:`IngestError`.
    Ingestion is a pure function of the input, so it is idempotent.
    """
    entities = EntitySet()
    rejections: list[Rejection] = []
    seen_ids: set[str] = set()
    try:
        iterator = enumerate(lines, start=1)
        while True:
            try:
                line_no, line = next(iterator)
            except StopIteration:
                break
            except (OSError, UnicodeDecodeError) as exc:
                raise IngestError(f"unreadable record stream: {exc}") from exc
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                rejections.append(Rejection(line_no, REJECT_BAD_RECORD, str(exc)))
                continue
            if not isinstance(rec, dict):
                rejections.append(Rejection(line_no, REJECT_BAD_RECORD, "record is not an object"))
                continue

            name = rec.get("name")
            if not isinstance(name, str) or not normalize_name(name):
                rejections.append(Rejection(line_no, REJECT_EMPTY_NAME, str(rec.get("id", ""))))
                continue
            try:
                entity = _record_to_entity(rec)
            except _Inconsistent as exc:
                rejections.append(Rejection(line_no, REJECT_INCONSISTENT, str(exc)))
                continue
            except (GeometryError, GraphIntegrityError, GraphFormatError, ValueError, TypeError) as exc:
                rejections.append(Rejection(line_no, REJECT_MALFORMED, str(exc)))
                continue

            if entity.id in seen_ids:
                rejections.append(Rejection(line_no, REJECT_DUPLICATE, entity.id))
                continue
            if not all(bbox.contains(p) for p in _entity_points(entity)):
                rejections.append(Rejection(line_no, REJECT_OUT_OF_BBOX, entity.id))
                continue

            seen_ids.add(entity.id)
            if isinstance(entity, PoiEntity):
                entities.pois.append(entity)
            elif isinstance(entity, AoiEntity):
                entities.aois.append(entity)
            else:
                entities.roads.append(entity)
    except IngestError:
        raise
    except OSError as exc:
        raise IngestError(f"unreadable record stream: {exc}") from exc
    return entities, rejections


def derive_relations(entities: EntitySet, thresholds: RegionThresholds) -> list[RelationEdge]:
    """Derive all relation edges geometrically.

    LocateAt uses point-in-polygon; Near kinds compare haversine distances
    (AOI pairs by vertex centroid); ConnectTo takes the minimum distance from
    AOI boundary vertices to road segments; Intersect tests all segment pairs.
    Symmetric kinds come out canonicalized and each edge appears once.
    """
    edges: set[RelationEdge] = set()

    for poi in entities.pois:
        for aoi in entities.aois:
            if point_in_polygon(poi.location, aoi.boundary):
                edges.add(RelationEdge(poi.id, RelationKind.POI_LOCATE_AT_AOI, aoi.id))

    for i, a in enumerate(entities.pois):
        for b in entities.pois[i + 1 :]:
            if haversine_distance(a.location, b.location) <= thresholds.near_poi_m:
                edges.add(RelationEdge(a.id, RelationKind.POI_NEAR_POI, b.id).canonical())

    centroids = {aoi.id: aoi.centroid() for aoi in entities.aois}
    for i, a in enumerate(entities.aois):
        for b in entities.aois[i + 1 :]:
            if haversine_distance(centroids[a.id], centroids[b.id]) <= thresholds.near_aoi_m:
                edges.add(RelationEdge(a.id, RelationKind.AOI_NEAR_AOI, b.id).canonical())

    for aoi in entities.aois:
        for road in entities.roads:
            if _aoi_road_distance(aoi, road) <= thresholds.connect_m:
                edges.add(RelationEdge(aoi.id, RelationKind.AOI_CONNECT_TO_ROAD, road.id))

    for i, a in enumerate(entities.roads):
        for b in entities.roads[i + 1 :]:
            if _roads_intersect(a, b):
                edges.add(RelationEdge(a.id, RelationKind.ROAD_INTERSECT_ROAD, b.id).canonical())

    return sorted(edges, key=lambda e: (e.kind.value, e.head_id, e.tail_id))


def _aoi_road_distance(aoi: AoiEntity, road: RoadEntity) -> float:
    best = math.inf
    for vertex in aoi.boundary:
        for i in range(len(road.path) - 1):
            d = point_segment_distance(vertex, road.path[i], road.path[i + 1])
            if d < best:
                best = d
    return best


def _roads_intersect(a: RoadEntity, b: RoadEntity) -> bool:
    for i in range(len(a.path) - 1):
        for j in range(len(b.path) - 1):
            if segments_intersect(a.path[i], a.path[i + 1], b.path[j], b.path[j + 1]):
                return True
    return False


@dataclass(frozen=True)
class GeoKnowledgeGraph:
    city: str
    pois: dict[str, PoiEntity]
    aois: dict[str, AoiEntity]
    roads: dict[str, RoadEntity]
    edges: tuple[RelationEdge, ...]
    thresholds: RegionThresholds

    def entity_class(self, entity_id: str) -> str | None:
        if entity_id in self.pois:
            return "poi"
        if entity_id in self.aois:
            return "aoi"
        if entity_id in self.roads:
            return "road"
        return None

    def entity_name(self, entity_id: str) -> str:
        for coll in (self.pois, self.aois, self.roads):
            if entity_id in coll:
                return coll[entity_id].name
        raise KeyError(entity_id)

    def all_names(self) -> Iterator[str]:
        for coll in (self.pois, self.aois, self.roads):
            for entity in coll.values():
                yield entity.name

    def normalized_names(self) -> set[str]:
        return {normalize_name(n) for n in self.all_names()}

    def has_edge(self, head_id: str, kind: RelationKind, tail_id: str) -> bool:
        return RelationEdge(head_id, kind, tail_id).canonical() in self._edge_set()

    def edges_of_kind(self, kind: RelationKind) -> list[RelationEdge]:
        return [e for e in self.edges if e.kind is kind]

    def _edge_set(self) -> frozenset[RelationEdge]:
        # cached on first use; the graph is immutable after construction
        cached = getattr(self, "_edge_cache", None)
        if cached is None:
            cached = frozenset(self.edges)
            object.__setattr__(self, "_edge_cache", cached)
        return cached


def build_graph(
    city: str,
    entities: EntitySet,
    edges: Iterable[RelationEdge],
    thresholds: RegionThresholds,
) -> GeoKnowledgeGraph:
    """Assemble an immutable graph, enforcing referential integrity and
    canonical storage of symmetric edges."""
    pois = {e.id: e for e in entities.pois}
    aois = {e.id: e for e in entities.aois}
    roads = {e.id: e for e in entities.roads}
    if len(pois) + len(aois) + len(roads) != (
        len(entities.pois) + len(entities.aois) + len(entities.roads)
    ):
        raise GraphIntegrityError("duplicate entity ids in entity set")

    def class_of(entity_id: str) -> str | None:
        if entity_id in pois:
            return "poi"
        if entity_id in aois:
            return "aoi"
        if entity_id in roads:
            return "road"
        return None

    canonical: set[RelationEdge] = set()
    for edge in edges:
        edge = edge.canonical()
        if edge.head_id == edge.tail_id:
            raise GraphIntegrityError(f"self-edge not allowed: {edge}")
        head_class, tail_class = class_of(edge.head_id), class_of(edge.tail_id)
        if head_class is None or tail_class is None:
            raise GraphIntegrityError(f"edge references unknown entity: {edge}")
        if head_class != edge.kind.head_class or tail_class != edge.kind.tail_class:
            raise GraphIntegrityError(
                f"edge classes ({head_class}, {tail_class}) do not match kind {edge.kind.value}: {edge}"
            )
        canonical.add(edge)

    ordered = tuple(sorted(canonical, key=lambda e: (e.kind.value, e.head_id, e.tail_id)))
    return GeoKnowledgeGraph(
        city=city, pois=pois, aois=aois, roads=roads, edges=ordered, thresholds=thresholds
    )


def _entity_to_record(entity: Entity) -> dict:
    if isinstance(entity, PoiEntity):
        return {
            "kind": "poi",
            "id": entity.id,
            "name": entity.name,
            "lat": entity.location.lat,
            "lon": entity.location.lon,
            "address": entity.address,
            "category": entity.category,
        }
    if isinstance(entity, AoiEntity):
        return {
            "kind": "aoi",
            "id": entity.id,
            "name": entity.name,
            "ring": [[p.lon, p.lat] for p in entity.boundary],
            "land_use": entity.land_use,
            "area_m2": entity.area_m2,
        }
    return {
        "kind": "road",
        "id": entity.id,
        "name": entity.name,
        "path": [[p.lon, p.lat] for p in entity.path],
        "length_m": entity.length_m,
    }


def save_graph(graph: GeoKnowledgeGraph, path: str | Path) -> None:
    """Write the graph file: a header line, entity lines, then edge lines."""
    header = {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "city": graph.city,
        "thresholds": {
            "near_poi_m": graph.thresholds.near_poi_m,
            "near_aoi_m": graph.thresholds.near_aoi_m,
            "connect_m": graph.thresholds.connect_m,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for coll in (graph.pois, graph.aois, graph.roads):
            for entity in coll.values():
                fh.write(json.dumps(_entity_to_record(entity), sort_keys=True) + "\n")
        for edge in graph.edges:
            fh.write(
                json.dumps(
                    {"head": edge.head_id, "kind": edge.kind.value, "tail": edge.tail_id},
                    sort_keys=True,
                )
                + "\n"
            )


def load_graph(path: str | Path) -> GeoKnowledgeGraph:
    """Read a graph file back; inverse of :func:`save_graph`."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise GraphFormatError(f"cannot read graph file {path}: {exc}") from exc
    if not lines:
        raise GraphFormatError(f"graph file {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"bad graph header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != GRAPH_FORMAT:
        raise GraphFormatError(f"not a {GRAPH_FORMAT} file: {path}")
    if header.get("version") != GRAPH_VERSION:
        raise GraphFormatError(
            f"unsupported {GRAPH_FORMAT} version {header.get('version')!r}, expected {GRAPH_VERSION}"
        )
    thresholds = RegionThresholds(**header.get("thresholds", {}))

    entities = EntitySet()
    edges: list[RelationEdge] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"line {line_no}: parse error: {exc}") from exc
        if "kind" in obj and obj.get("kind") in ("poi", "aoi", "road"):
            try:
                entity = _record_to_entity(obj)
            except GeofactError as exc:
                raise GraphFormatError(f"line {line_no}: {exc}") from exc
            if isinstance(entity, PoiEntity):
                entities.pois.append(entity)
            elif isinstance(entity, AoiEntity):
                entities.aois.append(entity)
            else:
                entities.roads.append(entity)
        elif {"head", "kind", "tail"} <= obj.keys():
            try:
                kind = RelationKind(obj["kind"])
            except ValueError as exc:
                raise GraphFormatError(f"line {line_no}: unknown relation kind {obj['kind']!r}") from exc
            edges.append(RelationEdge(obj["head"], kind, obj["tail"]))
        else:
            raise GraphFormatError(f"line {line_no}: unrecognized graph line")
    return build_graph(str(header.get("city", "")), entities, edges, thresholds)


# ---------------------------------------------------------------------------
# Fact sampling

ENTITY_PATTERNS = ("entity:poi", "entity:aoi", "entity:road")
ATTRIBUTE_PATTERNS = (
    "attribute:poi_address",
    "attribute:poi_category",
    "attribute:aoi_land_use",
    "attribute:aoi_area",
    "attribute:road_length",
)


def _pattern_population(graph: GeoKnowledgeGraph, pattern: str) -> list[tuple]:
    scope, _, detail = pattern.partition(":")
    if scope == "entity":
        coll = {"poi": graph.pois, "aoi": graph.aois, "road": graph.roads}.get(detail)
        if coll is None:
            raise SamplingError(f"unknown entity pattern {pattern!r}")
        return [(detail, eid) for eid in sorted(coll)]
    if scope == "relation":
        try:
            kind = RelationKind(detail)
        except ValueError:
            raise SamplingError(f"unknown relation pattern {pattern!r}") from None
        return [(e.head_id, kind.value, e.tail_id) for e in graph.edges_of_kind(kind)]
    if scope == "attribute":
        if detail == "poi_address":
            return [
                (p.id, detail, p.address)
                for p in (graph.pois[k] for k in sorted(graph.pois))
                if p.address.strip()
            ]
        if detail == "poi_category":
            return [
                (p.id, detail, p.category)
                for p in (graph.pois[k] for k in sorted(graph.pois))
                if p.category.strip()
            ]
        if detail == "aoi_land_use":
            return [(a.id, detail, a.land_use) for a in (graph.aois[k] for k in sorted(graph.aois))]
        if detail == "aoi_area":
            return [(a.id, detail, a.area_m2) for a in (graph.aois[k] for k in sorted(graph.aois))]
        if detail == "road_length":
            return [(r.id, detail, r.length_m) for r in (graph.roads[k] for k in sorted(graph.roads))]
        raise SamplingError(f"unknown attribute pattern {pattern!r}")
    raise SamplingError(f"unknown pattern {pattern!r}")


def sample_pattern(
    graph: GeoKnowledgeGraph, pattern: str, n: int, rng_seed: int | str
) -> list[tuple]:
    """Sample ``n`` distinct fact tuples matching a pattern, without
    replacement, deterministically for a fixed seed.

    Patterns: ``entity:{poi|aoi|road}``, ``relation:<RelationKind>``, and
    ``attribute:{poi_address|poi_category|aoi_land_use|aoi_area|road_length}``.
    """
    if n < 0:
        raise SamplingError(f"sample size must be >= 0, got {n}")
    population = _pattern_population(graph, pattern)
    if n > len(population):
        raise SamplingError(
            f"pattern {pattern!r} has only {len(population)} facts, requested {n}"
        )
    rng = random.Random(f"sample|{rng_seed}|{pattern}")
    return rng.sample(population, n)
