"""Spherical and locally-projected geometry for city-scale features.

All coordinates are WGS84 degrees. Distances use a sphere of mean radius
``EARTH_RADIUS_M``; areas and point-to-segment distances use a local
equirectangular projection, whose error at city scale is far below the
thresholds applied downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import GeofactError

EARTH_RADIUS_M = 6_371_000.0


class GeometryError(GeofactError):
    """Raised for degenerate or malformed geometric input."""


@dataclass(frozen=True)
class GeoPoint:
    """A WGS84 coordinate pair, latitude/longitude in degrees."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise GeometryError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise GeometryError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise GeometryError(f"longitude {self.lon} outside [-180, 180]")


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters between two points."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def polyline_length(path: Sequence[GeoPoint]) -> float:
    """Length in meters of a polyline, summed over haversine segments."""
    if len(path) < 2:
        raise GeometryError(f"polyline needs >= 2 points, got {len(path)}")
    return sum(haversine_distance(path[i], path[i + 1]) for i in range(len(path) - 1))


def _project_local(points: Sequence[GeoPoint], origin: GeoPoint) -> list[tuple[float, float]]:
    # Equirectangular projection in meters about `origin`.
    cos_lat0 = math.cos(math.radians(origin.lat))
    out = []
    for p in points:
        x = EARTH_RADIUS_M * math.radians(p.lon - origin.lon) * cos_lat0
        y = EARTH_RADIUS_M * math.radians(p.lat - origin.lat)
        out.append((x, y))
    return out


def polygon_vertex_centroid(poly: Sequence[GeoPoint]) -> GeoPoint:
    """Arithmetic mean of the vertices; used as a cheap polygon anchor."""
    if not poly:
        raise GeometryError("empty polygon")
    return GeoPoint(
        sum(p.lat for p in poly) / len(poly),
        sum(p.lon for p in poly) / len(poly),
    )


def polygon_area(poly: Sequence[GeoPoint]) -> float:
    """Polygon area in square meters.

    Planar shoelace formula after an equirectangular projection about the
    polygon's vertex centroid. The ring is stored open (first != last); the
    closing edge is implied.
    """
    if len(poly) < 3:
        raise GeometryError(f"polygon needs >= 3 vertices, got {len(poly)}")
    origin = polygon_vertex_centroid(poly)
    pts = _project_local(poly, origin)
    twice_area = 0.0
    for i in range(len(pts)):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % len(pts)]
        twice_area += x1 * y2 - x2 * y1
    return abs(twice_area) / 2.0


def _on_segment(px: float, py: float, ax: float, ay: float, bx: float, by: float) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if abs(cross) > 1e-12:
        return False
    return (
        min(ax, bx) - 1e-12 <= px <= max(ax, bx) + 1e-12
        and min(ay, by) - 1e-12 <= py <= max(ay, by) + 1e-12
    )


def point_in_polygon(p: GeoPoint, poly: Sequence[GeoPoint]) -> bool:
    """Ray-casting parity test in the lon/lat plane.

    Points on the boundary count as inside. Degenerate (zero-area) polygons
    are rejected.
    """
    if len(poly) < 3:
        raise GeometryError(f"polygon needs >= 3 vertices, got {len(poly)}")
    if polygon_area(poly) == 0.0:
        raise GeometryError("degenerate polygon with zero area")

    x, y = p.lon, p.lat
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if _on_segment(x, y, a.lon, a.lat, b.lon, b.lat):
            return True

    inside = False
    j = n - 1
    for i in range(n):
        yi, xi = poly[i].lat, poly[i].lon
        yj, xj = poly[j].lat, poly[j].lon
        if (yi > y) != (yj > y):
            x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def point_segment_distance(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> float:
    """Distance in meters from a point to a great-small segment, via local projection."""
    (ax, ay), (bx, by) = _project_local([a, b], p)
    # p projects to the origin
    dx, dy = bx - ax, by - ay
    seg_len_sq = dx * dx + dy * dy
    if seg_len_sq == 0.0:
        return math.hypot(ax, ay)
    t = max(0.0, min(1.0, -(ax * dx + ay * dy) / seg_len_sq))
    cx, cy = ax + t * dx, ay + t * dy
    return math.hypot(cx, cy)


def _orientation(ax: float, ay: float, bx: float, by: float, cx: float, cy: float) -> int:
    v = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if v > 0:
        return 1
    if v < 0:
        return -1
    return 0


def segments_intersect(a1: GeoPoint, a2: GeoPoint, b1: GeoPoint, b2: GeoPoint) -> bool:
    """True when two lon/lat segments properly intersect or touch."""
    p1, p2 = (a1.lon, a1.lat), (a2.lon, a2.lat)
    p3, p4 = (b1.lon, b1.lat), (b2.lon, b2.lat)
    o1 = _orientation(*p1, *p2, *p3)
    o2 = _orientation(*p1, *p2, *p4)
    o3 = _orientation(*p3, *p4, *p1)
    o4 = _orientation(*p3, *p4, *p2)
    if o1 != o2 and o3 != o4:
        return True
    for (px, py), (qx, qy), (rx, ry) in (
        (p1, p2, p3),
        (p1, p2, p4),
        (p3, p4, p1),
        (p3, p4, p2),
    ):
        if _orientation(px, py, qx, qy, rx, ry) == 0 and _on_segment(rx, ry, px, py, qx, qy):
            return True
    return False


def polygon_self_intersects(poly: Sequence[GeoPoint]) -> bool:
    """True when any two non-adjacent edges of the closed ring intersect."""
    n = len(poly)
    if n < 3:
        raise GeometryError(f"polygon needs >= 3 vertices, got {n}")
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges legitimately share a vertex
            if segments_intersect(edges[i][0], edges[i][1], edges[j][0], edges[j][1]):
                return True
    return False
