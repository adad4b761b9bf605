"""Bounding-box geometry and serpentine (lawnmower) coverage plans.

Local frames put the origin at the box's south-west corner, with x pointing
east and y pointing north, both in meters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels

EARTH_RADIUS_M = 6_371_000.0
_DEG = math.pi / 180.0


class Orientation(str, Enum):
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class GeoBoundingBox:
    south_west: GeoPoint
    north_east: GeoPoint

    def __post_init__(self):
        if not self.north_east.lat > self.south_west.lat:
            raise ValueError("north_east.lat must exceed south_west.lat")
        if not self.north_east.lon > self.south_west.lon:
            raise ValueError("north_east.lon must exceed south_west.lon (no antimeridian wrap)")

    @classmethod
    def from_corners(cls, sw_lat, sw_lon, ne_lat, ne_lon):
        return cls(GeoPoint(sw_lat, sw_lon), GeoPoint(ne_lat, ne_lon))

    def contains(self, p: GeoPoint, tol_deg: float = 1e-12) -> bool:
        return (
            self.south_west.lat - tol_deg <= p.lat <= self.north_east.lat + tol_deg
            and self.south_west.lon - tol_deg <= p.lon <= self.north_east.lon + tol_deg
        )

    def overlaps(self, other: GeoBoundingBox) -> bool:
        return not (
            self.north_east.lat <= other.south_west.lat
            or other.north_east.lat <= self.south_west.lat
            or self.north_east.lon <= other.south_west.lon
            or other.north_east.lon <= self.south_west.lon
        )


def geo_distance(p1: GeoPoint, p2: GeoPoint) -> float:
    """Equirectangular distance in meters, scaled by cos of ``p1``'s latitude only.

    The formula is not symmetric when the latitudes differ. For box sizing pass
    the southern point first.
    """
    dlat = (p2.lat - p1.lat) * _DEG
    dlon = (p2.lon - p1.lon) * _DEG
    return EARTH_RADIUS_M * math.sqrt(dlat**2 + (math.cos(p1.lat * _DEG) * dlon) ** 2)


@dataclass(frozen=True)
class LocalFrame:
    origin: GeoPoint
    width_m: float
    length_m: float

    @classmethod
    def from_box(cls, box: GeoBoundingBox) -> LocalFrame:
        sw = box.south_west
        width = geo_distance(sw, GeoPoint(sw.lat, box.north_east.lon))
        length = geo_distance(sw, GeoPoint(box.north_east.lat, sw.lon))
        if not (width > 0 and length > 0):
            raise ValueError("degenerate bounding box")
        return cls(origin=sw, width_m=width, length_m=length)

    def to_geo(self, x: float, y: float) -> GeoPoint:
        # inverse of geo_distance's two components, anchored at the origin latitude
        lat = self.origin.lat + y / EARTH_RADIUS_M / _DEG
        lon = self.origin.lon + x / (EARTH_RADIUS_M * math.cos(self.origin.lat * _DEG)) / _DEG
        return GeoPoint(lat, lon)

    def to_local(self, p: GeoPoint) -> tuple[float, float]:
        y = (p.lat - self.origin.lat) * _DEG * EARTH_RADIUS_M
        x = (p.lon - self.origin.lon) * _DEG * EARTH_RADIUS_M * math.cos(self.origin.lat * _DEG)
        return x, y

    def contains(self, x: float, y: float, tol: float = 1e-9) -> bool:
        return -tol <= x <= self.width_m + tol and -tol <= y <= self.length_m + tol


def num_strips(W: float, w: float) -> int:
    if not (W > 0 and w > 0):
        raise ValueError(f"strip count needs W > 0 and w > 0, got W={W}, w={w}")
    return max(1, math.ceil(W / w))


def strip_origins(n: int, w: float, orientation=Orientation.VERTICAL) -> list[tuple[float, float]]:
    if n < 1 or not w > 0:
        raise ValueError(f"need n >= 1 and w > 0, got n={n}, w={w}")
    orientation = Orientation(orientation)
    if orientation is Orientation.VERTICAL:
        return [(float(i * w), 0.0) for i in range(n)]
    return [(0.0, float(i * w)) for i in range(n)]


def total_distance(n: int, l: float, d: float) -> float:
    if n < 1 or not l > 0 or d < 0:
        raise ValueError(f"need n >= 1, l > 0, d >= 0; got n={n}, l={l}, d={d}")
    return n * l + (n - 1) * d


@dataclass(frozen=True)
class CoveragePlan:
    strips: int
    strip_width_m: float
    orientation: Orientation
    waypoints: tuple[tuple[float, float], ...]
    turn_distance_m: float
    total_distance_m: float
    frame: LocalFrame | None = field(default=None, compare=False)

    @property
    def vertices(self) -> np.ndarray:
        return np.asarray(self.waypoints, dtype=np.float64)

    def path_length(self) -> float:
        v = self.vertices
        return float(np.sqrt((np.diff(v, axis=0) ** 2).sum(axis=1)).sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["strip_index", "x_m", "y_m"])
        for i, (x, y) in enumerate(self.waypoints):
            writer.writerow([i // 2, repr(x), repr(y)])
        return buf.getvalue()


def _plan_in_rect(width_m, length_m, w, orientation, d):
    orientation = Orientation(orientation)
    width_m, length_m = float(width_m), float(length_m)
    across, along = (width_m, length_m) if orientation is Orientation.VERTICAL else (length_m, width_m)
    if not w > 0:
        raise ValueError(f"strip width must be positive, got {w}")
    if w > across:
        raise ValueError(f"strip width {w} m exceeds box width {across} m")
    if d is None:
        d = w
    if d < 0:
        raise ValueError(f"turn distance must be >= 0, got {d}")
    n = num_strips(across, w)
    waypoints = []
    for i, (x0, y0) in enumerate(strip_origins(n, w, orientation)):
        if orientation is Orientation.VERTICAL:
            ends = [(x0, 0.0), (x0, along)]
        else:
            ends = [(0.0, y0), (along, y0)]
        if i % 2 == 1:
            ends.reverse()
        waypoints.extend(ends)
    return CoveragePlan(
        strips=n,
        strip_width_m=w,
        orientation=orientation,
        waypoints=tuple(waypoints),
        turn_distance_m=d,
        total_distance_m=total_distance(n, along, d),
    )


def plan_lawnmower(box: GeoBoundingBox, w: float, orientation=Orientation.VERTICAL, d: float | None = None) -> CoveragePlan:
    """Serpentine plan over ``box`` with strips of width ``w``.

    ``d`` is the turn distance used for the distance budget and defaults to
    ``w``, the gap between adjacent strips.
    """
    frame = LocalFrame.from_box(box)
    plan = _plan_in_rect(frame.width_m, frame.length_m, w, orientation, d)
    return CoveragePlan(**{**plan.__dict__, "frame": frame})


def plan_rectangle(width_m: float, length_m: float, w: float, orientation=Orientation.VERTICAL, d: float | None = None) -> CoveragePlan:
    """Same as :func:`plan_lawnmower` for a rectangle given directly in meters."""
    if not (width_m > 0 and length_m > 0):
        raise ValueError("rectangle sides must be positive")
    plan = _plan_in_rect(width_m, length_m, w, orientation, d)
    return CoveragePlan(**{**plan.__dict__, "frame": LocalFrame(GeoPoint(0.0, 0.0), width_m, length_m)})


def grid_points(width_m: float, length_m: float, spacing: float) -> np.ndarray:
    xs = np.arange(0.0, width_m + 1e-12, spacing)
    ys = np.arange(0.0, length_m + 1e-12, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def distance_to_path(plan: CoveragePlan, points) -> np.ndarray:
    return kernels.polyline_distance(points, plan.vertices)


def swept_band_gaps(plan: CoveragePlan, points) -> np.ndarray:
    """Points not inside any strip's band ``[origin, origin + w)`` across-track.

    This is the coverage model the ceiling in :func:`num_strips` guarantees:
    ``n * w >= W`` means the bands tile the whole width.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    across = 0 if plan.orientation is Orientation.VERTICAL else 1
    along = 1 - across
    v = plan.vertices
    covered = np.zeros(len(pts), dtype=bool)
    tol = 1e-9
    # waypoints come in (entry, exit) pairs, one pair per strip
    for a, b in zip(v[0::2], v[1::2]):
        lo, hi = sorted((a[along], b[along]))
        covered |= (
            (pts[:, across] >= a[across] - tol)
            & (pts[:, across] <= a[across] + plan.strip_width_m + tol)
            & (pts[:, along] >= lo - tol)
            & (pts[:, along] <= hi + tol)
        )
    return pts[~covered]
