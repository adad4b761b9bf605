"""Synthetic plant atmosphere: ambient gases plus Gaussian contamination hotspots."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

GASES = ("co2", "co", "ch4")
CONTAMINANT_CLASSES = ("co2", "co", "ch4", "multi")
FOOTPRINT_RADII = 2.0  # a reading is labelled with a hotspot's class within 2 radii


@dataclass(frozen=True)
class GasVector:
    co2_ppm: float
    co_ppm: float
    ch4_ppm: float

    def __post_init__(self):
        for name, v in zip(GASES, self.as_tuple()):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} concentration must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.co2_ppm, self.co_ppm, self.ch4_ppm)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> GasVector:
        return cls(float(a[0]), float(a[1]), float(a[2]))


AMBIENT = GasVector(420.0, 1.0, 2.0)


@dataclass(frozen=True)
class Hotspot:
    center: tuple[float, float]
    amplitude: GasVector
    radius_m: float
    onset_s: float = 0.0
    label: str = "co2"

    def __post_init__(self):
        if not self.radius_m > 0:
            raise ValueError(f"hotspot radius must be > 0, got {self.radius_m}")
        if self.onset_s < 0:
            raise ValueError("hotspot onset must be >= 0")
        if self.label not in CONTAMINANT_CLASSES:
            raise ValueError(f"unknown contamination class {self.label!r}")


@dataclass(frozen=True)
class GasField:
    background: GasVector = AMBIENT
    hotspots: tuple[Hotspot, ...] = ()
    noise_sd: GasVector = GasVector(0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "hotspots", tuple(self.hotspots))
        h = self.hotspots
        # packed arrays for the plume kernel
        object.__setattr__(self, "_centers", np.array([s.center for s in h], dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "_amps", np.array([s.amplitude.as_tuple() for s in h], dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "_radii", np.array([s.radius_m for s in h], dtype=np.float64))
        object.__setattr__(self, "_onsets", np.array([s.onset_s for s in h], dtype=np.float64))

    def active(self, t: float) -> np.ndarray:
        return self._onsets <= t


def concentration_many(field: GasField, points, t: float) -> np.ndarray:
    """Noise-free concentrations at an ``(N, 2)`` array of positions."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    excess = kernels.plume_sum(pts, field._centers, field._amps, field._radii, field.active(t))
    return field.background.as_array()[None, :] + excess


def concentration_at(field: GasField, pos, t: float) -> GasVector:
    if t < 0:
        raise ValueError("time must be >= 0")
    return GasVector.from_array(concentration_many(field, pos, t)[0])


def true_label(field: GasField, pos, t: float) -> str:
    """Ground-truth class at ``pos``: the class of every active hotspot whose
    footprint contains it, ``"multi"`` when those disagree, else ``"none"``."""
    x, y = pos
    labels = set()
    for spot, on in zip(field.hotspots, field.active(t)):
        if not on:
            continue
        cx, cy = spot.center
        if math.hypot(x - cx, y - cy) <= FOOTPRINT_RADII * spot.radius_m:
            labels.add(spot.label)
    if not labels:
        return "none"
    if len(labels) == 1:
        return labels.pop()
    return "multi"


@dataclass(frozen=True)
class SensorReading:
    position: object  # GeoPoint; kept untyped to avoid a coverage import cycle in annotations
    gases: GasVector
    timestamp: float


def sample(field: GasField, pos, t: float, rng: np.random.Generator, to_geo=None) -> SensorReading:
    """One noisy reading. ``to_geo`` maps the field-frame position to a GeoPoint."""
    clean = concentration_many(field, pos, t)[0]
    noise = rng.standard_normal(3) * field.noise_sd.as_array()
    values = np.maximum(clean + noise, 0.0)
    position = to_geo(*pos) if to_geo is not None else tuple(pos)
    return SensorReading(position=position, gases=GasVector.from_array(values), timestamp=float(t))


@dataclass
class ClassSpec:
    count: int | tuple[int, int]
    co2: tuple[float, float] = (0.0, 0.0)
    co: tuple[float, float] = (0.0, 0.0)
    ch4: tuple[float, float] = (0.0, 0.0)


def _default_classes():
    return {
        "co2": ClassSpec(4, co2=(2500.0, 3500.0)),
        "co": ClassSpec(4, co=(120.0, 180.0)),
        "ch4": ClassSpec(4, ch4=(4000.0, 6000.0)),
        "multi": ClassSpec(4, co2=(2000.0, 3000.0), co=(100.0, 150.0), ch4=(3000.0, 5000.0)),
    }


@dataclass
class ScenarioSpec:
    """Recipe for a random hotspot layout over an ``extent`` rectangle in meters."""

    extent: tuple[float, float] = (80.0, 80.0)
    classes: dict[str, ClassSpec] = field(default_factory=_default_classes)
    radius_range: tuple[float, float] = (3.0, 6.0)
    onset_range: tuple[float, float] = (0.0, 0.0)
    background: GasVector = AMBIENT
    noise_sd: GasVector = GasVector(15.0, 2.0, 20.0)

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioSpec:
        classes = {}
        for name, c in d.get("classes", {}).items():
            count = c.get("count", 1)
            classes[name] = ClassSpec(
                count=tuple(count) if isinstance(count, list) else int(count),
                **{g: tuple(c[g]) for g in GASES if g in c},
            )
        kw = {}
        if "classes" in d:
            kw["classes"] = classes
        for key in ("extent", "radius_range", "onset_range"):
            if key in d:
                kw[key] = tuple(float(v) for v in d[key])
        if "background" in d:
            kw["background"] = GasVector(*map(float, d["background"]))
        if "noise_sd" in d:
            kw["noise_sd"] = GasVector(*map(float, d["noise_sd"]))
        return cls(**kw)


def generate_scenario(spec: ScenarioSpec, rng: np.random.Generator) -> GasField:
    if not spec.classes:
        raise ValueError("scenario needs at least one contamination class")
    spots = []
    width, length = spec.extent
    for label in sorted(spec.classes):
        if label not in CONTAMINANT_CLASSES:
            raise ValueError(f"unknown contamination class {label!r}")
        cs = spec.classes[label]
        if isinstance(cs.count, tuple):
            # a class listed with a range always gets at least one hotspot
            count = int(rng.integers(max(1, cs.count[0]), max(1, cs.count[1]) + 1))
        else:
            count = int(cs.count)
        for _ in range(count):
            amp = [rng.uniform(*getattr(cs, g)) if getattr(cs, g)[1] > 0 else 0.0 for g in GASES]
            spots.append(
                Hotspot(
                    center=(float(rng.uniform(0, width)), float(rng.uniform(0, length))),
                    amplitude=GasVector(*amp),
                    radius_m=float(rng.uniform(*spec.radius_range)),
                    onset_s=float(rng.uniform(*spec.onset_range)) if spec.onset_range[1] > 0 else 0.0,
                    label=label,
                )
            )
    return GasField(background=spec.background, hotspots=tuple(spots), noise_sd=spec.noise_sd)
