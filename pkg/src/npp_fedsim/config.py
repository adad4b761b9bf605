"""Simulation configuration: JSON schema, defaults and validation.

Schema (every key optional except where noted)::

    {
      "seed": 7,
      "sessions": 30,
      "dt": 1.0,
      "thresholds": [1000, 35, 1000],          # co2, co, ch4 ppm
      "threshold_mode": "static",               # or "collective" (experimental)
      "output_dir": "out",
      "qkd": {"n_qubits": 16384, "eve_fraction": 0.0, "channel_flip_prob": 0.0,
              "abort_threshold": 0.11, "key_mode": "otp", "max_attempts": 3,
              "latency_s": 2.0},
      "learning": {"lr": 0.05, "epochs": 3, "batch_size": 32,
                   "train_fraction": 0.8, "seconds_per_sample": 0.05},
      "network": {"link_latency_s": 0.2, "ack_timeout_s": 5.0,
                  "frame_drop_prob": 0.0, "ack_drop_prob": 0.0},
      "features": {"center": [420, 1, 2], "scale": [2320, 136, 3992]},
      "plants": [                                # required
        {"plant_id": 1,
         "scenario": {...ScenarioSpec fields...},
         "robots": [
           {"robot_id": 1, "box": [sw_lat, sw_lon, ne_lat, ne_lon],
            "strip_width": 4.0, "orientation": "vertical",
            "speed": 1.0, "cadence_hz": 1.0, "dock": [x_m, y_m],
            "battery": {"drain_per_meter": 0.0008, "drain_per_second": 0.0001,
                        "charge_rate": 0.002}}]}]
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .coverage import EARTH_RADIUS_M, GeoBoundingBox, Orientation
from .envsim import ScenarioSpec


class ConfigError(ValueError):
    pass


@dataclass
class BatteryConfig:
    drain_per_meter: float = 0.0008
    drain_per_second: float = 0.0001
    charge_rate: float = 0.002


@dataclass
class RobotConfig:
    robot_id: int
    box: tuple[float, float, float, float]
    strip_width: float = 4.0
    orientation: str = "vertical"
    speed: float = 1.0
    cadence_hz: float = 1.0
    dock: tuple[float, float] | None = None
    battery: BatteryConfig = field(default_factory=BatteryConfig)

    @property
    def bbox(self) -> GeoBoundingBox:
        return GeoBoundingBox.from_corners(*self.box)


@dataclass
class PlantConfig:
    plant_id: int
    robots: list[RobotConfig]
    scenario: dict = field(default_factory=dict)


@dataclass
class QkdParams:
    n_qubits: int = 16384
    eve_fraction: float = 0.0
    channel_flip_prob: float = 0.0
    abort_threshold: float = 0.11
    key_mode: str = "otp"
    max_attempts: int = 3
    latency_s: float = 2.0


@dataclass
class LearningParams:
    lr: float = 0.05
    epochs: int = 3
    batch_size: int = 32
    train_fraction: float = 0.8
    seconds_per_sample: float = 0.05


@dataclass
class NetworkParams:
    link_latency_s: float = 0.2
    ack_timeout_s: float = 5.0
    frame_drop_prob: float = 0.0
    ack_drop_prob: float = 0.0


@dataclass
class FeatureParams:
    center: tuple[float, float, float] = (420.0, 1.0, 2.0)
    scale: tuple[float, float, float] = (2320.0, 136.0, 3992.0)


@dataclass
class SimConfig:
    plants: list[PlantConfig]
    seed: int = 7
    sessions: int = 30
    dt: float = 1.0
    thresholds: tuple[float, float, float] = (1000.0, 35.0, 1000.0)
    threshold_mode: str = "static"
    output_dir: str = "out"
    qkd: QkdParams = field(default_factory=QkdParams)
    learning: LearningParams = field(default_factory=LearningParams)
    network: NetworkParams = field(default_factory=NetworkParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    max_session_seconds: float = 50_000.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        try:
            plants = [
                PlantConfig(
                    plant_id=int(p["plant_id"]),
                    scenario=dict(p.get("scenario", {})),
                    robots=[
                        RobotConfig(
                            robot_id=int(r["robot_id"]),
                            box=tuple(float(v) for v in r["box"]),
                            strip_width=float(r.get("strip_width", 4.0)),
                            orientation=str(r.get("orientation", "vertical")),
                            speed=float(r.get("speed", 1.0)),
                            cadence_hz=float(r.get("cadence_hz", 1.0)),
                            dock=tuple(r["dock"]) if r.get("dock") is not None else None,
                            battery=BatteryConfig(**r.get("battery", {})),
                        )
                        for r in p["robots"]
                    ],
                )
                for p in d["plants"]
            ]
            kw = {k: d[k] for k in ("seed", "sessions", "dt", "threshold_mode", "output_dir", "max_session_seconds") if k in d}
            if "thresholds" in d:
                kw["thresholds"] = tuple(float(v) for v in d["thresholds"])
            cfg = cls(
                plants=plants,
                qkd=QkdParams(**d.get("qkd", {})),
                learning=LearningParams(**d.get("learning", {})),
                network=NetworkParams(**d.get("network", {})),
                features=FeatureParams(**{k: tuple(v) for k, v in d.get("features", {}).items()}),
                **kw,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.plants:
            raise ConfigError("config needs at least one plant")
        if self.sessions < 1:
            raise ConfigError("sessions must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.threshold_mode not in ("static", "collective"):
            raise ConfigError(f"unknown threshold_mode {self.threshold_mode!r}")
        if min(self.thresholds) <= 0:
            raise ConfigError("thresholds must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        q = self.qkd
        if q.key_mode not in ("otp", "derive-chacha"):
            raise ConfigError(f"unknown key_mode {q.key_mode!r}")
        if q.n_qubits < 64:
            raise ConfigError("qkd.n_qubits must be >= 64")
        if not (0 <= q.eve_fraction <= 1 and 0 <= q.channel_flip_prob <= 1 and 0 <= q.abort_threshold <= 1):
            raise ConfigError("qkd probabilities must lie in [0, 1]")
        if q.max_attempts < 1:
            raise ConfigError("qkd.max_attempts must be >= 1")
        lp = self.learning
        if lp.lr < 0 or lp.epochs < 1 or lp.batch_size < 1 or not 0 < lp.train_fraction < 1:
            raise ConfigError("invalid learning parameters")
        n = self.network
        if not (0 <= n.frame_drop_prob < 1 and 0 <= n.ack_drop_prob < 1):
            raise ConfigError("network drop probabilities must lie in [0, 1)")
        robot_ids = set()
        for p in self.plants:
            if not p.robots:
                raise ConfigError(f"plant {p.plant_id} has no robots")
            try:
                ScenarioSpec.from_dict(p.scenario)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"plant {p.plant_id}: bad scenario: {exc}") from exc
            boxes = []
            for r in p.robots:
                if r.robot_id in robot_ids:
                    raise ConfigError(f"duplicate robot_id {r.robot_id}")
                robot_ids.add(r.robot_id)
                if not 0 <= r.robot_id < 2**32:
                    raise ConfigError("robot_id must fit in 32 bits")
                try:
                    box = r.bbox
                    Orientation(r.orientation)
                except ValueError as exc:
                    raise ConfigError(f"robot {r.robot_id}: {exc}") from exc
                for other in boxes:
                    if box.overlaps(other):
                        raise ConfigError(f"robot {r.robot_id}: bounding box overlaps another robot's box")
                boxes.append(box)
                if r.speed <= 0 or r.cadence_hz <= 0 or r.strip_width <= 0:
                    raise ConfigError(f"robot {r.robot_id}: speed, cadence and strip width must be positive")


def box_around(lat: float, lon: float, width_m: float, length_m: float) -> tuple[float, float, float, float]:
    """SW/NE corners of a ``width_m`` x ``length_m`` box with its SW corner at (lat, lon)."""
    dlat = length_m / EARTH_RADIUS_M * 180.0 / math.pi
    dlon = width_m / (EARTH_RADIUS_M * math.cos(math.radians(lat))) * 180.0 / math.pi
    return (lat, lon, lat + dlat, lon + dlon)


PLANT_ANCHORS = {1: (45.5200, 4.7500), 2: (44.6300, 4.7000)}


def default_config(seed: int = 7, sessions: int = 30) -> SimConfig:
    """Two plants, four robots each on a 2x2 grid of 40 m boxes."""
    side = 40.0
    plants = []
    for pid, (lat0, lon0) in PLANT_ANCHORS.items():
        robots = []
        # shared grid lines so neighbouring boxes meet exactly
        lats = [box_around(lat0, lon0, 0.0, i * side)[2] for i in range(3)]
        lons = [box_around(lat0, lon0, j * side, 0.0)[3] for j in range(3)]
        for k in range(4):
            row, col = divmod(k, 2)
            box = (lats[row], lons[col], lats[row + 1], lons[col + 1])
            robots.append(RobotConfig(robot_id=(pid - 1) * 4 + k + 1, box=box))
        plants.append(PlantConfig(plant_id=pid, robots=robots, scenario={"extent": [2 * side, 2 * side]}))
    cfg = SimConfig(plants=plants, seed=seed, sessions=sessions)
    cfg.validate()
    return cfg


def load_config(path) -> SimConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return SimConfig.from_dict(data)
