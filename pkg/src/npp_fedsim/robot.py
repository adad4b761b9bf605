"""Robot lifecycle: scanning, critical (waiting for an ack), charging/training."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .coverage import CoveragePlan, GeoPoint, LocalFrame
from .envsim import GASES, GasField, GasVector, SensorReading, sample, true_label

LOW_BATTERY = 0.20
DEFAULT_THRESHOLDS = GasVector(1000.0, 35.0, 1000.0)


class InvalidStateError(RuntimeError):
    pass


class State(str, enum.Enum):
    SCANNING = "scanning"
    CRITICAL = "critical"
    CHARGING = "charging"


class EventKind(enum.IntEnum):
    # value doubles as the tiebreak rank within one timestamp
    ReadingTaken = 0
    ThresholdExceeded = 1
    ReportSent = 2
    AckReceived = 3
    BatteryLow = 4
    DockArrive = 5
    TrainDone = 6
    WeightsUploaded = 7
    GlobalModelInstalled = 8


@dataclass(frozen=True)
class Event:
    time: float
    robot_id: int
    kind: EventKind
    detail: str = ""

    def sort_key(self):
        return (self.time, self.robot_id, int(self.kind))

    def to_line(self) -> str:
        return f"{self.time:.3f},{self.robot_id},{self.kind.name},{self.detail}"


@dataclass
class Battery:
    level: float = 1.0
    drain_per_meter: float = 0.0008
    drain_per_second: float = 0.0001
    charge_rate: float = 0.002

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ValueError("battery level must lie in [0, 1]")
        if min(self.drain_per_meter, self.drain_per_second, self.charge_rate) <= 0:
            raise ValueError("battery rates must be positive")

    def drain(self, meters=0.0, seconds=0.0):
        self.level = max(0.0, self.level - meters * self.drain_per_meter - seconds * self.drain_per_second)

    def charge(self, seconds):
        self.level = min(1.0, self.level + seconds * self.charge_rate)


@dataclass(frozen=True)
class ContaminationReport:
    location: GeoPoint
    exceeded: dict
    timestamp: float
    gases: GasVector

    def __post_init__(self):
        if not self.exceeded:
            raise ValueError("a report needs at least one exceeded gas")
        for gas, (measured, threshold) in self.exceeded.items():
            if not measured > threshold:
                raise ValueError(f"{gas}: {measured} does not exceed {threshold}")


def detect(reading: SensorReading, thresholds: GasVector = DEFAULT_THRESHOLDS) -> ContaminationReport | None:
    limits = thresholds.as_tuple()
    if min(limits) <= 0:
        raise ValueError("thresholds must be positive")
    exceeded = {
        gas: (value, limit)
        for gas, value, limit in zip(GASES, reading.gases.as_tuple(), limits)
        if value > limit
    }
    if not exceeded:
        return None
    return ContaminationReport(reading.position, exceeded, reading.timestamp, reading.gases)


def report_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class SessionMemory:
    readings: list = field(default_factory=list)
    session_index: int = 1
    archive: list = field(default_factory=list, repr=False)

    def append(self, reading: SensorReading, label: str | None):
        self.readings.append((reading, label))

    def close_session(self):
        self.archive.append((self.session_index, len(self.readings)))
        self.readings = []
        self.session_index += 1


class _PingPongPath:
    """Arc-length parameterization of the plan, traversed forward then backward."""

    def __init__(self, plan: CoveragePlan):
        v = plan.vertices
        self.verts = v
        seg = np.sqrt((np.diff(v, axis=0) ** 2).sum(axis=1)) if len(v) > 1 else np.zeros(0)
        self.cum = np.r_[0.0, np.cumsum(seg)]
        self.length = float(self.cum[-1])

    def point(self, s: float) -> tuple[float, float]:
        if self.length == 0.0:
            return float(self.verts[0, 0]), float(self.verts[0, 1])
        s = s % (2.0 * self.length)
        if s > self.length:
            s = 2.0 * self.length - s
        return float(np.interp(s, self.cum, self.verts[:, 0])), float(np.interp(s, self.cum, self.verts[:, 1]))


@dataclass
class Robot:
    robot_id: int
    plan: CoveragePlan
    battery: Battery = field(default_factory=Battery)
    speed: float = 1.0
    cadence_hz: float = 1.0
    thresholds: GasVector = DEFAULT_THRESHOLDS
    leave_threshold: float = 1.0
    dock: tuple[float, float] = (0.0, 0.0)
    offset: tuple[float, float] = (0.0, 0.0)  # local origin in the plant (field) frame
    t: float = 0.0

    def __post_init__(self):
        if self.speed <= 0 or self.cadence_hz <= 0:
            raise ValueError("speed and cadence must be positive")
        self.frame: LocalFrame = self.plan.frame
        self.state = State.SCANNING
        self.pending_report: ContaminationReport | None = None
        self.outbox: list[ContaminationReport] = []
        self.memory = SessionMemory()
        self.path = _PingPongPath(self.plan)
        self.s = 0.0
        self.pos = self.path.point(0.0)
        self.next_sample_t = self.t + 1.0 / self.cadence_hz
        self.armed = True
        self.low_flag = False
        self.distance_travelled = 0.0

    @property
    def session_index(self) -> int:
        return self.memory.session_index

    def geo_position(self) -> GeoPoint:
        return self.frame.to_geo(*self.pos)

    def field_position(self) -> tuple[float, float]:
        return (self.pos[0] + self.offset[0], self.pos[1] + self.offset[1])

    def _event(self, kind, detail=""):
        return Event(self.t, self.robot_id, kind, detail)


def step(robot: Robot, field: GasField, dt: float, rng: np.random.Generator) -> list[Event]:
    """Advance a scanning robot by ``dt`` seconds along its plan."""
    if robot.state is not State.SCANNING:
        raise InvalidStateError(f"robot {robot.robot_id} cannot scan while {robot.state.value}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    events = []
    ds = robot.speed * dt
    robot.s += ds
    robot.pos = robot.path.point(robot.s)
    robot.t += dt
    robot.distance_travelled += ds
    robot.battery.drain(meters=ds, seconds=dt)

    if robot.t + 1e-9 >= robot.next_sample_t:
        robot.next_sample_t += 1.0 / robot.cadence_hz
        fpos = robot.field_position()
        reading = sample(field, fpos, robot.t, rng, to_geo=lambda x, y: robot.geo_position())
        label = true_label(field, fpos, robot.t)
        robot.memory.append(reading, label)
        g = reading.gases
        events.append(robot._event(
            EventKind.ReadingTaken,
            f"x={robot.pos[0]:.3f};y={robot.pos[1]:.3f};co2={g.co2_ppm:.4f};co={g.co_ppm:.4f};ch4={g.ch4_ppm:.4f};label={label}",
        ))
        report = detect(reading, robot.thresholds)
        if report is None:
            robot.armed = True
        elif robot.armed:
            # one report per excursion: re-armed by the next clean reading
            robot.armed = False
            events.append(robot._event(EventKind.ThresholdExceeded, "+".join(sorted(report.exceeded))))
            enter_critical(robot, report)

    if robot.battery.level < LOW_BATTERY and not robot.low_flag:
        robot.low_flag = True
        events.append(robot._event(EventKind.BatteryLow, f"level={robot.battery.level:.4f}"))
    return events


def enter_critical(robot: Robot, report: ContaminationReport) -> None:
    if robot.state is not State.SCANNING:
        raise InvalidStateError(f"robot {robot.robot_id} is already {robot.state.value}")
    robot.state = State.CRITICAL
    robot.pending_report = report
    robot.outbox.append(report)


def wait(robot: Robot, seconds: float) -> None:
    """Time passes with the robot halted (critical or docked)."""
    robot.t += seconds
    robot.battery.drain(seconds=seconds)


def acknowledge(robot: Robot, expected_hash: str, ack_hash: str) -> Event:
    if robot.state is not State.CRITICAL:
        raise InvalidStateError(f"robot {robot.robot_id} is not waiting for an acknowledgment")
    if ack_hash != expected_hash:
        raise InvalidStateError(f"ack {ack_hash} does not match pending report {expected_hash}")
    robot.state = State.SCANNING
    robot.pending_report = None
    return robot._event(EventKind.AckReceived, ack_hash)


def return_to_dock(robot: Robot) -> Event:
    if robot.state is not State.SCANNING:
        raise InvalidStateError(f"robot {robot.robot_id} cannot leave for the dock while {robot.state.value}")
    if not robot.battery.level < LOW_BATTERY:
        raise InvalidStateError("docking is only triggered by a low battery")
    dist = math.hypot(robot.pos[0] - robot.dock[0], robot.pos[1] - robot.dock[1])
    robot.t += dist / robot.speed
    robot.distance_travelled += dist
    robot.battery.drain(meters=dist, seconds=dist / robot.speed)
    robot.pos = robot.dock
    robot.state = State.CHARGING
    return robot._event(EventKind.DockArrive, f"level={robot.battery.level:.4f}")


def charging_cycle(robot: Robot, trainer, seconds_per_sample: float = 0.05):
    """Charge while training on the session's memory.

    ``trainer(readings)`` receives the list of ``(SensorReading, label)`` pairs
    and returns a LocalUpdate. The robot departs once training is done and the
    battery has reached ``leave_threshold``. Returns ``(update, events)``.
    """
    if robot.state is not State.CHARGING:
        raise InvalidStateError(f"robot {robot.robot_id} is not docked")
    start = robot.t
    update = trainer(list(robot.memory.readings))
    train_time = seconds_per_sample * len(robot.memory.readings)
    charge_time = max(0.0, (robot.leave_threshold - robot.battery.level) / robot.battery.charge_rate)
    events = [Event(start + train_time, robot.robot_id, EventKind.TrainDone, f"n={update.n_samples}")]
    elapsed = max(train_time, charge_time)
    robot.battery.charge(elapsed)
    if elapsed >= charge_time:
        robot.battery.level = max(robot.battery.level, robot.leave_threshold)
    robot.t = start + elapsed
    robot.memory.close_session()
    # next session restarts the plan from the dock, which sits at the plan origin
    robot.state = State.SCANNING
    robot.s = 0.0
    robot.pos = robot.path.point(0.0)
    robot.next_sample_t = robot.t + 1.0 / robot.cadence_hz
    robot.armed = True
    robot.low_flag = False
    return update, events
