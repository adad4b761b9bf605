"""Session loop tying robots, local servers and the global server together.

One session is one synchronous federated round: every robot installs the
current global model, scans until its battery runs low, reports contamination
to its plant's local server over ChaCha20, docks, trains, and uploads its
weights to the global server over a BB84-keyed channel. The global server
then averages the accepted uploads.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, chacha, qkd
from ._jit import backend_name
from .config import ConfigError, SimConfig
from .coverage import EARTH_RADIUS_M, GeoPoint, plan_lawnmower
from .envsim import GasVector, ScenarioSpec, generate_scenario
from .fedlearn import (
    CLASS_INDEX,
    Dataset,
    FeatureMap,
    LocalUpdate,
    ModelWeights,
    NoProgressError,
    SessionMetrics,
    UndefinedMetricError,
    deserialize_weights,
    evaluate,
    fedavg,
    global_loss,
    local_train,
    serialize_weights,
)
from .robot import (
    Battery,
    Event,
    EventKind,
    Robot,
    State,
    acknowledge,
    charging_cycle,
    report_hash,
    return_to_dock,
    step,
    wait,
)

log = logging.getLogger(__name__)

TABLE_SESSIONS = (1, 5, 10, 15, 20, 25, 30)
MAX_RETRANSMISSIONS = 10_000

# purpose codes for the seed tree: plant -> robot -> session -> purpose
P_SCENARIO, P_SENSING, P_SPLIT, P_TRAIN, P_QKD, P_SESSION_KEY, P_NETWORK = range(7)


class InvariantViolation(RuntimeError):
    def __init__(self, message, events=()):
        super().__init__(message)
        self.events = list(events)


def rng_for(seed: int, plant: int, robot: int, session: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(plant, robot, session, purpose)))


# --------------------------------------------------------------------------
# Local server
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ack:
    robot_id: int
    report_hash: str | None
    ok: bool = True
    reason: str = ""


@dataclass
class LogRecord:
    receive_time: float
    robot_id: int
    record: chacha.TelemetryRecord
    report_hash: str
    ack_sent: bool = False

    def to_line(self):
        r = self.record
        return (f"{self.receive_time:.3f},{self.robot_id},{self.report_hash},{r.lat!r},{r.lon!r},"
                f"{r.co2_ppm!r},{r.co_ppm!r},{r.ch4_ppm!r},{r.timestamp_ms},{int(self.ack_sent)}")


@dataclass
class LocalServer:
    plant_id: int
    keys: dict = field(default_factory=dict)  # (robot_id, session) -> ChaChaKey
    log: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    _seen: dict = field(default_factory=dict, repr=False)

    def provision(self, robot_id: int, session: int, key: bytes) -> None:
        self.keys[(robot_id, session)] = chacha.ChaChaKey(key)

    def receive(self, raw: bytes, robot_id: int, session: int, receive_time: float) -> Ack:
        """Decrypt, decode, log and acknowledge one telemetry frame."""
        key = self.keys.get((robot_id, session))
        if key is None:
            return Ack(robot_id, None, ok=False, reason="no session key")
        try:
            frame = chacha.CipherFrame.from_bytes(raw)
        except chacha.MalformedFrameError as exc:
            self.errors.append((receive_time, robot_id, str(exc)))
            return Ack(robot_id, None, ok=False, reason=str(exc))
        plaintext = chacha.decrypt(key, frame)
        try:
            record = chacha.decode_record(plaintext)
        except chacha.EncodingError as exc:
            self.errors.append((receive_time, robot_id, str(exc)))
            return Ack(robot_id, None, ok=False, reason=str(exc))
        h = report_hash(plaintext)
        if h not in self._seen:
            entry = LogRecord(receive_time, robot_id, record, h)
            self.log.append(entry)
            self._seen[h] = entry
        self._seen[h].ack_sent = True
        return Ack(robot_id, h)


def local_server_receive(server: LocalServer, frame: chacha.CipherFrame, robot_id: int, session: int,
                         receive_time: float = 0.0) -> Ack:
    return server.receive(frame.to_bytes(), robot_id, session, receive_time)


# --------------------------------------------------------------------------
# Global server transfer
# --------------------------------------------------------------------------

@dataclass
class TransferOutcome:
    status: str  # "delivered" or "dropped"
    attempts: list  # (qber, decision) per BB84 exchange
    weights: ModelWeights | None = None
    ciphertext_bytes: int = 0
    intact: bool = False

    @property
    def delivered(self) -> bool:
        return self.status == "delivered"


def global_exchange(update: LocalUpdate, params, rng: np.random.Generator) -> TransferOutcome:
    """Ship one LocalUpdate to the global server under a fresh BB84 key.

    A gate abort triggers a fresh exchange, up to ``params.max_attempts``
    exchanges in total; after that the update is dropped for the round.
    """
    payload = serialize_weights(update.weights)
    attempts = []
    for _ in range(params.max_attempts):
        result = qkd.bb84_exchange(params.n_qubits, qkd.EvePolicy(params.eve_fraction),
                                   params.channel_flip_prob, rng)
        decision = qkd.keygate(result.estimate, params.abort_threshold)
        attempts.append((result.estimate.ratio, decision.value))
        if decision is qkd.Decision.ABORT:
            continue
        alice, bob = qkd.reconcile(result.alice_key, result.bob_key, result.estimate.ratio, rng)
        robot_key = qkd.KeyMaterial.from_sifted(alice)
        server_key = qkd.KeyMaterial.from_sifted(bob)
        if params.key_mode == "otp":
            try:
                sealed = qkd.otp_encrypt(payload, robot_key)
            except qkd.KeyExhaustionError as exc:
                need = qkd.qubits_for_key_bits(len(payload) * 8, params.abort_threshold)
                raise ConfigError(
                    f"one-time pad needs {len(payload) * 8} key bits but the exchange yielded "
                    f"{len(alice)}; set qkd.n_qubits >= {need}"
                ) from exc
            opened = qkd.otp_decrypt(sealed, server_key)
        else:
            try:
                nonce = chacha.make_nonce(update.robot_id, update.session_index)
                sealed = chacha.chacha20_xor(qkd.derive_chacha_key(robot_key), nonce, payload)
                opened = chacha.chacha20_xor(qkd.derive_chacha_key(server_key), nonce, sealed)
            except qkd.KeyExhaustionError as exc:
                raise ConfigError("derive-chacha mode needs 256 key bits; raise qkd.n_qubits") from exc
        received = deserialize_weights(opened, version=update.weights.version)
        intact = received.values.tobytes() == update.weights.values.tobytes()
        return TransferOutcome("delivered", attempts, received, len(sealed), intact)
    return TransferOutcome("dropped", attempts)


# --------------------------------------------------------------------------
# Records and report
# --------------------------------------------------------------------------

@dataclass
class RoundRecord:
    session_index: int
    uploads: list  # dicts, one per robot
    model_version: int
    skipped: bool
    metrics: dict  # plant_id -> SessionMetrics
    loss_before: float
    loss_after: float

    def to_json(self) -> dict:
        return {
            "session": self.session_index,
            "model_version": self.model_version,
            "skipped": self.skipped,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "metrics": {str(k): list(m.as_row()) for k, m in sorted(self.metrics.items())},
            "uploads": self.uploads,
        }


@dataclass
class SimulationReport:
    config: SimConfig
    records: list
    events: dict  # plant_id -> list[Event], sorted
    server_logs: dict  # plant_id -> LocalServer
    final_weights: ModelWeights
    robots: dict = field(default_factory=dict)

    def metrics_rows(self, plant_id):
        return [(r.session_index, *r.metrics[plant_id].as_row()) for r in self.records]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def metrics_csv(plant_id: int, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["plant", "session", "accuracy", "f1", "precision", "recall", "roc_auc"])
    for session, *vals in rows:
        w.writerow([plant_id, session, *(_fmt(v) for v in vals)])
    return buf.getvalue()


def read_metrics_csv(path) -> tuple[int, list]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no metric rows")
    plant = int(rows[0]["plant"])
    out = [(int(r["session"]), *(float(r[k]) for k in ("accuracy", "f1", "precision", "recall", "roc_auc"))) for r in rows]
    return plant, out


def render_table(per_plant: dict) -> str:
    """Text table of the selected sessions, one block per plant."""
    lines = []
    header = f"{'Session':<11}{'Accuracy':>10}{'F1':>10}{'Precision':>11}{'Recall':>10}{'ROC AUC':>10}"
    for plant_id in sorted(per_plant):
        rows = {r[0]: r for r in per_plant[plant_id]}
        lines.append(f"Plant {plant_id}")
        lines.append(header)
        lines.append("-" * len(header))
        for s in TABLE_SESSIONS:
            if s not in rows:
                continue
            _, acc, f1, prec, rec, auc = rows[s]
            lines.append(f"{'Session ' + str(s):<11}{_fmt(acc):>10}{_fmt(f1):>10}{_fmt(prec):>11}{_fmt(rec):>10}{_fmt(auc):>10}")
        lines.append("")
    return "\n".join(lines)


def preflight_output_dir(output_dir) -> Path:
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def emit_report(report: SimulationReport, output_dir) -> list[Path]:
    if not report.records:
        raise ValueError("no round records to report")
    out = preflight_output_dir(output_dir)
    # render everything first so a failure leaves no partial output
    files = {}
    per_plant = {}
    for plant in report.config.plants:
        pid = plant.plant_id
        rows = report.metrics_rows(pid)
        text = metrics_csv(pid, rows)
        files[f"metrics_plant{pid}.csv"] = text
        # the table is rendered from the CSV text so `report` reproduces it byte for byte
        per_plant[pid] = read_metrics_csv_text(text)
        files[f"events_plant{pid}.log"] = "t,robot_id,event_kind,detail\n" + "".join(
            e.to_line() + "\n" for e in report.events[pid]
        )
        server = report.server_logs[pid]
        files[f"localserver_plant{pid}.log"] = (
            "receive_time,robot_id,report_hash,lat,lon,co2_ppm,co_ppm,ch4_ppm,timestamp_ms,ack_sent\n"
            + "".join(r.to_line() + "\n" for r in server.log)
        )
    files["table.txt"] = render_table(per_plant)
    files["rounds.jsonl"] = "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in report.records)
    files["manifest.json"] = json.dumps(
        {"package_version": __version__, "seed": report.config.seed, "kernel_backend": backend_name(),
         "config": report.config.to_dict()},
        indent=2, sort_keys=True,
    ) + "\n"
    written = []
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        written.append(path)
    return written


def read_metrics_csv_text(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [(int(r["session"]), *(float(r[k]) for k in ("accuracy", "f1", "precision", "recall", "roc_auc"))) for r in rows]


def rerender_table(input_dir) -> str:
    per_plant = {}
    for path in sorted(Path(input_dir).glob("metrics_plant*.csv")):
        plant, rows = read_metrics_csv(path)
        per_plant[plant] = rows
    if not per_plant:
        raise FileNotFoundError(f"no metrics_plant*.csv files in {input_dir}")
    return render_table(per_plant)


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------

def _plant_origin(plant):
    return GeoPoint(min(r.box[0] for r in plant.robots), min(r.box[1] for r in plant.robots))


def _offset(origin: GeoPoint, p: GeoPoint):
    # east/north components of the equirectangular distance from the plant origin
    y = (p.lat - origin.lat) * math.pi / 180 * EARTH_RADIUS_M
    x = (p.lon - origin.lon) * math.pi / 180 * EARTH_RADIUS_M * math.cos(origin.lat * math.pi / 180)
    return x, y


def _build_robot(rc, origin, thresholds) -> Robot:
    plan = plan_lawnmower(rc.bbox, rc.strip_width, rc.orientation)
    return Robot(
        robot_id=rc.robot_id,
        plan=plan,
        battery=Battery(1.0, rc.battery.drain_per_meter, rc.battery.drain_per_second, rc.battery.charge_rate),
        speed=rc.speed,
        cadence_hz=rc.cadence_hz,
        thresholds=thresholds,
        dock=tuple(rc.dock) if rc.dock is not None else (0.0, 0.0),
        offset=_offset(origin, rc.bbox.south_west),
    )


def _readings_to_dataset(readings, fmap: FeatureMap) -> Dataset:
    if not readings:
        return Dataset(np.zeros((0, 7)), np.zeros(0, dtype=np.int64))
    gases = np.array([r.gases.as_tuple() for r, _ in readings])
    labels = np.array([CLASS_INDEX[lbl] for _, lbl in readings], dtype=np.int64)
    return Dataset(fmap(gases), labels)


def _collective_thresholds(readings_by_robot, static):
    """Experimental: mean + 6 sd of the clean-looking readings pooled over robots."""
    pooled = [r.gases.as_array() for readings in readings_by_robot for r, _ in readings
              if np.all(r.gases.as_array() <= np.asarray(static))]
    if len(pooled) < 10:
        return GasVector(*static)
    arr = np.array(pooled)
    thr = arr.mean(axis=0) + 6.0 * arr.std(axis=0)
    return GasVector(*np.maximum(thr, 1e-6))


def _handle_report(robot: Robot, server: LocalServer, key: chacha.ChaChaKey, counter: int,
                   net, net_rng, events: list) -> None:
    report = robot.pending_report
    payload = chacha.encode_report(report)
    h = report_hash(payload)
    frame = chacha.encrypt(key, payload, chacha.make_nonce(robot.robot_id, counter)).to_bytes()
    for attempt in range(1, MAX_RETRANSMISSIONS + 1):
        events.append(Event(robot.t, robot.robot_id, EventKind.ReportSent, f"{h};attempt={attempt}"))
        frame_lost = net_rng.random() < net.frame_drop_prob
        ack_lost = net_rng.random() < net.ack_drop_prob
        if not frame_lost:
            ack = server.receive(frame, robot.robot_id, robot.session_index, robot.t + net.link_latency_s)
            if ack.ok and not ack_lost:
                wait(robot, 2 * net.link_latency_s)
                events.append(acknowledge(robot, h, ack.report_hash))
                return
        wait(robot, net.ack_timeout_s)
    raise InvariantViolation(f"robot {robot.robot_id}: report {h} never acknowledged", events[-50:])


def run_simulation(config: SimConfig, progress=None) -> SimulationReport:
    config.validate()
    seed = config.seed
    fmap = FeatureMap(tuple(config.features.center), tuple(config.features.scale))
    thresholds = GasVector(*config.thresholds)

    fields, robots, servers, origins = {}, {}, {}, {}
    for plant in config.plants:
        pid = plant.plant_id
        spec = ScenarioSpec.from_dict(plant.scenario)
        fields[pid] = generate_scenario(spec, rng_for(seed, pid, 0, 0, P_SCENARIO))
        origins[pid] = _plant_origin(plant)
        servers[pid] = LocalServer(pid)
        for rc in plant.robots:
            robots[rc.robot_id] = (pid, _build_robot(rc, origins[pid], thresholds))

    global_w = ModelWeights.zeros()
    events = {p.plant_id: [] for p in config.plants}
    records = []
    clock = 0.0
    lp = config.learning

    for session in range(1, config.sessions + 1):
        uploads, accepted = [], []
        train_sets, test_sets = [], {p.plant_id: [] for p in config.plants}
        session_readings = []
        end_times = []
        for rid in sorted(robots):
            pid, robot = robots[rid]
            ev = events[pid]
            robot.t = clock
            robot.next_sample_t = clock + 1.0 / robot.cadence_hz
            ev.append(Event(clock, rid, EventKind.GlobalModelInstalled, f"version={global_w.version}"))
            key_bytes = rng_for(seed, pid, rid, session, P_SESSION_KEY).bytes(32)
            servers[pid].provision(rid, session, key_bytes)
            robot_key = chacha.ChaChaKey(key_bytes)
            sense_rng = rng_for(seed, pid, rid, session, P_SENSING)
            net_rng = rng_for(seed, pid, rid, session, P_NETWORK)
            counter = 0
            field_ = fields[pid]
            while True:
                ev.extend(step(robot, field_, config.dt, sense_rng))
                if not robot.frame.contains(*robot.pos):
                    raise InvariantViolation(f"robot {rid} left its bounding box at {robot.pos}", ev[-50:])
                if robot.state is State.CRITICAL:
                    _handle_report(robot, servers[pid], robot_key, counter, config.network, net_rng, ev)
                    counter += 1
                if robot.low_flag and robot.state is State.SCANNING:
                    ev.append(return_to_dock(robot))
                    break
                if robot.t - clock > config.max_session_seconds:
                    raise InvariantViolation(f"robot {rid} never ran low on battery", ev[-50:])
            if not 0.0 <= robot.battery.level <= 1.0:
                raise InvariantViolation(f"robot {rid} battery out of range", ev[-50:])

            session_readings.append(list(robot.memory.readings))
            split_rng = rng_for(seed, pid, rid, session, P_SPLIT)
            train_rng = rng_for(seed, pid, rid, session, P_TRAIN)
            held = {}

            def trainer(readings, _rid=rid, _held=held, _split=split_rng, _train=train_rng):
                data = _readings_to_dataset(readings, fmap)
                train, test = data.split(_split, lp.train_fraction)
                _held["train"], _held["test"] = train, test
                return local_train(global_w, train, lp.lr, lp.epochs, _train, lp.batch_size,
                                   robot_id=_rid, session_index=session)

            update, train_events = charging_cycle(robot, trainer, lp.seconds_per_sample)
            ev.extend(train_events)
            train_sets.append(held["train"])
            test_sets[pid].append(held["test"])

            outcome = global_exchange(update, config.qkd, rng_for(seed, pid, rid, session, P_QKD))
            robot.t += config.qkd.latency_s * len(outcome.attempts)
            if outcome.delivered and not outcome.intact:
                raise InvariantViolation(f"robot {rid}: weights corrupted in transfer", ev[-50:])
            ev.append(Event(robot.t, rid, EventKind.WeightsUploaded,
                            f"{outcome.status};attempts={len(outcome.attempts)};qber={outcome.attempts[-1][0]:.4f}"))
            uploads.append({
                "robot_id": rid,
                "plant_id": pid,
                "n_samples": update.n_samples,
                "status": outcome.status,
                "bytes": outcome.ciphertext_bytes,
                "attempts": [[round(q, 6), d] for q, d in outcome.attempts],
                "weights": update.weights.values.tolist(),
            })
            if outcome.delivered:
                accepted.append(LocalUpdate(outcome.weights, update.n_samples, rid, session))
            end_times.append(robot.t)

        nonempty = [d for d in train_sets if len(d)]
        loss_before = global_loss(global_w, nonempty) if nonempty else math.nan
        try:
            new_w = fedavg(accepted)
            skipped = False
        except NoProgressError:
            new_w = global_w.copy()
            skipped = True
        loss_after = global_loss(new_w, nonempty) if nonempty else math.nan
        global_w = new_w

        metrics = {}
        for plant in config.plants:
            test = Dataset.concat(test_sets[plant.plant_id])
            if len(test) == 0:
                metrics[plant.plant_id] = SessionMetrics(math.nan, math.nan, math.nan, math.nan, math.nan)
                continue
            try:
                metrics[plant.plant_id] = evaluate(global_w, test)
            except UndefinedMetricError as exc:
                metrics[plant.plant_id] = exc.partial
        records.append(RoundRecord(session, uploads, global_w.version, skipped, metrics, loss_before, loss_after))

        if config.threshold_mode == "collective":
            new_thr = _collective_thresholds(session_readings, config.thresholds)
            for _, robot in robots.values():
                robot.thresholds = new_thr

        clock = max(end_times)
        if progress is not None:
            progress(session, metrics)
        log.info("session %d: version %d, %s", session, global_w.version,
                 {k: round(m.accuracy, 4) for k, m in metrics.items()})

    for pid in events:
        events[pid].sort(key=Event.sort_key)
    return SimulationReport(config, records, events, servers, global_w, {rid: r for rid, (_, r) in robots.items()})


def simulate_to_dir(config: SimConfig, output_dir=None) -> SimulationReport:
    out = output_dir if output_dir is not None else config.output_dir
    preflight_output_dir(out)
    report = run_simulation(config)
    emit_report(report, out)
    return report


def dump_diagnostics(exc: InvariantViolation, output_dir) -> Path | None:
    try:
        out = preflight_output_dir(output_dir)
    except OSError:
        return None
    path = out / "invariant_violation.log"
    path.write_text(str(exc) + "\n" + "".join(e.to_line() + "\n" for e in exc.events))
    return path


__all__ = [
    "Ack", "InvariantViolation", "LocalServer", "RoundRecord", "SimulationReport", "TransferOutcome",
    "emit_report", "global_exchange", "local_server_receive", "rerender_table", "run_simulation",
    "simulate_to_dir", "render_table",
]
