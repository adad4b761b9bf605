import json
import re
from collections import Counter

import numpy as np
import pytest

from npp_fedsim import chacha
from npp_fedsim.config import ConfigError, QkdParams, SimConfig, default_config
from npp_fedsim.coverage import GeoPoint
from npp_fedsim.envsim import GasVector
from npp_fedsim.fedlearn import LocalUpdate, ModelWeights, fedavg
from npp_fedsim.orchestrator import (
    TABLE_SESSIONS,
    InvariantViolation,
    LocalServer,
    dump_diagnostics,
    emit_report,
    global_exchange,
    local_server_receive,
    rerender_table,
    rng_for,
    run_simulation,
)
from npp_fedsim.robot import ContaminationReport, EventKind

KEY = bytes(range(32))


def small_config(**overrides):
    d = {
        "seed": 11,
        "sessions": 2,
        "plants": [{
            "plant_id": 1,
            "scenario": {"extent": [30, 30]},
            "robots": [{"robot_id": 1, "box": [45.52, 4.75, 45.52018, 4.750257]}],
        }],
    }
    d.update(overrides)
    return SimConfig.from_dict(d)


def frame_for(report, counter=0, key=None):
    key = key or chacha.ChaChaKey(KEY)
    payload = chacha.encode_report(report)
    return payload, chacha.encrypt(key, payload, chacha.make_nonce(1, counter))


REPORT = ContaminationReport(GeoPoint(45.5, 4.75), {"co2": (1500.0, 1000.0)}, 3.0, GasVector(1500.0, 1.0, 2.0))


def test_local_server_logs_and_acks():
    server = LocalServer(1)
    server.provision(1, 1, KEY)
    payload, frame = frame_for(REPORT)
    ack = local_server_receive(server, frame, 1, 1, receive_time=3.2)
    assert ack.ok and ack.robot_id == 1
    assert len(server.log) == 1
    entry = server.log[0]
    assert entry.record == chacha.decode_record(payload)
    assert entry.ack_sent and entry.receive_time == 3.2


def test_local_server_nacks_bad_frames():
    server = LocalServer(1)
    server.provision(1, 1, KEY)
    _, frame = frame_for(REPORT)
    raw = frame.to_bytes()
    assert not server.receive(raw[:10], 1, 1, 0.0).ok
    assert not server.receive(raw[:-3], 1, 1, 0.0).ok  # decodes to 45 bytes
    assert not server.receive(raw, 2, 1, 0.0).ok  # no key for robot 2
    assert server.log == []
    assert len(server.errors) == 2


def test_local_server_dedups_retransmissions():
    server = LocalServer(1)
    server.provision(1, 1, KEY)
    _, frame = frame_for(REPORT)
    a1 = server.receive(frame.to_bytes(), 1, 1, 1.0)
    a2 = server.receive(frame.to_bytes(), 1, 1, 6.0)
    assert a1 == a2 and len(server.log) == 1


def test_rng_streams_are_independent_and_repeatable():
    a = rng_for(7, 1, 2, 3, 0).random(4)
    assert np.array_equal(a, rng_for(7, 1, 2, 3, 0).random(4))
    assert not np.array_equal(a, rng_for(7, 1, 2, 3, 1).random(4))
    assert not np.array_equal(a, rng_for(8, 1, 2, 3, 0).random(4))


def _update(seed=0):
    rng = np.random.default_rng(seed)
    return LocalUpdate(ModelWeights(rng.normal(size=40)), 120, robot_id=3, session_index=2)


def test_exchange_without_eve_delivers_intact():
    out = global_exchange(_update(), QkdParams(), np.random.default_rng(0))
    assert out.delivered and out.intact
    assert out.attempts == [(0.0, "accept")]
    assert np.array_equal(out.weights.values, _update().weights.values)
    assert out.ciphertext_bytes == 8 + 40 * 8


def test_exchange_with_full_eve_drops_after_three_aborts():
    out = global_exchange(_update(), QkdParams(eve_fraction=1.0), np.random.default_rng(0))
    assert out.status == "dropped" and out.weights is None
    assert len(out.attempts) == 3
    assert all(d == "abort" and q > 0.11 for q, d in out.attempts)


def test_otp_key_exhaustion_is_a_config_error():
    with pytest.raises(ConfigError, match="n_qubits >= "):
        global_exchange(_update(), QkdParams(n_qubits=256), np.random.default_rng(0))


def test_derive_chacha_mode_needs_few_qubits():
    out = global_exchange(_update(), QkdParams(n_qubits=2048, key_mode="derive-chacha"), np.random.default_rng(0))
    assert out.delivered and out.intact


def test_clean_single_robot_run(tmp_path):
    cfg = small_config(sessions=1)
    cfg.plants[0].scenario["classes"] = {"co2": {"count": 0}}
    report = run_simulation(cfg)
    assert len(report.records) == 1
    assert report.server_logs[1].log == []
    kinds = Counter(e.kind for e in report.events[1])
    assert kinds[EventKind.ThresholdExceeded] == 0 and kinds[EventKind.ReportSent] == 0
    assert kinds[EventKind.DockArrive] == 1 and kinds[EventKind.WeightsUploaded] == 1
    files = {p.name for p in emit_report(report, tmp_path)}
    assert {"metrics_plant1.csv", "events_plant1.log", "table.txt", "manifest.json"} <= files


def test_fault_injection_retransmits_until_acked():
    cfg = small_config(network={"frame_drop_prob": 0.4, "ack_drop_prob": 0.4})
    report = run_simulation(cfg)
    events = report.events[1]
    sent = Counter(e.detail.split(";")[0] for e in events if e.kind is EventKind.ReportSent)
    acked = Counter(e.detail for e in events if e.kind is EventKind.AckReceived)
    assert sent and set(sent) == set(acked)
    assert all(n == 1 for n in acked.values())
    assert max(sent.values()) > 1  # at least one report needed a retry
    log = report.server_logs[1].log
    assert len(log) == len({r.report_hash for r in log}) == len(acked)
    assert all(r.ack_sent for r in log)


def test_invariant_violation_dumps_events(tmp_path):
    cfg = small_config(max_session_seconds=30.0)
    with pytest.raises(InvariantViolation) as info:
        run_simulation(cfg)
    assert info.value.events
    path = dump_diagnostics(info.value, tmp_path)
    assert path.read_text().startswith("robot 1 never ran low")


def test_emit_report_rejects_empty_and_unwritable(tmp_path):
    report = run_simulation(small_config(sessions=1))
    report.records = []
    with pytest.raises(ValueError):
        emit_report(report, tmp_path / "out")
    assert not (tmp_path / "out").exists() or not any((tmp_path / "out").iterdir())
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(run_simulation(small_config(sessions=1)), blocker / "sub")


def test_small_runs_are_deterministic(tmp_path):
    a = emit_report(run_simulation(small_config()), tmp_path / "a")
    b = emit_report(run_simulation(small_config()), tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"plants": []})
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"plants": [{"plant_id": 1, "robots": []}]})
    with pytest.raises(ConfigError):
        small_config(sessions=0)
    with pytest.raises(ConfigError):
        small_config(qkd={"key_mode": "rsa"})
    box = [45.52, 4.75, 45.5202, 4.7503]
    with pytest.raises(ConfigError, match="overlaps"):
        SimConfig.from_dict({"plants": [{"plant_id": 1, "robots": [
            {"robot_id": 1, "box": box}, {"robot_id": 2, "box": [45.5201, 4.7501, 45.5203, 4.7504]}]}]})
    with pytest.raises(ConfigError, match="duplicate"):
        SimConfig.from_dict({"plants": [{"plant_id": 1, "robots": [{"robot_id": 1, "box": box}]},
                                        {"plant_id": 2, "robots": [{"robot_id": 1, "box": box}]}]})


def test_default_config_shape():
    cfg = default_config()
    assert [len(p.robots) for p in cfg.plants] == [4, 4]
    assert cfg.sessions == 30
    assert SimConfig.from_dict(json.loads(cfg.to_json())).to_dict() == cfg.to_dict()


# --- properties of the full default run (shared fixture) ---

def test_default_run_shape(default_run):
    report, out, _ = default_run
    assert len(report.records) == 30
    for pid in (1, 2):
        lines = (out / f"metrics_plant{pid}.csv").read_text().splitlines()
        assert lines[0] == "plant,session,accuracy,f1,precision,recall,roc_auc"
        assert len(lines) == 31


def test_table_has_seven_rows_per_plant(default_run):
    _, out, _ = default_run
    text = (out / "table.txt").read_text()
    for block in text.strip().split("\n\n"):
        rows = [ln for ln in block.splitlines() if re.match(r"Session \d", ln)]
        assert [int(r.split()[1]) for r in rows] == list(TABLE_SESSIONS)
    assert text.count("Plant ") == 2
    assert rerender_table(out) == text


def test_model_version_increases_by_one(default_run):
    report, _, _ = default_run
    assert [r.model_version for r in report.records] == list(range(1, 31))
    for pid, events in report.events.items():
        installs = [e for e in events if e.kind is EventKind.GlobalModelInstalled]
        by_session = Counter(e.detail for e in installs)
        assert by_session == Counter({f"version={v}": 4 for v in range(30)})


def test_aggregate_equals_fedavg_of_accepted(default_run):
    report, out, _ = default_run
    rounds = [json.loads(line) for line in (out / "rounds.jsonl").read_text().splitlines()]
    prev = ModelWeights.zeros()
    for r in rounds:
        accepted = [LocalUpdate(ModelWeights(u["weights"], version=prev.version), u["n_samples"], u["robot_id"])
                    for u in r["uploads"] if u["status"] == "delivered"]
        prev = fedavg(accepted)
    assert np.array_equal(prev.values, report.final_weights.values)


def test_every_report_acknowledged_once(default_run):
    report, _, _ = default_run
    for pid, events in report.events.items():
        sent = {e.detail.split(";")[0] for e in events if e.kind is EventKind.ReportSent}
        acks = Counter(e.detail for e in events if e.kind is EventKind.AckReceived)
        assert sent == set(acks) and all(v == 1 for v in acks.values())
        assert all(r.ack_sent for r in report.server_logs[pid].log)


def test_event_log_totally_ordered(default_run):
    report, _, _ = default_run
    for events in report.events.values():
        keys = [e.sort_key() for e in events]
        assert keys == sorted(keys)


def test_global_loss_mostly_non_increasing(default_run):
    report, _, _ = default_run
    ok = sum(r.loss_after <= r.loss_before for r in report.records)
    assert ok >= 25
    assert all(np.isfinite(r.loss_after) for r in report.records)


def test_robots_complete_one_to_three_passes(default_run):
    report, _, _ = default_run
    for robot in report.robots.values():
        passes = robot.distance_travelled / 30 / robot.path.length
        assert 1.0 <= passes <= 3.0
