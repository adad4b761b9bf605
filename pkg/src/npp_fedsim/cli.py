"""Command line entry point.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 runtime
invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import chacha, qkd
from .config import ConfigError, default_config, load_config
from .orchestrator import InvariantViolation, dump_diagnostics, rerender_table, simulate_to_dir

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.sessions is not None:
        cfg.sessions = args.sessions
    cfg.validate()
    out = args.out or cfg.output_dir
    try:
        report = simulate_to_dir(cfg, out)
    except InvariantViolation as exc:
        path = dump_diagnostics(exc, out)
        print(f"invariant violation: {exc}", file=sys.stderr)
        if path is not None:
            print(f"diagnostic event dump written to {path}", file=sys.stderr)
        return EXIT_INVARIANT
    last = report.records[-1]
    for pid, m in sorted(last.metrics.items()):
        print(f"plant {pid} session {last.session_index}: accuracy={m.accuracy:.4f} roc_auc={m.roc_auc:.4f}")
    print(f"outputs written to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    sys.stdout.write(rerender_table(args.in_dir))
    return EXIT_OK


def _cmd_qkd_demo(args) -> int:
    if args.n_qubits < qkd.MIN_QUBITS:
        raise ConfigError(f"--n-qubits must be >= {qkd.MIN_QUBITS}")
    if not 0.0 <= args.eve <= 1.0:
        raise ConfigError("--eve must lie in [0, 1]")
    rng = np.random.default_rng(args.seed)
    result = qkd.bb84_exchange(args.n_qubits, qkd.EvePolicy(args.eve), 0.0, rng)
    decision = qkd.keygate(result.estimate, args.threshold)
    rows = [
        ("n_qubits", str(args.n_qubits)),
        ("eve fraction", f"{args.eve:.3f}"),
        ("sifted length", str(len(result.sifted_indices))),
        ("QBER", f"{result.estimate.ratio:.4f}"),
        ("gate decision", decision.value),
        ("eve information", f"{qkd.sifted_eve_information(result):.4f}"),
    ]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


def _cmd_crypto_vectors(args) -> int:
    results = chacha.run_rfc_vectors()
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  RFC 8439 {name}")
    return EXIT_OK if all(ok for _, ok in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npp-fedsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-session progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the multi-plant federated simulation")
    s.add_argument("--config", help="JSON config file (built-in default when omitted)")
    s.add_argument("--seed", type=int, help="override the master seed")
    s.add_argument("--sessions", type=int, help="override the number of sessions")
    s.add_argument("--out", help="output directory (config output_dir when omitted)")
    s.set_defaults(func=_cmd_simulate)

    r = sub.add_parser("report", help="re-render the metrics table from a finished run")
    r.add_argument("--in", dest="in_dir", required=True, help="directory holding metrics_plant*.csv")
    r.set_defaults(func=_cmd_report)

    q = sub.add_parser("qkd-demo", help="run one BB84 exchange and print its statistics")
    q.add_argument("--n-qubits", type=int, default=20000)
    q.add_argument("--eve", type=float, default=0.0, help="intercept-resend fraction")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--threshold", type=float, default=qkd.DEFAULT_ABORT_THRESHOLD, help="QBER abort threshold")
    q.set_defaults(func=_cmd_qkd_demo)

    c = sub.add_parser("crypto-vectors", help="check ChaCha20 against the RFC 8439 test vectors")
    c.set_defaults(func=_cmd_crypto_vectors)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
