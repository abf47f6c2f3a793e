"""Command-line entry point: ``flexhome run|verify-ledger|goose-dump``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, load_config
from .goose import DEFAULT_GROUP, DEFAULT_PORT, UdpMulticastTransport, decode_frame
from .harness import InvariantViolation, run_scenario
from .ledger import verify_bytes
from .traces import IngestError
from .values import CodecError, to_plain

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_INVARIANT = 4

log = logging.getLogger("flexhome")


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_scenario(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestError as exc:
        print(f"ingest error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    m = result.metrics
    print(f"{m.scenario}: {m.steps} steps, energy error {m.energy_error_kwh:.6f} kWh -> {Path(args.out)}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        print(f"cannot read {args.file}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    bad, statuses = verify_bytes(data)
    for st in statuses:
        print(f"block {st.index}: {'ok' if st.ok else 'FAIL ' + st.reason}")
    if bad is not None:
        print(f"chain invalid from block {bad}")
        return EXIT_FAILED
    print(f"chain valid, {len(statuses)} blocks")
    return EXIT_OK


def _cmd_goose_dump(args) -> int:
    transport = UdpMulticastTransport(args.group, args.port, args.iface)

    def show(data: bytes, t: float) -> None:
        try:
            f = decode_frame(data)
        except CodecError as exc:
            print(json.dumps({"error": str(exc), "bytes": len(data)}), flush=True)
            return
        print(json.dumps({"goId": f.go_id, "appId": f.app_id, "stNum": f.st_num, "sqNum": f.sq_num,
                          "timestampUs": f.timestamp_us, "ttlMs": f.ttl_ms,
                          "entries": [to_plain(v) for v in f.entries]}), flush=True)

    try:
        transport.add_receiver(show)
        time.sleep(args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        transport.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexhome", description="Home energy co-simulation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario from a TOML config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.set_defaults(fn=_cmd_run)

    ver = sub.add_parser("verify-ledger", help="check hashes and links of a ledger file")
    ver.add_argument("file")
    ver.set_defaults(fn=_cmd_verify)

    dump = sub.add_parser("goose-dump", help="print GOOSE frames seen on a multicast group")
    dump.add_argument("--group", default=DEFAULT_GROUP)
    dump.add_argument("--port", type=int, default=DEFAULT_PORT)
    dump.add_argument("--iface", default="127.0.0.1")
    dump.add_argument("--duration", type=float, default=10.0)
    dump.set_defaults(fn=_cmd_goose_dump)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
