"""Command-line entry point: simulator, trace tools, keytabs, daemons, client.

Exit codes: 0 success, 1 file/network/usage errors, 2 expectation mismatch
(sim-run / sim-matrix), 3 protocol failure (client-auth).  Set KERBTRIP_LOG
to DEBUG/INFO/WARNING to control daemon and client logging.
"""

from __future__ import annotations

import argparse
import importlib.resources
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

from .crypto import DeterministicRandomSource, KeyOrigin, derive_key, save_keytab
from .netsim import (
    ScenarioError,
    ScenarioSpec,
    check_expectations,
    load_scenario,
    parse_scenario,
    run_scenario,
)
from .protocol import Variant
from .transport import (
    ClientConfig,
    DaemonConfig,
    TransportError,
    client_authenticate,
    serve,
)

BUNDLED_SCENARIOS = (
    "honest-baseline",
    "honest-triple",
    "attack1-baseline",
    "attack1-triple",
    "attack2-baseline",
    "attack2-triple-silent",
    "attack2-triple-wrongpw",
)

# variant -> column -> scenarios backing that attack-matrix cell
MATRIX = {
    "baseline": {
        "honest": ["honest-baseline"],
        "attack1": ["attack1-baseline"],
        "attack2": ["attack2-baseline"],
    },
    "triple": {
        "honest": ["honest-triple"],
        "attack1": ["attack1-triple"],
        "attack2": ["attack2-triple-silent", "attack2-triple-wrongpw"],
    },
}


def _bundled_scenario(name: str) -> Optional[ScenarioSpec]:
    stem = name.removesuffix(".scn")
    if stem not in BUNDLED_SCENARIOS:
        return None
    resource = importlib.resources.files("kerbtrip") / "scenarios" / f"{stem}.scn"
    return parse_scenario(resource.read_text(encoding="utf-8"),
                          source=f"bundled:{stem}", name=stem)


def _load_scenario_arg(arg: str) -> ScenarioSpec:
    path = Path(arg)
    if path.exists():
        return load_scenario(path)
    bundled = _bundled_scenario(arg)
    if bundled is not None:
        return bundled
    raise ScenarioError(
        f"{arg}: no such file and not a bundled scenario "
        f"(bundled: {', '.join(BUNDLED_SCENARIOS)})"
    )


def _parse_peers(pairs: list[str]) -> dict[str, tuple[str, int]]:
    peers: dict[str, tuple[str, int]] = {}
    for pair in pairs:
        role, _, addr = pair.partition("=")
        host, _, port = addr.rpartition(":")
        if not role or not host or not port.isdigit():
            raise argparse.ArgumentTypeError(
                f"--peer expects role=host:port, got {pair!r}"
            )
        peers[role] = (host, int(port))
    return peers


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"--listen expects host:port, got {value!r}")
    return (host, int(port))


def _passwords_tuple(raw: str) -> tuple[str, str, str]:
    parts = raw.split(",")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or any(not p for p in parts):
        raise argparse.ArgumentTypeError(
            "passwords must be one value or three comma-separated values"
        )
    return (parts[0], parts[1], parts[2])


# --- subcommands ----------------------------------------------------------------

def cmd_sim_run(args: argparse.Namespace) -> int:
    try:
        scenario = _load_scenario_arg(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    trace, verdict = run_scenario(scenario, args.seed)
    if args.trace_out:
        Path(args.trace_out).write_text(trace.canonical_text(), encoding="utf-8")
    print(f"scenario={scenario.name} seed={args.seed} events={len(trace.events)}")
    print(verdict.summary())
    if trace.truncated:
        print("warning: run hit the tick limit before quiescence", file=sys.stderr)
    problems = check_expectations(scenario.expect, verdict)
    for problem in problems:
        print(f"expectation failed: {problem}", file=sys.stderr)
    return 2 if problems else 0


def cmd_sim_matrix(args: argparse.Namespace) -> int:
    rows: list[str] = []
    failures = 0
    header = (
        f"{'variant':<9} {'scenario':<24} {'ok':<5} "
        f"{'attacker':<9} {'granted':<28} {'alerts':<14} notices"
    )
    rows.append(header)
    rows.append("-" * len(header))
    for variant in ("baseline", "triple"):
        for column in ("honest", "attack1", "attack2"):
            for name in MATRIX[variant][column]:
                scenario = _bundled_scenario(name)
                trace, verdict = run_scenario(scenario, args.seed)
                problems = check_expectations(scenario.expect, verdict)
                if problems or trace.truncated:
                    failures += 1
                granted = ",".join(
                    f"{g.node}@{g.server}" for g in verdict.service_granted_to
                ) or "-"
                alerts = ",".join(a.incident for a in verdict.alerts) or "-"
                rows.append(
                    f"{variant:<9} {name:<24} {'ok' if not problems else 'FAIL':<5} "
                    f"{str(verdict.attacker_succeeded).lower():<9} {granted:<28} "
                    f"{alerts:<14} {len(verdict.compromise_notices)}"
                )
                for problem in problems:
                    rows.append(f"          ! {problem}")
    table = "\n".join(rows) + "\n"
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return 2 if failures else 0


def cmd_trace_dump(args: argparse.Namespace) -> int:
    path = Path(args.trace)
    if not path.exists():
        print(f"error: no such trace file: {path}", file=sys.stderr)
        return 1
    for line in path.read_text(encoding="utf-8").splitlines():
        fields = line.split()
        if len(fields) < 3:
            continue
        if args.kind and fields[2] != args.kind:
            continue
        if args.src and f"src={args.src}" not in fields:
            continue
        if args.dst and f"dst={args.dst}" not in fields:
            continue
        print(line)
    return 0


def cmd_keytab_gen(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ltk = DeterministicRandomSource(args.seed, "long-term-keys")
    tgs_key = ltk.next_key(KeyOrigin.LONG_TERM)
    server_keys = {server: ltk.next_key(KeyOrigin.LONG_TERM) for server in args.server}

    as_entries = {(args.tgs, 0): tgs_key}
    for spec in args.client:
        name, _, raw = spec.partition(":")
        if not raw:
            print(f"error: --client expects name:pw[,pw,pw], got {spec!r}",
                  file=sys.stderr)
            return 1
        pw1, pw2, pw3 = _passwords_tuple(raw)
        as_entries[(name, 1)] = derive_key(pw1, name, 1)
        as_entries[(name, 2)] = derive_key(pw2, name, 2)
        as_entries[(name, 3)] = derive_key(pw3, name, 3)
    tgs_entries = {(args.tgs, 0): tgs_key}
    for server, key in server_keys.items():
        tgs_entries[(server, 0)] = key

    written = []
    save_keytab(str(out_dir / "as.keytab"), as_entries)
    written.append(out_dir / "as.keytab")
    save_keytab(str(out_dir / "tgs.keytab"), tgs_entries)
    written.append(out_dir / "tgs.keytab")
    for server, key in server_keys.items():
        path = out_dir / f"{server}.keytab"
        save_keytab(str(path), {(server, 0): key})
        written.append(path)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    config = DaemonConfig(
        role=args.role,
        id=args.id,
        listen=args.listen,
        keytab_path=args.keytab,
        variant=Variant(args.variant),
        peer_addrs=_parse_peers(args.peer),
        as_id=args.as_id,
        tgs_id=args.tgs_id,
        timer_duration=args.timer,
        freshness_window=args.freshness,
        seed=args.seed,
    )
    try:
        daemon = serve(config)
    except (TransportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    host, port = daemon.address
    print(f"{args.role} daemon {args.id} listening on {host}:{port}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        daemon.shutdown()
    return 0


def cmd_client_auth(args: argparse.Namespace) -> int:
    config = ClientConfig(
        name=args.client,
        addr=args.addr,
        passwords=args.passwords,
        variant=Variant(args.variant),
        target_server=args.server,
        peer_addrs=_parse_peers(args.peer),
        as_id=args.as_id,
        tgs_id=args.tgs_id,
        timeout=args.timeout,
        seed=args.seed,
    )
    counter = {"n": 0}

    def step(line: str) -> None:
        counter["n"] += 1
        print(f"step {counter['n']}: {line} @ {time.time():.3f}")

    try:
        outcome = client_authenticate(config, step=step)
    except (TransportError, OSError) as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return 1
    if outcome.ok:
        print(f"mutual authentication OK with {args.server}")
        return 0
    print(f"protocol failure: {outcome.reason}", file=sys.stderr)
    return 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kerbtrip",
        description="Dual-variant ticket-exchange engine: simulator, daemons, client.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim-run", help="run one scenario and check its expectations")
    p.add_argument("scenario", help="scenario file path or bundled scenario name")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--trace-out", help="write the canonical trace to this file")
    p.set_defaults(func=cmd_sim_run)

    p = sub.add_parser("sim-matrix", help="run the bundled variant x attack grid")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_sim_matrix)

    p = sub.add_parser("trace-dump", help="print a saved trace, optionally filtered")
    p.add_argument("trace")
    p.add_argument("--kind", help="event kind filter (send, deliver, drop, ...)")
    p.add_argument("--src")
    p.add_argument("--dst")
    p.set_defaults(func=cmd_trace_dump)

    p = sub.add_parser("keytab-gen", help="derive keytabs for daemons")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--client", action="append", default=[],
                   metavar="NAME:PW[,PW,PW]", help="repeatable")
    p.add_argument("--tgs", default="ktgs")
    p.add_argument("--server", action="append", default=[], help="repeatable")
    p.add_argument("--seed", type=int, default=1,
                   help="long-term key derivation seed")
    p.set_defaults(func=cmd_keytab_gen)

    p = sub.add_parser("serve", help="run one principal as a TCP daemon")
    p.add_argument("--role", required=True, choices=["as", "tgs", "v"])
    p.add_argument("--id", required=True)
    p.add_argument("--listen", type=_parse_listen, default=("127.0.0.1", 0))
    p.add_argument("--keytab", required=True)
    p.add_argument("--variant", choices=["baseline", "triple"], default="triple")
    p.add_argument("--peer", action="append", default=[], metavar="ROLE=HOST:PORT")
    p.add_argument("--as-id", default="kas")
    p.add_argument("--tgs-id", default="ktgs")
    p.add_argument("--timer", type=int, default=30)
    p.add_argument("--freshness", type=int, default=120)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client-auth", help="authenticate against live daemons")
    p.add_argument("--client", required=True)
    p.add_argument("--addr", default="127.0.0.1")
    p.add_argument("--passwords", required=True, type=_passwords_tuple)
    p.add_argument("--server", required=True, help="target service principal")
    p.add_argument("--variant", choices=["baseline", "triple"], default="triple")
    p.add_argument("--peer", action="append", default=[], metavar="ROLE=HOST:PORT")
    p.add_argument("--as-id", default="kas")
    p.add_argument("--tgs-id", default="ktgs")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_client_auth)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("KERBTRIP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
