"""Scenario files: principals, timing, adversary script, and expectations.

Line-oriented format with ``[section]`` headers; ``#`` starts a comment.
Sections::

    [variant]      baseline | triple (one bare word)
    [principals]   as <id> / tgs <id> [key=<hex>] / server <id> [key=<hex>]
                   client <id> addr=<addr> passwords=<pw[,pw,pw]>
    [run]          auth <client> to <server> at <tick>
    [timing]       timer_duration, freshness_window, tgt_lifetime,
                   ticket_lifetime, latency = <int>;
                   latency <src> <dst> = <int> for one link
    [limits]       max_ticks = <int>
    [adversary]    node <label> addr=<addr> / knows <ref> / capability <cap>
                   at <tick> replay <msg-kind> to <node> [index=<n>]
                   at <tick> forge-tgs-request as <client> for <server>
                   at <tick> forge-service-request as <client> for <server>
                   on service-reply forge-service-request
                   on challenge stay-silent|respond-wrong-password|respond-known-key
    [expect]       attacker_succeeded = <bool> / alerts = <n> / notices = <n>
                   alert-kind <timeout|bad_password> / granted <node> at <server>
                   outcome <client> = ok|failed

Key references for ``knows``: ``k1:<client>`` ``k2:<client>`` ``k3:<client>``
(the registration keys), ``session-tgs:<client>`` and
``session-v:<client>:<server>`` (session keys granted to the named client,
handed to the adversary by fiat), ``ktgs:<id>`` / ``kv:<id>`` (long-term keys).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..protocol import Variant

CAPABILITIES = ("capture", "replay", "spoof_addr", "inject")
CHALLENGE_BEHAVIORS = ("stay-silent", "respond-wrong-password", "respond-known-key")

DEFAULT_MAX_TICKS = 1000


class ScenarioError(Exception):
    pass


@dataclass
class ClientSpec:
    name: str
    addr: str
    passwords: tuple[str, str, str]


@dataclass
class KdcSpec:
    name: str
    key_hex: Optional[str] = None


@dataclass
class RunSpec:
    client: str
    server: str
    at: int


@dataclass
class AdversaryAction:
    verb: str
    at: Optional[int] = None
    trigger: Optional[str] = None
    args: dict[str, str] = field(default_factory=dict)


@dataclass
class AdversarySpec:
    label: str
    addr: str
    knows: list[str] = field(default_factory=list)
    capabilities: tuple[str, ...] = ()
    actions: list[AdversaryAction] = field(default_factory=list)

    def can(self, capability: str) -> bool:
        return capability in self.capabilities


@dataclass
class TimingSpec:
    timer_duration: int = 30
    freshness_window: int = 120
    tgt_lifetime: int = 36000
    ticket_lifetime: int = 3600
    latency: int = 1
    link_latency: dict[tuple[str, str], int] = field(default_factory=dict)

    def latency_for(self, src: str, dst: str) -> int:
        return self.link_latency.get((src, dst), self.latency)


@dataclass
class ExpectSpec:
    attacker_succeeded: Optional[bool] = None
    alerts: Optional[int] = None
    alert_kinds: list[str] = field(default_factory=list)
    granted: list[tuple[str, str]] = field(default_factory=list)
    notices: Optional[int] = None
    outcomes: dict[str, str] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return (
            self.attacker_succeeded is None
            and self.alerts is None
            and not self.alert_kinds
            and not self.granted
            and self.notices is None
            and not self.outcomes
        )


@dataclass
class ScenarioSpec:
    name: str
    variant: Variant
    as_id: str
    tgs: KdcSpec
    servers: list[KdcSpec]
    clients: list[ClientSpec]
    runs: list[RunSpec]
    timing: TimingSpec
    max_ticks: int
    adversary: Optional[AdversarySpec] = None
    expect: ExpectSpec = field(default_factory=ExpectSpec)

    def node_labels(self) -> list[str]:
        labels = [self.as_id, self.tgs.name]
        labels += [s.name for s in self.servers]
        labels += [c.name for c in self.clients]
        if self.adversary:
            labels.append(self.adversary.label)
        return labels


def _split_options(tokens: list[str], where: str) -> dict[str, str]:
    options: dict[str, str] = {}
    for token in tokens:
        if "=" not in token:
            raise ScenarioError(f"{where}: expected key=value, got {token!r}")
        key, _, value = token.partition("=")
        options[key] = value
    return options


def _parse_passwords(raw: str, where: str) -> tuple[str, str, str]:
    parts = raw.split(",")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or any(not p for p in parts):
        raise ScenarioError(f"{where}: passwords must be one value or three comma-separated")
    return (parts[0], parts[1], parts[2])


def parse_scenario(text: str, source: str = "<scenario>", name: str = "scenario") -> ScenarioSpec:
    variant: Optional[Variant] = None
    as_id: Optional[str] = None
    tgs: Optional[KdcSpec] = None
    servers: list[KdcSpec] = []
    clients: list[ClientSpec] = []
    runs: list[RunSpec] = []
    timing = TimingSpec()
    max_ticks = DEFAULT_MAX_TICKS
    adversary: Optional[AdversarySpec] = None
    expect = ExpectSpec()

    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in (
                "variant", "principals", "run", "timing", "limits", "adversary", "expect",
            ):
                raise ScenarioError(f"{where}: unknown section [{section}]")
            continue
        if section is None:
            raise ScenarioError(f"{where}: content before any [section]")
        tokens = line.split()

        if section == "variant":
            if variant is not None:
                raise ScenarioError(f"{where}: variant given twice")
            try:
                variant = Variant(tokens[0])
            except ValueError:
                raise ScenarioError(f"{where}: variant must be baseline or triple") from None

        elif section == "principals":
            role = tokens[0]
            if len(tokens) < 2:
                raise ScenarioError(f"{where}: {role} needs an id")
            ident = tokens[1]
            options = _split_options(tokens[2:], where)
            if role == "as":
                if as_id is not None:
                    raise ScenarioError(f"{where}: second as (already {as_id})")
                as_id = ident
            elif role == "tgs":
                if tgs is not None:
                    raise ScenarioError(f"{where}: second tgs (already {tgs.name})")
                tgs = KdcSpec(ident, options.get("key"))
            elif role == "server":
                servers.append(KdcSpec(ident, options.get("key")))
            elif role == "client":
                if "passwords" not in options:
                    raise ScenarioError(f"{where}: client needs passwords=")
                clients.append(
                    ClientSpec(
                        name=ident,
                        addr=options.get("addr", ident),
                        passwords=_parse_passwords(options["passwords"], where),
                    )
                )
            else:
                raise ScenarioError(f"{where}: unknown principal role {role!r}")

        elif section == "run":
            # auth <client> to <server> at <tick>
            if len(tokens) != 6 or tokens[0] != "auth" or tokens[2] != "to" or tokens[4] != "at":
                raise ScenarioError(f"{where}: expected 'auth <client> to <server> at <tick>'")
            try:
                at = int(tokens[5])
            except ValueError:
                raise ScenarioError(f"{where}: tick must be an integer") from None
            runs.append(RunSpec(client=tokens[1], server=tokens[3], at=at))

        elif section == "timing":
            if len(tokens) >= 3 and tokens[-2] == "=":
                value_s = tokens[-1]
                head = tokens[:-2]
            elif len(tokens) == 1 and "=" in tokens[0]:
                key, _, value_s = tokens[0].partition("=")
                head = [key]
            else:
                raise ScenarioError(f"{where}: expected 'name = value'")
            try:
                value = int(value_s)
            except ValueError:
                raise ScenarioError(f"{where}: timing values are integers") from None
            if len(head) == 1 and head[0] in (
                "timer_duration", "freshness_window", "tgt_lifetime", "ticket_lifetime", "latency",
            ):
                setattr(timing, head[0], value)
            elif len(head) == 3 and head[0] == "latency":
                timing.link_latency[(head[1], head[2])] = value
            else:
                raise ScenarioError(f"{where}: unknown timing knob {' '.join(head)!r}")

        elif section == "limits":
            joined = "".join(tokens)
            if not joined.startswith("max_ticks="):
                raise ScenarioError(f"{where}: only max_ticks is supported")
            try:
                max_ticks = int(joined.partition("=")[2])
            except ValueError:
                raise ScenarioError(f"{where}: max_ticks must be an integer") from None

        elif section == "adversary":
            if tokens[0] == "node":
                options = _split_options(tokens[2:], where)
                adversary = AdversarySpec(label=tokens[1], addr=options.get("addr", tokens[1]))
            elif adversary is None:
                raise ScenarioError(f"{where}: adversary section must start with 'node'")
            elif tokens[0] == "knows":
                adversary.knows.append(tokens[1])
            elif tokens[0] == "capability":
                if tokens[1] not in CAPABILITIES:
                    raise ScenarioError(f"{where}: unknown capability {tokens[1]!r}")
                adversary.capabilities = adversary.capabilities + (tokens[1],)
            elif tokens[0] == "at":
                adversary.actions.append(_parse_timed_action(tokens, where))
            elif tokens[0] == "on":
                adversary.actions.append(_parse_reactive_action(tokens, where))
            else:
                raise ScenarioError(f"{where}: unknown adversary line {tokens[0]!r}")

        elif section == "expect":
            _parse_expect_line(expect, tokens, where)

    if variant is None:
        raise ScenarioError(f"{source}: missing [variant] section")
    if as_id is None or tgs is None:
        raise ScenarioError(f"{source}: [principals] must define one as and one tgs")

    spec = ScenarioSpec(
        name=name,
        variant=variant,
        as_id=as_id,
        tgs=tgs,
        servers=servers,
        clients=clients,
        runs=runs,
        timing=timing,
        max_ticks=max_ticks,
        adversary=adversary,
        expect=expect,
    )
    _validate_references(spec, source)
    return spec


def _parse_timed_action(tokens: list[str], where: str) -> AdversaryAction:
    try:
        at = int(tokens[1])
    except (IndexError, ValueError):
        raise ScenarioError(f"{where}: 'at' needs an integer tick") from None
    rest = tokens[2:]
    if not rest:
        raise ScenarioError(f"{where}: 'at {at}' misses a verb")
    verb = rest[0]
    if verb == "replay":
        # replay <msg-kind> to <node> [index=<n>]
        if len(rest) < 4 or rest[2] != "to":
            raise ScenarioError(f"{where}: expected 'replay <msg-kind> to <node>'")
        args = {"kind": rest[1], "to": rest[3]}
        for extra in rest[4:]:
            key, _, value = extra.partition("=")
            if key != "index":
                raise ScenarioError(f"{where}: unknown replay option {extra!r}")
            args["index"] = value
        return AdversaryAction(verb="replay", at=at, args=args)
    if verb in ("forge-tgs-request", "forge-service-request"):
        if len(rest) != 5 or rest[1] != "as" or rest[3] != "for":
            raise ScenarioError(f"{where}: expected '{verb} as <client> for <server>'")
        return AdversaryAction(verb=verb, at=at, args={"as": rest[2], "for": rest[4]})
    raise ScenarioError(f"{where}: unknown adversary verb {verb!r}")


def _parse_reactive_action(tokens: list[str], where: str) -> AdversaryAction:
    if len(tokens) < 3:
        raise ScenarioError(f"{where}: expected 'on <trigger> <behavior>'")
    trigger = tokens[1]
    behavior = tokens[2]
    if trigger == "service-reply":
        if behavior != "forge-service-request":
            raise ScenarioError(f"{where}: service-reply supports forge-service-request only")
        return AdversaryAction(verb=behavior, trigger=trigger)
    if trigger == "challenge":
        if behavior not in CHALLENGE_BEHAVIORS:
            raise ScenarioError(f"{where}: challenge behavior must be one of {CHALLENGE_BEHAVIORS}")
        return AdversaryAction(verb=behavior, trigger=trigger)
    raise ScenarioError(f"{where}: unknown trigger {trigger!r}")


def _parse_expect_line(expect: ExpectSpec, tokens: list[str], where: str) -> None:
    joined = " ".join(tokens)
    if tokens[0] == "attacker_succeeded":
        value = joined.partition("=")[2].strip()
        if value not in ("true", "false"):
            raise ScenarioError(f"{where}: attacker_succeeded must be true or false")
        expect.attacker_succeeded = value == "true"
    elif tokens[0] in ("alerts", "notices"):
        try:
            setattr(expect, tokens[0], int(joined.partition("=")[2].strip()))
        except ValueError:
            raise ScenarioError(f"{where}: {tokens[0]} must be an integer") from None
    elif tokens[0] == "alert-kind":
        if tokens[1] not in ("timeout", "bad_password"):
            raise ScenarioError(f"{where}: alert-kind must be timeout or bad_password")
        expect.alert_kinds.append(tokens[1])
    elif tokens[0] == "granted":
        if len(tokens) != 4 or tokens[2] != "at":
            raise ScenarioError(f"{where}: expected 'granted <node> at <server>'")
        expect.granted.append((tokens[1], tokens[3]))
    elif tokens[0] == "outcome":
        if len(tokens) != 4 or tokens[2] != "=" or tokens[3] not in ("ok", "failed"):
            raise ScenarioError(f"{where}: expected 'outcome <client> = ok|failed'")
        expect.outcomes[tokens[1]] = tokens[3]
    else:
        raise ScenarioError(f"{where}: unknown expectation {tokens[0]!r}")


def _validate_references(spec: ScenarioSpec, source: str) -> None:
    labels = set(spec.node_labels())
    if len(labels) != len(spec.node_labels()):
        raise ScenarioError(f"{source}: duplicate principal labels")
    client_names = {c.name for c in spec.clients}
    server_names = {s.name for s in spec.servers}
    for run in spec.runs:
        if run.client not in client_names:
            raise ScenarioError(f"{source}: [run] references unknown client {run.client!r}")
        if run.server not in server_names:
            raise ScenarioError(f"{source}: [run] references unknown server {run.server!r}")
    if spec.adversary:
        for action in spec.adversary.actions:
            to = action.args.get("to")
            if to and to not in labels:
                raise ScenarioError(f"{source}: action targets unknown node {to!r}")
            impersonated = action.args.get("as")
            if impersonated and impersonated not in client_names:
                raise ScenarioError(f"{source}: action impersonates unknown client {impersonated!r}")
            target = action.args.get("for")
            if target and target not in server_names:
                raise ScenarioError(f"{source}: action targets unknown server {target!r}")


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text, source=str(path), name=path.stem)


def check_expectations(expect: ExpectSpec, verdict) -> list[str]:
    """Compare a verdict against an [expect] block; return mismatch strings."""
    problems: list[str] = []
    if expect.attacker_succeeded is not None and verdict.attacker_succeeded != expect.attacker_succeeded:
        problems.append(
            f"attacker_succeeded={str(verdict.attacker_succeeded).lower()} "
            f"(expected {str(expect.attacker_succeeded).lower()})"
        )
    if expect.alerts is not None and len(verdict.alerts) != expect.alerts:
        problems.append(f"alerts={len(verdict.alerts)} (expected {expect.alerts})")
    if expect.alert_kinds:
        got = sorted(a.incident for a in verdict.alerts)
        if got != sorted(expect.alert_kinds):
            problems.append(f"alert kinds {got} (expected {sorted(expect.alert_kinds)})")
    if expect.notices is not None and len(verdict.compromise_notices) != expect.notices:
        problems.append(
            f"notices={len(verdict.compromise_notices)} (expected {expect.notices})"
        )
    granted_pairs = {(g.node, g.server) for g in verdict.service_granted_to}
    for node, server in expect.granted:
        if (node, server) not in granted_pairs:
            problems.append(f"no grant for {node} at {server}")
    for client, wanted in expect.outcomes.items():
        outcome = verdict.client_outcomes.get(client)
        if outcome is None:
            problems.append(f"client {client} has no outcome (expected {wanted})")
        elif outcome.ok != (wanted == "ok"):
            problems.append(
                f"client {client} outcome "
                f"{'ok' if outcome.ok else 'failed:' + str(outcome.reason)} (expected {wanted})"
            )
    return problems
