"""Single-threaded event loop wiring principals and the adversary together.

Logical time is integer ticks; a frame put on the wire at tick T arrives at
T + link latency (default 1).  Every frame becomes exactly one ``deliver`` or
one ``drop`` event, so at quiescence
``deliver + drop == send + replay + inject`` holds.  The canonical trace text
contains plaintext-level structure only (no ciphertext, no key material), so
two runs with the same scenario and seed are byte-identical.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from ..crypto import DeterministicRandomSource, KeyOrigin, SymmetricKey
from ..principals import (
    AlertNote,
    AsState,
    ClientState,
    CompromiseNotice,
    Deny,
    GrantNote,
    NoticeNote,
    Reaction,
    ServerState,
    SessionOutcome,
    TgsState,
    TimerNote,
    as_register,
    client_begin,
    handle_message,
    v_tick,
)
from ..protocol import CodecError, PrincipalId, ProtocolMessage, decode, encode, message_kind
from .attacker import AttackerNode, CapturedFrame, Emission
from .scenario import AdversaryAction, ScenarioError, ScenarioSpec


class EventKind(Enum):
    SEND = "send"
    DELIVER = "deliver"
    DROP = "drop"
    REPLAY = "replay"
    INJECT = "inject"
    TIMER_FIRE = "timer_fire"
    GRANT = "grant"
    ALERT = "alert"
    NOTICE = "notice"


@dataclass
class SimEvent:
    tick: int
    seq: int
    kind: EventKind
    src: str
    dst: str
    msg_kind: Optional[str] = None
    meta: str = ""
    frame: Optional[bytes] = None  # raw bytes, never part of the canonical text

    def canonical(self) -> str:
        line = (
            f"{self.tick:05d} {self.seq:05d} {self.kind.value:<10} "
            f"src={self.src} dst={self.dst} msg={self.msg_kind or '-'}"
        )
        if self.meta:
            line += f" {self.meta}"
        return line


@dataclass
class Trace:
    events: list[SimEvent] = field(default_factory=list)
    truncated: bool = False

    def canonical_text(self) -> str:
        return "\n".join(e.canonical() for e in self.events) + "\n"

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {k.value: 0 for k in EventKind}
        for event in self.events:
            out[event.kind.value] += 1
        return out

    def of_kind(self, kind: EventKind) -> list[SimEvent]:
        return [e for e in self.events if e.kind is kind]


@dataclass(frozen=True)
class GrantEntry:
    node: str  # who was on the wire (client node or attacker node)
    client: str  # who the ticket names
    server: str
    tick: int


@dataclass(frozen=True)
class AlertEntry:
    incident: str
    suspect_addr: str
    client: str
    tick: int


@dataclass
class Verdict:
    service_granted_to: list[GrantEntry]
    alerts: list[AlertEntry]
    compromise_notices: list[CompromiseNotice]
    attacker_succeeded: bool
    client_outcomes: dict[str, SessionOutcome]

    def summary(self) -> str:
        granted = ",".join(f"{g.node}@{g.server}" for g in self.service_granted_to) or "-"
        alerts = str(len(self.alerts))
        if self.alerts:
            alerts += "(" + ",".join(a.incident for a in self.alerts) + ")"
        return (
            f"attacker_succeeded={str(self.attacker_succeeded).lower()} "
            f"granted={granted} alerts={alerts} "
            f"notices={len(self.compromise_notices)}"
        )


# --- queue entries ---------------------------------------------------------------

@dataclass
class _FrameArrival:
    frame: bytes
    src_node: str
    src_addr: str
    dst_node: str


@dataclass
class _TimerCheck:
    node: str


@dataclass
class _ClientStart:
    client: str
    server: str


@dataclass
class _AdversaryStep:
    action: AdversaryAction


_QueueEntry = Union[_FrameArrival, _TimerCheck, _ClientStart, _AdversaryStep]


class World:
    """One simulation run: principal states, event queue, trace, verdict data."""

    def __init__(self, scenario: ScenarioSpec, seed: int) -> None:
        self.scenario = scenario
        self.seed = seed
        self.now = 0
        self.max_ticks = scenario.max_ticks
        self.trace = Trace()
        self._queue: list[tuple[int, int, _QueueEntry]] = []
        self._queue_seq = 0
        self._event_seq = 0
        self._grants: list[GrantEntry] = []
        self._alerts: list[AlertEntry] = []

        variant = scenario.variant
        timing = scenario.timing

        def rng(label: str) -> DeterministicRandomSource:
            return DeterministicRandomSource(seed, f"rng:{label}")

        def nonces(label: str) -> DeterministicRandomSource:
            return DeterministicRandomSource(seed, f"nonces:{label}")

        ltk = DeterministicRandomSource(seed, "long-term-keys")

        def long_term(spec_key_hex: Optional[str]) -> SymmetricKey:
            if spec_key_hex is not None:
                return SymmetricKey(bytes.fromhex(spec_key_hex), KeyOrigin.LONG_TERM)
            return ltk.next_key(KeyOrigin.LONG_TERM)

        tgs_key = long_term(scenario.tgs.key_hex)
        server_keys = {s.name: long_term(s.key_hex) for s in scenario.servers}

        self.as_state = AsState(
            id=PrincipalId(scenario.as_id),
            variant=variant,
            rng=rng(scenario.as_id),
            nonces=nonces(scenario.as_id),
            tgt_lifetime=timing.tgt_lifetime,
        )
        self.as_state.tgs_keys[scenario.tgs.name] = tgs_key
        for client in scenario.clients:
            as_register(self.as_state, client.name, *client.passwords)

        self.tgs_state = TgsState(
            id=PrincipalId(scenario.tgs.name),
            variant=variant,
            own_key=tgs_key,
            as_id=PrincipalId(scenario.as_id),
            rng=rng(scenario.tgs.name),
            nonces=nonces(scenario.tgs.name),
            server_keys=dict(server_keys),
            freshness_window=timing.freshness_window,
            service_ticket_lifetime=timing.ticket_lifetime,
        )

        self.servers: dict[str, ServerState] = {}
        for server in scenario.servers:
            self.servers[server.name] = ServerState(
                id=PrincipalId(server.name),
                variant=variant,
                own_key=server_keys[server.name],
                tgs_id=PrincipalId(scenario.tgs.name),
                rng=rng(server.name),
                nonces=nonces(server.name),
                timer_duration=timing.timer_duration,
                freshness_window=timing.freshness_window,
            )

        self.clients: dict[str, ClientState] = {}
        for client in scenario.clients:
            state = ClientState.from_passwords(
                name=client.name,
                addr=client.addr,
                variant=variant,
                passwords=client.passwords,
                as_id=scenario.as_id,
                tgs_id=scenario.tgs.name,
                rng=rng(client.name),
                nonces=nonces(client.name),
            )
            state.requested_lifetime = timing.tgt_lifetime
            self.clients[client.name] = state

        self._states: dict[str, object] = {scenario.as_id: self.as_state,
                                           scenario.tgs.name: self.tgs_state}
        self._states.update(self.servers)
        self._states.update(self.clients)

        self._addrs: dict[str, str] = {label: label for label in self._states}
        for client in scenario.clients:
            self._addrs[client.name] = client.addr

        self.attacker: Optional[AttackerNode] = None
        if scenario.adversary is not None:
            self.attacker = AttackerNode(
                scenario.adversary, variant, scenario.tgs.name, seed
            )
            self._addrs[self.attacker.label] = self.attacker.addr

        for run in scenario.runs:
            self._push(run.at, _ClientStart(client=run.client, server=run.server))
        if scenario.adversary is not None:
            for action in scenario.adversary.actions:
                if action.at is not None:
                    self._push(action.at, _AdversaryStep(action))

    # -- plumbing ----------------------------------------------------------------

    def _push(self, tick: int, entry: _QueueEntry) -> None:
        self._queue_seq += 1
        heapq.heappush(self._queue, (tick, self._queue_seq, entry))

    def _record(
        self,
        kind: EventKind,
        src: str,
        dst: str,
        msg_kind: Optional[str] = None,
        meta: str = "",
        frame: Optional[bytes] = None,
    ) -> SimEvent:
        self._event_seq += 1
        event = SimEvent(
            tick=self.now, seq=self._event_seq, kind=kind, src=src, dst=dst,
            msg_kind=msg_kind, meta=meta, frame=frame,
        )
        self.trace.events.append(event)
        return event

    def addr_of(self, label: str) -> Optional[str]:
        return self._addrs.get(label)

    def resolve_key_ref(self, ref: str) -> Optional[SymmetricKey]:
        kind, _, rest = ref.partition(":")
        if kind in ("k1", "k2", "k3"):
            record = self.as_state.credentials.get(rest)
            return getattr(record, kind) if record else None
        if kind == "session-tgs":
            client = self.clients.get(rest)
            return client.tgt.session_key if client and client.tgt else None
        if kind == "session-v":
            client_name, _, server = rest.partition(":")
            client = self.clients.get(client_name)
            if client is None:
                return None
            holding = client.service_tickets.get(server)
            return holding.session_key if holding else None
        if kind == "ktgs":
            if rest in ("", self.tgs_state.id.name):
                return self.tgs_state.own_key
            return None
        if kind == "kv":
            server = self.servers.get(rest)
            return server.own_key if server else None
        return None

    # -- event loop --------------------------------------------------------------

    def step(self) -> bool:
        """Process the lowest (tick, seq) entry; False when the queue is empty."""
        if not self._queue:
            return False
        tick, _, entry = heapq.heappop(self._queue)
        self.now = tick
        if isinstance(entry, _FrameArrival):
            self._process_arrival(entry)
        elif isinstance(entry, _TimerCheck):
            self._process_timer(entry)
        elif isinstance(entry, _ClientStart):
            self._process_client_start(entry)
        elif isinstance(entry, _AdversaryStep):
            self._process_adversary_step(entry)
        return True

    def run(self) -> tuple[Trace, Verdict]:
        while self._queue:
            if self._queue[0][0] > self.max_ticks:
                self.trace.truncated = True
                break
            self.step()
        return self.trace, self.verdict()

    def verdict(self) -> Verdict:
        attacker_label = self.attacker.label if self.attacker else None
        return Verdict(
            service_granted_to=list(self._grants),
            alerts=list(self._alerts),
            compromise_notices=list(self.as_state.notices),
            attacker_succeeded=any(g.node == attacker_label for g in self._grants),
            client_outcomes={
                name: state.outcome
                for name, state in self.clients.items()
                if state.outcome is not None
            },
        )

    # -- entry processing -----------------------------------------------------------

    def _send_frame(self, src_node: str, src_addr: str, dst_node: str,
                    msg: ProtocolMessage, kind: EventKind,
                    frame: Optional[bytes] = None) -> None:
        if dst_node not in self._states and (
            self.attacker is None or dst_node != self.attacker.label
        ):
            self._record(EventKind.NOTICE, src_node, dst_node,
                         meta="undeliverable: unknown node")
            return
        frame = frame if frame is not None else encode(msg)
        self._record(kind, src_node, dst_node, message_kind(msg), frame=frame)
        latency = self.scenario.timing.latency_for(src_node, dst_node)
        self._push(
            self.now + latency,
            _FrameArrival(frame=frame, src_node=src_node, src_addr=src_addr,
                          dst_node=dst_node),
        )

    def _process_reaction(
        self, origin: str, reaction: Reaction, frame_src_node: Optional[str] = None
    ) -> None:
        for note in reaction.notes:
            if isinstance(note, GrantNote):
                via = frame_src_node or note.client
                self._grants.append(
                    GrantEntry(node=via, client=note.client, server=origin, tick=self.now)
                )
                self._record(
                    EventKind.GRANT, origin, via,
                    meta=f"client={note.client} addr={note.client_addr}",
                )
            elif isinstance(note, AlertNote):
                self._alerts.append(
                    AlertEntry(
                        incident=note.incident.name.lower(),
                        suspect_addr=note.suspect_addr,
                        client=note.client,
                        tick=self.now,
                    )
                )
                self._record(
                    EventKind.ALERT, origin, "-",
                    meta=(
                        f"incident={note.incident.name.lower()} "
                        f"client={note.client} suspect={note.suspect_addr}"
                    ),
                )
            elif isinstance(note, TimerNote):
                self._push(note.deadline + 1, _TimerCheck(node=origin))
            elif isinstance(note, NoticeNote):
                n = note.notice
                self._record(
                    EventKind.NOTICE, origin, "-",
                    meta=(
                        f"client={n.client} incident={n.incident.name.lower()} "
                        f"suspect={n.suspect_addr} known={str(n.known_client).lower()}"
                    ),
                )
        for send in reaction.sends:
            dst = send.to if send.to is not None else frame_src_node
            if dst is None:
                self._record(EventKind.NOTICE, origin, "-", meta="reply with no target")
                continue
            self._send_frame(origin, self._addrs.get(origin, origin), dst,
                             send.msg, EventKind.SEND)

    def _process_arrival(self, arrival: _FrameArrival) -> None:
        try:
            msg = decode(arrival.frame)
        except CodecError as exc:
            self._record(
                EventKind.DROP, arrival.src_node, arrival.dst_node,
                meta=f"reason=codec:{type(exc).__name__}",
            )
            return

        captured = False
        if self.attacker is not None and self.attacker.spec.can("capture"):
            self.attacker.observe(
                CapturedFrame(
                    seq=self._event_seq,
                    src_node=arrival.src_node,
                    src_addr=arrival.src_addr,
                    dst_node=arrival.dst_node,
                    msg=msg,
                    frame=arrival.frame,
                )
            )
            captured = True

        kind = message_kind(msg)
        if self.attacker is not None and arrival.dst_node == self.attacker.label:
            self._record(EventKind.DELIVER, arrival.src_node, arrival.dst_node, kind)
            emissions, notes = self.attacker.on_delivery(
                msg, arrival.frame, arrival.src_node, arrival.src_addr, self.now,
                already_captured=captured,
                resolve_ref=self.resolve_key_ref, addr_of=self.addr_of,
            )
            self._emit_attacker(emissions, notes)
            return

        state = self._states.get(arrival.dst_node)
        if state is None:
            self._record(EventKind.DROP, arrival.src_node, arrival.dst_node, kind,
                         meta="reason=unknown-node")
            return
        try:
            reaction = handle_message(state, msg, self.now, arrival.src_addr)
        except Deny as deny:
            self._record(
                EventKind.DROP, arrival.src_node, arrival.dst_node, kind,
                meta=f"reason={deny.reason.value}",
            )
            return
        self._record(EventKind.DELIVER, arrival.src_node, arrival.dst_node, kind)
        self._process_reaction(arrival.dst_node, reaction, frame_src_node=arrival.src_node)

    def _process_timer(self, check: _TimerCheck) -> None:
        state = self.servers.get(check.node)
        if state is None:
            return
        reaction = v_tick(state, self.now)
        if not reaction.sends and not reaction.notes:
            return
        self._record(EventKind.TIMER_FIRE, check.node, "-",
                     meta=f"expired={len(reaction.sends)}")
        self._process_reaction(check.node, reaction)

    def _process_client_start(self, start: _ClientStart) -> None:
        state = self.clients.get(start.client)
        if state is None:
            raise ScenarioError(f"unknown client {start.client!r} in run schedule")
        reaction = client_begin(state, start.server, self.now)
        self._process_reaction(start.client, reaction)

    def _process_adversary_step(self, step: _AdversaryStep) -> None:
        if self.attacker is None:
            return
        emissions, notes = self.attacker.run_action(
            step.action, self.now, self.resolve_key_ref, self.addr_of
        )
        self._emit_attacker(emissions, notes)

    def _emit_attacker(self, emissions: list[Emission], notes: list[str]) -> None:
        for note in notes:
            self._record(EventKind.NOTICE, self.attacker.label, "-", meta=note)
        for emission in emissions:
            kind = EventKind.REPLAY if emission.origin == "replay" else EventKind.INJECT
            self._send_frame(
                self.attacker.label, emission.src_addr, emission.dst_node,
                emission.msg, kind, frame=emission.frame,
            )


def run_scenario(scenario: ScenarioSpec, seed: int) -> tuple[Trace, Verdict]:
    """Execute one scenario to quiescence (or the tick limit)."""
    return World(scenario, seed).run()
