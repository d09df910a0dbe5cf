"""Socket daemons and a live client speaking the wire format for real.

Each daemon wraps exactly the same principal handlers the simulator drives,
behind a lock so handlers for one principal never run concurrently.  Replies
(``Send.to is None``) go back on the connection that carried the request;
forwards between KDC parties travel over short-lived outbound connections
routed by message type.  The service daemon runs a deadline sweep thread that
plays the role of the simulator's timer events.
"""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .crypto import (
    DeterministicRandomSource,
    SymmetricKey,
    load_keytab,
)
from .principals import (
    AlertNote,
    AsState,
    ClientState,
    CredentialRecord,
    Deny,
    DenyReason,
    GrantNote,
    NoticeNote,
    Reaction,
    ServerState,
    SessionOutcome,
    TgsState,
    client_begin,
    client_handle,
    handle_message,
    v_tick,
)
from .protocol import (
    AlertForward,
    AsRequest,
    AttackAlert,
    ChallengeResponse,
    CodecError,
    FrameReader,
    KeyForward,
    PasswordForward,
    PrincipalId,
    ProtocolMessage,
    ServiceRequest,
    TgsRequest,
    Variant,
    encode,
    message_kind,
)

logger = logging.getLogger("kerbtrip.transport")

RECV_CHUNK = 4096

# Outbound forwards are routed by what the message is, not who it names.
_FORWARD_ROLE = {
    KeyForward: "tgs",
    PasswordForward: "v",
    AttackAlert: "tgs",
    AlertForward: "as",
}


class TransportError(Exception):
    pass


@dataclass
class DaemonConfig:
    role: str  # "as" | "tgs" | "v"
    id: str
    listen: tuple[str, int]
    keytab_path: str
    variant: Variant
    peer_addrs: dict[str, tuple[str, int]] = field(default_factory=dict)
    as_id: str = "kas"
    tgs_id: str = "ktgs"
    timer_duration: int = 30
    freshness_window: int = 120
    tgt_lifetime: int = 36000
    ticket_lifetime: int = 3600
    sweep_interval: float = 0.25
    seed: Optional[int] = None

    def validate(self) -> None:
        if self.role not in ("as", "tgs", "v"):
            raise TransportError(f"unknown role {self.role!r}")
        if self.variant is Variant.TRIPLE:
            needed = {"as": ["tgs"], "tgs": ["v", "as"], "v": ["tgs"]}[self.role]
            for peer in needed:
                if peer not in self.peer_addrs:
                    raise TransportError(
                        f"{self.role} daemon needs --peer {peer}=host:port in the triple variant"
                    )


def _rng_pair(config: DaemonConfig, label: str) -> tuple[DeterministicRandomSource, DeterministicRandomSource]:
    # A seeded daemon is reproducible (differential tests); otherwise draw
    # the seed from system entropy.
    seed = config.seed
    if seed is None:
        seed = int.from_bytes(os.urandom(8), "big") >> 1
    return (
        DeterministicRandomSource(seed, f"rng:{label}"),
        DeterministicRandomSource(seed, f"nonces:{label}"),
    )


def build_state(config: DaemonConfig):
    """Construct the principal state for a daemon from its keytab."""
    entries = load_keytab(config.keytab_path)
    rng, nonces = _rng_pair(config, config.id)
    if config.role == "as":
        state = AsState(
            id=PrincipalId(config.id),
            variant=config.variant,
            rng=rng,
            nonces=nonces,
            tgt_lifetime=config.tgt_lifetime,
        )
        by_client: dict[str, dict[int, SymmetricKey]] = {}
        for (principal, index), key in entries.items():
            if index == 0:
                state.tgs_keys[principal] = key
            else:
                by_client.setdefault(principal, {})[index] = key
        for client, keys in by_client.items():
            if set(keys) != {1, 2, 3}:
                raise TransportError(f"keytab {config.keytab_path}: client {client} "
                                     f"needs key indexes 1..3")
            state.credentials[client] = CredentialRecord(
                client=PrincipalId(client), k1=keys[1], k2=keys[2], k3=keys[3]
            )
        return state
    own = entries.get((config.id, 0))
    if own is None:
        raise TransportError(
            f"keytab {config.keytab_path} has no long-term key for {config.id}"
        )
    if config.role == "tgs":
        state = TgsState(
            id=PrincipalId(config.id),
            variant=config.variant,
            own_key=own,
            as_id=PrincipalId(config.as_id),
            rng=rng,
            nonces=nonces,
            freshness_window=config.freshness_window,
            service_ticket_lifetime=config.ticket_lifetime,
        )
        for (principal, index), key in entries.items():
            if index == 0 and principal != config.id:
                state.server_keys[principal] = key
        return state
    return ServerState(
        id=PrincipalId(config.id),
        variant=config.variant,
        own_key=own,
        tgs_id=PrincipalId(config.tgs_id),
        rng=rng,
        nonces=nonces,
        timer_duration=config.timer_duration,
        freshness_window=config.freshness_window,
    )


class PrincipalCore:
    """Lock-guarded principal plus reaction routing; no sockets involved.

    The daemons and the differential tests drive this same object, so the
    wire layer cannot change protocol behavior.
    """

    def __init__(self, config: DaemonConfig) -> None:
        self.config = config
        self.state = build_state(config)
        self.lock = threading.Lock()
        self.grants: list[GrantNote] = []
        self.notices: list[NoticeNote] = []
        self.alerts: list[AlertNote] = []

    def handle_frame(
        self, msg: ProtocolMessage, src_addr: str, now: int
    ) -> tuple[list[ProtocolMessage], list[tuple[str, ProtocolMessage]]]:
        """Run one message; return (replies on same connection, (role, forward))."""
        with self.lock:
            reaction = handle_message(self.state, msg, now, src_addr)
            return self._split(reaction)

    def sweep(self, now: int) -> list[tuple[str, ProtocolMessage]]:
        """Wall-clock equivalent of the simulator's timer events (service only)."""
        if not isinstance(self.state, ServerState):
            return []
        with self.lock:
            reaction = v_tick(self.state, now)
            if reaction.sends or reaction.notes:
                logger.info("timer_fire src=%s expired=%d", self.config.id,
                            len(reaction.sends))
            _replies, forwards = self._split(reaction)
            return forwards

    def _split(self, reaction: Reaction):
        replies: list[ProtocolMessage] = []
        forwards: list[tuple[str, ProtocolMessage]] = []
        for note in reaction.notes:
            if isinstance(note, GrantNote):
                self.grants.append(note)
                logger.info("grant src=%s client=%s addr=%s",
                            self.config.id, note.client, note.client_addr)
            elif isinstance(note, AlertNote):
                self.alerts.append(note)
                logger.warning("alert src=%s incident=%s client=%s suspect=%s",
                               self.config.id, note.incident.name.lower(),
                               note.client, note.suspect_addr)
            elif isinstance(note, NoticeNote):
                self.notices.append(note)
                n = note.notice
                logger.warning(
                    "notice src=%s client=%s incident=%s suspect=%s known=%s detail=%r",
                    self.config.id, n.client, n.incident.name.lower(),
                    n.suspect_addr, str(n.known_client).lower(), n.suspected,
                )
        for send in reaction.sends:
            if send.to is None:
                replies.append(send.msg)
            else:
                role = _FORWARD_ROLE.get(type(send.msg))
                if role is None:
                    logger.error("%s: no route for %s", self.config.id,
                                 message_kind(send.msg))
                    continue
                forwards.append((role, send.msg))
        return replies, forwards


class _FrameHandler(socketserver.BaseRequestHandler):
    daemon: "Daemon"

    def handle(self) -> None:
        reader = FrameReader()
        src_addr = self.client_address[0]
        sock = self.request
        while True:
            try:
                chunk = sock.recv(RECV_CHUNK)
            except OSError:
                return
            if not chunk:
                return
            try:
                messages = reader.feed(chunk)
            except CodecError as exc:
                logger.warning("%s: bad frame from %s (%s), closing connection",
                               self.daemon.core.config.id, src_addr, exc)
                return
            for msg in messages:
                try:
                    replies, forwards = self._handle_with_retry(msg, src_addr)
                except Deny as deny:
                    logger.info("drop dst=%s src=%s msg=%s reason=%s",
                                self.daemon.core.config.id, src_addr,
                                message_kind(msg), deny.reason.value)
                    continue
                logger.debug("deliver dst=%s src=%s msg=%s",
                             self.daemon.core.config.id, src_addr, message_kind(msg))
                # Forwards first: the next hop must hold the forwarded keys
                # before the client can race ahead with its next request.
                for role, forward in forwards:
                    self.daemon.send_to_peer(role, forward)
                for reply in replies:
                    try:
                        sock.sendall(encode(reply))
                    except OSError:
                        return

    def _handle_with_retry(self, msg: ProtocolMessage, src_addr: str):
        # Forwarded keys travel on their own connection, so a fast client can
        # outrun them; briefly retry instead of dropping an honest request.
        attempts = 0
        while True:
            try:
                return self.daemon.core.handle_frame(msg, src_addr, int(time.time()))
            except Deny as deny:
                if deny.reason is DenyReason.NO_FORWARDED_PASSWORD and attempts < 20:
                    attempts += 1
                    time.sleep(0.05)
                    continue
                raise


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class Daemon:
    """One principal behind a TCP listener; ``serve`` returns it running."""

    def __init__(self, config: DaemonConfig) -> None:
        self.core = PrincipalCore(config)
        handler = type("BoundHandler", (_FrameHandler,), {"daemon": self})
        self._server = _Server(config.listen, handler)
        self.address: tuple[str, int] = self._server.server_address
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> "Daemon":
        # Peers may be wired after construction (ephemeral-port bootstrap),
        # but must be complete by the time the daemon goes live.
        self.core.config.validate()
        accept = threading.Thread(
            target=self._server.serve_forever, name=f"{self.core.config.id}-accept",
            daemon=True,
        )
        accept.start()
        self._threads.append(accept)
        if self.core.config.role == "v":
            sweeper = threading.Thread(
                target=self._sweep_loop, name=f"{self.core.config.id}-sweep", daemon=True
            )
            sweeper.start()
            self._threads.append(sweeper)
        logger.info("%s daemon (%s) listening on %s:%d", self.core.config.role,
                    self.core.config.id, *self.address)
        return self

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.core.config.sweep_interval):
            for role, forward in self.core.sweep(int(time.time())):
                self.send_to_peer(role, forward)

    def send_to_peer(self, role: str, msg: ProtocolMessage) -> None:
        addr = self.core.config.peer_addrs.get(role)
        if addr is None:
            logger.error("%s: no %s peer configured, dropping %s",
                         self.core.config.id, role, message_kind(msg))
            return
        try:
            with socket.create_connection(addr, timeout=5) as sock:
                sock.sendall(encode(msg))
        except OSError as exc:
            logger.error("%s: forward to %s %s failed: %s",
                         self.core.config.id, role, addr, exc)

    def shutdown(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()


def serve(config: DaemonConfig) -> Daemon:
    """Start a daemon; raises on bad config, unreadable keytab, or bind failure."""
    return Daemon(config).start()


# --- live client ------------------------------------------------------------------

@dataclass
class ClientConfig:
    name: str
    addr: str
    passwords: tuple[str, str, str]
    variant: Variant
    target_server: str
    peer_addrs: dict[str, tuple[str, int]]
    as_id: str = "kas"
    tgs_id: str = "ktgs"
    timeout: float = 10.0
    seed: Optional[int] = None


_CLIENT_PEER = {
    AsRequest: "as",
    TgsRequest: "tgs",
    ServiceRequest: "v",
    ChallengeResponse: "v",
}


class _PeerConnection:
    def __init__(self, addr: tuple[str, int], timeout: float) -> None:
        self.sock = socket.create_connection(addr, timeout=timeout)
        self.reader = FrameReader()
        self.queue: list[ProtocolMessage] = []

    def send(self, msg: ProtocolMessage) -> None:
        self.sock.sendall(encode(msg))

    def recv_msg(self) -> ProtocolMessage:
        while not self.queue:
            chunk = self.sock.recv(RECV_CHUNK)
            if not chunk:
                raise TransportError("peer closed the connection")
            try:
                self.queue.extend(self.reader.feed(chunk))
            except CodecError as exc:
                raise TransportError(f"peer sent an unreadable frame: {exc}") from exc
        return self.queue.pop(0)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def client_authenticate(
    config: ClientConfig,
    step: Callable[[str], None] = lambda line: None,
    stop_after: Optional[str] = None,
) -> SessionOutcome:
    """Run the client workflow against live daemons; persistent connection per peer.

    ``stop_after`` abandons the session right after sending the named message
    kind (test hook for walking away mid-protocol).
    """
    seed = config.seed
    if seed is None:
        seed = int.from_bytes(os.urandom(8), "big") >> 1
    state = ClientState.from_passwords(
        name=config.name,
        addr=config.addr,
        variant=config.variant,
        passwords=config.passwords,
        as_id=config.as_id,
        tgs_id=config.tgs_id,
        rng=DeterministicRandomSource(seed, f"rng:{config.name}"),
        nonces=DeterministicRandomSource(seed, f"nonces:{config.name}"),
    )
    connections: dict[str, _PeerConnection] = {}

    def peer(role: str) -> _PeerConnection:
        if role not in connections:
            addr = config.peer_addrs.get(role)
            if addr is None:
                raise TransportError(f"no {role} peer configured")
            connections[role] = _PeerConnection(addr, config.timeout)
        return connections[role]

    try:
        reaction = client_begin(state, config.target_server, int(time.time()))
        pending = list(reaction.sends)
        while pending and state.outcome is None:
            send = pending.pop(0)
            role = _CLIENT_PEER.get(type(send.msg))
            if role is None:
                raise TransportError(f"client cannot route {message_kind(send.msg)}")
            connection = peer(role)
            connection.send(send.msg)
            step(f"sent {message_kind(send.msg)} to {role}")
            if stop_after is not None and message_kind(send.msg) == stop_after:
                return SessionOutcome.failed("abandoned-by-test")
            reply = connection.recv_msg()
            step(f"received {message_kind(reply)} from {role}")
            reaction = client_handle(state, reply, int(time.time()))
            pending.extend(reaction.sends)
        if state.outcome is None:
            return SessionOutcome.failed("no-outcome")
        return state.outcome
    finally:
        for connection in connections.values():
            connection.close()
