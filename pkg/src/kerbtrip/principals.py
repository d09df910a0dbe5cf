"""Principal state machines: client, authentication server, ticket server, service.

Every handler is deterministic in (state, message, clock): randomness comes
only from the seeded source carried inside the state.  Handlers mutate their
state and return a :class:`Reaction` listing outgoing messages and notable
events; rejected input raises :class:`Deny` with a distinct reason, which the
simulator and the daemons turn into a logged drop.

Ticket and authenticator validation is one shared code path for both protocol
variants; the variants differ only in which extra messages exist and which
key seals the service-session envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .crypto import (
    AuthenticationFailure,
    DeterministicRandomSource,
    NonceSource,
    SealedBox,
    SymmetricKey,
    derive_key,
    gen_session_key,
    open_box,
    seal,
)
from .protocol import (
    AsReply,
    AsReplyPart,
    AsRequest,
    AttackAlert,
    AlertForward,
    AuthenticatorBody,
    ChallengePart,
    ChallengeResponse,
    ChallengeResponsePart,
    CodecError,
    Incident,
    KeyForward,
    KeyForwardPart,
    Lifetime,
    MutualAuthPart,
    MutualAuthReply,
    NetworkAddress,
    PasswordChallenge,
    PasswordForward,
    PasswordForwardPart,
    PrincipalId,
    ProtocolMessage,
    ServiceRequest,
    TgsReply,
    TgsReplyPart,
    TgsRequest,
    TicketBody,
    Variant,
    check_freshness,
    make_authenticator,
    make_ticket,
    open_authenticator,
    open_ticket,
)

DEFAULT_TGT_LIFETIME = 36000
DEFAULT_SERVICE_TICKET_LIFETIME = 3600
DEFAULT_FRESHNESS_WINDOW = 120
DEFAULT_TIMER_DURATION = 30


class DenyReason(Enum):
    UNKNOWN_CLIENT = "unknown-client"
    UNKNOWN_TGS = "unknown-tgs"
    UNKNOWN_SERVER = "unknown-server"
    TICKET_AUTH_FAILURE = "ticket-auth-failure"
    AUTHENTICATOR_AUTH_FAILURE = "authenticator-auth-failure"
    AUTHENTICATOR_MISMATCH = "authenticator-mismatch"
    ADDRESS_MISMATCH = "address-mismatch"
    STALE_AUTHENTICATOR = "stale-authenticator"
    EXPIRED_TICKET = "expired-ticket"
    NO_FORWARDED_PASSWORD = "no-forwarded-password"
    NO_PENDING_CHALLENGE = "no-pending-challenge"
    CHALLENGE_PENDING = "challenge-pending"
    CHALLENGE_EXPIRED = "challenge-expired"
    ENVELOPE_AUTH_FAILURE = "envelope-auth-failure"
    MALFORMED = "malformed"
    VARIANT_MISMATCH = "variant-mismatch"
    UNEXPECTED_MESSAGE = "unexpected-message"


class Deny(Exception):
    """A handler refused the message; carries the drop reason."""

    def __init__(self, reason: DenyReason, detail: str = "") -> None:
        super().__init__(f"{reason.value}{': ' + detail if detail else ''}")
        self.reason = reason
        self.detail = detail


class DuplicateClient(Exception):
    pass


# --- reactions ---------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    """One outgoing message; ``to=None`` means reply to the frame's sender."""

    to: Optional[str]
    msg: ProtocolMessage


@dataclass(frozen=True)
class GrantNote:
    client: str
    client_addr: str


@dataclass(frozen=True)
class AlertNote:
    incident: Incident
    suspect_addr: str
    client: str


@dataclass(frozen=True)
class TimerNote:
    """A challenge timer was armed; fires the tick after ``deadline``."""

    client: str
    deadline: int


@dataclass(frozen=True)
class NoticeNote:
    notice: "CompromiseNotice"


Note = Union[GrantNote, AlertNote, TimerNote, NoticeNote]


@dataclass
class Reaction:
    sends: list[Send] = field(default_factory=list)
    notes: list[Note] = field(default_factory=list)


# --- state -------------------------------------------------------------------

@dataclass
class CredentialRecord:
    """AS-side registration record: the three password-derived keys."""

    client: PrincipalId
    k1: SymmetricKey
    k2: SymmetricKey
    k3: SymmetricKey


@dataclass
class CompromiseNotice:
    """AS-level conclusion drawn from a forwarded alert."""

    client: str
    incident: Incident
    suspect_addr: str
    known_client: bool
    suspected: str


@dataclass
class AsState:
    id: PrincipalId
    variant: Variant
    rng: DeterministicRandomSource
    nonces: NonceSource
    credentials: dict[str, CredentialRecord] = field(default_factory=dict)
    tgs_keys: dict[str, SymmetricKey] = field(default_factory=dict)
    alerts_received: list[AlertForward] = field(default_factory=list)
    notices: list[CompromiseNotice] = field(default_factory=list)
    tgt_lifetime: int = DEFAULT_TGT_LIFETIME


@dataclass
class ForwardedKeys:
    k2: SymmetricKey
    k3: SymmetricKey


@dataclass
class TgsState:
    id: PrincipalId
    variant: Variant
    own_key: SymmetricKey
    as_id: PrincipalId
    rng: DeterministicRandomSource
    nonces: NonceSource
    server_keys: dict[str, SymmetricKey] = field(default_factory=dict)
    forwarded_passwords: dict[str, ForwardedKeys] = field(default_factory=dict)
    freshness_window: int = DEFAULT_FRESHNESS_WINDOW
    service_ticket_lifetime: int = DEFAULT_SERVICE_TICKET_LIFETIME


@dataclass
class PendingChallenge:
    n3: int
    deadline: int
    suspect_addr: str
    session_key: SymmetricKey


@dataclass
class GrantRecord:
    client: str
    client_addr: str
    at: int


@dataclass
class ServerState:
    id: PrincipalId
    variant: Variant
    own_key: SymmetricKey
    tgs_id: PrincipalId
    rng: DeterministicRandomSource
    nonces: NonceSource
    forwarded_k3: dict[str, SymmetricKey] = field(default_factory=dict)
    pending_challenges: dict[str, PendingChallenge] = field(default_factory=dict)
    grants: list[GrantRecord] = field(default_factory=list)
    timer_duration: int = DEFAULT_TIMER_DURATION
    freshness_window: int = DEFAULT_FRESHNESS_WINDOW


class ClientPhase(Enum):
    IDLE = "idle"
    AWAIT_AS_REPLY = "await-as-reply"
    AWAIT_TGS_REPLY = "await-tgs-reply"
    AWAIT_CHALLENGE = "await-challenge"
    AWAIT_MUTUAL = "await-mutual"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class SessionOutcome:
    ok: bool
    reason: Optional[str] = None

    @classmethod
    def mutual_auth_ok(cls) -> "SessionOutcome":
        return cls(ok=True)

    @classmethod
    def failed(cls, reason: str) -> "SessionOutcome":
        return cls(ok=False, reason=reason)


@dataclass
class TicketHolding:
    ticket: SealedBox
    session_key: SymmetricKey
    validity: Lifetime


@dataclass
class ClientState:
    id: PrincipalId
    addr: NetworkAddress
    variant: Variant
    k1: SymmetricKey
    k2: SymmetricKey
    k3: SymmetricKey
    as_id: PrincipalId
    tgs_id: PrincipalId
    rng: DeterministicRandomSource
    nonces: NonceSource
    tgt: Optional[TicketHolding] = None
    service_tickets: dict[str, TicketHolding] = field(default_factory=dict)
    pending_n1: Optional[int] = None
    pending_n2: Optional[int] = None
    target_v: Optional[PrincipalId] = None
    echo_ts: Optional[int] = None
    phase: ClientPhase = ClientPhase.IDLE
    outcome: Optional[SessionOutcome] = None
    sent_count: int = 0
    requested_lifetime: int = DEFAULT_TGT_LIFETIME

    @classmethod
    def from_passwords(
        cls,
        name: str,
        addr: str,
        variant: Variant,
        passwords: tuple[str, str, str],
        as_id: str,
        tgs_id: str,
        rng: DeterministicRandomSource,
        nonces: NonceSource,
    ) -> "ClientState":
        return cls(
            id=PrincipalId(name),
            addr=NetworkAddress(addr),
            variant=variant,
            k1=derive_key(passwords[0], name, 1),
            k2=derive_key(passwords[1], name, 2),
            k3=derive_key(passwords[2], name, 3),
            as_id=PrincipalId(as_id),
            tgs_id=PrincipalId(tgs_id),
            rng=rng,
            nonces=nonces,
        )


# --- authentication server ----------------------------------------------------

def as_register(state: AsState, client: str, pw1: str, pw2: str, pw3: str) -> CredentialRecord:
    """Register a client with three passwords; keys are derived immediately.

    Equal passwords are allowed: the derivation index keeps the three keys
    distinct regardless.
    """
    if client in state.credentials:
        raise DuplicateClient(client)
    record = CredentialRecord(
        client=PrincipalId(client),
        k1=derive_key(pw1, client, 1),
        k2=derive_key(pw2, client, 2),
        k3=derive_key(pw3, client, 3),
    )
    state.credentials[client] = record
    return record


def as_handle_request(state: AsState, msg: AsRequest, now: int, src_addr: str) -> Reaction:
    """Issue a TGT; in the triple variant also forward k2/k3 to the TGS."""
    if msg.variant != state.variant:
        raise Deny(DenyReason.VARIANT_MISMATCH)
    record = state.credentials.get(msg.client.name)
    if record is None:
        raise Deny(DenyReason.UNKNOWN_CLIENT, msg.client.name)
    tgs_key = state.tgs_keys.get(msg.target_tgs.name)
    if tgs_key is None:
        raise Deny(DenyReason.UNKNOWN_TGS, msg.target_tgs.name)

    session_key = gen_session_key(state.rng)
    requested = msg.requested_lifetime.duration()
    granted = min(requested, state.tgt_lifetime) if requested > 0 else state.tgt_lifetime
    validity = Lifetime(now, now + granted)
    ticket = make_ticket(
        tgs_key, msg.client, NetworkAddress(src_addr), validity, session_key, state.nonces
    )
    part = AsReplyPart(
        session_key=session_key, target_tgs=msg.target_tgs, n1=msg.n1, validity=validity
    )
    reply = AsReply(
        variant=state.variant,
        client=msg.client,
        ticket=ticket,
        enc=seal(record.k1, part.pack(), state.nonces),
    )
    sends = [Send(to=None, msg=reply)]
    if state.variant is Variant.TRIPLE:
        forward = KeyForwardPart(client=msg.client, k2=record.k2, k3=record.k3)
        sends.append(
            Send(
                to=msg.target_tgs.name,
                msg=KeyForward(enc=seal(tgs_key, forward.pack(), state.nonces)),
            )
        )
    return Reaction(sends=sends)


def as_handle_alert_forward(state: AsState, msg: AlertForward) -> Reaction:
    """Record a forwarded alert and derive what it implies about the client."""
    state.alerts_received.append(msg)
    if msg.incident is Incident.BAD_PASSWORD:
        suspected = "password-layer key (second or third registration key) compromised"
    else:
        suspected = "session key or ticket captured and replayed"
    notice = CompromiseNotice(
        client=msg.client.name,
        incident=msg.incident,
        suspect_addr=msg.suspect_addr.addr,
        known_client=msg.client.name in state.credentials,
        suspected=suspected,
    )
    state.notices.append(notice)
    return Reaction(notes=[NoticeNote(notice)])


# --- shared ticket validation ---------------------------------------------------

def validate_presented_ticket(
    own_key: SymmetricKey,
    ticket: SealedBox,
    authenticator: SealedBox,
    now: int,
    src_addr: Optional[str],
    freshness_window: int,
) -> tuple[TicketBody, AuthenticatorBody]:
    """Open ticket and authenticator and run the identity/address/time checks.

    Identical for the TGS and the service, in both variants.
    """
    try:
        body = open_ticket(own_key, ticket)
    except AuthenticationFailure:
        raise Deny(DenyReason.TICKET_AUTH_FAILURE) from None
    except CodecError as exc:
        raise Deny(DenyReason.MALFORMED, f"ticket body: {exc}") from None
    try:
        auth = open_authenticator(body.session_key, authenticator)
    except AuthenticationFailure:
        raise Deny(DenyReason.AUTHENTICATOR_AUTH_FAILURE) from None
    except CodecError as exc:
        raise Deny(DenyReason.MALFORMED, f"authenticator body: {exc}") from None

    if auth.client != body.client or auth.client_addr != body.client_addr:
        raise Deny(DenyReason.AUTHENTICATOR_MISMATCH)
    if src_addr is not None and body.client_addr.addr != src_addr:
        raise Deny(DenyReason.ADDRESS_MISMATCH, f"{body.client_addr.addr} != {src_addr}")
    if not check_freshness(auth.created_at, now, freshness_window):
        raise Deny(DenyReason.STALE_AUTHENTICATOR)
    if not body.validity.contains(now):
        raise Deny(DenyReason.EXPIRED_TICKET)
    return body, auth


# --- ticket granting server -----------------------------------------------------

def tgs_handle_key_forward(state: TgsState, msg: KeyForward) -> Reaction:
    """Store the forwarded k2/k3 pair; a later forward overwrites."""
    if state.variant is not Variant.TRIPLE:
        raise Deny(DenyReason.VARIANT_MISMATCH)
    try:
        part = KeyForwardPart.unpack(open_box(state.own_key, msg.enc))
    except AuthenticationFailure:
        raise Deny(DenyReason.ENVELOPE_AUTH_FAILURE) from None
    except CodecError as exc:
        raise Deny(DenyReason.MALFORMED, str(exc)) from None
    state.forwarded_passwords[part.client.name] = ForwardedKeys(k2=part.k2, k3=part.k3)
    return Reaction()


def tgs_handle_request(state: TgsState, msg: TgsRequest, now: int, src_addr: str) -> Reaction:
    """Validate the TGT and issue a service ticket.

    The service session key goes to the client sealed under the forwarded k2
    in the triple variant (so a captured TGT plus its session key are not
    enough to proceed), and under the TGT session key in the baseline.
    """
    if msg.variant != state.variant:
        raise Deny(DenyReason.VARIANT_MISMATCH)
    body, _auth = validate_presented_ticket(
        state.own_key, msg.ticket, msg.authenticator, now, src_addr, state.freshness_window
    )
    server_key = state.server_keys.get(msg.target_v.name)
    if server_key is None:
        raise Deny(DenyReason.UNKNOWN_SERVER, msg.target_v.name)

    if state.variant is Variant.TRIPLE:
        forwarded = state.forwarded_passwords.get(body.client.name)
        if forwarded is None:
            raise Deny(DenyReason.NO_FORWARDED_PASSWORD, body.client.name)
        envelope_key = forwarded.k2
    else:
        envelope_key = body.session_key

    service_key = gen_session_key(state.rng)
    validity = Lifetime(now, now + state.service_ticket_lifetime)
    ticket_v = make_ticket(
        server_key, body.client, body.client_addr, validity, service_key, state.nonces
    )
    part = TgsReplyPart(
        n2=msg.n2, target_v=msg.target_v, session_key=service_key, validity=validity
    )
    reply = TgsReply(
        variant=state.variant,
        client=body.client,
        ticket=ticket_v,
        enc=seal(envelope_key, part.pack(), state.nonces),
    )
    sends = [Send(to=None, msg=reply)]
    if state.variant is Variant.TRIPLE:
        fwd = PasswordForwardPart(client=body.client, k3=forwarded.k3)
        sends.append(
            Send(
                to=msg.target_v.name,
                msg=PasswordForward(enc=seal(server_key, fwd.pack(), state.nonces)),
            )
        )
    return Reaction(sends=sends)


def tgs_handle_alert(state: TgsState, msg: AttackAlert) -> Reaction:
    """Forward the alert to the AS unchanged."""
    if state.variant is not Variant.TRIPLE:
        raise Deny(DenyReason.VARIANT_MISMATCH)
    forwarded = AlertForward(
        reporter=msg.reporter,
        suspect_addr=msg.suspect_addr,
        client=msg.client,
        incident=msg.incident,
    )
    return Reaction(sends=[Send(to=state.as_id.name, msg=forwarded)])


# --- application server -----------------------------------------------------------

def v_handle_service_request(
    state: ServerState, msg: ServiceRequest, now: int, src_addr: str
) -> Reaction:
    """Validate the service ticket; challenge (triple) or grant (baseline)."""
    if msg.variant != state.variant:
        raise Deny(DenyReason.VARIANT_MISMATCH)
    body, auth = validate_presented_ticket(
        state.own_key, msg.ticket, msg.authenticator, now, src_addr, state.freshness_window
    )
    if state.variant is Variant.BASELINE:
        state.grants.append(GrantRecord(client=body.client.name, client_addr=src_addr, at=now))
        reply = MutualAuthReply(
            variant=Variant.BASELINE,
            enc=seal(
                body.session_key, MutualAuthPart(auth.created_at + 1).pack(), state.nonces
            ),
        )
        return Reaction(
            sends=[Send(to=None, msg=reply)],
            notes=[GrantNote(client=body.client.name, client_addr=src_addr)],
        )

    if body.client.name in state.pending_challenges:
        raise Deny(DenyReason.CHALLENGE_PENDING, body.client.name)
    if body.client.name not in state.forwarded_k3:
        raise Deny(DenyReason.NO_FORWARDED_PASSWORD, body.client.name)
    n3 = state.rng.next_u64()
    deadline = now + state.timer_duration
    state.pending_challenges[body.client.name] = PendingChallenge(
        n3=n3, deadline=deadline, suspect_addr=src_addr, session_key=body.session_key
    )
    challenge = ChallengePart(client=body.client, n3=n3)
    reply = PasswordChallenge(enc=seal(body.session_key, challenge.pack(), state.nonces))
    return Reaction(
        sends=[Send(to=None, msg=reply)],
        notes=[TimerNote(client=body.client.name, deadline=deadline)],
    )


def v_handle_password_forward(state: ServerState, msg: PasswordForward) -> Reaction:
    if state.variant is not Variant.TRIPLE:
        raise Deny(DenyReason.VARIANT_MISMATCH)
    try:
        part = PasswordForwardPart.unpack(open_box(state.own_key, msg.enc))
    except AuthenticationFailure:
        raise Deny(DenyReason.ENVELOPE_AUTH_FAILURE) from None
    except CodecError as exc:
        raise Deny(DenyReason.MALFORMED, str(exc)) from None
    state.forwarded_k3[part.client.name] = part.k3
    return Reaction()


def v_handle_challenge_response(
    state: ServerState, msg: ChallengeResponse, now: int, src_addr: str
) -> Reaction:
    """Compare the revealed key with the forwarded one; grant or alert.

    One challenge, one verdict: both branches clear the pending entry, so a
    second response for the same client is rejected outright.
    """
    if state.variant is not Variant.TRIPLE:
        raise Deny(DenyReason.VARIANT_MISMATCH)
    if not state.pending_challenges:
        raise Deny(DenyReason.NO_PENDING_CHALLENGE)

    opened: Optional[tuple[str, PendingChallenge, bytes]] = None
    for client_name, pending in state.pending_challenges.items():
        try:
            raw = open_box(pending.session_key, msg.enc)
        except AuthenticationFailure:
            continue
        opened = (client_name, pending, raw)
        break
    if opened is None:
        raise Deny(DenyReason.ENVELOPE_AUTH_FAILURE)
    client_name, pending, raw = opened

    try:
        part = ChallengeResponsePart.unpack(raw)
    except CodecError as exc:
        raise Deny(DenyReason.MALFORMED, str(exc)) from None
    if now > pending.deadline:
        # Too late: the timer sweep owns this challenge now.
        raise Deny(DenyReason.CHALLENGE_EXPIRED, client_name)

    del state.pending_challenges[client_name]
    if part.k3 == state.forwarded_k3.get(client_name):
        state.grants.append(GrantRecord(client=client_name, client_addr=src_addr, at=now))
        reply = MutualAuthReply(
            variant=Variant.TRIPLE,
            enc=seal(pending.session_key, MutualAuthPart(part.t5 + 1).pack(), state.nonces),
        )
        return Reaction(
            sends=[Send(to=None, msg=reply)],
            notes=[GrantNote(client=client_name, client_addr=src_addr)],
        )
    alert = AttackAlert(
        reporter=state.id,
        suspect_addr=NetworkAddress(pending.suspect_addr),
        client=PrincipalId(client_name),
        incident=Incident.BAD_PASSWORD,
    )
    return Reaction(
        sends=[Send(to=state.tgs_id.name, msg=alert)],
        notes=[
            AlertNote(
                incident=Incident.BAD_PASSWORD,
                suspect_addr=pending.suspect_addr,
                client=client_name,
            )
        ],
    )


def v_tick(state: ServerState, now: int) -> Reaction:
    """Fire alerts for challenges whose deadline has passed (deadline inclusive)."""
    reaction = Reaction()
    expired = [name for name, p in state.pending_challenges.items() if p.deadline < now]
    for client_name in expired:
        pending = state.pending_challenges.pop(client_name)
        alert = AttackAlert(
            reporter=state.id,
            suspect_addr=NetworkAddress(pending.suspect_addr),
            client=PrincipalId(client_name),
            incident=Incident.TIMEOUT,
        )
        reaction.sends.append(Send(to=state.tgs_id.name, msg=alert))
        reaction.notes.append(
            AlertNote(
                incident=Incident.TIMEOUT,
                suspect_addr=pending.suspect_addr,
                client=client_name,
            )
        )
    return reaction


# --- client -----------------------------------------------------------------------

def client_begin(state: ClientState, target_v: str, now: int) -> Reaction:
    """Start a session: request a TGT naming the wanted service."""
    state.target_v = PrincipalId(target_v)
    state.pending_n1 = state.rng.next_u64()
    state.phase = ClientPhase.AWAIT_AS_REPLY
    state.outcome = None
    msg = AsRequest(
        variant=state.variant,
        client=state.id,
        target_tgs=state.tgs_id,
        n1=state.pending_n1,
        requested_lifetime=Lifetime(now, now + state.requested_lifetime),
    )
    state.sent_count += 1
    return Reaction(sends=[Send(to=state.as_id.name, msg=msg)])


def _client_fail(state: ClientState, reason: str) -> Reaction:
    state.phase = ClientPhase.FAILED
    state.outcome = SessionOutcome.failed(reason)
    return Reaction()


def client_handle(state: ClientState, msg: ProtocolMessage, now: int) -> Reaction:
    """Advance the client one step; unexpected message kinds are ignored."""
    if isinstance(msg, AsReply) and state.phase is ClientPhase.AWAIT_AS_REPLY:
        return _client_on_as_reply(state, msg, now)
    if isinstance(msg, TgsReply) and state.phase is ClientPhase.AWAIT_TGS_REPLY:
        return _client_on_tgs_reply(state, msg, now)
    if isinstance(msg, PasswordChallenge) and state.phase is ClientPhase.AWAIT_CHALLENGE:
        return _client_on_challenge(state, msg, now)
    if isinstance(msg, MutualAuthReply) and state.phase is ClientPhase.AWAIT_MUTUAL:
        return _client_on_mutual(state, msg)
    return Reaction()


def _client_on_as_reply(state: ClientState, msg: AsReply, now: int) -> Reaction:
    try:
        part = AsReplyPart.unpack(open_box(state.k1, msg.enc))
    except (AuthenticationFailure, CodecError):
        return _client_fail(state, "as-reply-open-failure")
    if part.n1 != state.pending_n1:
        return _client_fail(state, "nonce-mismatch")
    state.tgt = TicketHolding(
        ticket=msg.ticket, session_key=part.session_key, validity=part.validity
    )
    state.pending_n2 = state.rng.next_u64()
    authenticator = make_authenticator(
        part.session_key, state.id, state.addr, now, state.nonces
    )
    request = TgsRequest(
        variant=state.variant,
        ticket=msg.ticket,
        target_v=state.target_v,
        n2=state.pending_n2,
        authenticator=authenticator,
    )
    state.phase = ClientPhase.AWAIT_TGS_REPLY
    state.sent_count += 1
    return Reaction(sends=[Send(to=state.tgs_id.name, msg=request)])


def _client_on_tgs_reply(state: ClientState, msg: TgsReply, now: int) -> Reaction:
    envelope_key = state.k2 if state.variant is Variant.TRIPLE else state.tgt.session_key
    try:
        part = TgsReplyPart.unpack(open_box(envelope_key, msg.enc))
    except (AuthenticationFailure, CodecError):
        return _client_fail(state, "tgs-reply-open-failure")
    if part.n2 != state.pending_n2:
        return _client_fail(state, "nonce-mismatch")
    holding = TicketHolding(
        ticket=msg.ticket, session_key=part.session_key, validity=part.validity
    )
    state.service_tickets[part.target_v.name] = holding
    authenticator = make_authenticator(
        part.session_key, state.id, state.addr, now, state.nonces
    )
    request = ServiceRequest(
        variant=state.variant, ticket=msg.ticket, authenticator=authenticator
    )
    if state.variant is Variant.TRIPLE:
        state.phase = ClientPhase.AWAIT_CHALLENGE
    else:
        # Baseline mutual auth echoes the authenticator timestamp.
        state.echo_ts = now
        state.phase = ClientPhase.AWAIT_MUTUAL
    state.sent_count += 1
    return Reaction(sends=[Send(to=part.target_v.name, msg=request)])


def _client_on_challenge(state: ClientState, msg: PasswordChallenge, now: int) -> Reaction:
    holding = state.service_tickets.get(state.target_v.name)
    if holding is None:
        return _client_fail(state, "challenge-before-ticket")
    try:
        part = ChallengePart.unpack(open_box(holding.session_key, msg.enc))
    except (AuthenticationFailure, CodecError):
        return _client_fail(state, "challenge-open-failure")
    if part.client != state.id:
        return _client_fail(state, "challenge-names-wrong-client")
    state.echo_ts = now
    response = ChallengeResponsePart(k3=state.k3, t5=now)
    reply = ChallengeResponse(enc=seal(holding.session_key, response.pack(), state.nonces))
    state.phase = ClientPhase.AWAIT_MUTUAL
    state.sent_count += 1
    return Reaction(sends=[Send(to=state.target_v.name, msg=reply)])


def _client_on_mutual(state: ClientState, msg: MutualAuthReply) -> Reaction:
    holding = state.service_tickets.get(state.target_v.name)
    if holding is None:
        return _client_fail(state, "mutual-before-ticket")
    try:
        part = MutualAuthPart.unpack(open_box(holding.session_key, msg.enc))
    except (AuthenticationFailure, CodecError):
        return _client_fail(state, "mutual-open-failure")
    if part.value != state.echo_ts + 1:
        return _client_fail(state, "bad-mutual-auth")
    state.phase = ClientPhase.DONE
    state.outcome = SessionOutcome.mutual_auth_ok()
    return Reaction()


# --- uniform dispatch ---------------------------------------------------------

PrincipalState = Union[AsState, TgsState, ServerState, ClientState]


def handle_message(
    state: PrincipalState, msg: ProtocolMessage, now: int, src_addr: str
) -> Reaction:
    """Route one decoded message to the right handler for this principal.

    Both the simulator and the socket daemons go through here, so they cannot
    diverge in behavior.
    """
    if isinstance(state, AsState):
        if isinstance(msg, AsRequest):
            return as_handle_request(state, msg, now, src_addr)
        if isinstance(msg, AlertForward):
            return as_handle_alert_forward(state, msg)
    elif isinstance(state, TgsState):
        if isinstance(msg, KeyForward):
            return tgs_handle_key_forward(state, msg)
        if isinstance(msg, TgsRequest):
            return tgs_handle_request(state, msg, now, src_addr)
        if isinstance(msg, AttackAlert):
            return tgs_handle_alert(state, msg)
    elif isinstance(state, ServerState):
        if isinstance(msg, ServiceRequest):
            return v_handle_service_request(state, msg, now, src_addr)
        if isinstance(msg, PasswordForward):
            return v_handle_password_forward(state, msg)
        if isinstance(msg, ChallengeResponse):
            return v_handle_challenge_response(state, msg, now, src_addr)
    elif isinstance(state, ClientState):
        return client_handle(state, msg, now)
    raise Deny(DenyReason.UNEXPECTED_MESSAGE, type(msg).__name__)


def snapshot(state: PrincipalState) -> str:
    """Stable one-line-per-fact text rendering of a principal's state."""
    lines: list[str] = [f"kind={type(state).__name__} id={state.id} variant={state.variant.value}"]
    if isinstance(state, AsState):
        for name in sorted(state.credentials):
            rec = state.credentials[name]
            lines.append(
                f"credential client={name} "
                f"k1={rec.k1.data[:4].hex()} k2={rec.k2.data[:4].hex()} k3={rec.k3.data[:4].hex()}"
            )
        lines.append(f"alerts_received={len(state.alerts_received)}")
        for notice in state.notices:
            lines.append(
                f"notice client={notice.client} incident={notice.incident.name.lower()} "
                f"suspect={notice.suspect_addr} known={notice.known_client}"
            )
    elif isinstance(state, TgsState):
        for name in sorted(state.forwarded_passwords):
            lines.append(f"forwarded client={name}")
    elif isinstance(state, ServerState):
        for name in sorted(state.forwarded_k3):
            lines.append(f"forwarded-k3 client={name}")
        for name in sorted(state.pending_challenges):
            p = state.pending_challenges[name]
            lines.append(f"pending client={name} deadline={p.deadline} suspect={p.suspect_addr}")
        for grant in state.grants:
            lines.append(f"grant client={grant.client} addr={grant.client_addr} at={grant.at}")
    elif isinstance(state, ClientState):
        lines.append(f"phase={state.phase.value} sent={state.sent_count}")
        if state.outcome is not None:
            lines.append(f"outcome ok={state.outcome.ok} reason={state.outcome.reason}")
    return "\n".join(lines)
