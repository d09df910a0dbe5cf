"""Wire messages, tickets, authenticators, and the frame codec.

Frame layout (big-endian throughout)::

    "KTP1" ‖ type byte ‖ u32 payload length ‖ payload

Payload fields in declaration order: strings are u16-length-prefixed UTF-8,
integers fixed-width, sealed boxes u32-length-prefixed opaque bytes
(nonce ‖ ciphertext ‖ tag).  Type bytes 0x01-0x0C are the hardened
triple-password flow, 0x11-0x16 the baseline flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import ClassVar, Iterator, Type, Union

from .crypto import (
    KEY_SIZE,
    KeyOrigin,
    NonceSource,
    SealedBox,
    SymmetricKey,
    open_box,
    seal,
)

MAGIC = b"KTP1"
HEADER_SIZE = len(MAGIC) + 1 + 4

_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF
_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1


class Variant(Enum):
    BASELINE = "baseline"
    TRIPLE = "triple"


class Incident(Enum):
    TIMEOUT = 1
    BAD_PASSWORD = 2


class CodecError(Exception):
    """Base class for frame decoding failures."""


class BadMagic(CodecError):
    pass


class UnknownType(CodecError):
    pass


class Truncated(CodecError):
    pass


class TrailingGarbage(CodecError):
    pass


# --- identities and time ----------------------------------------------------

@dataclass(frozen=True)
class PrincipalId:
    name: str

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("principal id must be non-empty")
        if "\x00" in self.name:
            raise ValueError("principal id must not contain NUL")
        if len(self.name.encode("utf-8")) > 255:
            raise ValueError("principal id longer than 255 bytes")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class NetworkAddress:
    addr: str

    def __post_init__(self) -> None:
        if not self.addr:
            raise ValueError("network address must be non-empty")
        if len(self.addr.encode("utf-8")) > _U16_MAX:
            raise ValueError("network address too long")

    def __str__(self) -> str:
        return self.addr


@dataclass(frozen=True)
class Lifetime:
    """Validity interval in seconds (wall clock) or ticks (simulated)."""

    start: int
    expiry: int

    def __post_init__(self) -> None:
        if self.expiry < self.start:
            raise ValueError("lifetime expiry precedes start")

    def contains(self, now: int) -> bool:
        return self.start <= now <= self.expiry

    def duration(self) -> int:
        return self.expiry - self.start


def check_freshness(ts: int, now: int, window: int) -> bool:
    """True iff the timestamp is within ``window`` of ``now`` (inclusive)."""
    if window <= 0:
        raise ValueError("freshness window must be positive")
    return abs(now - ts) <= window


# --- low-level field packing -------------------------------------------------

class _Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> None:
        if not 0 <= value <= 0xFF:
            raise ValueError("u8 out of range")
        self._parts.append(bytes([value]))

    def u64(self, value: int) -> None:
        if not 0 <= value <= _U64_MAX:
            raise ValueError("u64 out of range")
        self._parts.append(value.to_bytes(8, "big"))

    def i64(self, value: int) -> None:
        if not _I64_MIN <= value <= _I64_MAX:
            raise ValueError("i64 out of range")
        self._parts.append(value.to_bytes(8, "big", signed=True))

    def string(self, value: str) -> None:
        raw = value.encode("utf-8")
        if len(raw) > _U16_MAX:
            raise ValueError("string too long for u16 prefix")
        self._parts.append(len(raw).to_bytes(2, "big") + raw)

    def lifetime(self, value: Lifetime) -> None:
        self.i64(value.start)
        self.i64(value.expiry)

    def key(self, value: SymmetricKey) -> None:
        self._parts.append(value.data)

    def box(self, value: SealedBox) -> None:
        raw = value.as_bytes()
        if len(raw) > _U32_MAX:
            raise ValueError("sealed box too long for u32 prefix")
        self._parts.append(len(raw).to_bytes(4, "big") + raw)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, raw: bytes) -> None:
        self._raw = raw
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._raw):
            raise Truncated("payload ended mid-field")
        out = self._raw[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u64(self) -> int:
        return int.from_bytes(self._take(8), "big")

    def i64(self) -> int:
        return int.from_bytes(self._take(8), "big", signed=True)

    def string(self) -> str:
        n = int.from_bytes(self._take(2), "big")
        return self._take(n).decode("utf-8")

    def lifetime(self) -> Lifetime:
        return Lifetime(start=self.i64(), expiry=self.i64())

    def key(self, origin: KeyOrigin) -> SymmetricKey:
        return SymmetricKey(self._take(KEY_SIZE), origin)

    def box(self) -> SealedBox:
        n = int.from_bytes(self._take(4), "big")
        return SealedBox.from_bytes(self._take(n))

    def expect_end(self) -> None:
        if self._pos != len(self._raw):
            raise TrailingGarbage("unconsumed bytes after last field")


# --- sealed payload structures ------------------------------------------------
#
# These never touch the wire in the clear; they are the plaintexts inside
# the SealedBox fields below.

@dataclass(frozen=True)
class TicketBody:
    """Contents of both ticket kinds: who it names, where, when, which key."""

    client: PrincipalId
    client_addr: NetworkAddress
    validity: Lifetime
    session_key: SymmetricKey

    def pack(self) -> bytes:
        w = _Writer()
        w.string(self.client.name)
        w.string(self.client_addr.addr)
        w.lifetime(self.validity)
        w.key(self.session_key)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "TicketBody":
        r = _Reader(raw)
        body = cls(
            client=PrincipalId(r.string()),
            client_addr=NetworkAddress(r.string()),
            validity=r.lifetime(),
            session_key=r.key(KeyOrigin.SESSION),
        )
        r.expect_end()
        return body


@dataclass(frozen=True)
class AuthenticatorBody:
    """Proof of session-key possession; lives far shorter than a ticket."""

    client: PrincipalId
    client_addr: NetworkAddress
    created_at: int

    def pack(self) -> bytes:
        w = _Writer()
        w.string(self.client.name)
        w.string(self.client_addr.addr)
        w.i64(self.created_at)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "AuthenticatorBody":
        r = _Reader(raw)
        body = cls(
            client=PrincipalId(r.string()),
            client_addr=NetworkAddress(r.string()),
            created_at=r.i64(),
        )
        r.expect_end()
        return body


@dataclass(frozen=True)
class AsReplyPart:
    """AS→client secret half: the TGS session key plus the echoed nonce."""

    session_key: SymmetricKey
    target_tgs: PrincipalId
    n1: int
    validity: Lifetime

    def pack(self) -> bytes:
        w = _Writer()
        w.key(self.session_key)
        w.string(self.target_tgs.name)
        w.u64(self.n1)
        w.lifetime(self.validity)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "AsReplyPart":
        r = _Reader(raw)
        part = cls(
            session_key=r.key(KeyOrigin.SESSION),
            target_tgs=PrincipalId(r.string()),
            n1=r.u64(),
            validity=r.lifetime(),
        )
        r.expect_end()
        return part


@dataclass(frozen=True)
class KeyForwardPart:
    """AS→TGS: second and third registration keys for one client."""

    client: PrincipalId
    k2: SymmetricKey
    k3: SymmetricKey

    def pack(self) -> bytes:
        w = _Writer()
        w.string(self.client.name)
        w.key(self.k2)
        w.key(self.k3)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "KeyForwardPart":
        r = _Reader(raw)
        part = cls(
            client=PrincipalId(r.string()),
            k2=r.key(KeyOrigin.PASSWORD),
            k3=r.key(KeyOrigin.PASSWORD),
        )
        r.expect_end()
        return part


@dataclass(frozen=True)
class TgsReplyPart:
    """TGS→client secret half: the service session key plus the echoed nonce."""

    n2: int
    target_v: PrincipalId
    session_key: SymmetricKey
    validity: Lifetime

    def pack(self) -> bytes:
        w = _Writer()
        w.u64(self.n2)
        w.string(self.target_v.name)
        w.key(self.session_key)
        w.lifetime(self.validity)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "TgsReplyPart":
        r = _Reader(raw)
        part = cls(
            n2=r.u64(),
            target_v=PrincipalId(r.string()),
            session_key=r.key(KeyOrigin.SESSION),
            validity=r.lifetime(),
        )
        r.expect_end()
        return part


@dataclass(frozen=True)
class PasswordForwardPart:
    """TGS→server: the challenge secret for one client."""

    client: PrincipalId
    k3: SymmetricKey

    def pack(self) -> bytes:
        w = _Writer()
        w.string(self.client.name)
        w.key(self.k3)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "PasswordForwardPart":
        r = _Reader(raw)
        part = cls(client=PrincipalId(r.string()), k3=r.key(KeyOrigin.PASSWORD))
        r.expect_end()
        return part


@dataclass(frozen=True)
class ChallengePart:
    """Server→client password challenge."""

    client: PrincipalId
    n3: int

    def pack(self) -> bytes:
        w = _Writer()
        w.string(self.client.name)
        w.u64(self.n3)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "ChallengePart":
        r = _Reader(raw)
        part = cls(client=PrincipalId(r.string()), n3=r.u64())
        r.expect_end()
        return part


@dataclass(frozen=True)
class ChallengeResponsePart:
    """Client→server: the revealed third key plus a timestamp to echo."""

    k3: SymmetricKey
    t5: int

    def pack(self) -> bytes:
        w = _Writer()
        w.key(self.k3)
        w.i64(self.t5)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "ChallengeResponsePart":
        r = _Reader(raw)
        part = cls(k3=r.key(KeyOrigin.PASSWORD), t5=r.i64())
        r.expect_end()
        return part


@dataclass(frozen=True)
class MutualAuthPart:
    """Server→client proof: the client's timestamp incremented by one."""

    value: int

    def pack(self) -> bytes:
        w = _Writer()
        w.i64(self.value)
        return w.getvalue()

    @classmethod
    def unpack(cls, raw: bytes) -> "MutualAuthPart":
        r = _Reader(raw)
        part = cls(value=r.i64())
        r.expect_end()
        return part


# --- wire messages ------------------------------------------------------------

@dataclass(frozen=True)
class AsRequest:
    """Client→AS: ask for a ticket-granting ticket."""

    variant: Variant
    client: PrincipalId
    target_tgs: PrincipalId
    n1: int
    requested_lifetime: Lifetime


@dataclass(frozen=True)
class AsReply:
    """AS→client: TGT in the clear envelope, secrets sealed under k1."""

    variant: Variant
    client: PrincipalId
    ticket: SealedBox
    enc: SealedBox


@dataclass(frozen=True)
class KeyForward:
    """AS→TGS (triple only): k2 and k3 sealed under the shared TGS key."""

    enc: SealedBox
    variant: ClassVar[Variant] = Variant.TRIPLE


@dataclass(frozen=True)
class TgsRequest:
    """Client→TGS: TGT plus authenticator, naming the wanted server."""

    variant: Variant
    ticket: SealedBox
    target_v: PrincipalId
    n2: int
    authenticator: SealedBox


@dataclass(frozen=True)
class TgsReply:
    """TGS→client: service ticket plus the sealed service session key."""

    variant: Variant
    client: PrincipalId
    ticket: SealedBox
    enc: SealedBox


@dataclass(frozen=True)
class PasswordForward:
    """TGS→server (triple only): the client's k3 sealed under the server key."""

    enc: SealedBox
    variant: ClassVar[Variant] = Variant.TRIPLE


@dataclass(frozen=True)
class ServiceRequest:
    """Client→server: service ticket plus authenticator."""

    variant: Variant
    ticket: SealedBox
    authenticator: SealedBox


@dataclass(frozen=True)
class PasswordChallenge:
    """Server→client (triple only): prove you know k3."""

    enc: SealedBox
    variant: ClassVar[Variant] = Variant.TRIPLE


@dataclass(frozen=True)
class ChallengeResponse:
    """Client→server (triple only): the revealed k3 and a timestamp."""

    enc: SealedBox
    variant: ClassVar[Variant] = Variant.TRIPLE


@dataclass(frozen=True)
class MutualAuthReply:
    """Server→client: timestamp + 1, proving the server's identity."""

    variant: Variant
    enc: SealedBox


@dataclass(frozen=True)
class AttackAlert:
    """Server→TGS (triple only): a challenge went unanswered or failed."""

    reporter: PrincipalId
    suspect_addr: NetworkAddress
    client: PrincipalId
    incident: Incident
    variant: ClassVar[Variant] = Variant.TRIPLE


@dataclass(frozen=True)
class AlertForward:
    """TGS→AS (triple only): the alert, passed through unchanged."""

    reporter: PrincipalId
    suspect_addr: NetworkAddress
    client: PrincipalId
    incident: Incident
    variant: ClassVar[Variant] = Variant.TRIPLE


ProtocolMessage = Union[
    AsRequest,
    AsReply,
    KeyForward,
    TgsRequest,
    TgsReply,
    PasswordForward,
    ServiceRequest,
    PasswordChallenge,
    ChallengeResponse,
    MutualAuthReply,
    AttackAlert,
    AlertForward,
]

_TYPE_BYTES: dict[tuple[Type, Variant], int] = {
    (AsRequest, Variant.TRIPLE): 0x01,
    (AsReply, Variant.TRIPLE): 0x02,
    (KeyForward, Variant.TRIPLE): 0x03,
    (TgsRequest, Variant.TRIPLE): 0x04,
    (TgsReply, Variant.TRIPLE): 0x05,
    (PasswordForward, Variant.TRIPLE): 0x06,
    (ServiceRequest, Variant.TRIPLE): 0x07,
    (PasswordChallenge, Variant.TRIPLE): 0x08,
    (ChallengeResponse, Variant.TRIPLE): 0x09,
    (MutualAuthReply, Variant.TRIPLE): 0x0A,
    (AttackAlert, Variant.TRIPLE): 0x0B,
    (AlertForward, Variant.TRIPLE): 0x0C,
    (AsRequest, Variant.BASELINE): 0x11,
    (AsReply, Variant.BASELINE): 0x12,
    (TgsRequest, Variant.BASELINE): 0x13,
    (TgsReply, Variant.BASELINE): 0x14,
    (ServiceRequest, Variant.BASELINE): 0x15,
    (MutualAuthReply, Variant.BASELINE): 0x16,
}

_BY_TYPE_BYTE = {v: k for k, v in _TYPE_BYTES.items()}

WIRE_VARIANTS: tuple[tuple[Type, Variant], ...] = tuple(_TYPE_BYTES)


def _encode_payload(msg: ProtocolMessage) -> bytes:
    w = _Writer()
    if isinstance(msg, AsRequest):
        w.string(msg.client.name)
        w.string(msg.target_tgs.name)
        w.u64(msg.n1)
        w.lifetime(msg.requested_lifetime)
    elif isinstance(msg, (AsReply, TgsReply)):
        w.string(msg.client.name)
        w.box(msg.ticket)
        w.box(msg.enc)
    elif isinstance(msg, TgsRequest):
        w.box(msg.ticket)
        w.string(msg.target_v.name)
        w.u64(msg.n2)
        w.box(msg.authenticator)
    elif isinstance(msg, ServiceRequest):
        w.box(msg.ticket)
        w.box(msg.authenticator)
    elif isinstance(msg, (KeyForward, PasswordForward, PasswordChallenge,
                          ChallengeResponse, MutualAuthReply)):
        w.box(msg.enc)
    elif isinstance(msg, (AttackAlert, AlertForward)):
        w.string(msg.reporter.name)
        w.string(msg.suspect_addr.addr)
        w.string(msg.client.name)
        w.u8(msg.incident.value)
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return w.getvalue()


def _decode_payload(cls: Type, variant: Variant, raw: bytes) -> ProtocolMessage:
    r = _Reader(raw)
    msg: ProtocolMessage
    if cls is AsRequest:
        msg = AsRequest(
            variant=variant,
            client=PrincipalId(r.string()),
            target_tgs=PrincipalId(r.string()),
            n1=r.u64(),
            requested_lifetime=r.lifetime(),
        )
    elif cls in (AsReply, TgsReply):
        msg = cls(
            variant=variant,
            client=PrincipalId(r.string()),
            ticket=r.box(),
            enc=r.box(),
        )
    elif cls is TgsRequest:
        msg = TgsRequest(
            variant=variant,
            ticket=r.box(),
            target_v=PrincipalId(r.string()),
            n2=r.u64(),
            authenticator=r.box(),
        )
    elif cls is ServiceRequest:
        msg = ServiceRequest(variant=variant, ticket=r.box(), authenticator=r.box())
    elif cls is MutualAuthReply:
        msg = MutualAuthReply(variant=variant, enc=r.box())
    elif cls in (KeyForward, PasswordForward, PasswordChallenge, ChallengeResponse):
        msg = cls(enc=r.box())
    elif cls in (AttackAlert, AlertForward):
        reporter = PrincipalId(r.string())
        suspect = NetworkAddress(r.string())
        client = PrincipalId(r.string())
        try:
            incident = Incident(r.u8())
        except ValueError as exc:
            raise CodecError(f"unknown incident code: {exc}") from exc
        msg = cls(reporter=reporter, suspect_addr=suspect, client=client,
                  incident=incident)
    else:  # pragma: no cover - table and dispatch kept in sync
        raise UnknownType(f"no decoder for {cls.__name__}")
    r.expect_end()
    return msg


def encode(msg: ProtocolMessage) -> bytes:
    """Serialize a message into one self-delimiting frame."""
    key = (type(msg), msg.variant)
    if key not in _TYPE_BYTES:
        raise ValueError(f"{type(msg).__name__} has no {msg.variant.value} form")
    payload = _encode_payload(msg)
    return MAGIC + bytes([_TYPE_BYTES[key]]) + len(payload).to_bytes(4, "big") + payload


def decode(data: bytes) -> ProtocolMessage:
    """Inverse of :func:`encode`; rejects anything that is not exactly one frame."""
    msg, consumed = _decode_prefix(data)
    if consumed != len(data):
        raise TrailingGarbage(f"{len(data) - consumed} bytes after frame end")
    return msg


def _decode_prefix(data: bytes) -> tuple[ProtocolMessage, int]:
    if len(data) < HEADER_SIZE:
        if len(data) >= len(MAGIC) and data[: len(MAGIC)] != MAGIC:
            raise BadMagic("frame does not start with KTP1")
        raise Truncated("incomplete frame header")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagic("frame does not start with KTP1")
    type_byte = data[len(MAGIC)]
    if type_byte not in _BY_TYPE_BYTE:
        raise UnknownType(f"unknown message type byte 0x{type_byte:02X}")
    payload_len = int.from_bytes(data[len(MAGIC) + 1 : HEADER_SIZE], "big")
    end = HEADER_SIZE + payload_len
    if len(data) < end:
        raise Truncated("frame shorter than declared payload length")
    cls, variant = _BY_TYPE_BYTE[type_byte]
    return _decode_payload(cls, variant, data[HEADER_SIZE:end]), end


class FrameReader:
    """Incremental decoder for a byte stream carrying concatenated frames."""

    def __init__(self) -> None:
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[ProtocolMessage]:
        """Absorb bytes, return every complete message now available."""
        self._buffer.extend(data)
        out: list[ProtocolMessage] = []
        while True:
            try:
                msg, consumed = _decode_prefix(bytes(self._buffer))
            except Truncated:
                break
            del self._buffer[:consumed]
            out.append(msg)
        return out

    def pending(self) -> int:
        return len(self._buffer)


def decode_stream(data: bytes) -> list[ProtocolMessage]:
    """Decode a concatenation of complete frames; partial tail is an error."""
    reader = FrameReader()
    msgs = reader.feed(data)
    if reader.pending():
        raise Truncated(f"{reader.pending()} trailing bytes do not form a frame")
    return msgs


# --- tickets and authenticators ------------------------------------------------

def make_ticket(
    kdc_key: SymmetricKey,
    client: PrincipalId,
    addr: NetworkAddress,
    validity: Lifetime,
    session_key: SymmetricKey,
    nonce_source: NonceSource,
) -> SealedBox:
    """Seal a ticket body under a KDC long-term key (TGS or server key)."""
    body = TicketBody(client=client, client_addr=addr, validity=validity,
                      session_key=session_key)
    return seal(kdc_key, body.pack(), nonce_source)


def open_ticket(kdc_key: SymmetricKey, box: SealedBox) -> TicketBody:
    return TicketBody.unpack(open_box(kdc_key, box))


def make_authenticator(
    session_key: SymmetricKey,
    client: PrincipalId,
    addr: NetworkAddress,
    created_at: int,
    nonce_source: NonceSource,
) -> SealedBox:
    body = AuthenticatorBody(client=client, client_addr=addr, created_at=created_at)
    return seal(session_key, body.pack(), nonce_source)


def open_authenticator(session_key: SymmetricKey, box: SealedBox) -> AuthenticatorBody:
    return AuthenticatorBody.unpack(open_box(session_key, box))


def message_kind(msg: ProtocolMessage) -> str:
    """Short stable label for traces and logs, e.g. ``service-request``."""
    name = type(msg).__name__
    out: list[str] = []
    for ch in name:
        if ch.isupper() and out:
            out.append("-")
        out.append(ch.lower())
    return "".join(out)


def iter_sealed_fields(msg: ProtocolMessage) -> Iterator[tuple[str, SealedBox, Type]]:
    """Yield (field name, box, payload struct) for every sealed field.

    The payload struct is what the box decodes to once opened; tickets and
    authenticators are included.  Used by the simulator's attacker-knowledge
    closure.
    """
    if isinstance(msg, (AsReply, TgsReply)):
        yield "ticket", msg.ticket, TicketBody
        yield "enc", msg.enc, AsReplyPart if isinstance(msg, AsReply) else TgsReplyPart
    elif isinstance(msg, TgsRequest):
        yield "ticket", msg.ticket, TicketBody
        yield "authenticator", msg.authenticator, AuthenticatorBody
    elif isinstance(msg, ServiceRequest):
        yield "ticket", msg.ticket, TicketBody
        yield "authenticator", msg.authenticator, AuthenticatorBody
    elif isinstance(msg, KeyForward):
        yield "enc", msg.enc, KeyForwardPart
    elif isinstance(msg, PasswordForward):
        yield "enc", msg.enc, PasswordForwardPart
    elif isinstance(msg, PasswordChallenge):
        yield "enc", msg.enc, ChallengePart
    elif isinstance(msg, ChallengeResponse):
        yield "enc", msg.enc, ChallengeResponsePart
    elif isinstance(msg, MutualAuthReply):
        yield "enc", msg.enc, MutualAuthPart
