"""Adversary interposition: capture, knowledge closure, replay, and forgery.

The attacker can only open what its keys open.  :func:`attacker_closure`
computes the fixpoint: every sealed field of every captured frame is tried
against every known key, recovered keys are added, and the process repeats
until nothing grows.  The attacker node keeps a labelled version of the same
closure so scripted actions can pick a key by meaning (for example "the
service session key granted to alice for vsrv").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from ..crypto import (
    AuthenticationFailure,
    DeterministicRandomSource,
    KeyOrigin,
    SymmetricKey,
    open_box,
    seal,
)
from ..protocol import (
    AsReply,
    AsReplyPart,
    ChallengePart,
    ChallengeResponse,
    ChallengeResponsePart,
    CodecError,
    KeyForwardPart,
    NetworkAddress,
    PasswordChallenge,
    PasswordForwardPart,
    PrincipalId,
    ProtocolMessage,
    ServiceRequest,
    TgsReply,
    TgsReplyPart,
    TgsRequest,
    TicketBody,
    Variant,
    encode,
    iter_sealed_fields,
    make_authenticator,
    message_kind,
)
from .scenario import AdversaryAction, AdversarySpec


@dataclass(frozen=True)
class CapturedFrame:
    seq: int
    src_node: str
    src_addr: str
    dst_node: str
    msg: ProtocolMessage
    frame: bytes


@dataclass
class Emission:
    """Something the attacker puts on the wire."""

    origin: str  # "replay" or "inject"
    dst_node: str
    src_addr: str
    msg: ProtocolMessage
    frame: Optional[bytes] = None  # verbatim bytes for replays


class KnowledgeBase:
    """Ordered key set plus meaning labels, closed under opening captures.

    Insertion-ordered on purpose: trial-opening order must not depend on
    hash randomization, or traces would differ between runs.
    """

    def __init__(self, keys: Iterable[SymmetricKey] = ()) -> None:
        self._keys: dict[SymmetricKey, None] = {}
        self._labels: dict[str, SymmetricKey] = {}
        self._label_of: dict[SymmetricKey, str] = {}
        for key in keys:
            self.add(key)

    @property
    def keys(self) -> list[SymmetricKey]:
        return list(self._keys)

    def __contains__(self, key: SymmetricKey) -> bool:
        return key in self._keys

    def add(self, key: SymmetricKey, label: Optional[str] = None) -> bool:
        grew = key not in self._keys
        self._keys.setdefault(key, None)
        if label is not None:
            self._labels[label] = key
            self._label_of.setdefault(key, label)
        return grew

    def get(self, label: str) -> Optional[SymmetricKey]:
        return self._labels.get(label)

    def find_prefix(self, prefix: str) -> Optional[tuple[str, SymmetricKey]]:
        for label, key in self._labels.items():
            if label.startswith(prefix):
                return label, key
        return None

    def close_over(self, messages: Iterable[ProtocolMessage]) -> None:
        """Expand to the fixpoint over the given captured messages."""
        messages = list(messages)
        grew = True
        while grew:
            grew = False
            for msg in messages:
                for _name, box, part_cls in iter_sealed_fields(msg):
                    for key in list(self._keys):
                        try:
                            raw = open_box(key, box)
                        except AuthenticationFailure:
                            continue
                        try:
                            part = part_cls.unpack(raw)
                        except CodecError:
                            break
                        for new_key, label in _recovered_keys(
                            msg, part, self._label_of.get(key)
                        ):
                            if self.add(new_key, label):
                                grew = True
                        break  # a box opens under exactly one key


def _recovered_keys(
    msg: ProtocolMessage, part, opener_label: Optional[str]
) -> list[tuple[SymmetricKey, Optional[str]]]:
    if isinstance(part, TicketBody):
        if isinstance(msg, (AsReply, TgsRequest)):
            return [(part.session_key, f"session-tgs:{part.client.name}")]
        return [(part.session_key, f"session-v:{part.client.name}")]
    if isinstance(part, AsReplyPart) and isinstance(msg, AsReply):
        return [(part.session_key, f"session-tgs:{msg.client.name}")]
    if isinstance(part, TgsReplyPart) and isinstance(msg, TgsReply):
        return [(part.session_key, f"session-v:{msg.client.name}:{part.target_v.name}")]
    if isinstance(part, KeyForwardPart):
        return [
            (part.k2, f"k2:{part.client.name}"),
            (part.k3, f"k3:{part.client.name}"),
        ]
    if isinstance(part, PasswordForwardPart):
        return [(part.k3, f"k3:{part.client.name}")]
    if isinstance(part, ChallengeResponsePart):
        if opener_label and opener_label.startswith("session-v:"):
            owner = opener_label.split(":", 2)[1]
            return [(part.k3, f"k3:{owner}")]
        return [(part.k3, None)]
    return []


def attacker_closure(
    knowledge: Iterable[SymmetricKey], captured: Iterable[ProtocolMessage]
) -> set[SymmetricKey]:
    """Fixpoint of "open everything you can, keep every key you find".

    Monotone and idempotent; the returned set always contains the input.
    """
    kb = KnowledgeBase(knowledge)
    kb.close_over(captured)
    return set(kb.keys)


KeyResolver = Callable[[str], Optional[SymmetricKey]]
AddrResolver = Callable[[str], Optional[str]]


class AttackerNode:
    """Scripted adversary: wire capture plus scheduled and reactive actions."""

    def __init__(
        self, spec: AdversarySpec, variant: Variant, tgs_label: str, seed: int
    ) -> None:
        self.spec = spec
        self.label = spec.label
        self.addr = spec.addr
        self.variant = variant
        self.tgs_label = tgs_label
        self.knowledge = KnowledgeBase()
        self.captured: list[CapturedFrame] = []
        self.rng = DeterministicRandomSource(seed, f"attacker:{spec.label}")
        self._reactive = {a.trigger: a for a in spec.actions if a.trigger}
        self._resolved_refs: set[str] = set()

    # -- knowledge maintenance -------------------------------------------------

    def refresh_knowledge(self, resolve_ref: KeyResolver) -> None:
        for ref in self.spec.knows:
            if ref in self._resolved_refs:
                continue
            key = resolve_ref(ref)
            if key is not None:
                # Scenario refs use the same naming as closure labels.
                self.knowledge.add(key, ref)
                self._resolved_refs.add(ref)
        self.knowledge.close_over(c.msg for c in self.captured)

    def observe(self, captured: CapturedFrame) -> None:
        """Record a frame sniffed off the wire (capture capability)."""
        self.captured.append(captured)

    # -- scheduled script steps ---------------------------------------------------

    def run_action(
        self,
        action: AdversaryAction,
        now: int,
        resolve_ref: KeyResolver,
        addr_of: AddrResolver,
    ) -> tuple[list[Emission], list[str]]:
        self.refresh_knowledge(resolve_ref)
        if action.verb == "replay":
            return self._do_replay(action)
        if action.verb == "forge-tgs-request":
            return self._forge_tgs_request(action.args["as"], action.args["for"], now, addr_of)
        if action.verb == "forge-service-request":
            return self._forge_service_request_scheduled(action.args["as"], now, addr_of)
        return [], [f"unsupported scheduled verb {action.verb}"]

    def _do_replay(self, action: AdversaryAction) -> tuple[list[Emission], list[str]]:
        if not self.spec.can("replay"):
            return [], ["replay refused: capability missing"]
        wanted_kind = action.args["kind"]
        index = int(action.args.get("index", "0"))
        matches = [c for c in self.captured if message_kind(c.msg) == wanted_kind]
        if index >= len(matches):
            return [], [f"replay stalled: no captured frame of kind {wanted_kind}"]
        captured = matches[index]
        src_addr = captured.src_addr if self.spec.can("spoof_addr") else self.addr
        return (
            [
                Emission(
                    origin="replay",
                    dst_node=action.args["to"],
                    src_addr=src_addr,
                    msg=captured.msg,
                    frame=captured.frame,
                )
            ],
            [],
        )

    def _forge_tgs_request(
        self, client: str, server: str, now: int, addr_of: AddrResolver
    ) -> tuple[list[Emission], list[str]]:
        if not self.spec.can("inject"):
            return [], ["forge refused: inject capability missing"]
        session_key = self.knowledge.get(f"session-tgs:{client}")
        if session_key is None:
            return [], [f"forge-tgs-request stalled: no session key for {client}"]
        ticket = self._find_tgt(client)
        if ticket is None:
            return [], [f"forge-tgs-request stalled: no captured ticket for {client}"]
        client_addr = addr_of(client) or client
        authenticator = make_authenticator(
            session_key, PrincipalId(client), NetworkAddress(client_addr), now, self.rng
        )
        msg = TgsRequest(
            variant=self.variant,
            ticket=ticket,
            target_v=PrincipalId(server),
            n2=self.rng.next_u64(),
            authenticator=authenticator,
        )
        src_addr = client_addr if self.spec.can("spoof_addr") else self.addr
        return [Emission(origin="inject", dst_node=self.tgs_label, src_addr=src_addr, msg=msg)], []

    def _forge_service_request_scheduled(
        self, client: str, now: int, addr_of: AddrResolver
    ) -> tuple[list[Emission], list[str]]:
        for captured in reversed(self.captured):
            if isinstance(captured.msg, TgsReply) and captured.msg.client.name == client:
                return self.forge_service_request(captured.msg, now, addr_of)
        return [], [f"forge-service-request stalled: no captured service grant for {client}"]

    # -- reactive behavior -----------------------------------------------------

    def on_delivery(
        self,
        msg: ProtocolMessage,
        frame: bytes,
        src_node: str,
        src_addr: str,
        now: int,
        already_captured: bool,
        resolve_ref: KeyResolver,
        addr_of: AddrResolver,
    ) -> tuple[list[Emission], list[str]]:
        if not already_captured:
            # Frames addressed to the attacker are known even without capture.
            self.captured.append(
                CapturedFrame(
                    seq=-1, src_node=src_node, src_addr=src_addr,
                    dst_node=self.label, msg=msg, frame=frame,
                )
            )
        self.refresh_knowledge(resolve_ref)
        if isinstance(msg, TgsReply) and self._reactive.get("service-reply"):
            return self.forge_service_request(msg, now, addr_of)
        if isinstance(msg, PasswordChallenge):
            action = self._reactive.get("challenge")
            if action is None or action.verb == "stay-silent":
                return [], ["challenge ignored"]
            return self._answer_challenge(msg, src_node, now, action.verb)
        return [], []

    def forge_service_request(
        self, reply: TgsReply, now: int, addr_of: AddrResolver
    ) -> tuple[list[Emission], list[str]]:
        """Build a fresh service request from a granted (captured) reply."""
        if not self.spec.can("inject"):
            return [], ["forge refused: inject capability missing"]
        client = reply.client.name
        found = self.knowledge.find_prefix(f"session-v:{client}:")
        if found is None:
            return [], [f"attack stalled: cannot recover service session key for {client}"]
        label, session_key = found
        server = label.split(":", 2)[2]
        client_addr = addr_of(client) or client
        authenticator = make_authenticator(
            session_key, PrincipalId(client), NetworkAddress(client_addr), now, self.rng
        )
        msg = ServiceRequest(
            variant=self.variant, ticket=reply.ticket, authenticator=authenticator
        )
        src_addr = client_addr if self.spec.can("spoof_addr") else self.addr
        return [Emission(origin="inject", dst_node=server, src_addr=src_addr, msg=msg)], []

    def _answer_challenge(
        self, msg: PasswordChallenge, server_node: str, now: int, behavior: str
    ) -> tuple[list[Emission], list[str]]:
        if not self.spec.can("inject"):
            return [], ["challenge response refused: inject capability missing"]
        opener: Optional[tuple[SymmetricKey, str]] = None
        for key in self.knowledge.keys:
            try:
                raw = open_box(key, msg.enc)
            except AuthenticationFailure:
                continue
            try:
                part = ChallengePart.unpack(raw)
            except CodecError:
                break
            opener = (key, part.client.name)
            break
        if opener is None:
            return [], ["challenge unanswerable: session key unknown"]
        session_key, client = opener
        if behavior == "respond-known-key":
            k3 = self.knowledge.get(f"k3:{client}")
            if k3 is None:
                return [], [f"respond-known-key stalled: k3 for {client} unknown"]
        else:
            k3 = self.rng.next_key(KeyOrigin.PASSWORD)  # deliberately wrong
        response = ChallengeResponsePart(k3=k3, t5=now)
        reply = ChallengeResponse(enc=seal(session_key, response.pack(), self.rng))
        return (
            [Emission(origin="inject", dst_node=server_node, src_addr=self.addr, msg=reply)],
            [],
        )

    # -- helpers ------------------------------------------------------------------

    def _find_tgt(self, client: str):
        for captured in reversed(self.captured):
            if isinstance(captured.msg, AsReply) and captured.msg.client.name == client:
                return captured.msg.ticket
        return None
