import copy

import pytest

from kerbtrip.crypto import (
    AuthenticationFailure,
    DeterministicRandomSource,
    KeyOrigin,
    open_box,
    seal,
)
from kerbtrip.principals import (
    AlertNote,
    AsState,
    ClientPhase,
    ClientState,
    Deny,
    DenyReason,
    DuplicateClient,
    GrantNote,
    ServerState,
    TgsState,
    TimerNote,
    as_handle_alert_forward,
    as_handle_request,
    as_register,
    client_begin,
    client_handle,
    handle_message,
    snapshot,
    tgs_handle_alert,
    tgs_handle_key_forward,
    tgs_handle_request,
    v_handle_challenge_response,
    v_handle_password_forward,
    v_handle_service_request,
    v_tick,
)
from kerbtrip.protocol import (
    AlertForward,
    AsReplyPart,
    AsRequest,
    AttackAlert,
    ChallengeResponse,
    ChallengeResponsePart,
    Incident,
    KeyForward,
    Lifetime,
    MutualAuthPart,
    MutualAuthReply,
    NetworkAddress,
    PasswordChallenge,
    PrincipalId,
    TgsReply,
    TgsReplyPart,
    Variant,
)

AS_ID, TGS_ID, V_ID = "kas", "ktgs", "vsrv"
CLIENT, CLIENT_ADDR = "alice", "c-alice"


def rng(label, seed=1):
    return DeterministicRandomSource(seed, f"rng:{label}")


def nonces(label, seed=1):
    return DeterministicRandomSource(seed, f"nonces:{label}")


def build_world(variant: Variant, timer_duration: int = 30, freshness: int = 120):
    """Directly wired principal states sharing long-term keys (no simulator)."""
    ltk = DeterministicRandomSource(1, "long-term-keys")
    k_tgs = ltk.next_key(KeyOrigin.LONG_TERM)
    k_v = ltk.next_key(KeyOrigin.LONG_TERM)

    as_state = AsState(id=PrincipalId(AS_ID), variant=variant,
                       rng=rng(AS_ID), nonces=nonces(AS_ID))
    as_state.tgs_keys[TGS_ID] = k_tgs
    as_register(as_state, CLIENT, "orchard", "melody", "anchor")

    tgs_state = TgsState(
        id=PrincipalId(TGS_ID), variant=variant, own_key=k_tgs,
        as_id=PrincipalId(AS_ID), rng=rng(TGS_ID), nonces=nonces(TGS_ID),
        server_keys={V_ID: k_v}, freshness_window=freshness,
    )
    v_state = ServerState(
        id=PrincipalId(V_ID), variant=variant, own_key=k_v,
        tgs_id=PrincipalId(TGS_ID), rng=rng(V_ID), nonces=nonces(V_ID),
        timer_duration=timer_duration, freshness_window=freshness,
    )
    client = ClientState.from_passwords(
        name=CLIENT, addr=CLIENT_ADDR, variant=variant,
        passwords=("orchard", "melody", "anchor"),
        as_id=AS_ID, tgs_id=TGS_ID, rng=rng(CLIENT), nonces=nonces(CLIENT),
    )
    return as_state, tgs_state, v_state, client


def pump_session(variant: Variant, start: int = 0):
    """Drive one full session by hand; returns states plus captured messages."""
    as_state, tgs_state, v_state, client = build_world(variant)
    log = {}
    now = start

    reaction = client_begin(client, V_ID, now)
    (m1,) = [s.msg for s in reaction.sends]
    log["as-request"] = m1

    now += 1
    reaction = as_handle_request(as_state, m1, now, CLIENT_ADDR)
    log["as-reply"] = reaction.sends[0].msg
    if variant is Variant.TRIPLE:
        log["key-forward"] = reaction.sends[1].msg
        tgs_handle_key_forward(tgs_state, log["key-forward"])

    now += 1
    reaction = client_handle(client, log["as-reply"], now)
    log["tgs-request"] = reaction.sends[0].msg

    now += 1
    reaction = tgs_handle_request(tgs_state, log["tgs-request"], now, CLIENT_ADDR)
    log["tgs-reply"] = reaction.sends[0].msg
    if variant is Variant.TRIPLE:
        log["password-forward"] = reaction.sends[1].msg
        v_handle_password_forward(v_state, log["password-forward"])

    now += 1
    reaction = client_handle(client, log["tgs-reply"], now)
    log["service-request"] = reaction.sends[0].msg

    now += 1
    reaction = v_handle_service_request(v_state, log["service-request"], now, CLIENT_ADDR)
    if variant is Variant.TRIPLE:
        log["password-challenge"] = reaction.sends[0].msg
        now += 1
        reaction = client_handle(client, log["password-challenge"], now)
        log["challenge-response"] = reaction.sends[0].msg
        now += 1
        reaction = v_handle_challenge_response(
            v_state, log["challenge-response"], now, CLIENT_ADDR
        )
    log["mutual-auth-reply"] = reaction.sends[0].msg

    now += 1
    client_handle(client, log["mutual-auth-reply"], now)
    return as_state, tgs_state, v_state, client, log


class TestRegistration:
    def test_three_distinct_keys_stored(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        record = as_state.credentials[CLIENT]
        assert len({record.k1.data, record.k2.data, record.k3.data}) == 3

    def test_duplicate_rejected(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        with pytest.raises(DuplicateClient):
            as_register(as_state, CLIENT, "a", "b", "c")

    def test_equal_passwords_still_distinct_keys(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        record = as_register(as_state, "bob", "x", "x", "x")
        assert len({record.k1.data, record.k2.data, record.k3.data}) == 3


class TestAsRequest:
    def test_reply_encrypts_nonce_echo_under_k1(self):
        as_state, _, _, client = build_world(Variant.TRIPLE)
        m1 = AsRequest(
            variant=Variant.TRIPLE, client=PrincipalId(CLIENT),
            target_tgs=PrincipalId(TGS_ID), n1=9, requested_lifetime=Lifetime(0, 600),
        )
        reaction = as_handle_request(as_state, m1, 0, CLIENT_ADDR)
        reply = reaction.sends[0].msg
        part = AsReplyPart.unpack(open_box(client.k1, reply.enc))
        assert part.n1 == 9
        assert part.session_key.origin is KeyOrigin.SESSION

    def test_unknown_client_denied_with_no_output(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        m1 = AsRequest(
            variant=Variant.TRIPLE, client=PrincipalId("mallory"),
            target_tgs=PrincipalId(TGS_ID), n1=1, requested_lifetime=Lifetime(0, 60),
        )
        with pytest.raises(Deny) as err:
            as_handle_request(as_state, m1, 0, "evil")
        assert err.value.reason is DenyReason.UNKNOWN_CLIENT

    def test_unknown_tgs_denied(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        m1 = AsRequest(
            variant=Variant.TRIPLE, client=PrincipalId(CLIENT),
            target_tgs=PrincipalId("nowhere"), n1=1, requested_lifetime=Lifetime(0, 60),
        )
        with pytest.raises(Deny) as err:
            as_handle_request(as_state, m1, 0, CLIENT_ADDR)
        assert err.value.reason is DenyReason.UNKNOWN_TGS

    def test_triple_emits_two_messages_baseline_one(self):
        for variant, expected in ((Variant.TRIPLE, 2), (Variant.BASELINE, 1)):
            as_state, *_ = build_world(variant)
            m1 = AsRequest(
                variant=variant, client=PrincipalId(CLIENT),
                target_tgs=PrincipalId(TGS_ID), n1=4, requested_lifetime=Lifetime(0, 60),
            )
            reaction = as_handle_request(as_state, m1, 0, CLIENT_ADDR)
            assert len(reaction.sends) == expected, variant


class TestTgsKeyForward:
    def test_valid_forward_stored(self):
        *_, log = pump_session(Variant.TRIPLE)
        # handled inside the pump; re-check state via a fresh tgs
        as_state, tgs_state, _, _ = build_world(Variant.TRIPLE)
        tgs_handle_key_forward(tgs_state, log["key-forward"])
        assert CLIENT in tgs_state.forwarded_passwords

    def test_wrong_key_dropped_state_unchanged(self):
        _, tgs_state, _, client = build_world(Variant.TRIPLE)
        bogus = KeyForward(enc=seal(client.k1, b"junk", nonces("x")))
        with pytest.raises(Deny) as err:
            tgs_handle_key_forward(tgs_state, bogus)
        assert err.value.reason is DenyReason.ENVELOPE_AUTH_FAILURE
        assert not tgs_state.forwarded_passwords

    def test_second_forward_overwrites(self):
        as_state, tgs_state, _, _ = build_world(Variant.TRIPLE)
        m1 = AsRequest(
            variant=Variant.TRIPLE, client=PrincipalId(CLIENT),
            target_tgs=PrincipalId(TGS_ID), n1=1, requested_lifetime=Lifetime(0, 60),
        )
        fwd1 = as_handle_request(as_state, m1, 0, CLIENT_ADDR).sends[1].msg
        fwd2 = as_handle_request(as_state, m1, 1, CLIENT_ADDR).sends[1].msg
        tgs_handle_key_forward(tgs_state, fwd1)
        first = tgs_state.forwarded_passwords[CLIENT]
        tgs_handle_key_forward(tgs_state, fwd2)
        assert tgs_state.forwarded_passwords[CLIENT] == first  # same keys re-sent
        assert len(tgs_state.forwarded_passwords) == 1


class TestTgsRequest:
    def test_triple_reply_opens_under_k2_never_under_session_key(self):
        _, _, _, client = build_world(Variant.TRIPLE)
        *_, client_after, log = pump_session(Variant.TRIPLE)
        reply: TgsReply = log["tgs-reply"]
        session_key = client_after.tgt.session_key
        with pytest.raises(AuthenticationFailure):
            open_box(session_key, reply.enc)
        part = TgsReplyPart.unpack(open_box(client.k2, reply.enc))
        assert part.target_v == PrincipalId(V_ID)

    def test_baseline_reply_opens_under_session_key(self):
        *_, client_after, log = pump_session(Variant.BASELINE)
        reply: TgsReply = log["tgs-reply"]
        part = TgsReplyPart.unpack(open_box(client_after.tgt.session_key, reply.enc))
        assert part.session_key == client_after.service_tickets[V_ID].session_key

    def test_stale_authenticator_denied(self):
        as_state, tgs_state, _, client = build_world(Variant.TRIPLE)
        reaction = client_begin(client, V_ID, 0)
        m1 = reaction.sends[0].msg
        as_reaction = as_handle_request(as_state, m1, 1, CLIENT_ADDR)
        tgs_handle_key_forward(tgs_state, as_reaction.sends[1].msg)
        m3 = client_handle(client, as_reaction.sends[0].msg, 2).sends[0].msg
        late = 2 + tgs_state.freshness_window + 1
        with pytest.raises(Deny) as err:
            tgs_handle_request(tgs_state, m3, late, CLIENT_ADDR)
        assert err.value.reason is DenyReason.STALE_AUTHENTICATOR

    def test_address_mismatch_denied(self):
        as_state, tgs_state, _, client = build_world(Variant.TRIPLE)
        m1 = client_begin(client, V_ID, 0).sends[0].msg
        as_reaction = as_handle_request(as_state, m1, 1, CLIENT_ADDR)
        tgs_handle_key_forward(tgs_state, as_reaction.sends[1].msg)
        m3 = client_handle(client, as_reaction.sends[0].msg, 2).sends[0].msg
        with pytest.raises(Deny) as err:
            tgs_handle_request(tgs_state, m3, 3, "elsewhere")
        assert err.value.reason is DenyReason.ADDRESS_MISMATCH

    def test_missing_forwarded_password_denied_in_triple(self):
        as_state, tgs_state, _, client = build_world(Variant.TRIPLE)
        m1 = client_begin(client, V_ID, 0).sends[0].msg
        as_reaction = as_handle_request(as_state, m1, 1, CLIENT_ADDR)
        # key-forward never delivered
        m3 = client_handle(client, as_reaction.sends[0].msg, 2).sends[0].msg
        with pytest.raises(Deny) as err:
            tgs_handle_request(tgs_state, m3, 3, CLIENT_ADDR)
        assert err.value.reason is DenyReason.NO_FORWARDED_PASSWORD


class TestServiceRequest:
    def test_triple_challenges_and_arms_timer(self):
        as_state, tgs_state, v_state, client = build_world(Variant.TRIPLE)
        m1 = client_begin(client, V_ID, 0).sends[0].msg
        as_reaction = as_handle_request(as_state, m1, 1, CLIENT_ADDR)
        tgs_handle_key_forward(tgs_state, as_reaction.sends[1].msg)
        m3 = client_handle(client, as_reaction.sends[0].msg, 2).sends[0].msg
        tgs_reaction = tgs_handle_request(tgs_state, m3, 3, CLIENT_ADDR)
        v_handle_password_forward(v_state, tgs_reaction.sends[1].msg)
        m5 = client_handle(client, tgs_reaction.sends[0].msg, 4).sends[0].msg

        reaction = v_handle_service_request(v_state, m5, 5, CLIENT_ADDR)
        assert isinstance(reaction.sends[0].msg, PasswordChallenge)
        (timer,) = [n for n in reaction.notes if isinstance(n, TimerNote)]
        assert timer.deadline == 5 + v_state.timer_duration
        assert v_state.pending_challenges[CLIENT].deadline == timer.deadline
        assert not v_state.grants

    def test_baseline_grants_immediately_without_challenge(self):
        *_, v_state, client, log = pump_session(Variant.BASELINE)
        assert [g.client for g in v_state.grants] == [CLIENT]
        assert client.outcome is not None and client.outcome.ok

    def test_authenticator_for_wrong_client_denied(self):
        # Splice alice's ticket with bob's authenticator.
        as_state, tgs_state, v_state, client = build_world(Variant.TRIPLE)
        as_register(as_state, "bob", "p", "q", "r")
        m1 = client_begin(client, V_ID, 0).sends[0].msg
        as_reaction = as_handle_request(as_state, m1, 1, CLIENT_ADDR)
        tgs_handle_key_forward(tgs_state, as_reaction.sends[1].msg)
        m3 = client_handle(client, as_reaction.sends[0].msg, 2).sends[0].msg
        tgs_reaction = tgs_handle_request(tgs_state, m3, 3, CLIENT_ADDR)
        v_handle_password_forward(v_state, tgs_reaction.sends[1].msg)
        m5 = client_handle(client, tgs_reaction.sends[0].msg, 4).sends[0].msg

        from kerbtrip.protocol import ServiceRequest, make_authenticator
        session = client.service_tickets[V_ID].session_key
        spliced = ServiceRequest(
            variant=Variant.TRIPLE,
            ticket=m5.ticket,
            authenticator=make_authenticator(
                session, PrincipalId("bob"), NetworkAddress(CLIENT_ADDR), 5, nonces("t")
            ),
        )
        with pytest.raises(Deny) as err:
            v_handle_service_request(v_state, spliced, 5, CLIENT_ADDR)
        assert err.value.reason is DenyReason.AUTHENTICATOR_MISMATCH


def armed_server(timer_duration: int = 30):
    """A server with one pending challenge plus the matching client response."""
    as_state, tgs_state, v_state, client = build_world(
        Variant.TRIPLE, timer_duration=timer_duration
    )
    m1 = client_begin(client, V_ID, 0).sends[0].msg
    as_reaction = as_handle_request(as_state, m1, 1, CLIENT_ADDR)
    tgs_handle_key_forward(tgs_state, as_reaction.sends[1].msg)
    m3 = client_handle(client, as_reaction.sends[0].msg, 2).sends[0].msg
    tgs_reaction = tgs_handle_request(tgs_state, m3, 3, CLIENT_ADDR)
    v_handle_password_forward(v_state, tgs_reaction.sends[1].msg)
    m5 = client_handle(client, tgs_reaction.sends[0].msg, 4).sends[0].msg
    challenge = v_handle_service_request(v_state, m5, 5, CLIENT_ADDR).sends[0].msg
    response = client_handle(client, challenge, 6).sends[0].msg
    deadline = v_state.pending_challenges[CLIENT].deadline
    return v_state, client, response, deadline


class TestChallengeResponse:
    def test_correct_key_grants_and_echoes_t5_plus_1(self):
        v_state, client, response, _ = armed_server()
        reaction = v_handle_challenge_response(v_state, response, 7, CLIENT_ADDR)
        reply = reaction.sends[0].msg
        assert isinstance(reply, MutualAuthReply)
        session = client.service_tickets[V_ID].session_key
        part = MutualAuthPart.unpack(open_box(session, reply.enc))
        assert part.value == 6 + 1  # response was built at tick 6
        assert [g.client for g in v_state.grants] == [CLIENT]
        assert not v_state.pending_challenges

    def test_wrong_key_raises_bad_password_alert(self):
        v_state, client, _, _ = armed_server()
        session = client.service_tickets[V_ID].session_key
        wrong = ChallengeResponse(
            enc=seal(
                session,
                ChallengeResponsePart(k3=client.k2, t5=7).pack(),  # k2, not k3
                nonces("w"),
            )
        )
        reaction = v_handle_challenge_response(v_state, wrong, 7, "evil-box")
        alert = reaction.sends[0].msg
        assert isinstance(alert, AttackAlert)
        assert alert.incident is Incident.BAD_PASSWORD
        assert not v_state.grants
        assert not v_state.pending_challenges  # one challenge, one verdict

    def test_second_response_after_verdict_denied(self):
        v_state, client, response, _ = armed_server()
        v_handle_challenge_response(v_state, response, 7, CLIENT_ADDR)
        with pytest.raises(Deny) as err:
            v_handle_challenge_response(v_state, response, 8, CLIENT_ADDR)
        assert err.value.reason is DenyReason.NO_PENDING_CHALLENGE

    def test_at_deadline_granted(self):
        v_state, _, response, deadline = armed_server()
        reaction = v_handle_challenge_response(v_state, response, deadline, CLIENT_ADDR)
        assert v_state.grants and isinstance(reaction.sends[0].msg, MutualAuthReply)

    def test_past_deadline_left_to_timer(self):
        v_state, _, response, deadline = armed_server()
        with pytest.raises(Deny) as err:
            v_handle_challenge_response(v_state, response, deadline + 1, CLIENT_ADDR)
        assert err.value.reason is DenyReason.CHALLENGE_EXPIRED
        alerts = v_tick(v_state, deadline + 1)
        assert len(alerts.sends) == 1
        assert alerts.sends[0].msg.incident is Incident.TIMEOUT

    def test_undecipherable_envelope_keeps_deadline_running(self):
        v_state, client, _, _ = armed_server()
        bogus = ChallengeResponse(enc=seal(client.k1, b"??", nonces("b")))
        with pytest.raises(Deny) as err:
            v_handle_challenge_response(v_state, bogus, 7, "evil")
        assert err.value.reason is DenyReason.ENVELOPE_AUTH_FAILURE
        assert CLIENT in v_state.pending_challenges


class TestTimerSweep:
    def test_at_deadline_no_alert(self):
        v_state, _, _, deadline = armed_server()
        assert v_tick(v_state, deadline).sends == []

    def test_one_past_deadline_exactly_one_alert(self):
        v_state, _, _, deadline = armed_server()
        reaction = v_tick(v_state, deadline + 1)
        assert len(reaction.sends) == 1
        assert not v_state.pending_challenges

    def test_no_pending_challenges_empty_reaction(self):
        _, _, v_state, _ = build_world(Variant.TRIPLE)
        reaction = v_tick(v_state, 100)
        assert reaction.sends == [] and reaction.notes == []


class TestAlertChain:
    def make_alert(self, incident=Incident.TIMEOUT):
        return AttackAlert(
            reporter=PrincipalId(V_ID),
            suspect_addr=NetworkAddress("evil-box"),
            client=PrincipalId(CLIENT),
            incident=incident,
        )

    def test_forwarded_unchanged(self):
        _, tgs_state, _, _ = build_world(Variant.TRIPLE)
        alert = self.make_alert()
        reaction = tgs_handle_alert(tgs_state, alert)
        forward = reaction.sends[0].msg
        assert isinstance(forward, AlertForward)
        assert (forward.reporter, forward.suspect_addr, forward.client,
                forward.incident) == (alert.reporter, alert.suspect_addr,
                                      alert.client, alert.incident)
        assert reaction.sends[0].to == AS_ID

    def test_two_alerts_two_forwards_in_order(self):
        _, tgs_state, _, _ = build_world(Variant.TRIPLE)
        kinds = [Incident.TIMEOUT, Incident.BAD_PASSWORD]
        forwards = [
            tgs_handle_alert(tgs_state, self.make_alert(k)).sends[0].msg for k in kinds
        ]
        assert [f.incident for f in forwards] == kinds

    def test_as_records_and_notices(self):
        as_state, tgs_state, _, _ = build_world(Variant.TRIPLE)
        forward = tgs_handle_alert(tgs_state, self.make_alert(Incident.BAD_PASSWORD)).sends[0].msg
        reaction = as_handle_alert_forward(as_state, forward)
        assert len(as_state.alerts_received) == 1
        assert as_state.notices[0].client == CLIENT
        assert as_state.notices[0].known_client
        assert reaction.notes

    def test_duplicate_alerts_both_recorded(self):
        as_state, tgs_state, _, _ = build_world(Variant.TRIPLE)
        forward = tgs_handle_alert(tgs_state, self.make_alert()).sends[0].msg
        as_handle_alert_forward(as_state, forward)
        as_handle_alert_forward(as_state, forward)
        assert len(as_state.alerts_received) == 2

    def test_unknown_client_flagged(self):
        as_state, _, _, _ = build_world(Variant.TRIPLE)
        forward = AlertForward(
            reporter=PrincipalId(V_ID), suspect_addr=NetworkAddress("evil"),
            client=PrincipalId("stranger"), incident=Incident.TIMEOUT,
        )
        as_handle_alert_forward(as_state, forward)
        assert not as_state.notices[0].known_client


class TestClientRun:
    def test_honest_triple_run_reaches_mutual_auth(self):
        *_, client, log = pump_session(Variant.TRIPLE)
        assert client.outcome is not None and client.outcome.ok
        assert client.phase is ClientPhase.DONE
        # Four messages leave the client: request, ticket request,
        # service request, challenge response.
        assert client.sent_count == 4
        assert set(log) >= {
            "as-request", "as-reply", "key-forward", "tgs-request", "tgs-reply",
            "password-forward", "service-request", "password-challenge",
            "challenge-response", "mutual-auth-reply",
        }

    def test_honest_baseline_run_three_sends(self):
        *_, client, log = pump_session(Variant.BASELINE)
        assert client.outcome is not None and client.outcome.ok
        assert client.sent_count == 3
        assert "password-challenge" not in log

    def test_bad_mutual_auth_value_fails(self):
        as_state, tgs_state, v_state, client = build_world(Variant.TRIPLE)
        m1 = client_begin(client, V_ID, 0).sends[0].msg
        as_reaction = as_handle_request(as_state, m1, 1, CLIENT_ADDR)
        tgs_handle_key_forward(tgs_state, as_reaction.sends[1].msg)
        m3 = client_handle(client, as_reaction.sends[0].msg, 2).sends[0].msg
        tgs_reaction = tgs_handle_request(tgs_state, m3, 3, CLIENT_ADDR)
        v_handle_password_forward(v_state, tgs_reaction.sends[1].msg)
        m5 = client_handle(client, tgs_reaction.sends[0].msg, 4).sends[0].msg
        challenge = v_handle_service_request(v_state, m5, 5, CLIENT_ADDR).sends[0].msg
        client_handle(client, challenge, 6)
        session = client.service_tickets[V_ID].session_key
        forged = MutualAuthReply(
            variant=Variant.TRIPLE,
            enc=seal(session, MutualAuthPart(6 + 2).pack(), nonces("f")),
        )
        client_handle(client, forged, 7)
        assert client.outcome is not None and not client.outcome.ok
        assert client.outcome.reason == "bad-mutual-auth"

    def test_wrong_nonce_echo_fails(self):
        as_state, _, _, client = build_world(Variant.TRIPLE)
        m1 = client_begin(client, V_ID, 0).sends[0].msg
        reply = as_handle_request(as_state, m1, 1, CLIENT_ADDR).sends[0].msg
        # Re-seal the part with a different nonce echo.
        part = AsReplyPart.unpack(open_box(client.k1, reply.enc))
        tampered_part = AsReplyPart(
            session_key=part.session_key, target_tgs=part.target_tgs,
            n1=part.n1 ^ 1, validity=part.validity,
        )
        from kerbtrip.protocol import AsReply
        tampered = AsReply(
            variant=Variant.TRIPLE, client=reply.client, ticket=reply.ticket,
            enc=seal(client.k1, tampered_part.pack(), nonces("t")),
        )
        client_handle(client, tampered, 2)
        assert client.outcome is not None and client.outcome.reason == "nonce-mismatch"

    def test_wrong_password_open_failure(self):
        as_state, _, _, _ = build_world(Variant.TRIPLE)
        wrong_client = ClientState.from_passwords(
            name=CLIENT, addr=CLIENT_ADDR, variant=Variant.TRIPLE,
            passwords=("WRONG", "melody", "anchor"),
            as_id=AS_ID, tgs_id=TGS_ID, rng=rng("w"), nonces=nonces("w"),
        )
        m1 = client_begin(wrong_client, V_ID, 0).sends[0].msg
        reply = as_handle_request(as_state, m1, 1, CLIENT_ADDR).sends[0].msg
        client_handle(wrong_client, reply, 2)
        assert wrong_client.outcome is not None
        assert wrong_client.outcome.reason == "as-reply-open-failure"

    def test_unexpected_message_ignored(self):
        _, _, _, client = build_world(Variant.TRIPLE)
        client_begin(client, V_ID, 0)
        reaction = client_handle(
            client, PasswordChallenge(enc=seal(client.k3, b"x", nonces("u"))), 1
        )
        assert reaction.sends == [] and client.outcome is None


class TestDeterminismAndDispatch:
    def test_handler_is_deterministic_in_state_message_clock(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        m1 = AsRequest(
            variant=Variant.TRIPLE, client=PrincipalId(CLIENT),
            target_tgs=PrincipalId(TGS_ID), n1=5, requested_lifetime=Lifetime(0, 60),
        )
        s1, s2 = copy.deepcopy(as_state), copy.deepcopy(as_state)
        r1 = as_handle_request(s1, m1, 3, CLIENT_ADDR)
        r2 = as_handle_request(s2, m1, 3, CLIENT_ADDR)
        assert [s.msg for s in r1.sends] == [s.msg for s in r2.sends]
        assert snapshot(s1) == snapshot(s2)

    def test_dispatch_rejects_message_for_wrong_principal(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        with pytest.raises(Deny) as err:
            handle_message(
                as_state,
                PasswordChallenge(enc=seal(as_state.rng.next_key(), b"x", nonces("d"))),
                0, "nowhere",
            )
        assert err.value.reason is DenyReason.UNEXPECTED_MESSAGE

    def test_variant_mismatch_denied(self):
        as_state, *_ = build_world(Variant.TRIPLE)
        m1 = AsRequest(
            variant=Variant.BASELINE, client=PrincipalId(CLIENT),
            target_tgs=PrincipalId(TGS_ID), n1=5, requested_lifetime=Lifetime(0, 60),
        )
        with pytest.raises(Deny) as err:
            as_handle_request(as_state, m1, 0, CLIENT_ADDR)
        assert err.value.reason is DenyReason.VARIANT_MISMATCH
