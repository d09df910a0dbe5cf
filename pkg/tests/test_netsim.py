import pytest

from kerbtrip.crypto import AuthenticationFailure, open_box
from kerbtrip.netsim import (
    EventKind,
    ScenarioError,
    World,
    attacker_closure,
    check_expectations,
    parse_scenario,
    run_scenario,
)
from kerbtrip.protocol import AsReply, TgsReply, TgsReplyPart, decode

from conftest import bundled_scenario_names, load_bundled


def run_bundled(name: str, seed: int = 1):
    world = World(load_bundled(name), seed)
    trace, verdict = world.run()
    return world, trace, verdict


def frames_of_kind(trace, kind_label: str):
    return [
        e for e in trace.events
        if e.kind in (EventKind.SEND, EventKind.REPLAY, EventKind.INJECT)
        and e.msg_kind == kind_label
    ]


class TestScenarioParsing:
    def test_parse_error_carries_line_number(self):
        text = "[variant]\ntriple\n[principals]\nwizard gandalf\n"
        with pytest.raises(ScenarioError, match="test.scn:4"):
            parse_scenario(text, source="test.scn")

    def test_missing_variant_rejected(self):
        with pytest.raises(ScenarioError, match="variant"):
            parse_scenario("[principals]\nas kas\ntgs ktgs\n", source="x")

    def test_unknown_run_reference_rejected(self):
        text = (
            "[variant]\ntriple\n[principals]\nas kas\ntgs ktgs\nserver vsrv\n"
            "client alice addr=a passwords=p\n[run]\nauth bob to vsrv at 0\n"
        )
        with pytest.raises(ScenarioError, match="unknown client"):
            parse_scenario(text, source="x")

    def test_single_password_expands_to_three(self):
        spec = load_bundled("honest-baseline")
        assert spec.clients[0].passwords == ("orchard", "orchard", "orchard")

    def test_all_bundled_scenarios_parse(self):
        names = bundled_scenario_names()
        assert len(names) == 7
        for name in names:
            assert load_bundled(name).name == name


class TestDeterminism:
    def test_same_seed_identical_canonical_trace(self):
        a = run_bundled("honest-triple", seed=1)[1].canonical_text()
        b = run_bundled("honest-triple", seed=1)[1].canonical_text()
        assert a == b

    def test_different_seed_different_trace_same_verdict(self):
        _, trace1, verdict1 = run_bundled("attack2-triple-silent", seed=1)
        _, trace2, verdict2 = run_bundled("attack2-triple-silent", seed=2)
        assert verdict1.summary() == verdict2.summary()
        # Different seeds change keys/nonces but not the event skeleton.
        assert len(trace1.events) == len(trace2.events)


class TestHonestRuns:
    @pytest.mark.parametrize("name", ["honest-baseline", "honest-triple"])
    def test_client_granted_and_ok(self, name):
        world, trace, verdict = run_bundled(name)
        assert verdict.client_outcomes["alice"].ok
        assert [(g.node, g.server) for g in verdict.service_granted_to] == [
            ("alice", "vsrv")
        ]
        assert verdict.alerts == []
        assert not trace.truncated

    def test_honest_triple_message_flow(self):
        _, trace, _ = run_bundled("honest-triple")
        sends = [e.msg_kind for e in trace.of_kind(EventKind.SEND)]
        assert sends == [
            "as-request", "as-reply", "key-forward", "tgs-request", "tgs-reply",
            "password-forward", "service-request", "password-challenge",
            "challenge-response", "mutual-auth-reply",
        ]

    def test_honest_baseline_message_flow(self):
        _, trace, _ = run_bundled("honest-baseline")
        sends = [e.msg_kind for e in trace.of_kind(EventKind.SEND)]
        assert sends == [
            "as-request", "as-reply", "tgs-request", "tgs-reply",
            "service-request", "mutual-auth-reply",
        ]


class TestAttackMatrix:
    def test_attack1_baseline_attacker_wins(self):
        world, trace, verdict = run_bundled("attack1-baseline")
        assert verdict.attacker_succeeded
        assert ("mallory", "vsrv") in {(g.node, g.server) for g in verdict.service_granted_to}
        assert verdict.alerts == []

    def test_attack1_triple_attacker_stalls_silently(self):
        world, trace, verdict = run_bundled("attack1-triple")
        assert not verdict.attacker_succeeded
        assert verdict.alerts == []
        # The attack dies at the ticket reply: no forged service request.
        assert frames_of_kind(trace, "service-request") == [
            e for e in trace.of_kind(EventKind.SEND) if e.msg_kind == "service-request"
        ]
        stall_notes = [
            e for e in trace.of_kind(EventKind.NOTICE) if "stalled" in e.meta
        ]
        assert stall_notes, "expected a stall notice from the attacker"
        # The closure never recovers the service session key.
        honest_kcv = world.clients["alice"].service_tickets["vsrv"].session_key
        assert honest_kcv not in world.attacker.knowledge

    def test_attack2_baseline_replay_wins(self):
        world, trace, verdict = run_bundled("attack2-baseline")
        assert verdict.attacker_succeeded
        assert verdict.alerts == []
        assert len(trace.of_kind(EventKind.REPLAY)) == 1

    def test_attack2_silent_times_out_with_alert_chain(self):
        world, trace, verdict = run_bundled("attack2-triple-silent")
        assert not verdict.attacker_succeeded
        assert [a.incident for a in verdict.alerts] == ["timeout"]
        assert len(verdict.compromise_notices) == 1
        assert verdict.compromise_notices[0].client == "alice"
        # alert hops: server -> tgs, then tgs -> as
        alert_sends = frames_of_kind(trace, "attack-alert")
        forward_sends = frames_of_kind(trace, "alert-forward")
        assert [(e.src, e.dst) for e in alert_sends] == [("vsrv", "ktgs")]
        assert [(e.src, e.dst) for e in forward_sends] == [("ktgs", "kas")]
        # timer_fire precedes the alert send
        timer_events = trace.of_kind(EventKind.TIMER_FIRE)
        assert timer_events and timer_events[0].seq < alert_sends[0].seq

    def test_attack2_wrongpw_immediate_bad_password_alert(self):
        world, trace, verdict = run_bundled("attack2-triple-wrongpw")
        assert not verdict.attacker_succeeded
        assert [a.incident for a in verdict.alerts] == ["bad_password"]
        assert len(verdict.compromise_notices) == 1
        assert trace.of_kind(EventKind.TIMER_FIRE) == []

    def test_expectations_helper_flags_mismatch(self):
        spec = load_bundled("attack1-triple")
        _, verdict = run_scenario(spec, 1)
        spec.expect.attacker_succeeded = True  # deliberately wrong
        problems = check_expectations(spec.expect, verdict)
        assert problems and "attacker_succeeded" in problems[0]

    def test_replay_without_spoofing_fails_address_check(self):
        spec = load_bundled("attack2-baseline")
        spec.adversary.capabilities = tuple(
            c for c in spec.adversary.capabilities if c != "spoof_addr"
        )
        spec.expect.attacker_succeeded = False
        spec.expect.granted = [("alice", "vsrv")]
        world = World(spec, 1)
        trace, verdict = world.run()
        assert not verdict.attacker_succeeded
        drops = [e for e in trace.of_kind(EventKind.DROP) if e.src == "mallory"]
        assert drops and "address-mismatch" in drops[0].meta


class TestKnowledgeClosure:
    def honest_world(self):
        world, trace, _ = run_bundled("honest-triple")
        frames = {}
        for event in trace.of_kind(EventKind.SEND):
            frames.setdefault(event.msg_kind, decode(event.frame))
        return world, frames

    def test_tgt_session_key_alone_opens_nothing_in_as_reply(self):
        world, frames = self.honest_world()
        k_ctgs = world.clients["alice"].tgt.session_key
        as_reply = frames["as-reply"]
        assert isinstance(as_reply, AsReply)
        # Brute-force oracle: neither sealed field of the reply opens.
        for box in (as_reply.ticket, as_reply.enc):
            with pytest.raises(AuthenticationFailure):
                open_box(k_ctgs, box)
        closure = attacker_closure({k_ctgs}, [as_reply])
        assert closure == {k_ctgs}

    def test_k2_plus_captured_tgs_reply_yields_service_key(self):
        world, frames = self.honest_world()
        k2 = world.as_state.credentials["alice"].k2
        tgs_reply = frames["tgs-reply"]
        assert isinstance(tgs_reply, TgsReply)
        # Oracle: k2 opens the envelope and the payload carries the key.
        part = TgsReplyPart.unpack(open_box(k2, tgs_reply.enc))
        closure = attacker_closure({k2}, [tgs_reply])
        assert part.session_key in closure
        assert part.session_key == world.clients["alice"].service_tickets["vsrv"].session_key

    def test_empty_knowledge_never_grows(self):
        _, frames = self.honest_world()
        assert attacker_closure(set(), list(frames.values())) == set()

    def test_closure_is_monotone_and_idempotent(self):
        world, frames = self.honest_world()
        msgs = list(frames.values())
        k2 = world.as_state.credentials["alice"].k2
        small = attacker_closure({k2}, msgs)
        k1 = world.as_state.credentials["alice"].k1
        big = attacker_closure({k2, k1}, msgs)
        assert small <= big  # monotone in knowledge
        again = attacker_closure(small, msgs)
        assert again == small  # idempotent


class TestEventLoopMechanics:
    def test_single_step_delivers_and_enqueues_kdc_replies(self):
        world = World(load_bundled("honest-triple"), seed=3)
        assert world.step()  # client start -> as-request send
        sends = [e.msg_kind for e in world.trace.of_kind(EventKind.SEND)]
        assert sends == ["as-request"]
        assert world.step()  # arrival at the AS
        sends = [e.msg_kind for e in world.trace.of_kind(EventKind.SEND)]
        assert sends == ["as-request", "as-reply", "key-forward"]
        delivers = [e.msg_kind for e in world.trace.of_kind(EventKind.DELIVER)]
        assert delivers == ["as-request"]

    @pytest.mark.parametrize("name", bundled_scenario_names())
    def test_conservation_and_quiescence(self, name):
        world, trace, _ = run_bundled(name)
        counts = trace.counts()
        assert not trace.truncated
        assert (
            counts["deliver"] + counts["drop"]
            == counts["send"] + counts["replay"] + counts["inject"]
        )
        for server in world.servers.values():
            assert not server.pending_challenges

    @pytest.mark.parametrize("name", bundled_scenario_names())
    def test_every_deliver_has_matching_earlier_wire_event(self, name):
        _, trace, _ = run_bundled(name)
        on_wire: list[tuple[str, str, str]] = []
        for event in trace.events:
            key = (event.src, event.dst, event.msg_kind or "")
            if event.kind in (EventKind.SEND, EventKind.REPLAY, EventKind.INJECT):
                on_wire.append(key)
            elif event.kind is EventKind.DELIVER:
                assert key in on_wire, f"orphan deliver {key}"
                on_wire.remove(key)

    def test_unknown_scheduled_client_raises(self):
        spec = load_bundled("honest-triple")
        spec.runs[0].client = "nobody"
        with pytest.raises(ScenarioError):
            World(spec, 1).run()

    def test_per_link_latency_honored(self):
        spec = load_bundled("honest-triple")
        spec.timing.link_latency[("alice", "kas")] = 5
        trace, verdict = World(spec, 1).run()
        assert verdict.client_outcomes["alice"].ok
        first_send = trace.of_kind(EventKind.SEND)[0]
        first_deliver = trace.of_kind(EventKind.DELIVER)[0]
        assert first_send.tick == 0 and first_deliver.tick == 5
