import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cisguard.channel import ChannelConfig, KeyEpochState, MsgType
from cisguard.cis import CisProfile, fingerprint
from cisguard.protocol import (
    Confirmation,
    ConsensusState,
    DuplicateConfirmation,
    Outcome,
    UnexpectedWorker,
    Verdict,
    alert_payload,
    finalize,
    make_offer,
    pack_confirmation,
    pack_offer,
    record_confirmation,
    unpack_confirmation,
    unpack_offer,
    worker_match,
)

FP = fingerprint(CisProfile(("jmp", "jne"), ("call",), ("ret",)), "p")
FP_OTHER = fingerprint(CisProfile(("jmp", "jne"), ("call", "call"), ("ret",)), "p")


def coordinator_with_peers(replicas=(1, 2)):
    coord = KeyEpochState(config=ChannelConfig(node_id=0), peers=tuple(replicas))
    for replica in replicas:
        worker = KeyEpochState(config=ChannelConfig(node_id=replica), peers=(0,))
        for _peer, env in worker.rotate():
            coord.record_peer_key(env.sender_id, env.payload, env.key_epoch)
    return coord


def fresh_state(workers=(1, 2), deadline=5000):
    return ConsensusState(
        process_id="p",
        coordinator_id=0,
        expected_workers=frozenset(workers),
        deadline_ms=deadline,
    )


class TestPayloads:
    def test_offer_layout(self):
        payload = pack_offer(FP)
        assert len(payload) == 128
        combined, jump, call, ret = unpack_offer(payload)
        assert combined == FP.combined
        assert (jump, call, ret) == (FP.jump_digest, FP.call_digest, FP.return_digest)

    def test_offer_length_guard(self):
        with pytest.raises(ValueError):
            unpack_offer(b"\x00" * 127)

    @pytest.mark.parametrize("verdict", list(Verdict))
    def test_confirmation_round_trip(self, verdict):
        assert unpack_confirmation(pack_confirmation(verdict)) is verdict

    @pytest.mark.parametrize("payload", [b"", b"\x02", b"\x01\x01"])
    def test_confirmation_guard(self, payload):
        with pytest.raises(ValueError):
            unpack_confirmation(payload)


class TestMakeOffer:
    def test_one_envelope_per_replica(self):
        coord = coordinator_with_peers((1, 2))
        offers, state = make_offer(FP, {1, 2}, coord, "p", now_ms=0, timeout_ms=5000)
        assert [peer for peer, _ in offers] == [1, 2]
        assert state.expected_workers == frozenset({1, 2})
        assert state.outcome is Outcome.PENDING
        assert state.deadline_ms == 5000
        for _peer, env in offers:
            assert env.msg_type is MsgType.FINGERPRINT_OFFER
            assert env.process_id == "p"

    def test_no_replicas_rejected(self):
        coord = coordinator_with_peers(())
        with pytest.raises(ValueError):
            make_offer(FP, set(), coord, "p", 0, 5000)

    def test_missing_key_recorded(self):
        coord = coordinator_with_peers((1,))
        offers, state = make_offer(FP, {1, 2}, coord, "p", 0, 5000)
        assert [peer for peer, _ in offers] == [1]
        assert state.undeliverable == frozenset({2})
        assert 2 in state.expected_workers


class TestWorkerMatch:
    def test_identical_digests_safe(self):
        conf = worker_match(pack_offer(FP), FP, worker_id=1, process_id="p")
        assert conf.verdict is Verdict.SAFE
        assert conf.worker_id == 1

    def test_single_differing_byte_unsafe(self):
        payload = bytearray(pack_offer(FP))
        payload[0] ^= 0x01
        conf = worker_match(bytes(payload), FP, 1, "p")
        assert conf.verdict is Verdict.UNSAFE

    def test_different_profile_unsafe(self):
        conf = worker_match(pack_offer(FP_OTHER), FP, 1, "p")
        assert conf.verdict is Verdict.UNSAFE


class TestRecordConfirmation:
    def test_all_safe_closes_clean(self):
        state = fresh_state()
        record_confirmation(state, Confirmation("p", 1, Verdict.SAFE))
        assert state.outcome is Outcome.PENDING
        record_confirmation(state, Confirmation("p", 2, Verdict.SAFE))
        assert state.outcome is Outcome.NO_ATTACK

    def test_any_unsafe_is_attack(self):
        state = fresh_state()
        record_confirmation(state, Confirmation("p", 1, Verdict.SAFE))
        record_confirmation(state, Confirmation("p", 2, Verdict.UNSAFE))
        assert state.outcome is Outcome.ATTACK

    def test_unexpected_worker(self):
        state = fresh_state()
        with pytest.raises(UnexpectedWorker):
            record_confirmation(state, Confirmation("p", 9, Verdict.SAFE))

    def test_duplicate_first_wins(self):
        state = fresh_state()
        record_confirmation(state, Confirmation("p", 1, Verdict.SAFE))
        with pytest.raises(DuplicateConfirmation):
            record_confirmation(state, Confirmation("p", 1, Verdict.UNSAFE))
        assert state.received[1] is Verdict.SAFE
        assert state.outcome is Outcome.PENDING

    def test_decided_state_rejects_more(self):
        state = fresh_state(workers=(1,))
        record_confirmation(state, Confirmation("p", 1, Verdict.SAFE))
        with pytest.raises(ValueError):
            record_confirmation(state, Confirmation("p", 1, Verdict.SAFE))


class TestFinalize:
    def test_all_safe_no_alert(self):
        state = fresh_state()
        record_confirmation(state, Confirmation("p", 1, Verdict.SAFE))
        record_confirmation(state, Confirmation("p", 2, Verdict.SAFE))
        outcome, alert = finalize(state, now_ms=100)
        assert outcome is Outcome.NO_ATTACK
        assert alert is None

    def test_pending_before_deadline(self):
        state = fresh_state(deadline=5000)
        outcome, alert = finalize(state, now_ms=4999)
        assert outcome is Outcome.PENDING
        assert alert is None

    def test_silent_worker_past_deadline(self):
        state = fresh_state(deadline=5000)
        record_confirmation(state, Confirmation("p", 1, Verdict.SAFE))
        outcome, alert = finalize(state, now_ms=5000)
        assert outcome is Outcome.ATTACK
        assert alert is not None
        assert alert.missing_workers == (2,)
        assert alert.unsafe_workers == ()

    def test_idempotent_single_alert(self):
        state = fresh_state()
        record_confirmation(state, Confirmation("p", 2, Verdict.UNSAFE))
        first_outcome, first_alert = finalize(state, 10)
        second_outcome, second_alert = finalize(state, 20)
        assert first_outcome is second_outcome is Outcome.ATTACK
        assert first_alert is not None
        assert second_alert is None
        assert first_alert.unsafe_workers == (2,)

    def test_alert_payload_schema(self):
        state = fresh_state()
        record_confirmation(state, Confirmation("p", 1, Verdict.UNSAFE))
        _, alert = finalize(state, 10)
        decoded = json.loads(alert_payload(alert))
        assert decoded == {
            "process_id": "p",
            "coordinator_id": 0,
            "unsafe_workers": [1],
            "missing_workers": [2],
        }


class TestConsensusProperties:
    @given(
        st.lists(
            st.tuples(st.sampled_from([1, 2, 3]), st.sampled_from(list(Verdict))),
            max_size=12,
        ),
        st.integers(min_value=0, max_value=9000),
    )
    @settings(max_examples=150)
    def test_all_safe_rule_and_monotonicity(self, confirmations, finalize_at):
        state = fresh_state(workers=(1, 2, 3), deadline=5000)
        seen_outcomes = [state.outcome]
        for worker, verdict in confirmations:
            if state.outcome is not Outcome.PENDING:
                break
            try:
                record_confirmation(state, Confirmation("p", worker, verdict))
            except (DuplicateConfirmation, UnexpectedWorker):
                pass
            seen_outcomes.append(state.outcome)
        outcome, _alert = finalize(state, finalize_at)
        seen_outcomes.append(outcome)

        if outcome is Outcome.NO_ATTACK:
            assert set(state.received.values()) == {Verdict.SAFE}
            assert state.received.keys() == state.expected_workers
        non_pending = [o for o in seen_outcomes if o is not Outcome.PENDING]
        assert len(set(non_pending)) <= 1

    @given(st.data())
    @settings(max_examples=60)
    def test_at_most_one_alert(self, data):
        state = fresh_state(workers=(1, 2), deadline=100)
        alerts = []
        for verdict in data.draw(
            st.lists(st.sampled_from(list(Verdict)), min_size=0, max_size=2)
        ):
            worker = len(alerts) + 1
            if state.outcome is Outcome.PENDING and worker in (1, 2):
                try:
                    record_confirmation(state, Confirmation("p", worker, verdict))
                except DuplicateConfirmation:
                    pass
        for at in (50, 100, 150, 200):
            _, alert = finalize(state, at)
            if alert is not None:
                alerts.append(alert)
        assert len(alerts) <= 1
