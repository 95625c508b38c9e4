"""The per-node state machine, driven directly by a tiny in-test network."""
from __future__ import annotations

import pytest

from dca import crypto
from dca.crypto import KeyPair
from dca.ledger import VoiceStatus, genesis_state, transfer
from dca.node import (
    Action,
    AutoMajorityOfVoices,
    Branch,
    Decision,
    EvidenceKind,
    ForkEvidence,
    ForkState,
    Genesis,
    LiteVerdict,
    NeedsExternalInput,
    NodeConfig,
    NodeState,
    ScriptedAnswer,
    choose_history,
    depth_capped,
    fork_choice,
    lite_verify_payment,
    rng_secret,
)
from dca.records import (
    EquivocationProof,
    RecordDag,
    build_inclusion_proof,
    confirmation_depth,
    create_record,
)
from dca.schedule import CycleParams, Schedule

PARAMS = CycleParams.desk_scale(60)
SLOT = PARAMS.slot_ms
LAT = 500


class Net:
    """Voices plus one observer; every record reaches everyone ``LAT`` ms after creation."""

    def __init__(self, n_voices: int = 4, seed: int = 1) -> None:
        self.voice_keys = [KeyPair.from_seed(f"node-test/{seed}/v{i}") for i in range(n_voices)]
        self.users = [KeyPair.from_seed(f"node-test/{seed}/u{i}") for i in range(3)]
        state = genesis_state({u.public_key: 1_000 for u in self.users},
                              [v.public_key for v in self.voice_keys])
        commitments = {v.public_key: crypto.commit(rng_secret(v, -1)).digest for v in self.voice_keys}
        self.genesis = Genesis(state, crypto.digest(b"genesis" + bytes([seed])), commitments, PARAMS)
        self.config = NodeConfig(PARAMS)
        self.nodes = {f"v{i}": NodeState(f"v{i}", self.genesis, self.config, k)
                      for i, k in enumerate(self.voice_keys)}
        self.nodes["obs"] = NodeState("obs", self.genesis, self.config)
        self.slot = 0
        self.log: list = []

    @property
    def obs(self) -> NodeState:
        return self.nodes["obs"]

    def submit(self, tx, at: int) -> None:
        for n in self.nodes.values():
            n.on_receive_transaction(tx, at)

    def deliver(self, record, now: int, skip=()) -> dict:
        return {nid: n.on_receive_record(record, now) for nid, n in self.nodes.items() if nid not in skip}

    def run(self, slots: int, hold=None) -> None:
        for _ in range(slots):
            s, t = self.slot, self.slot * SLOT
            for n in self.nodes.values():
                n.tick(s, t, AutoMajorityOfVoices())
            made = []
            for nid, n in self.nodes.items():
                if n.identity is None or (hold and hold(nid, s)):
                    continue
                d = n.decide_record_action(s, t + 4_500)
                if d.record is not None:
                    n.on_receive_record(d.record, t + 4_500)
                    made.append((nid, d))
            for nid, d in made:
                self.log.append((s, nid, d.decision))
                self.deliver(d.record, t + 4_500 + LAT, skip=(nid,))
            self.slot += 1


def test_transaction_confirms_then_secures_with_equal_ledgers():
    net = Net()
    a, b = net.users[0], net.users[1]
    tx = transfer(a, b.public_key, 250, timestamp=15_000, sequence=1)
    net.run(1)
    net.submit(tx, 15_000)
    assert net.obs.transaction_status(tx.hash).kind == "Pending"
    net.run(2)
    st = net.obs.transaction_status(tx.hash)
    assert st.kind == "Confirmed" and st.slot == 2
    net.run(12)
    st = net.obs.transaction_status(tx.hash)
    assert st.kind == "Secured" and st.depth >= 10
    assert confirmation_depth(net.obs.dag, st.record) >= 10
    roots = {n.ledger.state_root() for n in net.nodes.values()}
    assert len(roots) == 1
    assert net.obs.ledger.balance(b.public_key) == 1_250
    assert all(d is Decision.PRODUCE for _, _, d in net.log)


def test_secured_at_exactly_depth_ten():
    net = Net()
    tx = transfer(net.users[0], net.users[1].public_key, 1, timestamp=0, sequence=1)
    net.submit(tx, 0)
    net.run(2)
    rec = net.obs.transaction_status(tx.hash).record
    assert rec is not None
    while net.obs.transaction_status(tx.hash).kind != "Secured":
        assert depth_capped(net.obs.dag, rec) < 10
        net.run(1)
    assert depth_capped(net.obs.dag, rec) == 10


def test_unknown_and_rejected_statuses():
    net = Net()
    assert net.obs.transaction_status(b"\x00" * 32).kind == "Unknown"
    broke = transfer(net.users[0], net.users[1].public_key, 10**9, timestamp=0, sequence=1)
    out = net.obs.on_receive_transaction(broke, 0)
    assert not out.relay and out.status.kind == "Rejected" and out.status.reason == "InsufficientFunds"
    first = transfer(net.users[0], net.users[1].public_key, 5, timestamp=0, sequence=1)
    twin = transfer(net.users[0], net.users[2].public_key, 5, timestamp=0, sequence=1)
    assert net.obs.on_receive_transaction(first, 0).relay
    assert net.obs.on_receive_transaction(twin, 0).status.reason == "ConflictingDoubleSpend"


def test_equivocation_is_detected_and_slashed_with_verifiable_proof():
    net = Net()
    net.run(3)
    slot = net.slot
    creator = next(k for k in net.voice_keys
                   if k.public_key in net.obs.schedule_for(slot).voices_for(slot))
    me = next(n for n in net.nodes.values() if n.identity == creator)
    twins = []
    for stamp in (1, 2):
        commitment, reveal = me.rng_fields(slot)
        twins.append(create_record(
            slot=slot, keys=creator, tips=sorted(me.history_tips), prior_cb_hash=me.latest_cb.hash,
            schedule=me.schedule_for(slot), rng_commitment=commitment, rng_reveal=reveal,
            created_at=slot * SLOT + stamp))
    obs = net.obs
    for n in net.nodes.values():
        n.tick(slot, slot * SLOT)
    assert obs.on_receive_record(twins[0], slot * SLOT + 5_000).action is Action.ACCEPT_RELAY
    out = obs.on_receive_record(twins[1], slot * SLOT + 5_001)
    assert out.action is Action.FORK_ALARM and out.evidence.kind is EvidenceKind.EQUIVOCATION
    assert out.evidence.verify()
    [ev] = [e for e in obs.ledger_events if e.action == "destroy"]
    assert ev.voice == creator.public_key and isinstance(ev.evidence, EquivocationProof)
    assert ev.evidence.verify(obs.schedule_for(slot))
    assert obs.ledger.voices.status(creator.public_key) is VoiceStatus.DESTROYED
    # Both copies stay acknowledged; exactly one of them counts.
    assert {twins[0].hash, twins[1].hash} <= set(obs.dag.records)
    assert len({twins[0].hash, twins[1].hash} & obs.muted) == 1


def test_invalid_transaction_record_is_rejected_and_slashed():
    net = Net()
    net.run(2)
    slot = net.slot
    creator = next(k for k in net.voice_keys
                   if k.public_key in net.obs.schedule_for(slot).voices_for(slot))
    me = next(n for n in net.nodes.values() if n.identity == creator)
    rich = genesis_state({net.users[0].public_key: 10**9}, [])
    overdraft = transfer(net.users[0], net.users[1].public_key, 10**6, timestamp=slot * SLOT, sequence=1)
    commitment, reveal = me.rng_fields(slot)
    bad = create_record(slot=slot, keys=creator, tips=sorted(me.history_tips), prior_cb_hash=me.latest_cb.hash,
                        schedule=me.schedule_for(slot), pending=[overdraft], state=rich,
                        rng_commitment=commitment, rng_reveal=reveal, slot_ms=SLOT)
    assert bad.transactions == (overdraft,)
    out = net.obs.on_receive_record(bad, slot * SLOT + 5_000)
    assert out.action is Action.REJECT and out.reason == "InvalidTransactionIncluded"
    [ev] = net.obs.ledger_events
    assert ev.evidence_kind == "invalid_tx" and ev.evidence == bad and bad.signature_ok()


def test_unknown_cb_from_unknown_creator_is_rejected():
    net = Net()
    stranger = KeyPair.from_seed("stranger")
    rec = create_record(slot=0, keys=stranger, tips=(), prior_cb_hash=b"\x09" * 32,
                        schedule=Schedule(0, b"s" * 32, ((stranger.public_key,),)),
                        rng_commitment=crypto.commit(b"x" * 16))
    assert net.obs.on_receive_record(rec, 100).action is Action.REJECT
    assert net.obs.on_receive_record(rec, 200).action is Action.REJECT


def test_missed_slots_trigger_partition_warning_and_safe_records():
    net = Net(n_voices=5)
    net.run(5)
    cut = {"v0", "v1", "v2"}
    # The three-voice majority disappears; the remaining voices notice the gaps.
    net.run(20, hold=lambda nid, s: nid in cut)
    lone = net.nodes["v3"]
    assert lone.partition_warning or lone.warned_slots
    assert not any(d is Decision.PRODUCE_SAFE for _, _, d in net.log)
    # A conflicting pair in the pool while slots are missing: only safe records.
    t = net.slot * SLOT
    a = net.users[0]
    net.submit(transfer(a, net.users[1].public_key, 5, timestamp=t, sequence=1), t)
    net.submit(transfer(a, net.users[2].public_key, 5, timestamp=t, sequence=1), t)
    net.run(5, hold=lambda nid, s: nid in cut)
    late = [d for s, nid, d in net.log if s >= 25]
    assert late and all(d is Decision.PRODUCE_SAFE for d in late)


def test_state_digest_tracks_view():
    net = Net()
    net.run(3)
    digests = {n.state_digest() for n in net.nodes.values()}
    assert len(digests) == 1
    net.nodes["obs"].on_receive_transaction(
        transfer(net.users[0], net.users[1].public_key, 1, timestamp=30_000, sequence=1), 30_000)
    assert net.obs.state_digest() not in digests


# -- fork choice ---------------------------------------------------------------

def _branch_records(net: Net, keys: list[KeyPair], slots: list[int], stamp: int):
    out = []
    for k, s in zip(keys, slots):
        sched = Schedule(0, b"s" * 32, tuple((k.public_key,) for _ in range(s + 1)))
        out.append(create_record(slot=s, keys=k, tips=(), prior_cb_hash=b"\x01" * 32, schedule=sched,
                                 rng_commitment=crypto.commit(b"c" * 16), created_at=stamp))
    return out


def test_fork_choice_by_exclusive_signers():
    net = Net()
    v = net.voice_keys
    honest = Branch("honest", tuple(_branch_records(net, [v[0], v[1], v[2]], [3, 4, 5], 1)))
    forged = Branch("forged", tuple(_branch_records(net, [v[0], v[1]], [3, 4], 2)))
    choice, rule = fork_choice([honest, forged])
    assert choice is honest and rule == "signatures"


def test_fork_choice_by_timing_and_undecided():
    net = Net()
    v = net.voice_keys
    a = Branch("a", tuple(_branch_records(net, [v[0], v[1]], [3, 4], 1)))
    b = Branch("b", tuple(_branch_records(net, [v[0], v[1]], [3, 4], 2)))
    assert fork_choice([a, b]) == (NeedsExternalInput, "undecided")
    head_a, head_b = a.divergence_record, b.divergence_record
    seen = {head_a.hash: 3 * SLOT + 4_600, head_b.hash: 9 * SLOT}
    choice, rule = fork_choice([a, b], seen, slot_ms=SLOT)
    assert choice is a and rule == "timing"
    # A node that suspects its own clock does not trust timing.
    assert fork_choice([a, b], seen, slot_ms=SLOT, view_suspect=True)[0] is NeedsExternalInput
    assert not NeedsExternalInput


def test_choose_history_is_oracle_free():
    net = Net()
    v = net.voice_keys
    common = _branch_records(net, [v[3]], [1], 0)
    honest = common + _branch_records(net, [v[0], v[1], v[2]], [3, 4, 5], 1)
    forged = common + _branch_records(net, [v[0], v[1]], [3, 4], 2)
    idx, rule, calls = choose_history(net.genesis, net.config, [forged, honest])
    assert (idx, rule, calls) == (1, "signatures", 0)
    twin = common + _branch_records(net, [v[0], v[1]], [3, 4], 3)
    idx, rule, calls = choose_history(net.genesis, net.config, [forged, twin])
    assert idx is NeedsExternalInput and calls == 0


def test_arbitration_policies():
    net = Net()
    v = net.voice_keys
    big = Branch("big", tuple(_branch_records(net, [v[0], v[1], v[2]], [3, 4, 5], 1)))
    small = Branch("small", tuple(_branch_records(net, [v[3]], [3], 1)))
    assert AutoMajorityOfVoices().choose([small, big]) is big
    assert AutoMajorityOfVoices().choose([small, Branch("other", small.records)]) is None
    assert ScriptedAnswer("small").choose([big, small]) is small


def test_fork_evidence_verification():
    net = Net()
    v = net.voice_keys
    r1, r2 = _branch_records(net, [v[0], v[0]], [3, 3], 1)[0], _branch_records(net, [v[0]], [3], 2)[0]
    assert ForkEvidence(EvidenceKind.EQUIVOCATION, (r1, r2), (0, 1)).verify()
    assert not ForkEvidence(EvidenceKind.EQUIVOCATION, (r1, r1), (0, 1)).verify()


# -- lite clients --------------------------------------------------------------

def test_lite_client_payment_verdicts():
    net = Net()
    tx = transfer(net.users[0], net.users[1].public_key, 7, timestamp=0, sequence=1)
    net.submit(tx, 0)
    net.run(2)
    rec_hash = net.obs.transaction_status(tx.hash).record
    record = net.obs.dag.records[rec_hash]
    proof = build_inclusion_proof(record, record.transactions.index(tx))

    def headers_only() -> RecordDag:
        dag = RecordDag()
        for h in sorted(net.obs.dag.records, key=lambda x: (net.obs.dag.records[x].slot, x)):
            dag.add(net.obs.dag.records[h].header)
        return dag

    assert lite_verify_payment(headers_only(), proof) is LiteVerdict.INSUFFICIENT_DEPTH
    net.run(12)
    headers = headers_only()
    assert lite_verify_payment(headers, proof) is LiteVerdict.ACCEPTED
    assert lite_verify_payment(RecordDag(), proof) is LiteVerdict.INVALID
    other = transfer(net.users[2], net.users[1].public_key, 7, timestamp=0, sequence=1)
    forged = type(proof)(other.hash, proof.path, proof.header)
    assert lite_verify_payment(headers, forged) is LiteVerdict.INVALID


def test_pardon_restores_jailed_voice():
    net = Net()
    net.run(2)
    v = net.voice_keys[0].public_key
    obs = net.obs
    obs._slash(v, 1, "test", None, 2 * SLOT, action="jail")
    assert obs.ledger.voices.status(v) is VoiceStatus.JAILED
    obs.pardon(v, 2 * SLOT)
    assert obs.ledger.voices.status(v) is VoiceStatus.ACTIVE
    assert obs.fork_state is ForkState.NONE


@pytest.mark.parametrize("kind", [EvidenceKind.UNCONFIRMING_DOUBLE_SPEND])
def test_double_spend_evidence_requires_conflict(kind):
    net = Net()
    net.run(1)
    a = net.users[0]
    pay = transfer(a, net.users[1].public_key, 5, timestamp=20_000, sequence=1)
    spend = transfer(a, net.users[2].public_key, 5, timestamp=20_000, sequence=1)
    st = genesis_state({a.public_key: 100}, [])
    k = net.voice_keys[0]
    sched = Schedule(0, b"s" * 32, tuple((k.public_key,) for _ in range(4)))
    older = create_record(slot=2, keys=k, tips=(), prior_cb_hash=b"\x01" * 32, schedule=sched,
                          pending=[pay], state=st, rng_commitment=crypto.commit(b"c" * 16))
    newer = create_record(slot=3, keys=k, tips=(), prior_cb_hash=b"\x01" * 32, schedule=sched,
                          pending=[spend], state=st, rng_commitment=crypto.commit(b"c" * 16))
    assert ForkEvidence(kind, (older, newer), (0, 1)).verify()
    assert not ForkEvidence(kind, (older, older), (0, 1)).verify()
