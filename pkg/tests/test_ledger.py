"""Accounts, the voice ledger, validation and consensus block snapshots."""
from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from dca.crypto import KeyPair
from dca.ledger import (
    AlreadyVoice,
    BadSequence,
    BadSignature,
    ConsensusBlock,
    GENESIS_PRIOR,
    InsufficientFunds,
    LedgerInvariantError,
    LedgerParams,
    LedgerState,
    LockNotElapsed,
    MalformedTransaction,
    NotAVoice,
    StaleCbReference,
    TimestampOutOfWindow,
    Transaction,
    VoiceLedgerError,
    VoiceStatus,
    apply_transaction,
    destroy_voice_deposit,
    genesis_state,
    jail_voice,
    pardon_voice,
    take_snapshot,
    transfer,
    validate_transaction,
    voice_exit,
    voice_join,
)
from dca.schedule import CycleParams

USERS = [KeyPair.from_seed(f"ledger-user/{i}") for i in range(4)]
VOICES = [KeyPair.from_seed(f"ledger-voice/{i}") for i in range(3)]
PARAMS = LedgerParams(deposit=500, lock_cycles=2)


def fresh() -> LedgerState:
    return genesis_state({u.public_key: 1_000 for u in USERS} | {v.public_key: 100 for v in VOICES},
                         [v.public_key for v in VOICES], PARAMS)


def test_transfer_moves_funds_and_bumps_sequence():
    s = fresh()
    a, b = USERS[0], USERS[1]
    tx = transfer(a, b.public_key, 300, timestamp=5_000, sequence=1)
    validate_transaction(s, tx, 5_000)
    s2 = apply_transaction(s, tx)
    assert s2.balance(a.public_key) == 700 and s2.balance(b.public_key) == 1_300
    assert s2.account(a.public_key).sequence == 1
    assert s.balance(a.public_key) == 1_000  # functional update
    assert s2.total_money() == s.total_money()


@pytest.mark.parametrize("make,error", [
    (lambda: transfer(USERS[0], USERS[1].public_key, 5_000, timestamp=0, sequence=1), InsufficientFunds),
    (lambda: transfer(USERS[0], USERS[1].public_key, 1, timestamp=0, sequence=2), BadSequence),
    (lambda: transfer(USERS[0], USERS[1].public_key, 1, timestamp=30_000, sequence=1), TimestampOutOfWindow),
    (lambda: transfer(USERS[0], b"", 1, timestamp=0, sequence=1), MalformedTransaction),
    (lambda: voice_join(USERS[0], 499, timestamp=0, sequence=1), MalformedTransaction),
    (lambda: voice_join(VOICES[0], 500, timestamp=0, sequence=1), AlreadyVoice),
    (lambda: voice_exit(USERS[0], b"cb", timestamp=0, sequence=1), NotAVoice),
])
def test_validation_errors(make, error):
    with pytest.raises(error):
        validate_transaction(fresh(), make(), 0)


def test_forged_signature_rejected():
    tx = transfer(USERS[0], USERS[1].public_key, 10, timestamp=0, sequence=1)
    forged = Transaction(tx.kind, tx.sender, 11, tx.timestamp, tx.sequence, tx.recipient,
                         signature=tx.signature)
    with pytest.raises(BadSignature):
        validate_transaction(fresh(), forged, 0)


def test_timestamp_window_is_symmetric_and_inclusive():
    s = fresh()
    tx = transfer(USERS[0], USERS[1].public_key, 1, timestamp=40_000, sequence=1)
    validate_transaction(s, tx, 20_000)
    validate_transaction(s, tx, 60_000)
    with pytest.raises(TimestampOutOfWindow):
        validate_transaction(s, tx, 19_999)


def test_join_then_exit_after_lock_with_recent_cb():
    s = fresh()
    u = USERS[2]
    join = voice_join(u, 500, timestamp=0, sequence=1)
    validate_transaction(s, join, 0, cycle=3)
    s = apply_transaction(s, join, cycle=3)
    assert s.voices.is_active(u.public_key)
    assert s.voices.locked_total() == 500 * 4
    cbs = [b"a" * 32, b"b" * 32, b"c" * 32, b"d" * 32]
    ex = voice_exit(u, cbs[-1], timestamp=0, sequence=2)
    with pytest.raises(LockNotElapsed):
        validate_transaction(s, ex, 0, cycle=4, recent_cb_hashes=cbs)
    stale = voice_exit(u, cbs[0], timestamp=0, sequence=2)
    with pytest.raises(StaleCbReference):
        validate_transaction(s, stale, 0, cycle=5, recent_cb_hashes=cbs)
    validate_transaction(s, ex, 0, cycle=5, recent_cb_hashes=cbs)
    after = apply_transaction(s, ex, cycle=5)
    assert after.voices.status(u.public_key) is VoiceStatus.EXITED
    assert after.balance(u.public_key) == 1_000
    assert after.total_money() == s.total_money()


def test_apply_refuses_invariant_breaks():
    with pytest.raises(LedgerInvariantError):
        apply_transaction(fresh(), transfer(USERS[0], USERS[1].public_key, 1, timestamp=0, sequence=3))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 1_500)), max_size=25))
def test_money_is_conserved_under_any_valid_sequence(moves):
    state = fresh()
    total = state.total_money()
    seq = {u.public_key: 0 for u in USERS}
    for s_i, r_i, amount in moves:
        a, b = USERS[s_i], USERS[r_i]
        tx = transfer(a, b.public_key, amount, timestamp=0, sequence=seq[a.public_key] + 1)
        try:
            validate_transaction(state, tx, 0)
        except InsufficientFunds:
            continue
        state = apply_transaction(state, tx)
        seq[a.public_key] += 1
        assert state.total_money() == total
        assert all(acct.balance >= 0 for acct in state.accounts.values())


def test_destroy_jail_and_pardon():
    vl = fresh().voices
    v = VOICES[0].public_key
    jailed = jail_voice(vl, v)
    assert jailed.status(v) is VoiceStatus.JAILED and vl.status(v) is VoiceStatus.ACTIVE
    assert pardon_voice(jailed, v).status(v) is VoiceStatus.ACTIVE
    gone = destroy_voice_deposit(jailed, v)
    assert gone.status(v) is VoiceStatus.DESTROYED
    assert gone.total_destroyed == 500 and gone.locked_total() == 1_000
    with pytest.raises(VoiceLedgerError):
        destroy_voice_deposit(gone, v)
    with pytest.raises(VoiceLedgerError):
        jail_voice(gone, v)
    with pytest.raises(VoiceLedgerError):
        pardon_voice(vl, v)


def test_state_root_is_digest_of_canonical_encoding_and_round_trips():
    s = apply_transaction(fresh(), transfer(USERS[0], USERS[1].public_key, 1, timestamp=0, sequence=1))
    s.voices = destroy_voice_deposit(s.voices, VOICES[1].public_key)
    assert s.state_root() == hashlib.sha256(s.encode()).digest()
    back = LedgerState.decode(s.encode(), PARAMS)
    assert back.encode() == s.encode()
    # Account order in the encoding does not depend on insertion order.
    shuffled = LedgerState(dict(reversed(list(s.accounts.items()))), s.voices, PARAMS)
    assert shuffled.state_root() == s.state_root()


def test_snapshot_only_at_boundaries_and_cb_round_trip():
    params = CycleParams.desk_scale(60)
    s = fresh()
    with pytest.raises(ValueError):
        take_snapshot(s, 1, 61, b"s" * 32, GENESIS_PRIOR, params)
    boundary = params.slices + params.cycle_lag_slots
    cb = take_snapshot(s, 1, boundary, b"s" * 32, GENESIS_PRIOR, params)
    assert cb.verify_root()
    back = ConsensusBlock.decode(cb.encode(), PARAMS)
    assert back.hash == cb.hash and back.verify_root()
    assert cb.to_json()["created_at_slot"] == boundary
    # The snapshot is frozen: later changes to the live state do not leak in.
    s.accounts.clear()
    assert cb.verify_root()


def test_genesis_rejects_negative_and_duplicate():
    with pytest.raises(ValueError):
        genesis_state({b"x": -1}, [])
    with pytest.raises(ValueError):
        genesis_state({}, [b"v", b"v"])
