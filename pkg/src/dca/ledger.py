"""Accounts, transactions, the voice ledger and consensus block snapshots."""
from __future__ import annotations

import enum
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property

from . import crypto
from .encoding import Reader, Writer
from .schedule import CycleParams, is_cb_boundary


class TxKind(enum.IntEnum):
    TRANSFER = 0
    VOICE_JOIN = 1
    VOICE_EXIT = 2


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    sender: bytes
    amount: int
    timestamp: int  # network time, ms
    sequence: int
    recipient: bytes = b""
    recent_cb_hash: bytes = b""
    fee: int = 0  # reserved; always zero here
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (
            Writer()
            .u8(self.kind)
            .blob(self.sender)
            .blob(self.recipient)
            .u64(self.amount)
            .u64(self.timestamp)
            .u64(self.sequence)
            .blob(self.recent_cb_hash)
            .u64(self.fee)
            .getvalue()
        )

    def encode(self) -> bytes:
        return self.signing_bytes() + Writer().blob(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls._read(r)
        r.expect_done()
        return tx

    @classmethod
    def _read(cls, r: Reader) -> "Transaction":
        kind = TxKind(r.u8())
        sender, recipient = r.blob(), r.blob()
        amount, timestamp, sequence = r.u64(), r.u64(), r.u64()
        recent = r.blob()
        fee = r.u64()
        return cls(kind, sender, amount, timestamp, sequence, recipient, recent, fee, r.blob())

    @cached_property
    def hash(self) -> bytes:
        return crypto.digest(self.encode())

    @property
    def conflict_key(self) -> tuple[bytes, int]:
        """Two distinct transactions with the same key are a double spend."""
        return (self.sender, self.sequence)

    def signature_ok(self) -> bool:
        return crypto.verify(self.sender, self.signing_bytes(), self.signature)

    def to_json(self) -> dict:
        return {
            "hash": self.hash.hex(),
            "kind": self.kind.name,
            "sender": self.sender.hex(),
            "recipient": self.recipient.hex(),
            "amount": self.amount,
            "timestamp": self.timestamp,
            "sequence": self.sequence,
        }


def make_transaction(keys: crypto.KeyPair, kind: TxKind, *, amount: int, timestamp: int,
                     sequence: int, recipient: bytes = b"", recent_cb_hash: bytes = b"") -> Transaction:
    unsigned = Transaction(kind, keys.public_key, amount, timestamp, sequence,
                           recipient, recent_cb_hash)
    return replace(unsigned, signature=keys.sign(unsigned.signing_bytes()))


def transfer(keys: crypto.KeyPair, recipient: bytes, amount: int, *, timestamp: int,
             sequence: int) -> Transaction:
    return make_transaction(keys, TxKind.TRANSFER, amount=amount, timestamp=timestamp,
                            sequence=sequence, recipient=recipient)


def voice_join(keys: crypto.KeyPair, deposit: int, *, timestamp: int, sequence: int) -> Transaction:
    return make_transaction(keys, TxKind.VOICE_JOIN, amount=deposit, timestamp=timestamp,
                            sequence=sequence)


def voice_exit(keys: crypto.KeyPair, recent_cb_hash: bytes, *, timestamp: int,
               sequence: int) -> Transaction:
    return make_transaction(keys, TxKind.VOICE_EXIT, amount=0, timestamp=timestamp,
                            sequence=sequence, recent_cb_hash=recent_cb_hash)


# -- validation errors ---------------------------------------------------

class ValidationError(Exception):
    code = "ValidationError"

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail or self.code)
        self.detail = detail


class BadSignature(ValidationError):
    code = "BadSignature"


class InsufficientFunds(ValidationError):
    code = "InsufficientFunds"


class BadSequence(ValidationError):
    code = "BadSequence"


class AlreadyVoice(ValidationError):
    code = "AlreadyVoice"


class NotAVoice(ValidationError):
    code = "NotAVoice"


class LockNotElapsed(ValidationError):
    code = "LockNotElapsed"


class StaleCbReference(ValidationError):
    code = "StaleCbReference"


class TimestampOutOfWindow(ValidationError):
    code = "TimestampOutOfWindow"


class MalformedTransaction(ValidationError):
    code = "MalformedTransaction"


class LedgerInvariantError(RuntimeError):
    """A state transition was attempted that validation should have refused."""


class VoiceLedgerError(ValueError):
    pass


# -- state ----------------------------------------------------------------

@dataclass(frozen=True)
class LedgerParams:
    deposit: int = 10_000
    lock_cycles: int = 36
    cb_window: int = 3
    timestamp_window_ms: int = 20_000  # +/- 2 slots of 10 s


@dataclass(frozen=True)
class Account:
    balance: int = 0
    sequence: int = 0


class VoiceStatus(enum.IntEnum):
    ACTIVE = 0
    EXITED = 1
    DESTROYED = 2
    JAILED = 3


TERMINAL = (VoiceStatus.EXITED, VoiceStatus.DESTROYED)


@dataclass(frozen=True)
class VoiceEntry:
    voice_id: bytes
    joined_at: int
    deposit: int
    status: VoiceStatus = VoiceStatus.ACTIVE
    exited_at: int | None = None
    exit_tx: Transaction | None = None

    @property
    def holds_deposit(self) -> bool:
        return self.status in (VoiceStatus.ACTIVE, VoiceStatus.JAILED)


@dataclass
class VoiceLedger:
    entries: list[VoiceEntry] = field(default_factory=list)
    total_destroyed: int = 0

    def copy(self) -> "VoiceLedger":
        return VoiceLedger(list(self.entries), self.total_destroyed)

    def _index(self, voice_id: bytes) -> int | None:
        for i in range(len(self.entries) - 1, -1, -1):
            if self.entries[i].voice_id == voice_id:
                return i
        return None

    def entry(self, voice_id: bytes) -> VoiceEntry | None:
        i = self._index(voice_id)
        return None if i is None else self.entries[i]

    def status(self, voice_id: bytes) -> VoiceStatus | None:
        e = self.entry(voice_id)
        return None if e is None else e.status

    def is_active(self, voice_id: bytes) -> bool:
        return self.status(voice_id) == VoiceStatus.ACTIVE

    def active_voices(self) -> list[bytes]:
        latest: dict[bytes, VoiceEntry] = {}
        for e in self.entries:
            latest[e.voice_id] = e
        return sorted(v for v, e in latest.items() if e.status == VoiceStatus.ACTIVE)

    def locked_total(self) -> int:
        return sum(e.deposit for e in self.entries if e.holds_deposit)

    def append(self, entry: VoiceEntry) -> None:
        self.entries.append(entry)

    def update(self, voice_id: bytes, **changes) -> VoiceEntry:
        i = self._index(voice_id)
        if i is None:
            raise VoiceLedgerError(f"unknown voice {voice_id.hex()[:16]}")
        self.entries[i] = replace(self.entries[i], **changes)
        return self.entries[i]

    def encode_into(self, w: Writer) -> None:
        w.u32(len(self.entries))
        for e in self.entries:
            w.blob(e.voice_id).u64(e.joined_at).u64(e.deposit).u8(e.status)
            w.bool(e.exited_at is not None).u64(e.exited_at or 0)
            w.blob(e.exit_tx.encode() if e.exit_tx else b"")
        w.u64(self.total_destroyed)

    @classmethod
    def read(cls, r: Reader) -> "VoiceLedger":
        entries = []
        for _ in range(r.u32()):
            voice_id, joined_at, deposit, status = r.blob(), r.u64(), r.u64(), VoiceStatus(r.u8())
            has_exit, exited_at = r.bool(), r.u64()
            raw_tx = r.blob()
            entries.append(VoiceEntry(voice_id, joined_at, deposit, status,
                                      exited_at if has_exit else None,
                                      Transaction.decode(raw_tx) if raw_tx else None))
        return cls(entries, r.u64())


@dataclass
class LedgerState:
    accounts: dict[bytes, Account] = field(default_factory=dict)
    voices: VoiceLedger = field(default_factory=VoiceLedger)
    params: LedgerParams = field(default_factory=LedgerParams)

    def copy(self) -> "LedgerState":
        return LedgerState(dict(self.accounts), self.voices.copy(), self.params)

    def account(self, account_id: bytes) -> Account:
        return self.accounts.get(account_id, Account())

    def balance(self, account_id: bytes) -> int:
        return self.account(account_id).balance

    def total_spendable(self) -> int:
        return sum(a.balance for a in self.accounts.values())

    def total_money(self) -> int:
        return self.total_spendable() + self.voices.locked_total() + self.voices.total_destroyed

    def encode(self) -> bytes:
        w = Writer()
        ids = sorted(self.accounts)
        w.u32(len(ids))
        for account_id in ids:
            a = self.accounts[account_id]
            w.blob(account_id).u64(a.balance).u64(a.sequence)
        self.voices.encode_into(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes, params: LedgerParams | None = None) -> "LedgerState":
        r = Reader(data)
        accounts = {}
        for _ in range(r.u32()):
            account_id = r.blob()
            accounts[account_id] = Account(r.u64(), r.u64())
        voices = VoiceLedger.read(r)
        r.expect_done()
        return cls(accounts, voices, params or LedgerParams())

    def state_root(self) -> bytes:
        return crypto.digest(self.encode())


def genesis_state(balances: Mapping[bytes, int], voices: Iterable[bytes],
                  params: LedgerParams | None = None) -> LedgerState:
    params = params or LedgerParams()
    state = LedgerState(params=params)
    for account_id, amount in balances.items():
        if amount < 0:
            raise ValueError("genesis balances must be non-negative")
        state.accounts[account_id] = Account(amount, 0)
    for voice in voices:
        if state.voices.is_active(voice):
            raise ValueError("duplicate genesis voice")
        state.voices.append(VoiceEntry(voice, 0, params.deposit))
    return state


# -- validation and application ------------------------------------------

def validate_transaction(state: LedgerState, tx: Transaction, now: int, *, cycle: int = 0,
                         recent_cb_hashes: Sequence[bytes] = ()) -> None:
    """Raise a ``ValidationError`` subclass unless ``tx`` may be applied to ``state``.

    ``recent_cb_hashes`` lists known consensus block hashes, oldest first; only the
    last ``params.cb_window`` of them are acceptable exit references.
    """
    params = state.params
    if not tx.signature_ok():
        raise BadSignature()
    if abs(tx.timestamp - now) > params.timestamp_window_ms:
        raise TimestampOutOfWindow(f"timestamp {tx.timestamp} vs now {now}")
    account = state.account(tx.sender)
    if tx.sequence != account.sequence + 1:
        raise BadSequence(f"expected {account.sequence + 1}, got {tx.sequence}")
    if tx.fee != 0:
        raise MalformedTransaction("fees are not supported")

    if tx.kind == TxKind.TRANSFER:
        if tx.recent_cb_hash or not tx.recipient:
            raise MalformedTransaction("transfer needs a recipient and no CB reference")
        cost = tx.amount
    elif tx.kind == TxKind.VOICE_JOIN:
        if tx.recent_cb_hash or tx.recipient:
            raise MalformedTransaction("join carries neither recipient nor CB reference")
        if tx.amount != params.deposit:
            raise MalformedTransaction(f"join amount must equal the deposit {params.deposit}")
        if state.voices.status(tx.sender) in (VoiceStatus.ACTIVE, VoiceStatus.JAILED):
            raise AlreadyVoice()
        cost = tx.amount
    elif tx.kind == TxKind.VOICE_EXIT:
        if tx.recipient or tx.amount:
            raise MalformedTransaction("exit carries no recipient or amount")
        entry = state.voices.entry(tx.sender)
        if entry is None or entry.status != VoiceStatus.ACTIVE:
            raise NotAVoice()
        if cycle < entry.joined_at + params.lock_cycles:
            raise LockNotElapsed(f"cycle {cycle} < {entry.joined_at + params.lock_cycles}")
        if tx.recent_cb_hash not in list(recent_cb_hashes)[-params.cb_window:]:
            raise StaleCbReference()
        cost = 0
    else:  # pragma: no cover - enum is closed
        raise MalformedTransaction(f"unknown kind {tx.kind}")

    if cost > account.balance:
        raise InsufficientFunds(f"needs {cost}, has {account.balance}")


def apply_in_place(state: LedgerState, tx: Transaction, *, cycle: int = 0) -> None:
    sender = state.account(tx.sender)
    if tx.sequence != sender.sequence + 1:
        raise LedgerInvariantError("sequence out of order")
    if tx.kind == TxKind.TRANSFER:
        if tx.amount > sender.balance:
            raise LedgerInvariantError("overdraft")
        state.accounts[tx.sender] = Account(sender.balance - tx.amount, tx.sequence)
        recipient = state.account(tx.recipient)
        state.accounts[tx.recipient] = replace(recipient, balance=recipient.balance + tx.amount)
    elif tx.kind == TxKind.VOICE_JOIN:
        if tx.amount > sender.balance:
            raise LedgerInvariantError("overdraft")
        state.accounts[tx.sender] = Account(sender.balance - tx.amount, tx.sequence)
        state.voices.append(VoiceEntry(tx.sender, cycle, tx.amount))
    elif tx.kind == TxKind.VOICE_EXIT:
        entry = state.voices.entry(tx.sender)
        if entry is None or entry.status != VoiceStatus.ACTIVE:
            raise LedgerInvariantError("exit of a non-active voice")
        state.voices.update(tx.sender, status=VoiceStatus.EXITED, exited_at=cycle, exit_tx=tx)
        state.accounts[tx.sender] = Account(sender.balance + entry.deposit, tx.sequence)


def apply_transaction(state: LedgerState, tx: Transaction, *, cycle: int = 0) -> LedgerState:
    new = state.copy()
    apply_in_place(new, tx, cycle=cycle)
    return new


def destroy_voice_deposit(ledger: VoiceLedger, voice_id: bytes) -> VoiceLedger:
    entry = ledger.entry(voice_id)
    if entry is None:
        raise VoiceLedgerError("voice not found")
    if entry.status in TERMINAL:
        raise VoiceLedgerError(f"voice already {entry.status.name.lower()}")
    new = ledger.copy()
    new.update(voice_id, status=VoiceStatus.DESTROYED)
    new.total_destroyed += entry.deposit
    return new


def jail_voice(ledger: VoiceLedger, voice_id: bytes) -> VoiceLedger:
    entry = ledger.entry(voice_id)
    if entry is None or entry.status != VoiceStatus.ACTIVE:
        raise VoiceLedgerError("only active voices can be jailed")
    new = ledger.copy()
    new.update(voice_id, status=VoiceStatus.JAILED)
    return new


def pardon_voice(ledger: VoiceLedger, voice_id: bytes) -> VoiceLedger:
    entry = ledger.entry(voice_id)
    if entry is None or entry.status != VoiceStatus.JAILED:
        raise VoiceLedgerError("only jailed voices can be pardoned")
    new = ledger.copy()
    new.update(voice_id, status=VoiceStatus.ACTIVE)
    return new


# -- consensus blocks -----------------------------------------------------

@dataclass(frozen=True)
class ConsensusBlock:
    cb_index: int
    state_root: bytes
    cycle_seed: bytes
    created_at_slot: int
    prior_cb_hash: bytes
    state: LedgerState = field(compare=False, repr=False)

    def header_bytes(self) -> bytes:
        return (
            Writer()
            .u64(self.cb_index)
            .blob(self.state_root)
            .blob(self.cycle_seed)
            .u64(self.created_at_slot)
            .blob(self.prior_cb_hash)
            .getvalue()
        )

    @cached_property
    def hash(self) -> bytes:
        return crypto.digest(self.header_bytes())

    def encode(self) -> bytes:
        """File format: header fields followed by the length-prefixed state."""
        return self.header_bytes() + Writer().blob(self.state.encode()).getvalue()

    @classmethod
    def decode(cls, data: bytes, params: LedgerParams | None = None) -> "ConsensusBlock":
        r = Reader(data)
        cb_index, root, seed, slot, prior = r.u64(), r.blob(), r.blob(), r.u64(), r.blob()
        state = LedgerState.decode(r.blob(), params)
        r.expect_done()
        return cls(cb_index, root, seed, slot, prior, state)

    def verify_root(self) -> bool:
        return self.state.state_root() == self.state_root

    def to_json(self) -> dict:
        s = self.state
        return {
            "cb_index": self.cb_index,
            "hash": self.hash.hex(),
            "state_root": self.state_root.hex(),
            "cycle_seed": self.cycle_seed.hex(),
            "created_at_slot": self.created_at_slot,
            "prior_cb_hash": self.prior_cb_hash.hex(),
            "accounts": {k.hex(): {"balance": a.balance, "sequence": a.sequence}
                         for k, a in sorted(s.accounts.items())},
            "voices": [{"voice_id": e.voice_id.hex(), "joined_at": e.joined_at,
                        "deposit": e.deposit, "status": e.status.name,
                        "exited_at": e.exited_at} for e in s.voices.entries],
            "total_destroyed": s.voices.total_destroyed,
        }


GENESIS_PRIOR = bytes(crypto.DIGEST_SIZE)


def take_snapshot(state: LedgerState, cb_index: int, slot: int, seed: bytes,
                  prior_cb_hash: bytes, params: CycleParams) -> ConsensusBlock:
    if not is_cb_boundary(slot, params):
        raise ValueError(f"slot {slot} is not a consensus block boundary")
    frozen = state.copy()
    return ConsensusBlock(cb_index, frozen.state_root(), seed, slot, prior_cb_hash, frozen)
