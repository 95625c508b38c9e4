"""Per-participant consensus state machine.

A ``NodeState`` owns one participant's view: the record DAG, the ledger
derived from its chosen history, the consensus block chain, schedules, the
transaction pool and fork bookkeeping. Every entry point takes the current
network time explicitly; nothing here reads a clock.
"""
from __future__ import annotations

import enum
import heapq
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

from . import crypto
from .crypto import Commitment, KeyPair
from .encoding import Writer
from .ledger import (
    GENESIS_PRIOR,
    ConsensusBlock,
    LedgerParams,
    LedgerState,
    Transaction,
    TxKind,
    BadSequence,
    ValidationError,
    VoiceStatus,
    apply_in_place,
    destroy_voice_deposit,
    jail_voice,
    pardon_voice,
    take_snapshot,
    validate_transaction,
)
from .records import (
    EquivocationProof,
    InclusionProof,
    InvalidTransactionIncluded,
    Record,
    RecordDag,
    RecordError,
    RecordHeader,
    create_record,
    detect_equivocation,
    validate_record,
    verify_inclusion_proof,
)
from .schedule import (
    CycleParams,
    RevealSet,
    Schedule,
    assign_slots,
    cb_boundary_slot,
    cycle_boundaries,
    cycle_of,
    cycle_start,
    derive_seed,
    penalize_silent_voices,
)

RNG_TAG = b"dca/rng/v1"
NEXT_SEED_TAG = b"dca/seed/next"
FALLBACK_SEED_TAG = b"dca/seed/fallback"


def rng_secret(keys: KeyPair, cycle: int) -> bytes:
    return crypto.digest(RNG_TAG + keys.secret_key + cycle.to_bytes(8, "big", signed=True))


# -- configuration and genesis ---------------------------------------------

@dataclass(frozen=True)
class NodeConfig:
    params: CycleParams
    ledger: LedgerParams = field(default_factory=LedgerParams)
    grace_slots: int = 1
    partition_window: int = 30
    partition_threshold: float = 0.2
    clock_sample_size: int = 5

    @property
    def slot_ms(self) -> int:
        return self.params.slot_ms

    def on_time(self, slot: int, seen_at: int) -> bool:
        return seen_at <= (slot + 1 + self.grace_slots) * self.slot_ms


@dataclass(frozen=True)
class Genesis:
    state: LedgerState
    seed: bytes
    commitments: Mapping[bytes, bytes]  # voice -> commitment opened by its cycle-0 reveal
    params: CycleParams

    @cached_property
    def cb(self) -> ConsensusBlock:
        return take_snapshot(self.state, 0, 0, self.seed, GENESIS_PRIOR, self.params)

    def initial_schedules(self) -> dict[int, Schedule]:
        voices = self.state.voices.active_voices()
        second = crypto.digest(NEXT_SEED_TAG + self.seed)
        return {
            0: assign_slots(voices, self.seed, self.params, 0),
            1: assign_slots(voices, second, self.params, 1),
        }


# -- evidence, outcomes, statuses -----------------------------------------

class ForkState(enum.Enum):
    NONE = "None"
    RESOLVABLE_CONFLICT = "ResolvableConflict"
    UNRESOLVABLE = "UnresolvableFork"


class EvidenceKind(enum.Enum):
    EQUIVOCATION = "Equivocation"
    UNCONFIRMING_DOUBLE_SPEND = "UnconfirmingDoubleSpend"
    COMPETING_HISTORIES = "CompetingHistories"


@dataclass(frozen=True)
class ForkEvidence:
    kind: EvidenceKind
    records: tuple[Record, ...]
    observed_at: tuple[int | None, ...]

    def verify(self) -> bool:
        """Check the evidence from signatures alone."""
        if not all(r.signature_ok() for r in self.records):
            return False
        if self.kind is EvidenceKind.EQUIVOCATION:
            return len(self.records) == 2 and detect_equivocation(*self.records) is not None
        if self.kind is EvidenceKind.UNCONFIRMING_DOUBLE_SPEND:
            if len(self.records) != 2:
                return False
            older, newer = self.records
            keys = {t.conflict_key: t.hash for t in older.transactions}
            return any(keys.get(t.conflict_key, t.hash) != t.hash for t in newer.transactions)
        return len(self.records) >= 1


class Action(enum.Enum):
    ACCEPT_RELAY = "Accept+Relay"
    ACCEPT_NO_RELAY = "Accept+NoRelay"
    REJECT = "Reject"
    FORK_ALARM = "ForkAlarm"
    DUPLICATE = "Duplicate"
    PENDING = "Pending"
    FOREIGN = "Foreign"


@dataclass(frozen=True)
class RecordOutcome:
    action: Action
    reason: str = ""
    evidence: ForkEvidence | None = None
    missing: tuple[bytes, ...] = ()

    @property
    def relay(self) -> bool:
        return self.action in (Action.ACCEPT_RELAY, Action.FORK_ALARM) and self.reason != "double-spend"


@dataclass(frozen=True)
class TxOutcome:
    relay: bool
    status: "TxStatus"


@dataclass(frozen=True)
class TxStatus:
    kind: str  # Unknown | Pending | Confirmed | Secured | Rejected
    record: bytes | None = None
    slot: int | None = None
    depth: int = 0
    reason: str = ""

    @property
    def is_final(self) -> bool:
        return self.kind == "Secured"


UNKNOWN = TxStatus("Unknown")
PENDING = TxStatus("Pending")


class Decision(enum.Enum):
    PRODUCE = "Produce"
    PRODUCE_SAFE = "ProduceSafe"
    ABSTAIN = "Abstain"


@dataclass(frozen=True)
class RecordDecision:
    decision: Decision
    record: Record | None = None
    reason: str = ""


@dataclass
class LedgerEvent:
    """A slashing/jailing step applied to the voice ledger at a slot position."""

    slot: int
    action: str  # destroy | jail | pardon
    voice: bytes
    evidence_kind: str
    evidence: object = None
    settled: bool = False


@dataclass
class Contest:
    """Mutually exclusive records; exactly one stays in the chosen history."""

    kind: str  # equivocation | double_spend
    incumbent: bytes
    challenger: bytes
    incumbent_tx: bytes | None = None
    challenger_tx: bytes | None = None
    settled: bool = False


# -- fork choice -----------------------------------------------------------

class _NeedsExternalInput:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NeedsExternalInput"

    def __bool__(self) -> bool:
        return False


NeedsExternalInput = _NeedsExternalInput()


@dataclass(frozen=True)
class Branch:
    label: str
    records: tuple[Record, ...]

    @cached_property
    def signers(self) -> frozenset[bytes]:
        """Voices with valid signatures on this branch: record creators and exiting voices."""
        out = set()
        for r in self.records:
            if not r.signature_ok():
                continue
            out.add(r.creator)
            for t in r.transactions:
                if t.kind == TxKind.VOICE_EXIT and t.signature_ok():
                    out.add(t.sender)
        return frozenset(out)

    @property
    def divergence_record(self) -> Record | None:
        return min(self.records, key=lambda r: (r.slot, r.hash), default=None)


def fork_choice(branches: Sequence[Branch], first_seen: Mapping[bytes, int] | None = None, *,
                slot_ms: int = 10_000, grace_slots: int = 1,
                view_suspect: bool = False) -> tuple[Branch | _NeedsExternalInput, str]:
    """Pick the honest branch, or report that local evidence cannot decide.

    Returns ``(choice, rule)`` where rule is ``signatures``, ``timing`` or ``undecided``.
    """
    live = [b for b in branches if b.records]
    if len(live) == 1:
        return live[0], "signatures"
    if not live:
        return NeedsExternalInput, "undecided"
    exclusive = []
    for i, b in enumerate(live):
        others = frozenset().union(*(o.signers for j, o in enumerate(live) if j != i))
        exclusive.append(b.signers - others)
    distinguished = [b for b, e in zip(live, exclusive) if e]
    if len(distinguished) == 1:
        return distinguished[0], "signatures"

    if first_seen is not None and not view_suspect:
        heads = [(b, b.divergence_record) for b in live]
        if all(h.hash in first_seen for _, h in heads):
            on_time = [
                (h.slot, first_seen[h.hash], b.label, b) for b, h in heads
                if first_seen[h.hash] <= (h.slot + 1 + grace_slots) * slot_ms
            ]
            if on_time:
                on_time.sort(key=lambda t: t[:3])
                return on_time[0][3], "timing"
    return NeedsExternalInput, "undecided"


class ArbitrationPolicy:
    name = "policy"

    def choose(self, branches: Sequence[Branch]) -> Branch | None:
        raise NotImplementedError


class AutoMajorityOfVoices(ArbitrationPolicy):
    name = "AutoMajorityOfVoices"

    def choose(self, branches: Sequence[Branch]) -> Branch | None:
        ranked = sorted(branches, key=lambda b: len(b.signers), reverse=True)
        if len(ranked) > 1 and len(ranked[0].signers) == len(ranked[1].signers):
            return None
        return ranked[0] if ranked else None


class AlwaysAsk(ArbitrationPolicy):
    name = "AlwaysAsk"

    def __init__(self, operator=None) -> None:
        self.operator = operator

    def choose(self, branches: Sequence[Branch]) -> Branch | None:
        return self.operator(branches) if self.operator else None


class ScriptedAnswer(ArbitrationPolicy):
    name = "ScriptedAnswer"

    def __init__(self, label: str) -> None:
        self.label = label

    def choose(self, branches: Sequence[Branch]) -> Branch | None:
        return next((b for b in branches if b.label == self.label), None)


def make_policy(name: str, answer: str | None = None) -> ArbitrationPolicy:
    if name == "AutoMajorityOfVoices":
        return AutoMajorityOfVoices()
    if name == "AlwaysAsk":
        return AlwaysAsk()
    if name == "ScriptedAnswer":
        return ScriptedAnswer(answer or "local")
    raise ValueError(f"unknown arbitration policy {name!r}")


def depth_capped(dag: RecordDag, h: bytes, cap: int | None = None) -> int:
    """Distinct descendant slots of ``h``, exploring in slot order and stopping at ``cap``."""
    children = dag.children.get(h)
    if not children:
        return 0
    heap = [(dag.records[c].slot, c) for c in children]
    heapq.heapify(heap)
    seen = set(children)
    slots: set[int] = set()
    while heap:
        slot, c = heapq.heappop(heap)
        slots.add(slot)
        if cap is not None and len(slots) >= cap:
            return len(slots)
        for g in dag.children.get(c, ()):
            if g not in seen:
                seen.add(g)
                heapq.heappush(heap, (dag.records[g].slot, g))
    return len(slots)


# -- the node --------------------------------------------------------------

class NodeState:
    def __init__(self, node_id: str, genesis: Genesis, config: NodeConfig,
                 identity: KeyPair | None = None, clock_offset_ms: int = 0) -> None:
        self.node_id = node_id
        self.genesis = genesis
        self.config = config
        self.params = config.params
        self.identity = identity
        self.clock_offset_ms = clock_offset_ms
        self.clock = 0

        self.dag = RecordDag()
        self.cb_chain: list[ConsensusBlock] = [genesis.cb]
        self.schedules: dict[int, Schedule] = genesis.initial_schedules()
        self.schedule_overrides: dict[int, tuple[bytes, ...]] = {}

        self.pending: dict[bytes, Transaction] = {}
        self.seen_order: dict[bytes, int] = {}
        self.tx_first_seen: dict[bytes, int] = {}
        self.rejected: dict[bytes, str] = {}
        self.pool_conflicts: dict[tuple[bytes, int], set[bytes]] = {}

        self.first_seen: dict[bytes, int] = {}
        self.excluded: set[bytes] = set()
        self.abandoned: set[bytes] = set()  # own-branch records given up when rebasing
        self.muted: set[bytes] = set()  # losing copies of equivocated slots: acknowledged, txs ignored
        self.copies: dict[tuple[bytes, int], list[bytes]] = {}
        self.copies_locked: set[tuple[bytes, int]] = set()
        self.history_tips: set[bytes] = set()
        self.foreign: dict[bytes, Record] = {}
        self.foreign_cbs: dict[bytes, ConsensusBlock] = {}
        self.orphans: dict[bytes, Record] = {}
        self.invalid_records: dict[bytes, Record] = {}
        self.contests: list[Contest] = []
        self.vetoed: set[bytes] = set()
        self.ledger_events: list[LedgerEvent] = []

        self.fork_state = ForkState.NONE
        self.fork_evidence: list[ForkEvidence] = []
        self.unresolved: ForkEvidence | None = None
        self.halted = False
        self.ever_unresolvable = False
        self.oracle_calls = 0
        self.fork_outcomes: list[dict] = []
        self.partition_warning = False
        self.warned_slots: set[int] = set()
        self.clock_samples: list[int] = []
        self._top_slot = -1
        self._expect_key: frozenset = frozenset()
        self._expect_cache: dict[int, bool] = {}
        self._sched_cache: dict[tuple[int, int], Schedule] = {}

        self.ledger: LedgerState = genesis.state.copy()
        self.applied: dict[bytes, bytes] = {}  # tx hash -> record hash
        self.applied_keys: dict[tuple[bytes, int], bytes] = {}
        self.tx_slot: dict[bytes, int] = {}
        self.secured: set[bytes] = set()
        self.watched: set[bytes] = set()
        self._last_key: tuple[int, bytes] = (-1, b"")
        self.violations: list[dict] = []
        self.outbox: list[dict] = []

    # -- derived views -----------------------------------------------------

    @property
    def latest_cb(self) -> ConsensusBlock:
        return self.cb_chain[-1]

    @property
    def base_slot(self) -> int:
        return cycle_start(self.latest_cb.cb_index, self.params)

    @property
    def jailed(self) -> set[bytes]:
        latest: dict[bytes, VoiceStatus] = {}
        for e in self.ledger.voices.entries:
            latest[e.voice_id] = e.status
        return {v for v, s in latest.items() if s == VoiceStatus.JAILED}

    def local_time(self, now: int) -> int:
        return now + self.clock_offset_ms

    def current_slot(self) -> int:
        return max(0, self.local_time(self.clock)) // self.config.slot_ms

    def schedule_for(self, slot: int) -> Schedule | None:
        cycle = cycle_of(slot, self.params)
        sched = self.schedules.get(cycle)
        if sched is not None and self.schedule_overrides:
            key = (cycle, len(self.schedule_overrides))
            cached = self._sched_cache.get(key)
            if cached is None or cached.seed != sched.seed:
                cached = self._sched_cache[key] = sched.with_override(self.schedule_overrides)
            sched = cached
        return sched

    def cb_hashes(self) -> list[bytes]:
        return [cb.hash for cb in self.cb_chain]

    def cb_hashes_at(self, slot: int) -> list[bytes]:
        return [cb.hash for cb in self.cb_chain if cb.created_at_slot <= slot]

    def in_history(self, h: bytes) -> bool:
        return h in self.dag.records and h not in self.excluded

    def history(self) -> Iterable[bytes]:
        return (h for h in self.dag.records if h not in self.excluded)

    def _emit(self, kind: str, **fields) -> None:
        self.outbox.append({"kind": kind, **fields})

    def drain(self) -> list[dict]:
        out, self.outbox = self.outbox, []
        return out

    def depth(self, h: bytes, cap: int | None = None) -> int:
        return depth_capped(self.dag, h, cap)

    # -- ledger replay -------------------------------------------------------

    def _sorted_history(self, lo: int, hi: int | None = None) -> list[bytes]:
        hs = [h for h in self.history() if self.dag.records[h].slot >= lo
              and (hi is None or self.dag.records[h].slot < hi)]
        hs.sort(key=lambda h: (self.dag.records[h].slot, h))
        return hs

    def _replay(self, base: ConsensusBlock, lo: int, hi: int | None = None):
        state = base.state.copy()
        applied: dict[bytes, bytes] = {}
        events = sorted(
            (max(ev.slot, lo), i, ev) for i, ev in enumerate(self.ledger_events)
            if not ev.settled and (hi is None or max(ev.slot, lo) < hi)
        )
        ei = 0
        last_key = (lo - 1, b"")
        for h in self._sorted_history(lo, hi):
            r = self.dag.records[h]
            while ei < len(events) and events[ei][0] < r.slot:
                self._apply_event(state, events[ei][2])
                ei += 1
            self._apply_record_txs(state, r, applied)
            last_key = (r.slot, h)
        while ei < len(events):
            self._apply_event(state, events[ei][2])
            ei += 1
        return state, applied, last_key

    def _apply_record_txs(self, state: LedgerState, r: Record, applied: dict[bytes, bytes]) -> None:
        if not r.transactions or r.hash in self.muted:
            return
        cycle = cycle_of(r.slot, self.params)
        recent = self.cb_hashes_at(r.slot)
        for tx in r.transactions:
            if tx.hash in self.vetoed or tx.hash in applied:
                continue
            try:
                validate_transaction(state, tx, r.slot * self.config.slot_ms, cycle=cycle,
                                     recent_cb_hashes=recent)
            except ValidationError:
                continue
            apply_in_place(state, tx, cycle=cycle)
            applied[tx.hash] = r.hash

    @staticmethod
    def _apply_event(state: LedgerState, ev: LedgerEvent) -> None:
        status = state.voices.status(ev.voice)
        if ev.action == "destroy" and status in (VoiceStatus.ACTIVE, VoiceStatus.JAILED):
            state.voices = destroy_voice_deposit(state.voices, ev.voice)
        elif ev.action == "jail" and status == VoiceStatus.ACTIVE:
            state.voices = jail_voice(state.voices, ev.voice)
        elif ev.action == "pardon" and status == VoiceStatus.JAILED:
            state.voices = pardon_voice(state.voices, ev.voice)

    def _rebuild(self, now: int) -> None:
        state, applied, last_key = self._replay(self.latest_cb, self.base_slot)
        self._install(state, applied, last_key, now)

    def _install(self, state: LedgerState, applied: dict[bytes, bytes],
                 last_key: tuple[int, bytes], now: int) -> None:
        old = self.applied
        reverted: list[Transaction] = []
        for tx_hash in [t for t in old if t not in applied and self.tx_slot.get(t, -1) >= self.base_slot]:
            if tx_hash in self.secured and not self.ever_unresolvable:
                self.violations.append({"tx": tx_hash.hex(), "time": now})
                self._emit("secured_violation", tx=tx_hash.hex())
            self.secured.discard(tx_hash)
            self._emit("tx_reverted", tx=tx_hash.hex(), record=old[tx_hash].hex())
            self.rejected.setdefault(tx_hash, "DoubleSpent")
            reverted.extend(t for t in self.dag.records[old[tx_hash]].transactions if t.hash == tx_hash)
        # Transactions settled into the latest CB stay applied.
        kept = {t: r for t, r in old.items() if self.tx_slot.get(t, -1) < self.base_slot}
        for tx_hash, rh in applied.items():
            if old.get(tx_hash) != rh:
                self._note_confirmed(tx_hash, rh, now)
        kept.update(applied)
        self.applied = kept
        self.ledger = state
        self._last_key = last_key
        self.applied_keys = {}
        for tx_hash, rh in self.applied.items():
            r = self.dag.records.get(rh)
            if r is None:
                continue
            for t in r.transactions:
                if t.hash == tx_hash:
                    self.applied_keys[t.conflict_key] = tx_hash
        self._repool(reverted)
        self._recompute_tips()

    def _repool(self, txs: Iterable[Transaction]) -> None:
        """Return unapplied transactions to the pool unless their funds were spent elsewhere."""
        for tx in txs:
            if tx.hash in self.applied or tx.conflict_key in self.applied_keys or tx.hash in self.vetoed:
                continue
            if tx.sequence <= self.ledger.account(tx.sender).sequence:
                continue
            self.pending[tx.hash] = tx
            self.rejected.pop(tx.hash, None)

    def _note_confirmed(self, tx_hash: bytes, record_hash: bytes, now: int) -> None:
        r = self.dag.records[record_hash]
        self.tx_slot[tx_hash] = r.slot
        self.pending.pop(tx_hash, None)
        self.rejected.pop(tx_hash, None)
        self.watched.add(record_hash)
        self._emit("tx_confirmed", tx=tx_hash.hex(), record=record_hash.hex(), slot=r.slot, time=now)

    def _recompute_tips(self) -> None:
        hist = set(self.history())
        acked = {a for h in hist for a in self.dag.records[h].acknowledged}
        self.history_tips = hist - acked

    # -- transactions --------------------------------------------------------

    def on_receive_transaction(self, tx: Transaction, now: int) -> TxOutcome:
        self.clock = max(self.clock, now)
        h = tx.hash
        if h in self.tx_first_seen:
            return TxOutcome(False, self.transaction_status(h))
        self.tx_first_seen[h] = now
        self.seen_order[h] = len(self.seen_order)
        key = tx.conflict_key

        rival = self.applied_keys.get(key)
        pooled_rival = next((p for p in self.pending.values() if p.conflict_key == key), None)
        if rival is not None or pooled_rival is not None:
            other = rival or pooled_rival.hash
            self.pool_conflicts.setdefault(key, set()).update({other, h})
            self.rejected[h] = "ConflictingDoubleSpend"
            self._emit("tx_conflict", tx=h.hex(), rival=other.hex())
            return TxOutcome(False, self.transaction_status(h))

        scratch = self.ledger.copy()
        same_sender = sorted((p for p in self.pending.values() if p.sender == tx.sender),
                             key=lambda p: p.sequence)
        cycle = cycle_of(self.current_slot(), self.params)
        local_now = self.local_time(now)
        for p in same_sender:
            if p.sequence >= tx.sequence:
                break
            try:
                validate_transaction(scratch, p, local_now, cycle=cycle, recent_cb_hashes=self.cb_hashes())
                apply_in_place(scratch, p, cycle=cycle)
            except ValidationError:
                break
        try:
            validate_transaction(scratch, tx, local_now, cycle=cycle, recent_cb_hashes=self.cb_hashes())
        except BadSequence:
            # Out-of-order arrival: keep a later sequence number for when its predecessor shows up.
            if tx.sequence <= scratch.account(tx.sender).sequence:
                self.rejected[h] = "BadSequence"
                return TxOutcome(False, self.transaction_status(h))
        except ValidationError as exc:
            self.rejected[h] = exc.code
            return TxOutcome(False, self.transaction_status(h))
        self.pending[h] = tx
        return TxOutcome(True, PENDING)

    def transaction_status(self, tx_hash: bytes) -> TxStatus:
        rh = self.applied.get(tx_hash)
        if rh is not None:
            r = self.dag.records.get(rh)
            slot = r.slot if r is not None else self.tx_slot.get(tx_hash)
            if tx_hash in self.secured:
                return TxStatus("Secured", rh, slot, self.depth(rh, None) if r is not None else 0)
            d = self.depth(rh, self.params.confirm_depth) if r is not None else 0
            if d >= self.params.confirm_depth:
                return TxStatus("Secured", rh, slot, d)
            return TxStatus("Confirmed", rh, slot, d)
        if tx_hash in self.pending:
            return PENDING
        if tx_hash in self.rejected:
            return TxStatus("Rejected", reason=self.rejected[tx_hash])
        return UNKNOWN

    # -- records ---------------------------------------------------------------

    def _ancestry_state(self, record: Record) -> LedgerState:
        if set(record.acknowledged) == self.history_tips and not self.vetoed:
            return self.ledger
        return self.state_for_tips(record.acknowledged)

    def state_for_tips(self, tips: Iterable[bytes]) -> LedgerState:
        """Ledger state seen by a record acknowledging ``tips``: the CB state plus its ancestry."""
        base = self.base_slot
        seen: set[bytes] = set()
        stack = [a for a in tips if a in self.dag.records]
        while stack:
            h = stack.pop()
            if h in seen:
                continue
            r = self.dag.records[h]
            if r.slot < base:
                continue
            seen.add(h)
            stack.extend(r.acknowledged)
        state = self.latest_cb.state.copy()
        for h in sorted(seen, key=lambda x: (self.dag.records[x].slot, x)):
            r = self.dag.records[h]
            if h in self.muted:
                continue
            cycle = cycle_of(r.slot, self.params)
            for tx in r.transactions:
                try:
                    validate_transaction(state, tx, r.slot * self.config.slot_ms, cycle=cycle,
                                         recent_cb_hashes=self.cb_hashes_at(r.slot))
                except ValidationError:
                    continue
                apply_in_place(state, tx, cycle=cycle)
        return state

    def commitment_of(self, voice: bytes, cycle: int) -> bytes | None:
        if cycle < 0:
            return self.genesis.commitments.get(voice)
        lo, hi = cycle_start(cycle, self.params), cycle_start(cycle + 1, self.params)
        best = None
        for slot in range(lo, hi):
            for h in self.dag.by_slot.get(slot, ()):
                r = self.dag.records[h]
                if r.creator == voice and h not in self.excluded:
                    if best is None or h < best[0]:
                        best = (h, r.rng_commitment.digest)
            if best is not None:
                return best[1]
        return None

    def _note_clock(self, record: Record, now: int) -> None:
        # Only the newest records say anything about our clock; old ones are just catch-up.
        if record.slot < self._top_slot:
            return
        self._top_slot = record.slot
        delta = self.local_time(now) - record.created_at
        self.clock_samples.append(delta)
        del self.clock_samples[:-self.config.clock_sample_size]

    @property
    def clock_confused(self) -> bool:
        samples = self.clock_samples
        if len(samples) < self.config.clock_sample_size:
            return False
        far = sum(1 for d in samples if abs(d) > self.config.slot_ms)
        return far * 2 > len(samples)

    def on_receive_record(self, record: Record, now: int) -> RecordOutcome:
        self.clock = max(self.clock, now)
        h = record.hash
        if h in self.dag.records or h in self.foreign or h in self.invalid_records or h in self.orphans:
            return RecordOutcome(Action.DUPLICATE)
        self.first_seen[h] = now
        self._note_clock(record, now)
        outcome = self._process_record(record, now)
        if outcome.action not in (Action.PENDING, Action.DUPLICATE):
            self._retry_orphans(now)
        return outcome

    def _retry_orphans(self, now: int) -> None:
        progress = True
        while progress and self.orphans:
            progress = False
            for oh, rec in sorted(self.orphans.items(), key=lambda kv: (kv[1].slot, kv[0])):
                if all(a in self.dag.records or a in self.foreign for a in rec.acknowledged):
                    del self.orphans[oh]
                    out = self._process_record(rec, now)
                    self._emit("record", record=oh.hex(), slot=rec.slot,
                               action=out.action.value, reason=out.reason, deferred=True)
                    progress = True

    def _process_record(self, record: Record, now: int) -> RecordOutcome:
        h = record.hash
        known_voice = self.ledger.voices.entry(record.creator) is not None
        if any(a in self.foreign for a in record.acknowledged) or record.prior_cb_hash in self.foreign_cbs:
            return self._take_foreign(record, now, "foreign-ancestry")
        if record.prior_cb_hash not in set(self.cb_hashes()):
            if record.signature_ok() and known_voice:
                return self._take_foreign(record, now, "unknown-cb")
            return RecordOutcome(Action.REJECT, "UnknownCb")
        if record.slot < self.base_slot:
            return self._take_foreign(record, now, "stale")
        missing = tuple(a for a in record.acknowledged if a not in self.dag.records)
        if missing:
            self.orphans[h] = record
            return RecordOutcome(Action.PENDING, "missing-parents", missing=missing)

        # Equivocation first: the creator may already be slashed for an earlier copy.
        rivals = [x for x in self.dag.by_slot.get(record.slot, ())
                  if self.dag.records[x].creator == record.creator]
        schedule = self.schedule_for(record.slot)
        cycle = cycle_of(record.slot, self.params)
        state = self._ancestry_state(record) if record.transactions else None
        try:
            validate_record(
                self.dag, record, schedule, state,
                known_cbs=self.cb_hashes(), slot_ms=self.config.slot_ms, cycle=cycle,
                recent_cb_hashes=self.cb_hashes_at(record.slot),
                prior_commitment=self.commitment_of(record.creator, cycle - 1),
            )
        except InvalidTransactionIncluded as exc:
            self.invalid_records[h] = record
            self._slash(record.creator, record.slot, "invalid_tx", record, now)
            return RecordOutcome(Action.REJECT, exc.code)
        except RecordError as exc:
            return RecordOutcome(Action.REJECT, exc.code)

        if rivals:
            proof = detect_equivocation(self.dag.records[rivals[0]], record)
            if proof is not None:
                return self._equivocation(record, rivals, proof, now)

        status = self.ledger.voices.status(record.creator)
        if status != VoiceStatus.ACTIVE:
            return RecordOutcome(Action.REJECT, f"creator {status.name if status is not None else 'unknown'}")

        for tx in record.transactions:
            rival = self.applied_keys.get(tx.conflict_key)
            if rival is not None and rival != tx.hash:
                return self._double_spend(record, tx, rival, now)

        self.dag.add(record)
        self._admit(record, now)
        on_time = self.config.on_time(record.slot, now)
        return RecordOutcome(Action.ACCEPT_RELAY, "" if on_time else "late")

    def _take_foreign(self, record: Record, now: int, why: str) -> RecordOutcome:
        self.foreign[record.hash] = record
        if why == "stale":
            return RecordOutcome(Action.FOREIGN, why)
        ev = ForkEvidence(EvidenceKind.COMPETING_HISTORIES, (record,), (now,))
        if self.unresolved is None or self.unresolved.kind is not EvidenceKind.COMPETING_HISTORIES:
            self._raise_unresolvable(ev, now)
            return RecordOutcome(Action.FORK_ALARM, why, evidence=ev)
        return RecordOutcome(Action.FOREIGN, why)

    def _admit(self, record: Record, now: int) -> None:
        """Add an accepted record to the chosen history and advance the ledger."""
        h = record.hash
        self.history_tips.difference_update(record.acknowledged)
        self.history_tips.add(h)
        if h in self.muted:
            self._repool(record.transactions)
            self._after_insert(now)
            return
        key = (record.slot, h)
        pending_events = any(not ev.settled and max(ev.slot, self.base_slot) >= record.slot
                             for ev in self.ledger_events)
        if key > self._last_key and not pending_events:
            applied: dict[bytes, bytes] = {}
            self._apply_record_txs(self.ledger, record, applied)
            for tx_hash, rh in applied.items():
                self.applied[tx_hash] = rh
                for t in record.transactions:
                    if t.hash == tx_hash:
                        self.applied_keys[t.conflict_key] = tx_hash
                self._note_confirmed(tx_hash, rh, now)
            self._last_key = key
        else:
            self._rebuild(now)
        for tx in record.transactions:
            self.pending.pop(tx.hash, None)
            if tx.hash not in self.applied:
                self.rejected.setdefault(tx.hash, "NotApplied")
        # Pool entries made stale by the record.
        for ph, p in list(self.pending.items()):
            if p.conflict_key in self.applied_keys and self.applied_keys[p.conflict_key] != ph:
                del self.pending[ph]
                self.rejected[ph] = "ConflictingDoubleSpend"
        self._after_insert(now)

    def _after_insert(self, now: int) -> None:
        self._evaluate_contests(now)
        cap = self.params.confirm_depth
        for rh in sorted(self.watched):
            if rh not in self.dag.records:
                self.watched.discard(rh)
                continue
            if self.depth(rh, cap) >= cap:
                self.watched.discard(rh)
                for tx_hash, owner in self.applied.items():
                    if owner == rh and tx_hash not in self.secured:
                        self.secured.add(tx_hash)
                        self._emit("tx_secured", tx=tx_hash.hex(), record=rh.hex(), time=now)

    def _equivocation(self, record: Record, rivals: list[bytes], proof: EquivocationProof,
                      now: int) -> RecordOutcome:
        """Keep every copy as an acknowledged vertex but apply the transactions of one.

        Until some copy is buried ``confirm_depth`` deep the lowest hash is canonical, so
        nodes holding the same copies agree whatever order they arrived in. The first copy
        to reach that depth is locked in (see ``_settle_copies``).
        """
        key = (record.creator, record.slot)
        group = self.copies.setdefault(key, [h for h in rivals if h in self.dag.records])
        before = self._canonical(key)
        self.dag.add(record)
        group.append(record.hash)
        if key not in self.copies_locked:
            self._settle_copies(key)
        if key not in self.copies_locked:
            self._make_canonical(key, min(group))
        else:
            self.muted.add(record.hash)
        incumbent = rivals[0]
        self.contests.append(Contest("equivocation", incumbent, record.hash, settled=True))
        ev = ForkEvidence(EvidenceKind.EQUIVOCATION, (self.dag.records[incumbent], record),
                          (self.first_seen.get(incumbent), now))
        self.fork_evidence.append(ev)
        self._emit("fork_alarm", evidence=ev.kind.value, slot=record.slot,
                   creator=record.creator.hex()[:16],
                   records=[incumbent.hex(), record.hash.hex()])
        self._slash(record.creator, record.slot, "equivocation", proof, now)
        if self._canonical(key) != before:
            self._switch_copy(before, self._canonical(key), now)
            self._after_insert(now)
        else:
            self._admit(record, now)
        return RecordOutcome(Action.FORK_ALARM, "equivocation", evidence=ev)

    def _canonical(self, key: tuple[bytes, int]) -> bytes | None:
        return next((h for h in self.copies[key] if h not in self.muted), None)

    def _make_canonical(self, key: tuple[bytes, int], winner: bytes) -> None:
        self.muted.update(h for h in self.copies[key] if h != winner)
        self.muted.discard(winner)

    def _settle_copies(self, key: tuple[bytes, int]) -> bool:
        """Lock the group once a copy is deep enough; True if the canonical copy changed."""
        cap = self.params.confirm_depth
        deep = [h for h in self.copies[key] if self.depth(h, cap) >= cap]
        if not deep:
            return False
        self.copies_locked.add(key)
        current = self._canonical(key)
        if current in deep:
            return False
        self._make_canonical(key, min(deep))
        return True

    def _switch_copy(self, old: bytes | None, new: bytes, now: int) -> None:
        self._emit("contest_switched", contest="equivocation",
                   incumbent=old.hex() if old else "", challenger=new.hex())
        self._rebuild(now)
        if old is not None:
            self._repool(self.dag.records[old].transactions)

    def _double_spend(self, record: Record, tx: Transaction, rival_tx: bytes,
                      now: int) -> RecordOutcome:
        incumbent = self.applied[rival_tx]
        self.dag.add(record)
        self.excluded.add(record.hash)
        inc_record = self.dag.records[incumbent]
        ev = ForkEvidence(EvidenceKind.UNCONFIRMING_DOUBLE_SPEND, (inc_record, record),
                          (self.first_seen.get(incumbent), now))
        self.fork_evidence.append(ev)
        if rival_tx in self.secured or self.depth(incumbent, self.params.confirm_depth) >= self.params.confirm_depth:
            self.contests.append(Contest("double_spend", incumbent, record.hash, rival_tx, tx.hash, settled=True))
            self._raise_unresolvable(ev, now)
            self._after_insert(now)
            return RecordOutcome(Action.FORK_ALARM, "double-spend", evidence=ev)
        self.contests.append(Contest("double_spend", incumbent, record.hash, rival_tx, tx.hash))
        if self.fork_state is ForkState.NONE:
            self.fork_state = ForkState.RESOLVABLE_CONFLICT
        self._emit("double_spend_refused", record=record.hash.hex(), slot=record.slot,
                   tx=tx.hash.hex(), rival=rival_tx.hex())
        self._after_insert(now)
        return RecordOutcome(Action.ACCEPT_NO_RELAY, "double-spend")

    def _evaluate_contests(self, now: int) -> None:
        cap = self.params.confirm_depth
        changed = False
        for key in sorted(self.copies):
            if key in self.copies_locked:
                continue
            old = self._canonical(key)
            if self._settle_copies(key):
                self._switch_copy(old, self._canonical(key), now)
        for c in self.contests:
            if c.settled:
                continue
            if c.incumbent not in self.dag.records or c.challenger not in self.dag.records:
                continue
            d_inc = self.depth(c.incumbent, cap)
            if d_inc >= cap or c.incumbent_tx in self.secured:
                # The incumbent secured first: the late record stays out for good.
                c.settled = True
                changed = changed or self.fork_state is ForkState.RESOLVABLE_CONFLICT
                continue
            if self.depth(c.challenger, cap) < cap:
                continue
            # The network has ordered the challenger: adopt it.
            c.settled = True
            self.excluded.discard(c.challenger)
            if c.incumbent_tx is not None:
                self.vetoed.add(c.incumbent_tx)
            self._emit("contest_switched", contest=c.kind, incumbent=c.incumbent.hex(),
                       challenger=c.challenger.hex())
            changed = True
        if changed:
            if self.fork_state is ForkState.RESOLVABLE_CONFLICT and all(c.settled for c in self.contests):
                self.fork_state = ForkState.NONE
            self._rebuild(now)

    def _raise_unresolvable(self, ev: ForkEvidence, now: int) -> None:
        self.fork_evidence.append(ev)
        self.fork_state = ForkState.UNRESOLVABLE
        self.ever_unresolvable = True
        if self.unresolved is None:
            self.unresolved = ev
        self._emit("fork_alarm", evidence=ev.kind.value, unresolvable=True,
                   records=[r.hash.hex() for r in ev.records])

    def _slash(self, voice: bytes, slot: int, kind: str, evidence, now: int,
               action: str = "destroy") -> None:
        if any(ev.voice == voice and ev.action == action and ev.evidence_kind == kind
               for ev in self.ledger_events):
            return
        self.ledger_events.append(LedgerEvent(slot, action, voice, kind, evidence))
        self._emit("slash" if action == "destroy" else "jail", voice=voice.hex(),
                   evidence_kind=kind, slot=slot, evidence_ref=_evidence_ref(evidence))
        self._rebuild(now)

    # -- consensus blocks and slot ticks --------------------------------------

    def on_receive_cb(self, cb: ConsensusBlock) -> bool:
        if cb.hash in set(self.cb_hashes()) or cb.hash in self.foreign_cbs:
            return False
        if not cb.verify_root():
            return False
        self.foreign_cbs[cb.hash] = cb
        return True

    def tick(self, slot: int, now: int, policy: ArbitrationPolicy | None = None) -> None:
        """Advance to the start of ``slot``."""
        self.clock = max(self.clock, now)
        info = cycle_boundaries(slot, self.params)
        if info.is_cb_boundary and slot > 0 and self.latest_cb.created_at_slot < slot:
            self._take_cb(info.cycle_index, slot, now)
        warning = self.detect_partition(slot)
        if warning != self.partition_warning:
            self._emit("partition_warning", on=warning, slot=slot)
        self.partition_warning = warning
        if warning:
            self.warned_slots.add(slot)
        if self.fork_state is ForkState.UNRESOLVABLE and not self.halted and policy is not None:
            self.jail_and_arbitrate(policy, now)

    def _take_cb(self, cb_index: int, slot: int, now: int) -> None:
        params = self.params
        closed = cb_index - 1
        lo, hi = cycle_start(closed, params), cycle_start(cb_index, params)
        records = [self.dag.records[h] for s in range(lo, hi) for h in self.dag.by_slot.get(s, ())
                   if h not in self.invalid_records and h not in self.abandoned]
        schedule = self.schedules.get(closed)
        scheduled = set(v for row in schedule.assignment for v in row) if schedule else set()
        # Judge silence against the cycle's own closing state, not later jailings.
        closing, _, _ = self._replay(self.latest_cb, self.base_slot, hi)
        active = [v for v in sorted(scheduled) if closing.voices.is_active(v)]
        silent = penalize_silent_voices(records, active)
        warned = any(lo <= s < hi + params.cycle_lag_slots for s in self.warned_slots)
        for v in sorted(silent):
            evidence = {"cycle": closed, "slots": schedule.slots_of(v) if schedule else []}
            self._slash(v, hi - 1, "silence_under_partition" if warned else "silence",
                        evidence, now, action="jail" if warned else "destroy")

        reveals: dict[bytes, bytes] = {}
        for h in self._sorted_history(lo, hi):
            r = self.dag.records[h]
            if r.rng_reveal and r.creator not in reveals:
                prior = self.commitment_of(r.creator, closed - 1)
                if prior is not None and crypto.open_commitment(Commitment(prior), r.rng_reveal):
                    reveals[r.creator] = r.rng_reveal
        if reveals:
            seed = derive_seed(RevealSet(closed, reveals, frozenset(set(active) - set(reveals))))
        else:
            seed = crypto.digest(FALLBACK_SEED_TAG + self.latest_cb.cycle_seed)

        state, _, _ = self._replay(self.latest_cb, self.base_slot, hi)
        cb = take_snapshot(state, cb_index, slot, seed, self.latest_cb.hash, params)
        self._audit(cb.state, now, where="cb")
        self.cb_chain.append(cb)
        for ev in self.ledger_events:
            if max(ev.slot, lo) < hi:
                ev.settled = True
        self.schedules[cb_index + 1] = assign_slots(
            cb.state.voices.active_voices() or self.latest_cb.state.voices.active_voices(),
            seed, params, cb_index + 1)
        self._emit("cb", index=cb_index, hash=cb.hash.hex(), state_root=cb.state_root.hex(),
                   seed=seed.hex(), reveals=len(reveals))
        self._rebuild(now)
        self._audit(self.ledger, now, where="ledger")

    def _audit(self, state: LedgerState, now: int, where: str) -> None:
        total = self.genesis.state.total_money()
        if state.total_money() != total or any(a.balance < 0 for a in state.accounts.values()):
            self.violations.append({"conservation": where, "time": now})
            self._emit("conservation_violation", where=where)

    def detect_partition(self, slot: int) -> bool:
        window = self.config.partition_window
        active = frozenset(self.ledger.voices.active_voices())
        if active != self._expect_key:
            self._expect_key, self._expect_cache = active, {}
        expected = missing = 0
        for s in range(max(0, slot - window), slot):
            exp = self._expect_cache.get(s)
            if exp is None:
                sched = self.schedule_for(s)
                exp = sched is not None and any(v in active for v in sched.voices_for(s))
                self._expect_cache[s] = exp
            if exp:
                expected += 1
                if not self.dag.by_slot.get(s):
                    missing += 1
        if expected == 0:
            return False
        return missing / expected > self.config.partition_threshold

    # -- production ------------------------------------------------------------

    def decide_record_action(self, slot: int, now: int) -> RecordDecision:
        me = self.identity
        if me is None:
            return RecordDecision(Decision.ABSTAIN, reason="observer")
        sched = self.schedule_for(slot)
        if sched is None or me.public_key not in sched.voices_for(slot):
            return RecordDecision(Decision.ABSTAIN, reason="not scheduled")
        status = self.ledger.voices.status(me.public_key)
        if status != VoiceStatus.ACTIVE:
            return RecordDecision(Decision.ABSTAIN, reason=f"voice {status.name if status is not None else 'unknown'}")
        safe_reason = ""
        if self.clock_confused:
            safe_reason = "clock confused"
        elif self.fork_state is ForkState.UNRESOLVABLE:
            safe_reason = "unresolved fork"
        elif self._recent_gap(slot) and self._pool_conflict():
            safe_reason = "missing record with conflicting transactions"
        record = self._build(slot, now, safe=bool(safe_reason))
        if safe_reason:
            return RecordDecision(Decision.PRODUCE_SAFE, record, safe_reason)
        return RecordDecision(Decision.PRODUCE, record)

    def _recent_gap(self, slot: int) -> bool:
        for s in range(max(0, slot - self.params.confirm_depth), slot):
            sched = self.schedule_for(s)
            if sched and any(self.ledger.voices.is_active(v) for v in sched.voices_for(s)) \
                    and not self.dag.by_slot.get(s):
                return True
        return False

    def _pool_conflict(self) -> bool:
        return any(any(h in self.pending for h in hs) for hs in self.pool_conflicts.values())

    def rng_fields(self, slot: int) -> tuple[Commitment, bytes]:
        me = self.identity
        cycle = cycle_of(slot, self.params)
        commitment = crypto.commit(rng_secret(me, cycle))
        reveal = b""
        if self.commitment_of(me.public_key, cycle - 1) is not None:
            reveal = rng_secret(me, cycle - 1)
        return commitment, reveal

    def _build(self, slot: int, now: int, *, safe: bool = False,
               tips: Iterable[bytes] | None = None, pending: Sequence[Transaction] | None = None) -> Record:
        me = self.identity
        commitment, reveal = self.rng_fields(slot)
        if tips is None:
            tips = [t for t in self.history_tips if self.dag.records[t].slot < slot]
        if pending is None:
            cutoff = slot * self.config.slot_ms
            pending = [t for t in self.pending.values() if t.timestamp < cutoff]
        return create_record(
            slot=slot, keys=me, tips=tips, prior_cb_hash=self.latest_cb.hash,
            schedule=self.schedule_for(slot), pending=pending, state=self.ledger,
            created_at=self.local_time(now), rng_commitment=commitment, rng_reveal=reveal,
            slot_ms=self.config.slot_ms, cycle=cycle_of(slot, self.params),
            recent_cb_hashes=self.cb_hashes_at(slot), safe=safe,
        )

    # -- forks -------------------------------------------------------------------

    def branches_for(self, ev: ForkEvidence) -> list[Branch]:
        dag = self.dag
        if ev.kind is EvidenceKind.COMPETING_HISTORIES:
            foreign = sorted(self.foreign.values(), key=lambda r: (r.slot, r.hash))
            if not foreign:
                return [Branch("local", ())]
            start = foreign[0].slot
            local = [dag.records[h] for h in self._sorted_history(start)]
            return [Branch("local", tuple(local)), Branch("foreign", tuple(foreign))]
        inc, ch = ev.records[0].hash, ev.records[1].hash
        inc_side = ({inc} | dag.descendants(inc)) - dag.descendants(ch) - {ch}
        ch_side = ({ch} | dag.descendants(ch)) - dag.descendants(inc) - {inc}
        return [
            Branch("local", tuple(dag.records[h] for h in sorted(inc_side))),
            Branch("challenger", tuple(dag.records[h] for h in sorted(ch_side))),
        ]

    def jail_and_arbitrate(self, policy: ArbitrationPolicy, now: int) -> str:
        """Settle an unresolvable fork: choose a branch, jail its opponents' exclusive voices."""
        ev = self.unresolved
        if self.fork_state is not ForkState.UNRESOLVABLE or ev is None:
            return "nothing to do"
        branches = self.branches_for(ev)
        div = min((r.slot for b in branches for r in b.records), default=0)
        suspect = any(s >= div for s in self.warned_slots) or self.partition_warning
        choice, rule = fork_choice(branches, self.first_seen, slot_ms=self.config.slot_ms,
                                   grace_slots=self.config.grace_slots, view_suspect=suspect)
        if choice is NeedsExternalInput:
            self.oracle_calls += 1
            picked = policy.choose(branches)
            if picked is None:
                self.halted = True
                self.fork_outcomes.append({"evidence": ev.kind.value, "choice": "NeedsExternalInput",
                                           "rule": "oracle-declined", "time": now})
                self._emit("arbitration", choice="NeedsExternalInput", policy=policy.name)
                return "halted"
            choice, rule = picked, f"oracle:{policy.name}"
        self._adopt(ev, branches, choice, now)
        self.fork_outcomes.append({
            "evidence": ev.kind.value, "choice": choice.label, "rule": rule, "time": now,
            "signers": sorted(s.hex() for s in choice.signers),
        })
        self._emit("arbitration", choice=choice.label, rule=rule)
        return choice.label

    def _adopt(self, ev: ForkEvidence, branches: list[Branch], winner: Branch, now: int) -> None:
        losers = [b for b in branches if b is not winner]
        loser_signers = frozenset().union(*(b.signers for b in losers)) if losers else frozenset()
        jail = loser_signers - winner.signers
        if ev.kind is EvidenceKind.COMPETING_HISTORIES:
            if winner.label == "foreign":
                self._rebase_onto_foreign(winner, now)
            else:
                self.foreign.clear()
        else:
            win_hashes = {r.hash for r in winner.records}
            for b in losers:
                for r in b.records:
                    self.excluded.add(r.hash)
            for r in winner.records:
                self.excluded.discard(r.hash)
            for c in self.contests:
                if {c.incumbent, c.challenger} <= set(self.dag.records):
                    c.settled = True
                    if c.challenger in win_hashes and c.incumbent_tx is not None:
                        self.vetoed.add(c.incumbent_tx)
        slot = self.current_slot()
        for v in sorted(jail):
            status = self.ledger.voices.status(v)
            if status == VoiceStatus.ACTIVE:
                self.ledger_events.append(LedgerEvent(slot, "jail", v, "fork_loser", ev))
                self._emit("jail", voice=v.hex(), evidence_kind="fork_loser", slot=slot,
                           evidence_ref=_evidence_ref(ev))
        self.fork_state = ForkState.NONE
        self.unresolved = None
        self.halted = False
        self._rebuild(now)

    def _rebase_onto_foreign(self, winner: Branch, now: int) -> None:
        own = {cb.hash: cb for cb in self.cb_chain}
        tip = None
        for cb in self.foreign_cbs.values():
            if tip is None or cb.cb_index > tip.cb_index:
                tip = cb
        chain: list[ConsensusBlock] = []
        cur = tip
        while cur is not None and cur.hash not in own:
            chain.append(cur)
            cur = self.foreign_cbs.get(cur.prior_cb_hash) or own.get(cur.prior_cb_hash)
        if cur is not None and chain:
            keep = [cb for cb in self.cb_chain if cb.cb_index <= cur.cb_index]
            self.cb_chain = keep + list(reversed(chain))
            for cb in reversed(chain):
                self.schedules[cb.cb_index + 1] = assign_slots(
                    cb.state.voices.active_voices(), cb.cycle_seed, self.params, cb.cb_index + 1)
            for ev in self.ledger_events:
                ev.settled = True
        start = winner.divergence_record.slot if winner.records else self.base_slot
        for h in self._sorted_history(start):
            self.excluded.add(h)
            self.abandoned.add(h)
        for r in winner.records:
            if r.hash not in self.dag.records and all(a in self.dag.records for a in r.acknowledged):
                self.dag.add(r)
            self.excluded.discard(r.hash)
        self.foreign.clear()
        self.foreign_cbs.clear()

    def pardon(self, voice: bytes, now: int) -> None:
        """Hook for the (external) pardon vote: restore a jailed voice."""
        self.ledger_events.append(LedgerEvent(self.current_slot(), "pardon", voice, "pardon"))
        self._emit("pardon", voice=voice.hex())
        self._rebuild(now)

    # -- bootstrap and digests ----------------------------------------------------

    def catch_up(self, records: Iterable[Record], slot_ms: int, offset_ms: int = 0) -> None:
        """Bootstrap from a record history: tick through every slot, feeding its records on time."""
        by_slot: dict[int, list[Record]] = {}
        for r in records:
            by_slot.setdefault(r.slot, []).append(r)
        last = max(by_slot, default=-1)
        for slot in range(last + 1):
            self.tick(slot, slot * slot_ms)
            for r in sorted(by_slot.get(slot, ()), key=lambda r: r.hash):
                self.on_receive_record(r, slot * slot_ms + offset_ms)
        self.drain()

    def state_digest(self) -> bytes:
        w = Writer().blob(self.ledger.encode())
        for label, hs in (("dag", self.dag.records), ("excluded", self.excluded), ("muted", self.muted),
                          ("foreign", self.foreign), ("pending", self.pending)):
            w.blob(label.encode()).u32(len(hs))
            for h in sorted(hs):
                w.raw(h)
        for cb in self.cb_chain:
            w.raw(cb.hash)
        w.blob(self.fork_state.value.encode())
        return crypto.digest(w.getvalue())


def _evidence_ref(evidence) -> object:
    if isinstance(evidence, EquivocationProof):
        return [evidence.first.hash.hex(), evidence.second.hash.hex()]
    if isinstance(evidence, Record):
        return [evidence.hash.hex()]
    if isinstance(evidence, ForkEvidence):
        return [r.hash.hex() for r in evidence.records]
    return evidence


def choose_history(genesis: Genesis, config: NodeConfig,
                   candidates: Sequence[Sequence[Record]]) -> tuple[int | _NeedsExternalInput, str, int]:
    """Pick among full candidate histories without any live observation.

    Returns ``(index or NeedsExternalInput, rule, oracle_calls)``; no oracle is
    consulted here, so the call count is always zero.
    """
    sets = [{r.hash for r in c} for c in candidates]
    common = set.intersection(*sets) if sets else set()
    branches = [Branch(f"h{i}", tuple(sorted((r for r in c if r.hash not in common),
                                              key=lambda r: (r.slot, r.hash))))
                for i, c in enumerate(candidates)]
    choice, rule = fork_choice(branches, None, slot_ms=config.slot_ms, grace_slots=config.grace_slots)
    if choice is NeedsExternalInput:
        return NeedsExternalInput, rule, 0
    return branches.index(choice), rule, 0


# -- lite clients ----------------------------------------------------------

class LiteVerdict(enum.Enum):
    ACCEPTED = "Accepted"
    INSUFFICIENT_DEPTH = "InsufficientDepth"
    INVALID = "Invalid"


def lite_verify_payment(headers: RecordDag, proof: InclusionProof,
                        expected_depth: int = 10) -> LiteVerdict:
    """Check a payment proof against a header-only view."""
    known = headers.get(proof.header.hash)
    if known is None or not isinstance(known, (RecordHeader, Record)):
        return LiteVerdict.INVALID
    if not verify_inclusion_proof(proof):
        return LiteVerdict.INVALID
    if depth_capped(headers, proof.header.hash, expected_depth) < expected_depth:
        return LiteVerdict.INSUFFICIENT_DEPTH
    return LiteVerdict.ACCEPTED
