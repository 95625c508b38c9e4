"""Records, the acknowledgment DAG, confirmation depth and inclusion proofs."""
from __future__ import annotations

from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property

from . import crypto
from .crypto import Commitment, KeyPair
from .encoding import DecodeError, Reader, Writer
from .ledger import (
    LedgerState,
    Transaction,
    ValidationError,
    apply_in_place,
    validate_transaction,
)
from .schedule import Schedule, partition_transactions

MERKLE_EMPTY_TAG = b"dca/merkle/empty"
MERKLE_NODE_PREFIX = b"\x01"
EMPTY_TX_ROOT = crypto.digest(MERKLE_EMPTY_TAG)


# -- merkle tree ----------------------------------------------------------

def _node(left: bytes, right: bytes) -> bytes:
    return crypto.digest(MERKLE_NODE_PREFIX + left + right)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        return EMPTY_TX_ROOT
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [_node(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def merkle_path(leaves: Sequence[bytes], index: int) -> list[tuple[bytes, bool]]:
    """Sibling digests from leaf to root; the flag is True when the sibling sits on the left."""
    if not 0 <= index < len(leaves):
        raise IndexError(f"leaf index {index} out of range for {len(leaves)} leaves")
    path = []
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        sibling = index ^ 1
        path.append((level[sibling], sibling < index))
        level = [_node(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        index //= 2
    return path


def fold_path(leaf: bytes, path: Iterable[tuple[bytes, bool]]) -> bytes | None:
    node = leaf
    for sibling, sibling_left in path:
        if sibling_left and sibling == node:
            # Duplicated odd nodes are always the right-hand sibling.
            return None
        node = _node(sibling, node) if sibling_left else _node(node, sibling)
    return node


# -- records --------------------------------------------------------------

@dataclass(frozen=True)
class RecordHeader:
    slot: int
    creator: bytes
    prior_cb_hash: bytes
    acknowledged: tuple[bytes, ...]
    tx_root: bytes
    safe: bool
    rng_commitment: bytes
    rng_reveal: bytes
    created_at: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return self._signing_bytes

    @cached_property
    def _signing_bytes(self) -> bytes:
        # Headers are immutable and every node checks the same one, so encode once.
        w = (
            Writer()
            .u64(self.slot)
            .blob(self.creator)
            .blob(self.prior_cb_hash)
            .u32(len(self.acknowledged))
        )
        for h in self.acknowledged:
            w.blob(h)
        return (
            w.blob(self.tx_root)
            .bool(self.safe)
            .blob(self.rng_commitment)
            .blob(self.rng_reveal)
            .u64(self.created_at)
            .getvalue()
        )

    def encode(self) -> bytes:
        return self.signing_bytes() + Writer().blob(self.signature).getvalue()

    @classmethod
    def _read(cls, r: Reader) -> "RecordHeader":
        slot, creator, prior = r.u64(), r.blob(), r.blob()
        acks = tuple(r.blob() for _ in range(r.u32()))
        tx_root, safe = r.blob(), r.bool()
        commitment, reveal, created_at = r.blob(), r.blob(), r.u64()
        return cls(slot, creator, prior, acks, tx_root, safe, commitment, reveal, created_at,
                   r.blob())

    @classmethod
    def decode(cls, data: bytes) -> "RecordHeader":
        r = Reader(data)
        header = cls._read(r)
        r.expect_done()
        return header

    @cached_property
    def hash(self) -> bytes:
        return crypto.digest(self.encode())

    def signature_ok(self) -> bool:
        return crypto.verify(self.creator, self.signing_bytes(), self.signature)


@dataclass(frozen=True)
class Record:
    slot: int
    creator: bytes
    prior_cb_hash: bytes
    acknowledged: tuple[bytes, ...]
    tx_root: bytes
    transactions: tuple[Transaction, ...]
    safe: bool
    rng_commitment: Commitment
    rng_reveal: bytes
    created_at: int
    signature: bytes = b""

    @cached_property
    def header(self) -> RecordHeader:
        return RecordHeader(self.slot, self.creator, self.prior_cb_hash, self.acknowledged,
                            self.tx_root, self.safe, self.rng_commitment.digest,
                            self.rng_reveal, self.created_at, self.signature)

    @property
    def hash(self) -> bytes:
        return self.header.hash

    def signature_ok(self) -> bool:
        return self.header.signature_ok()

    def encode(self) -> bytes:
        w = Writer().raw(self.header.encode()).u32(len(self.transactions))
        for tx in self.transactions:
            w.blob(tx.encode())
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Record":
        r = Reader(data)
        h = RecordHeader._read(r)
        txs = tuple(Transaction.decode(r.blob()) for _ in range(r.u32()))
        r.expect_done()
        return cls(h.slot, h.creator, h.prior_cb_hash, h.acknowledged, h.tx_root, txs, h.safe,
                   Commitment(h.rng_commitment), h.rng_reveal, h.created_at, h.signature)

    def short(self) -> str:
        return self.hash.hex()[:12]


def _sign_record(keys: KeyPair, unsigned: Record) -> Record:
    return replace(unsigned, signature=keys.sign(unsigned.header.signing_bytes()))


class RecordCreationError(ValueError):
    pass


def create_record(*, slot: int, keys: KeyPair, tips: Iterable[bytes], prior_cb_hash: bytes | None,
                  schedule: Schedule | None, pending: Sequence[Transaction] = (),
                  state: LedgerState | None = None, created_at: int = 0,
                  rng_commitment: Commitment, rng_reveal: bytes = b"", slot_ms: int = 10_000,
                  cycle: int = 0, recent_cb_hashes: Sequence[bytes] = (),
                  safe: bool = False) -> Record:
    """Build and sign the record for ``slot``.

    ``tips`` is the creator's visible tip set; all of it is acknowledged.
    Pending transactions are reduced to this creator's modulo share and to
    those that apply cleanly, in order, on top of ``state``.
    """
    if schedule is None or keys.public_key not in schedule.voices_for(slot):
        raise RecordCreationError(f"creator is not scheduled for slot {slot}")
    if prior_cb_hash is None:
        raise RecordCreationError("no consensus block hash known")
    txs: tuple[Transaction, ...] = ()
    if not safe and pending:
        co_assigned = schedule.voices_for(slot)
        mine = partition_transactions(pending, co_assigned)[keys.public_key]
        txs = tuple(select_applicable(mine, state or LedgerState(), now=slot * slot_ms,
                                      cycle=cycle, recent_cb_hashes=recent_cb_hashes))
    unsigned = Record(
        slot=slot,
        creator=keys.public_key,
        prior_cb_hash=prior_cb_hash,
        acknowledged=tuple(sorted(set(tips))),
        tx_root=merkle_root([t.hash for t in txs]),
        transactions=txs,
        safe=safe,
        rng_commitment=Commitment(rng_commitment.digest),
        rng_reveal=rng_reveal,
        created_at=created_at,
    )
    return _sign_record(keys, unsigned)


def create_safe_record(**kwargs) -> Record:
    kwargs.pop("pending", None)
    return create_record(safe=True, **kwargs)


def select_applicable(candidates: Iterable[Transaction], state: LedgerState, *, now: int,
                      cycle: int = 0, recent_cb_hashes: Sequence[bytes] = ()) -> list[Transaction]:
    scratch = state.copy()
    chosen = []
    for tx in sorted(candidates, key=lambda t: (t.timestamp, t.sender, t.sequence, t.hash)):
        try:
            validate_transaction(scratch, tx, now, cycle=cycle, recent_cb_hashes=recent_cb_hashes)
        except ValidationError:
            continue
        apply_in_place(scratch, tx, cycle=cycle)
        chosen.append(tx)
    return chosen


# -- the acknowledgment DAG ----------------------------------------------

@dataclass
class RecordDag:
    """Records (or bare headers) indexed by hash, slot, tip status and children."""

    records: dict[bytes, Record | RecordHeader] = field(default_factory=dict)
    by_slot: dict[int, set[bytes]] = field(default_factory=dict)
    tips: set[bytes] = field(default_factory=set)
    children: dict[bytes, set[bytes]] = field(default_factory=dict)

    def __contains__(self, h: bytes) -> bool:
        return h in self.records

    def __len__(self) -> int:
        return len(self.records)

    def get(self, h: bytes):
        return self.records.get(h)

    def add(self, record: Record | RecordHeader) -> bool:
        """Insert ``record``; returns False if already present."""
        h = record.hash
        if h in self.records:
            return False
        for a in record.acknowledged:
            parent = self.records.get(a)
            if parent is None:
                raise KeyError(f"acknowledged record {a.hex()[:12]} unknown")
            if parent.slot >= record.slot:
                raise ValueError("acknowledgments must point to strictly earlier slots")
        self.records[h] = record
        self.by_slot.setdefault(record.slot, set()).add(h)
        self.children.setdefault(h, set())
        self.tips.add(h)
        for a in record.acknowledged:
            self.children[a].add(h)
            self.tips.discard(a)
        return True

    def ancestors(self, h: bytes, include_self: bool = False) -> set[bytes]:
        seen: set[bytes] = {h} if include_self else set()
        stack = list(self.records[h].acknowledged)
        while stack:
            a = stack.pop()
            if a in seen:
                continue
            seen.add(a)
            stack.extend(self.records[a].acknowledged)
        return seen

    def descendants(self, h: bytes) -> set[bytes]:
        seen: set[bytes] = set()
        queue = deque(self.children.get(h, ()))
        while queue:
            c = queue.popleft()
            if c in seen:
                continue
            seen.add(c)
            queue.extend(self.children.get(c, ()))
        return seen

    def recompute_tips(self) -> set[bytes]:
        acked = {a for r in self.records.values() for a in r.acknowledged}
        return set(self.records) - acked


class UnknownRecord(KeyError):
    pass


def confirmation_depth(dag: RecordDag, record_hash: bytes) -> int:
    """Number of distinct slots among records that transitively acknowledge ``record_hash``."""
    if record_hash not in dag.records:
        raise UnknownRecord(record_hash.hex())
    return len({dag.records[d].slot for d in dag.descendants(record_hash)})


# -- equivocation ---------------------------------------------------------

@dataclass(frozen=True)
class EquivocationProof:
    first: Record | RecordHeader
    second: Record | RecordHeader

    @property
    def creator(self) -> bytes:
        return self.first.creator

    @property
    def slot(self) -> int:
        return self.first.slot

    def verify(self, schedule: Schedule | None = None) -> bool:
        a, b = self.first, self.second
        if a.creator != b.creator or a.slot != b.slot or a.hash == b.hash:
            return False
        if not (a.signature_ok() and b.signature_ok()):
            return False
        if schedule is not None and a.creator not in schedule.voices_for(a.slot):
            return False
        return True


def detect_equivocation(r1: Record | RecordHeader, r2: Record | RecordHeader) -> EquivocationProof | None:
    if r1.creator != r2.creator or r1.slot != r2.slot or r1.hash == r2.hash:
        return None
    first, second = sorted((r1, r2), key=lambda r: r.hash)
    proof = EquivocationProof(first, second)
    return proof if proof.verify() else None


# -- validation -----------------------------------------------------------

class RecordError(Exception):
    code = "RecordError"
    slashable = False

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail or self.code)
        self.detail = detail


class WrongCreator(RecordError):
    code = "WrongCreator"


class UnknownCb(RecordError):
    code = "UnknownCb"


class BadAcknowledgment(RecordError):
    code = "BadAcknowledgment"


class InvalidTransactionIncluded(RecordError):
    code = "InvalidTransactionIncluded"
    slashable = True

    def __init__(self, detail: str = "", tx: Transaction | None = None,
                 cause: ValidationError | None = None) -> None:
        super().__init__(detail)
        self.tx = tx
        self.cause = cause


class BadTxRoot(RecordError):
    code = "BadTxRoot"


class BadRecordSignature(RecordError):
    code = "BadSignature"


class BadReveal(RecordError):
    code = "BadReveal"


def validate_record(dag: RecordDag, record: Record, schedule: Schedule | None,
                    state: LedgerState | None, *, known_cbs: Iterable[bytes],
                    slot_ms: int = 10_000, cycle: int = 0,
                    recent_cb_hashes: Sequence[bytes] = (),
                    prior_commitment: bytes | None = None) -> None:
    """Raise a ``RecordError`` unless ``record`` is acceptable.

    ``state`` is the ledger state produced by the record's own acknowledged
    ancestry; transactions are checked in order against it.
    """
    if not record.signature_ok():
        raise BadRecordSignature()
    if schedule is None or record.creator not in schedule.voices_for(record.slot):
        raise WrongCreator(f"slot {record.slot}")
    if record.prior_cb_hash not in set(known_cbs):
        raise UnknownCb(record.prior_cb_hash.hex()[:12])
    acks = record.acknowledged
    if len(set(acks)) != len(acks):
        raise BadAcknowledgment("duplicate acknowledgment")
    for a in acks:
        parent = dag.get(a)
        if parent is None:
            raise BadAcknowledgment(f"unknown record {a.hex()[:12]}")
        if parent.slot >= record.slot:
            raise BadAcknowledgment("acknowledged record is not from an earlier slot")
    if merkle_root([t.hash for t in record.transactions]) != record.tx_root:
        raise BadTxRoot()
    if record.safe and (record.transactions or record.tx_root != EMPTY_TX_ROOT):
        raise BadTxRoot("safe record confirms transactions")
    if prior_commitment is not None and record.rng_reveal:
        if not crypto.open_commitment(Commitment(prior_commitment), record.rng_reveal):
            raise BadReveal()
    if record.transactions:
        scratch = (state or LedgerState()).copy()
        now = record.slot * slot_ms
        for tx in record.transactions:
            try:
                validate_transaction(scratch, tx, now, cycle=cycle,
                                     recent_cb_hashes=recent_cb_hashes)
            except ValidationError as exc:
                raise InvalidTransactionIncluded(exc.code, tx=tx, cause=exc) from exc
            apply_in_place(scratch, tx, cycle=cycle)


# -- inclusion proofs -----------------------------------------------------

@dataclass(frozen=True)
class InclusionProof:
    tx_hash: bytes
    path: tuple[tuple[bytes, bool], ...]
    header: RecordHeader

    def encode(self) -> bytes:
        w = Writer().blob(self.tx_hash).u32(len(self.path))
        for sibling, left in self.path:
            w.bool(left).blob(sibling)
        return w.raw(self.header.encode()).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "InclusionProof":
        r = Reader(data)
        tx_hash = r.blob()
        n = r.u32()
        if n > 64:
            raise DecodeError("implausible proof length")
        path = []
        for _ in range(n):
            left = r.bool()
            path.append((r.blob(), left))
        header = RecordHeader._read(r)
        r.expect_done()
        return cls(tx_hash, tuple(path), header)


def build_inclusion_proof(record: Record, tx_index: int) -> InclusionProof:
    leaves = [t.hash for t in record.transactions]
    return InclusionProof(leaves[tx_index] if 0 <= tx_index < len(leaves) else b"",
                          tuple(merkle_path(leaves, tx_index)), record.header)


def verify_inclusion_proof(proof: InclusionProof) -> bool:
    if len(proof.tx_hash) != crypto.DIGEST_SIZE:
        return False
    if any(len(s) != crypto.DIGEST_SIZE for s, _ in proof.path):
        return False
    root = fold_path(proof.tx_hash, proof.path)
    return root is not None and root == proof.header.tx_root and proof.header.signature_ok()


def ancestry_of(dag: RecordDag, heads: Iterable[bytes]) -> set[bytes]:
    out: set[bytes] = set()
    stack = list(heads)
    while stack:
        h = stack.pop()
        if h in out:
            continue
        out.add(h)
        stack.extend(dag.records[h].acknowledged)
    return out


def canonical_order(dag: RecordDag, hashes: Iterable[bytes]) -> list[bytes]:
    """Slot order, ties broken by hash: a topological order of the DAG."""
    return sorted(hashes, key=lambda h: (dag.records[h].slot, h))


def record_map(records: Iterable[Record]) -> Mapping[bytes, Record]:
    return {r.hash: r for r in records}
