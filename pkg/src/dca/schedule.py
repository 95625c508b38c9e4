"""Consensus cycle bookkeeping.

Cycle arithmetic, the per-cycle random seed built from revealed secrets, slot
assignment of voices, the modulo split of a slot's transactions among
co-assigned voices, and the silent-voice penalty.
"""
from __future__ import annotations

import enum
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .crypto import digest

SEED_TAG = b"dca/seed/v1"
SHUFFLE_TAG = b"dca/shuffle/v1"

DAY_S = 86_400


@dataclass(frozen=True)
class CycleParams:
    cycle_length_s: int
    slot_duration_s: int
    confirm_depth: int = 10
    cycle_lag_slots: int = 108
    prep_period_slots: int = 36

    def __post_init__(self) -> None:
        for name in ("cycle_length_s", "slot_duration_s", "confirm_depth",
                     "cycle_lag_slots", "prep_period_slots"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.cycle_length_s % self.slot_duration_s:
            raise ValueError("cycle length must be a whole number of slots")
        if self.cycle_lag_slots + self.prep_period_slots >= self.slices:
            raise ValueError("lag and preparation windows must fit inside one cycle")

    @property
    def slices(self) -> int:
        return self.cycle_length_s // self.slot_duration_s

    @property
    def slot_ms(self) -> int:
        return self.slot_duration_s * 1000

    @classmethod
    def full_scale(cls) -> "CycleParams":
        slot = 10
        return cls(
            cycle_length_s=876_600,
            slot_duration_s=slot,
            confirm_depth=10,
            cycle_lag_slots=3 * DAY_S // slot,
            prep_period_slots=DAY_S // slot,
        )

    @classmethod
    def desk_scale(cls, slices: int = 360) -> "CycleParams":
        # Lag and preparation keep the full-scale proportions (3 days, 1 day of ~10 days).
        return cls(
            cycle_length_s=slices * 10,
            slot_duration_s=10,
            confirm_depth=10,
            cycle_lag_slots=max(1, slices * 3 // 10),
            prep_period_slots=max(1, slices // 10),
        )

    def to_dict(self) -> dict:
        return {
            "cycle_length_s": self.cycle_length_s,
            "slot_duration_s": self.slot_duration_s,
            "confirm_depth": self.confirm_depth,
            "cycle_lag_slots": self.cycle_lag_slots,
            "prep_period_slots": self.prep_period_slots,
        }


class Phase(enum.Enum):
    ACCUMULATING = "Accumulating"
    LAG_WINDOW = "LagWindow"
    PREP_WINDOW = "PrepWindow"


@dataclass(frozen=True)
class SlotInfo:
    cycle_index: int
    is_cb_boundary: bool
    phase: Phase


def cycle_of(slot: int, params: CycleParams) -> int:
    return slot // params.slices


def cycle_start(cycle: int, params: CycleParams) -> int:
    return cycle * params.slices


def cb_boundary_slot(cb_index: int, params: CycleParams) -> int:
    """Slot at which consensus block ``cb_index`` is taken (0 is genesis)."""
    if cb_index == 0:
        return 0
    return cb_index * params.slices + params.cycle_lag_slots


def cycle_boundaries(slot: int, params: CycleParams) -> SlotInfo:
    if slot < 0:
        raise ValueError("slot must be non-negative")
    cycle, offset = divmod(slot, params.slices)
    if cycle == 0:
        return SlotInfo(0, slot == 0, Phase.ACCUMULATING)
    if offset < params.cycle_lag_slots:
        phase = Phase.LAG_WINDOW
    elif offset < params.cycle_lag_slots + params.prep_period_slots:
        phase = Phase.PREP_WINDOW
    else:
        phase = Phase.ACCUMULATING
    return SlotInfo(cycle, offset == params.cycle_lag_slots, phase)


def is_cb_boundary(slot: int, params: CycleParams) -> bool:
    return cycle_boundaries(slot, params).is_cb_boundary


@dataclass(frozen=True)
class RevealSet:
    cycle_index: int
    reveals: Mapping[bytes, bytes]
    missing: frozenset[bytes] = frozenset()


def derive_seed(reveals: RevealSet | Mapping[bytes, bytes]) -> bytes:
    pairs = reveals.reveals if isinstance(reveals, RevealSet) else reveals
    if not pairs:
        raise ValueError("cannot derive a seed from an empty reveal set")
    material = b"".join(voice + pairs[voice] for voice in sorted(pairs))
    return digest(SEED_TAG + material)


class _HashStream:
    """Counter-mode SHA-256 stream; reproducible on any platform."""

    def __init__(self, seed: bytes) -> None:
        self._seed = seed
        self._counter = 0

    def below(self, bound: int) -> int:
        block = digest(SHUFFLE_TAG + self._seed + self._counter.to_bytes(8, "big"))
        self._counter += 1
        # 256-bit draw: modulo bias is below 2**-200 for any realistic bound.
        return int.from_bytes(block, "big") % bound


def shuffled(items: Sequence[bytes], seed: bytes) -> list[bytes]:
    out = list(items)
    stream = _HashStream(seed)
    for i in range(len(out) - 1, 0, -1):
        j = stream.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass(frozen=True)
class Schedule:
    cycle_index: int
    seed: bytes
    assignment: tuple[tuple[bytes, ...], ...]
    first_slot: int = 0

    def voices_for(self, slot: int) -> tuple[bytes, ...]:
        offset = slot - self.first_slot
        if not 0 <= offset < len(self.assignment):
            return ()
        return self.assignment[offset]

    def slots_of(self, voice: bytes) -> list[int]:
        return [self.first_slot + i for i, vs in enumerate(self.assignment) if voice in vs]

    def with_override(self, overrides: Mapping[int, Sequence[bytes]]) -> "Schedule":
        """Replace the voice list of selected slots (used to rig attack scenarios)."""
        rows = list(self.assignment)
        for slot, voices in overrides.items():
            offset = slot - self.first_slot
            if 0 <= offset < len(rows):
                rows[offset] = tuple(voices)
        return Schedule(self.cycle_index, self.seed, tuple(rows), self.first_slot)

    def encode(self) -> bytes:
        parts = [self.cycle_index.to_bytes(8, "big"), self.seed]
        for voices in self.assignment:
            parts.append(len(voices).to_bytes(4, "big"))
            parts.extend(voices)
        return b"".join(parts)


def assign_slots(
    voices: Iterable[bytes],
    seed: bytes,
    params: CycleParams,
    cycle_index: int = 0,
) -> Schedule:
    """Shuffle the sorted voice list with ``seed`` and deal it round-robin over the slices."""
    ordered = sorted(set(voices))
    if not ordered:
        raise ValueError("cannot schedule a cycle without voices")
    perm = shuffled(ordered, seed)
    n_voices, n_slices = len(perm), params.slices
    rows: list[list[bytes]] = [[] for _ in range(n_slices)]
    for i in range(max(n_voices, n_slices)):
        rows[i % n_slices].append(perm[i % n_voices])
    return Schedule(
        cycle_index=cycle_index,
        seed=seed,
        assignment=tuple(tuple(r) for r in rows),
        first_slot=cycle_start(cycle_index, params),
    )


def partition_transactions(txs: Sequence, voices: Sequence[bytes]) -> dict[bytes, list]:
    """Split ``txs`` among co-assigned ``voices`` by the first 8 octets of each tx hash."""
    out: dict[bytes, list] = {v: [] for v in voices}
    if not voices:
        return out
    for tx in txs:
        position = int.from_bytes(tx.hash[:8], "big") % len(voices)
        out[voices[position]].append(tx)
    return out


def penalize_silent_voices(records: Iterable, active_voices: Iterable[bytes]) -> set[bytes]:
    """Active voices that produced no record at all (safe records count) in the cycle."""
    producers = {r.creator for r in records}
    return {v for v in active_voices if v not in producers}


@dataclass
class ScheduleBook:
    """Schedules by cycle index, as known to one node."""

    schedules: dict[int, Schedule] = field(default_factory=dict)

    def for_slot(self, slot: int, params: CycleParams) -> Schedule | None:
        return self.schedules.get(cycle_of(slot, params))
