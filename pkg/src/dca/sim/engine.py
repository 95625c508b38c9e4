"""Deterministic discrete-event network simulator hosting node engines."""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass
from typing import Any

from .. import crypto
from ..crypto import KeyPair
from ..ledger import ConsensusBlock, Transaction, genesis_state, transfer, voice_exit
from ..node import Genesis, NodeState, make_policy, rng_secret
from ..records import Record
from .config import ScenarioConfig

GENESIS_TAG = b"dca/genesis/v1"


@dataclass(frozen=True, order=True)
class SimEvent:
    fire_at: int
    sequence: int
    kind: str
    payload: Any = None


@dataclass
class Submission:
    tx: Transaction
    time: int
    node: str
    tag: str = "workload"


class Simulation:
    """One run: nodes, links, an event heap and a trace."""

    def __init__(self, config: ScenarioConfig) -> None:
        from .adversaries import make_adversary

        self.cfg = config
        self.params = config.cycle_params
        self.slot_ms = self.params.slot_ms
        self.node_config = config.node_config
        self.rng = random.Random(config.seed)
        self.latency_rng = random.Random(config.seed ^ 0x5EED)
        self.now = 0
        self._seq = 0
        self.queue: list[SimEvent] = []
        self.arrivals: dict[tuple[str, bytes], int] = {}
        self.trace: list[str] = []
        self.side: dict[str, int] | None = None
        self.submissions: dict[bytes, Submission] = {}
        self.merchants: list[dict] = []
        self.policy = make_policy(config.raw["arbitration"]["policy"], config.raw["arbitration"]["answer"])

        s = config.seed
        self.voice_keys = [KeyPair.from_seed(f"voice/{s}/{i}") for i in range(config.n_voices)]
        self.user_keys = [KeyPair.from_seed(f"user/{s}/{i}") for i in range(config.raw["genesis"]["users"])]
        balance = config.raw["genesis"]["balance"]
        state = genesis_state({u.public_key: balance for u in self.user_keys},
                              [v.public_key for v in self.voice_keys], config.ledger_params)
        commitments = {v.public_key: crypto.commit(rng_secret(v, -1)).digest for v in self.voice_keys}
        seed = crypto.digest(GENESIS_TAG + s.to_bytes(8, "big"))
        self.genesis = Genesis(state, seed, commitments, self.params)

        self.voice_ids = [f"v{i:02d}" for i in range(config.n_voices)]
        self.observer_ids = [f"o{i:02d}" for i in range(config.n_observers)]
        self.index = {nid: i for i, nid in enumerate(self.voice_ids + self.observer_ids)}
        self.voice_of = {v.public_key: nid for v, nid in zip(self.voice_keys, self.voice_ids)}
        self.nodes: dict[str, NodeState] = {}
        for nid, keys in zip(self.voice_ids, self.voice_keys):
            self.nodes[nid] = NodeState(nid, self.genesis, self.node_config, keys)
        for nid in self.observer_ids:
            self.nodes[nid] = NodeState(nid, self.genesis, self.node_config)
        self.links: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        self._build_topology()

        self.adversary = make_adversary(config, self)
        self.adversary.setup(self)
        self.honest = [nid for nid in self.nodes if nid not in self.adversary.controlled]
        self._plan_workload()

    # -- topology and latency ---------------------------------------------------

    def _build_topology(self) -> None:
        for a in self.voice_ids:
            self.links[a] = [b for b in self.voice_ids if b != a]
        obs = self.cfg.raw["observers"]
        degree = min(obs["degree"], len(self.voice_ids))
        for i, o in enumerate(self.observer_ids):
            if i == 0 and obs["measuring_links"] == "all":
                peers = list(self.voice_ids)
            else:
                peers = sorted(self.rng.sample(self.voice_ids, degree))
            self.connect(o, peers)

    def connect(self, a: str, peers) -> None:
        for b in peers:
            if b not in self.links[a]:
                self.links[a].append(b)
            if a not in self.links[b]:
                self.links[b].append(a)

    def disconnect(self, a: str) -> list[str]:
        peers = list(self.links[a])
        for b in peers:
            self.links[b].remove(a)
        self.links[a] = []
        return peers

    def latency(self, src: str, dst: str) -> int:
        lat = self.cfg.raw["latency"]
        if lat["model"] == "fixed":
            return lat["ms"]
        if lat["model"] == "uniform":
            return self.latency_rng.randint(lat["low_ms"], lat["high_ms"])
        return int(lat["matrix"][self.index[src]][self.index[dst]])

    def blocked(self, src: str, dst: str) -> bool:
        return self.side is not None and self.side.get(src) != self.side.get(dst)

    # -- events -------------------------------------------------------------------

    def schedule(self, at: int, kind: str, payload: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self.queue, SimEvent(at, self._seq, kind, payload))

    def send(self, src: str, dst: str, kind: str, obj, *, force: bool = False, delay: int = 0) -> None:
        if not force and kind != "cb":
            prev = self.arrivals.get((dst, obj.hash))
            if prev is not None and prev <= self.now:
                return  # already delivered; any new copy would arrive later
        if self.blocked(src, dst) or not self.adversary.intercept(self, src, dst, kind, obj):
            return
        at = self.now + delay + self.latency(src, dst)
        if kind != "cb":
            key = (dst, obj.hash)
            prev = self.arrivals.get(key)
            if prev is not None and prev <= at and not force:
                return
            self.arrivals[key] = at
        self.schedule(at, kind, (src, dst, obj))

    def broadcast(self, src: str, kind: str, obj, *, exclude: str | None = None) -> None:
        for dst in self.links[src]:
            if dst != exclude:
                self.send(src, dst, kind, obj)

    def log(self, node: str, ev: str, **fields) -> None:
        entry = {"t": self.now, "node": node, "ev": ev}
        entry.update(fields)
        self.trace.append(json.dumps(entry, sort_keys=True, separators=(",", ":")))

    def _drain(self, nid: str) -> None:
        for out in self.nodes[nid].drain():
            kind = out.pop("kind")
            if kind in ("tx_confirmed", "tx_secured") and nid != self.observer_ids[0]:
                continue
            self.log(nid, kind, **out)

    # -- workload -------------------------------------------------------------------

    def _plan_workload(self) -> None:
        w = self.cfg.raw["workload"]
        n = w["transfers"]
        if n == 0 or len(self.user_keys) < 2:
            return
        start = w["start_slot"] * self.slot_ms
        end_slot = w["end_slot"] if w["end_slot"] is not None else self.cfg.duration_slots - 2 * self.params.confirm_depth - 2
        end = max(start + 1, end_slot * self.slot_ms)
        times = sorted(self.rng.randrange(start, end) for _ in range(n))
        sequences = [0] * len(self.user_keys)
        reserved = self.adversary.reserved_users
        users = [i for i in range(len(self.user_keys)) if i not in reserved]
        avoid = self.adversary.controlled | self.adversary.unreachable
        targets = [nid for nid in self.nodes if nid not in avoid]
        # Each user talks to one home node, so a user's sequence numbers travel together.
        home = {u: self.rng.choice(targets) for u in users}
        for t in times:
            si, ri = self.rng.sample(users, 2)
            amount = self.rng.randint(1, w["max_amount"])
            sequences[si] += 1
            tx = transfer(self.user_keys[si], self.user_keys[ri].public_key, amount,
                          timestamp=t, sequence=sequences[si])
            self.submit(tx, t, home[si])
        self.user_sequences = sequences

    def submit(self, tx: Transaction, at: int, node: str, tag: str = "workload") -> None:
        self.submissions[tx.hash] = Submission(tx, at, node, tag)
        self.schedule(at, "submit", (node, tx))

    def exit_tx(self, voice_index: int, at: int, sequence: int = 1) -> Transaction:
        cb = self.nodes[self.observer_ids[0]].latest_cb
        return voice_exit(self.voice_keys[voice_index], cb.hash, timestamp=at, sequence=sequence)

    # -- running -------------------------------------------------------------------

    def run(self) -> "RunReport":
        from .report import build_report

        self.log("sim", "config", config=self.cfg.to_dict())
        for slot in range(self.cfg.duration_slots):
            self.schedule(slot * self.slot_ms, "tick", slot)
        while self.queue:
            ev = heapq.heappop(self.queue)
            self.now = ev.fire_at
            self._dispatch(ev)
        self.adversary.on_finish(self)
        return build_report(self)

    def _dispatch(self, ev: SimEvent) -> None:
        kind = ev.kind
        if kind == "record":
            self._deliver_record(*ev.payload)
        elif kind == "tx":
            self._deliver_tx(*ev.payload)
        elif kind == "tick":
            self._tick(ev.payload)
        elif kind == "produce":
            self._produce(ev.payload)
        elif kind == "submit":
            node, tx = ev.payload
            self._deliver_tx(None, node, tx)
        elif kind == "cb":
            src, dst, cb = ev.payload
            if not self.blocked(src, dst) and self.nodes[dst].on_receive_cb(cb):
                self.log(dst, "cb_received", index=cb.cb_index, hash=cb.hash.hex())
        elif kind == "action":
            name, args = ev.payload
            self.adversary.action(self, name, args)
        else:
            raise RuntimeError(f"unknown event kind {kind}")

    def _tick(self, slot: int) -> None:
        for nid, node in self.nodes.items():
            node.tick(slot, self.now, self.policy if nid not in self.adversary.controlled else None)
            self._drain(nid)
        self.adversary.on_tick(self, slot)
        self.schedule(self.now + self.cfg.raw["record_offset_ms"], "produce", slot)

    def _produce(self, slot: int) -> None:
        for nid in self.voice_ids:
            if self.adversary.produce(self, nid, slot):
                continue
            node = self.nodes[nid]
            decision = node.decide_record_action(slot, self.now)
            if decision.record is None:
                continue
            self.log(nid, "produce", slot=slot, decision=decision.decision.value,
                     reason=decision.reason, record=decision.record.hash.hex())
            self.publish(nid, decision.record)

    def publish(self, nid: str, record: Record, targets=None) -> None:
        """Let ``nid`` take its own record and send it to ``targets`` (default: all links)."""
        node = self.nodes[nid]
        node.on_receive_record(record, self.now)
        self._drain(nid)
        for dst in (self.links[nid] if targets is None else targets):
            self.send(nid, dst, "record", record)

    def _deliver_record(self, src: str, dst: str, record: Record) -> None:
        if self.blocked(src, dst):
            self.arrivals.pop((dst, record.hash), None)
            return
        node = self.nodes[dst]
        out = node.on_receive_record(record, self.now)
        if out.action.value != "Duplicate":
            self.log(dst, "record", src=src, rec=record.hash.hex(), slot=record.slot,
                     action=out.action.value, reason=out.reason)
        self._drain(dst)
        if out.missing:
            donor = self.nodes[src]
            for h in out.missing:
                parent = donor.dag.records.get(h) or donor.foreign.get(h)
                if parent is not None:
                    self.send(src, dst, "record", parent, force=True)
        if out.relay and dst not in self.adversary.controlled:
            self.broadcast(dst, "record", record, exclude=src)
        self.adversary.on_delivered(self, dst, "record", record, out)
        self._check_merchants(dst)

    def _deliver_tx(self, src: str | None, dst: str, tx: Transaction) -> None:
        if src is not None and self.blocked(src, dst):
            self.arrivals.pop((dst, tx.hash), None)
            return
        node = self.nodes[dst]
        out = node.on_receive_transaction(tx, self.now)
        self.log(dst, "tx", src=src, tx=tx.hash.hex(), status=out.status.kind,
                 reason=out.status.reason, relay=out.relay)
        if out.relay and dst not in self.adversary.controlled:
            self.broadcast(dst, "tx", tx, exclude=src)
        self.adversary.on_delivered(self, dst, "tx", tx, out)

    def sync(self, src: str, dst: str, since_slot: int = 0) -> None:
        """Push every record and CB ``src`` knows to ``dst`` (used when links heal)."""
        donor = self.nodes[src]
        for cb in donor.cb_chain:
            self.send(src, dst, "cb", cb)
        recs = [r for r in list(donor.dag.records.values()) + list(donor.foreign.values())
                if r.slot >= since_slot]
        for r in sorted(recs, key=lambda r: (r.slot, r.hash)):
            self.send(src, dst, "record", r, force=True)

    # -- merchants ---------------------------------------------------------------

    def add_merchant(self, node: str, tx_hash: bytes, wait, label: str = "merchant") -> None:
        self.merchants.append({"node": node, "tx": tx_hash, "wait": wait, "label": label,
                               "accepted_at": None, "depth_at_accept": None})

    def _check_merchants(self, nid: str) -> None:
        for m in self.merchants:
            if m["node"] != nid or m["accepted_at"] is not None:
                continue
            st = self.nodes[nid].transaction_status(m["tx"])
            if m["wait"] == "secured":
                ok = st.kind == "Secured"
            else:
                ok = st.kind in ("Confirmed", "Secured") and st.depth >= int(m["wait"])
            if ok:
                m["accepted_at"] = self.now
                m["depth_at_accept"] = st.depth
                self.log(nid, "merchant_accept", tx=m["tx"].hex(), depth=st.depth, wait=m["wait"])

    def merchant_deceived(self, m: dict) -> bool:
        if m["accepted_at"] is None:
            return False
        return m["tx"] not in self.nodes[m["node"]].applied

    # -- helpers for adversaries ----------------------------------------------------

    def voice_index(self, nid: str) -> int:
        return self.voice_ids.index(nid)

    def cb_for_broadcast(self, nid: str) -> ConsensusBlock:
        return self.nodes[nid].latest_cb
