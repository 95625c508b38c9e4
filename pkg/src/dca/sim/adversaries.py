"""Adversary controllers for the attack scenarios.

Each controller owns some voice nodes (``controlled``) and hooks into the
simulator: it may take over record production for its voices, filter
messages on links it controls, and schedule its own actions.
"""
from __future__ import annotations

import json

from ..ledger import apply_in_place, take_snapshot, transfer
from ..node import NeedsExternalInput, NodeState, choose_history, rng_secret
from ..records import Record, create_record
from ..schedule import RevealSet, cb_boundary_slot, cycle_of, cycle_start, derive_seed
from .. import crypto


class Adversary:
    name = "honest"

    def __init__(self, sim) -> None:
        self.knobs = dict(sim.cfg.knobs)
        self.controlled: set[str] = set()
        self.reserved_users: set[int] = set()
        self.unreachable: set[str] = set()  # honest nodes the workload should not submit to
        self.info: dict = {}

    def setup(self, sim) -> None:
        pass

    def intercept(self, sim, src: str, dst: str, kind: str, obj) -> bool:
        return True

    def produce(self, sim, nid: str, slot: int) -> bool:
        return False

    def on_tick(self, sim, slot: int) -> None:
        pass

    def on_delivered(self, sim, nid: str, kind: str, obj, outcome) -> None:
        pass

    def action(self, sim, name: str, args) -> None:
        raise RuntimeError(f"{self.name}: unknown action {name}")

    def on_finish(self, sim) -> None:
        pass

    def report(self, sim) -> dict:
        return dict(self.info)

    # -- shared tools ------------------------------------------------------

    def knob(self, key, default):
        return self.knobs.get(key, default)

    @staticmethod
    def rig(sim, overrides: dict[int, list[bytes]]) -> None:
        for node in sim.nodes.values():
            node.schedule_overrides.update(overrides)

    @staticmethod
    def tips_before(node, slot: int) -> list[bytes]:
        """The tip set ``node`` would have seen just before ``slot`` (history only)."""
        inside = [h for h in node.history() if node.dag.records[h].slot < slot]
        acked = {a for h in inside for a in node.dag.records[h].acknowledged}
        return sorted(set(inside) - acked)

    @staticmethod
    def forge(sim, nid: str, slot: int, tips, txs=(), created_at: int | None = None) -> Record:
        """Sign a record for ``slot`` with voice ``nid`` on top of arbitrary ``tips``."""
        node = sim.nodes[nid]
        commitment, reveal = node.rng_fields(slot)
        state = node.state_for_tips(tips)
        if created_at is None:
            created_at = slot * sim.slot_ms + sim.cfg.raw["record_offset_ms"]
        return create_record(
            slot=slot, keys=node.identity, tips=tips, prior_cb_hash=node.latest_cb.hash,
            schedule=node.schedule_for(slot), pending=list(txs), state=state,
            created_at=created_at, rng_commitment=commitment, rng_reveal=reveal,
            slot_ms=sim.slot_ms, cycle=cycle_of(slot, sim.params),
            recent_cb_hashes=node.cb_hashes_at(slot),
        )

    def destroyed(self, sim, voice_ids) -> list[str]:
        ledger = sim.nodes[sim.observer_ids[0]].ledger
        out = []
        for nid in voice_ids:
            pk = sim.voice_keys[sim.voice_index(nid)].public_key
            if ledger.voices.status(pk) is not None and ledger.voices.status(pk).name == "DESTROYED":
                out.append(nid)
        return out

    def attack_pair(self, sim, slot: int):
        """A payment to the merchant account and its double spend, both timestamped in ``slot``."""
        amount = self.knob("amount", 5_000)
        base = slot * sim.slot_ms
        payer = sim.user_keys[0]
        pay = transfer(payer, sim.user_keys[1].public_key, amount, timestamp=base + 2_000, sequence=1)
        spend = transfer(payer, sim.user_keys[2].public_key, amount, timestamp=base + 2_500, sequence=1)
        self.reserved_users.update({0, 1, 2})
        return pay, spend


class Honest(Adversary):
    name = "honest"


class DoubleSpendInsecure(Adversary):
    """Delay an own record, watch the payment confirm, then publish a conflicting record."""

    name = "double_spend_insecure"

    def setup(self, sim) -> None:
        k = self.k = self.knob("attack_slot", 20)
        adv = self.knob("adversary_voices", [0])
        self.adv_ids = [sim.voice_ids[i] for i in adv]
        self.controlled = set(self.adv_ids)
        honest = next(i for i in range(len(sim.voice_ids)) if i not in adv)
        pks = [sim.voice_keys[i].public_key for i in adv]
        overrides = {k: [pks[0]], k + 1: [sim.voice_keys[honest].public_key]}
        self.rigged = bool(self.knob("rigged", False))
        self.rig_slots = []
        if self.rigged:
            for j in range(self.knob("rig_length", sim.params.confirm_depth)):
                overrides[k + 2 + j] = [pks[j % len(pks)]]
                self.rig_slots.append(k + 2 + j)
        self.rig(sim, overrides)
        self.pay, self.spend = self.attack_pair(sim, k - 1)
        target = sim.voice_ids[honest]
        sim.submit(self.pay, self.pay.timestamp, target, tag="payment")
        sim.add_merchant(sim.observer_ids[min(1, len(sim.observer_ids) - 1)], self.pay.hash,
                         self.knob("merchant_wait", 0))
        sim.schedule((k + 1) * sim.slot_ms + sim.cfg.raw["record_offset_ms"] + 1_500,
                     "action", ("emit_double_spend", None))
        self.conflicting = None
        self.last = None

    def produce(self, sim, nid, slot) -> bool:
        if nid not in self.controlled:
            return False
        if slot == self.k:
            sim.log(nid, "withhold", slot=slot)
            return True
        if slot in self.rig_slots and self.conflicting is not None:
            tips = [self.last.hash]
            rec = self.forge(sim, nid, slot, tips)
            self.last = rec
            sim.publish(nid, rec)
            sim.log(nid, "rigged_record", slot=slot, record=rec.hash.hex())
            return True
        return False

    def action(self, sim, name, args) -> None:
        nid = self.adv_ids[0]
        tips = self.tips_before(sim.nodes[nid], self.k)
        rec = self.forge(sim, nid, self.k, tips, [self.spend])
        self.conflicting = self.last = rec
        sim.log(nid, "double_spend_record", slot=self.k, record=rec.hash.hex())
        sim.publish(nid, rec)

    def report(self, sim) -> dict:
        spend = self.spend.hash.hex()
        refused = set()
        for line in sim.trace:
            if '"double_spend_refused"' in line:
                entry = json.loads(line)
                if entry["tx"] == spend and entry["node"] in sim.honest:
                    refused.add(entry["node"])
        return {
            "attack_slot": self.k,
            "rigged": self.rigged,
            "payment_tx": self.pay.hash.hex(),
            "double_spend_tx": self.spend.hash.hex(),
            "nodes_refusing_double_spend": len(refused),
            "honest_nodes": len(sim.honest),
        }


class _Isolation(Adversary):
    """Shared machinery: a victim whose links all pass through an adversary gateway."""

    def isolate(self, sim, victim: str, out_of_band: bool) -> None:
        self.victim = victim
        self.unreachable.add(victim)
        self.gateway = self.adv_ids[0]
        sim.disconnect(victim)
        sim.connect(victim, [self.gateway])
        self.peer = None
        if out_of_band:
            self.peer = next(v for v in sim.voice_ids if v not in self.controlled and v != victim)
            sim.connect(victim, [self.peer])
        self.secret: dict[bytes, Record] = {}
        self.released = False

    def intercept(self, sim, src, dst, kind, obj) -> bool:
        if self.released or dst != self.victim or src not in self.controlled:
            return True
        if kind == "record":
            return obj.slot < self.k or obj.hash in self.secret
        if kind == "tx":
            return obj.hash != self.spend.hash
        return True

    def on_delivered(self, sim, nid, kind, obj, outcome) -> None:
        # The gateway passes ordinary traffic on to the victim; intercept filters it.
        if nid == self.gateway and self.victim in sim.links[nid]:
            sim.send(nid, self.victim, kind, obj)

    def produce(self, sim, nid, slot) -> bool:
        if nid not in self.controlled or not self.k <= slot < self.k + self.run:
            return False
        node = sim.nodes[nid]
        if node.identity.public_key not in node.schedule_for(slot).voices_for(slot):
            return False
        # The public copy carries everything but the secret transaction.
        cutoff = slot * sim.slot_ms
        pending = [t for t in node.pending.values()
                   if t.hash != self.secret_tx.hash and t.timestamp < cutoff]
        public = node._build(slot, sim.now, pending=pending)
        sim.publish(nid, public, targets=[d for d in sim.links[nid] if d != self.victim])
        tips = [self.prev.hash] if self.prev is not None else self.tips_before(sim.nodes[self.gateway], self.k)
        txs = [self.secret_tx] if slot == self.k else []
        rec = self.forge(sim, nid, slot, tips, txs)
        self.secret[rec.hash] = rec
        self.prev = rec
        sim.log(nid, "secret_record", slot=slot, record=rec.hash.hex())
        sim.send(self.gateway, self.victim, "record", rec)
        return True

    def action(self, sim, name, args) -> None:
        if name != "release":
            return super().action(sim, name, args)
        self.released = True
        honest_voices = [v for v in sim.voice_ids if v not in self.controlled and v != self.victim]
        donor = honest_voices[0]
        sim.connect(self.victim, honest_voices[:3])
        sim.log(self.victim, "released", peers=honest_voices[:3])
        sim.sync(donor, self.victim)
        sim.sync(self.victim, donor)

    def cost(self, sim) -> dict:
        destroyed = self.destroyed(sim, sorted(self.controlled))
        deposit = sim.cfg.ledger_params.deposit
        amount = self.knob("amount", 5_000)
        return {
            "duplicated_records": len(self.secret),
            "attackers_destroyed": len(destroyed),
            "attacker_cost": len(destroyed) * deposit,
            "victim_value": amount,
            "cost_per_victim_value_milli": len(destroyed) * deposit * 1000 // max(1, amount),
        }


class IsolateTransactor(_Isolation):
    name = "isolate_transactor"

    def setup(self, sim) -> None:
        self.k = self.knob("attack_slot", 30)
        self.run = self.knob("run", 6)
        if not 1 <= self.run <= sim.params.confirm_depth:
            raise ValueError("isolate_transactor run must be between 1 and confirm_depth")
        adv = self.knob("adversary_voices", list(range(self.run)))
        self.adv_ids = [sim.voice_ids[i] for i in adv]
        self.controlled = set(self.adv_ids)
        pks = [sim.voice_keys[i].public_key for i in adv]
        self.rig(sim, {self.k + j: [pks[j % len(pks)]] for j in range(self.run)})
        victim = sim.observer_ids[min(1, len(sim.observer_ids) - 1)]
        self.isolate(sim, victim, bool(self.knob("out_of_band", False)))
        self.pay, self.spend = self.attack_pair(sim, self.k - 1)
        self.secret_tx = self.pay
        self.prev = None
        sim.submit(self.pay, self.pay.timestamp, victim, tag="payment")
        public_target = next(v for v in sim.voice_ids if v not in self.controlled)
        sim.submit(self.spend, self.spend.timestamp, public_target, tag="double_spend")
        sim.add_merchant(victim, self.pay.hash, self.knob("wait", 3))
        release = self.knob("release_slot", self.k + self.run + 20)
        sim.schedule(release * sim.slot_ms + 1_000, "action", ("release", None))

    def report(self, sim) -> dict:
        m = sim.merchants[0]
        return {
            "attack_slot": self.k, "run": self.run, "wait": m["wait"],
            "victim": self.victim, "victim_deceived": sim.merchant_deceived(m),
            "accepted_at_depth": m["depth_at_accept"], **self.cost(sim),
        }


class IsolateVoice(_Isolation):
    name = "isolate_voice"

    def setup(self, sim) -> None:
        self.k = self.knob("attack_slot", 30)
        self.run = self.knob("run", 4)
        adv = self.knob("adversary_voices", list(range(self.run)))
        self.adv_ids = [sim.voice_ids[i] for i in adv]
        self.controlled = set(self.adv_ids)
        victim = sim.voice_ids[self.knob("victim", len(sim.voice_ids) - 1)]
        pks = [sim.voice_keys[i].public_key for i in adv]
        overrides = {self.k + j: [pks[j % len(pks)]] for j in range(self.run)}
        overrides[self.k + self.run] = [sim.voice_keys[sim.voice_index(victim)].public_key]
        self.rig(sim, overrides)
        self.isolate(sim, victim, bool(self.knob("out_of_band", True)))
        self.pay, self.spend = self.attack_pair(sim, self.k - 1)
        self.secret_tx = self.spend
        self.prev = None
        public_target = next(v for v in sim.voice_ids if v not in self.controlled and v != victim)
        sim.submit(self.pay, self.pay.timestamp, public_target, tag="payment")
        release = self.knob("release_slot", self.k + self.run + 20)
        sim.schedule(release * sim.slot_ms + 1_000, "action", ("release", None))

    def report(self, sim) -> dict:
        vnode = sim.nodes[self.victim]
        own = [h for h in vnode.dag.by_slot.get(self.k + self.run, ())
               if vnode.dag.records[h].creator == vnode.identity.public_key]
        confirmed_secret = False
        for h in own:
            if vnode.dag.ancestors(h) & set(self.secret):
                confirmed_secret = vnode.dag.records[h].transactions != () or not vnode.dag.records[h].safe
        status = sim.nodes[sim.observer_ids[0]].ledger.voices.status(vnode.identity.public_key)
        return {
            "attack_slot": self.k, "run": self.run, "victim": self.victim,
            "out_of_band": self.peer is not None,
            "victim_record_built_on_secret_branch": confirmed_secret,
            "victim_produced_safe": any(vnode.dag.records[h].safe for h in own),
            "victim_status": status.name if status is not None else None,
            "victim_detected_equivocation": any(
                e.kind.value == "Equivocation" for e in vnode.fork_evidence),
            **self.cost(sim),
        }


class Partition(Adversary):
    name = "partition"

    def setup(self, sim) -> None:
        start = self.start = self.knob("start_slot", 100)
        self.length = self.knob("length_slots", 2 * sim.params.slices)
        frac = self.knob("minority", 0.3)
        n_min = max(1, round(frac * len(sim.voice_ids)))
        side = {v: (1 if i < n_min else 0) for i, v in enumerate(sim.voice_ids)}
        for j, o in enumerate(sim.observer_ids):
            side[o] = 0 if j == 0 else (1 if j % 3 == 1 else 0)
        self.sides = side
        sim.schedule(start * sim.slot_ms + 1, "action", ("split", None))
        sim.schedule((start + self.length) * sim.slot_ms + 1, "action", ("heal", None))

    def action(self, sim, name, args) -> None:
        if name == "split":
            sim.side = dict(self.sides)
            sim.log("sim", "partition", on=True)
        elif name == "heal":
            sim.side = None
            sim.log("sim", "partition", on=False)
            reps = {s: next(n for n in sim.voice_ids if self.sides[n] == s) for s in (0, 1)}
            for nid in sim.nodes:
                sim.sync(reps[1 - self.sides[nid]], nid, since_slot=self.start - 1)
        else:
            super().action(sim, name, args)

    def report(self, sim) -> dict:
        warned = {s: [] for s in (0, 1)}
        for nid, node in sim.nodes.items():
            if any(self.start <= s < self.start + self.length for s in node.warned_slots):
                warned[self.sides[nid]].append(nid)
        minority = [v for v in sim.voice_ids if self.sides[v] == 1]
        majority_nodes = [n for n in sim.nodes if self.sides[n] == 0]
        jailed_by = {}
        for nid in sim.nodes:
            led = sim.nodes[nid].ledger
            jailed_by[nid] = sorted(v for v in sim.voice_ids
                                    if led.voices.status(sim.voice_keys[sim.voice_index(v)].public_key).name == "JAILED")
        tips = {sim.nodes[n].latest_cb.hash.hex() for n in sim.nodes}
        return {
            "start_slot": self.start, "length_slots": self.length,
            "minority_voices": minority,
            "side_sizes": [sum(1 for n in self.sides.values() if n == s) for s in (0, 1)],
            "all_nodes_warned": {str(s): len(warned[s]) == sum(1 for n in self.sides.values() if n == s)
                                 for s in (0, 1)},
            "minority_jailed_everywhere": all(set(minority) <= set(jailed_by[n]) for n in sim.nodes),
            "majority_jailed_nowhere": all(not (set(jailed_by[n]) - set(minority)) for n in majority_nodes),
            "distinct_latest_cbs": len(tips),
        }


class ColludeFork(Adversary):
    """Colluding voices build a secret branch with a double spend and publish it late."""

    name = "collude_fork"

    def setup(self, sim) -> None:
        adv = self.knob("colluders", [0, 1])
        self.adv_ids = [sim.voice_ids[i] for i in adv]
        self.controlled = set(self.adv_ids)
        d = self.d = self.knob("secret_start", 30)
        offsets = self.knob("secret_offsets", [0, 3, 6, 9])
        pks = [sim.voice_keys[i].public_key for i in adv]
        self.secret_slots = {d + off: self.adv_ids[j % len(adv)] for j, off in enumerate(offsets)}
        overrides = {slot: [pks[self.adv_ids.index(nid)]] for slot, nid in self.secret_slots.items()}
        honest = next(i for i in range(len(sim.voice_ids)) if i not in adv)
        overrides.setdefault(d + 1, [sim.voice_keys[honest].public_key])
        self.rig(sim, overrides)
        self.sign_public = bool(self.knob("sign_public", False))
        self.release = self.knob("release_slot", d + 30)
        self.pay, self.spend = self.attack_pair(sim, d - 1)
        sim.submit(self.pay, self.pay.timestamp, sim.voice_ids[honest], tag="payment")
        sim.add_merchant(sim.observer_ids[min(1, len(sim.observer_ids) - 1)], self.pay.hash,
                         self.knob("merchant_wait", "secured"))
        sim.schedule(self.release * sim.slot_ms + 2_000, "action", ("release", None))
        self.secret: list[Record] = []

    def produce(self, sim, nid, slot) -> bool:
        if nid not in self.controlled:
            return False
        if slot in self.secret_slots and self.secret_slots[slot] == nid:
            tips = [self.secret[-1].hash] if self.secret else self.tips_before(sim.nodes[nid], self.d)
            txs = [self.spend] if not self.secret else []
            rec = self.forge(sim, nid, slot, tips, txs)
            self.secret.append(rec)
            sim.log(nid, "secret_record", slot=slot, record=rec.hash.hex())
            return True
        if slot >= self.d and slot < self.release and not self.sign_public:
            return True
        return False

    def action(self, sim, name, args) -> None:
        sender = self.adv_ids[0]
        sim.log(sender, "release_secret_branch", records=len(self.secret))
        for rec in self.secret:
            for dst in sim.links[sender]:
                if dst not in self.controlled:
                    sim.send(sender, dst, "record", rec, force=True)
        # A donor for orphan requests: the colluder keeps the secret records as foreign evidence.
        for rec in self.secret:
            sim.nodes[sender].foreign.setdefault(rec.hash, rec)

    def report(self, sim) -> dict:
        outcomes = {}
        for nid in sim.honest:
            for o in sim.nodes[nid].fork_outcomes:
                outcomes[nid] = o["choice"]
        honest_choice = all(c == "local" for c in outcomes.values())
        common = [sim.nodes[sim.observer_ids[0]].dag.records[h]
                  for h in sim.nodes[sim.observer_ids[0]].history()]
        honest_hist = common
        secret_hist = [r for r in common if r.slot < self.d] + self.secret
        choice, rule, calls = choose_history(sim.genesis, sim.node_config, [honest_hist, secret_hist])
        jailed = []
        led = sim.nodes[sim.voice_ids[-1]].ledger
        for nid in self.adv_ids:
            st = led.voices.status(sim.voice_keys[sim.voice_index(nid)].public_key)
            jailed.append(st.name if st is not None else None)
        return {
            "secret_records": len(self.secret), "sign_public": self.sign_public,
            "nodes_choosing": len(outcomes), "online_nodes_chose_honest": honest_choice and bool(outcomes),
            "offline_bootstrap_choice": "NeedsExternalInput" if choice is NeedsExternalInput else
            ("honest" if choice == 0 else "secret"),
            "offline_rule": rule, "colluder_status": jailed,
        }


class HistoryRewrite(Adversary):
    """Voices that controlled genesis later sign an alternate history from early on."""

    name = "history_rewrite"

    def setup(self, sim) -> None:
        adv = self.knob("attackers", [0, 1])
        self.adv_voices = adv
        self.divergence = self.knob("divergence_slot", 1)
        exits = self.knob("exits", [5, 6])
        exit_slot = self.knob("exit_slot", cb_boundary_slot(1, sim.params) + 2)
        self.reserved_users.add(0)
        for j, i in enumerate(exits):
            at = exit_slot * sim.slot_ms + 1_000 + 10 * j
            sim.schedule(at, "action", ("exit", i))
        self.exits = exits

    def action(self, sim, name, args) -> None:
        i = args
        tx = sim.exit_tx(i, sim.now)
        sim.submit(tx, sim.now, sim.voice_ids[i], tag="exit")

    def on_finish(self, sim) -> None:
        obs = sim.nodes[sim.observer_ids[0]]
        honest = sorted((obs.dag.records[h] for h in obs.history()), key=lambda r: (r.slot, r.hash))
        rewrite = [r for r in honest if r.slot < self.divergence]
        tips = Adversary.tips_before(obs, self.divergence)
        g = sim.genesis
        schedules = g.initial_schedules()
        keys = {sim.voice_keys[i].public_key: sim.voice_keys[i] for i in self.adv_voices}
        last_slot = max((r.slot for r in honest), default=0)
        cb_hash = g.cb.hash
        boundary = cb_boundary_slot(1, sim.params)
        loot = transfer(sim.user_keys[0], sim.user_keys[3].public_key,
                        self.knob("rewrite_amount", 900_000), timestamp=self.divergence * sim.slot_ms - 1,
                        sequence=1) if self.divergence > 0 else None
        state = g.state.copy()
        reveals: dict[bytes, bytes] = {}
        forged = []
        for slot in range(self.divergence, last_slot + 1):
            cycle = cycle_of(slot, sim.params)
            if cycle > 1:
                break
            voices = schedules[cycle].voices_for(slot)
            creator = next((v for v in voices if v in keys), None)
            if slot == boundary and forged:
                cycle0 = {r.creator: rng_secret(keys[r.creator], -1) for r in forged if r.slot < sim.params.slices}
                seed = derive_seed(RevealSet(0, cycle0)) if cycle0 else g.seed
                cb_hash = take_snapshot(state, 1, boundary, seed, g.cb.hash, sim.params).hash
            if creator is None:
                continue
            kp = keys[creator]
            txs = [loot] if loot is not None and not forged else []
            reveal = rng_secret(kp, cycle - 1)
            rec = create_record(
                slot=slot, keys=kp, tips=tips, prior_cb_hash=cb_hash, schedule=schedules[cycle],
                pending=txs, state=state, created_at=slot * sim.slot_ms + 4_500,
                rng_commitment=crypto.commit(rng_secret(kp, cycle)), rng_reveal=reveal,
                slot_ms=sim.slot_ms, cycle=cycle,
            )
            for t in rec.transactions:
                apply_in_place(state, t, cycle=cycle)
            forged.append(rec)
            tips = [rec.hash]
        rewrite.extend(forged)
        choice, rule, calls = choose_history(g, sim.node_config, [honest, rewrite])
        boot_match = None
        if choice == 0:
            fresh = NodeState("bootstrap", g, sim.node_config)
            fresh.catch_up(honest, sim.slot_ms, sim.cfg.raw["record_offset_ms"])
            boot_match = fresh.ledger.state_root() == obs.ledger.state_root()
        self.info = {
            "attackers": [sim.voice_ids[i] for i in self.adv_voices],
            "rewrite_records": len(forged),
            "honest_records": len(honest),
            "bootstrap_choice": "NeedsExternalInput" if choice is NeedsExternalInput else
            ("honest" if choice == 0 else "rewrite"),
            "bootstrap_rule": rule,
            "oracle_calls": calls,
            "bootstrap_ledger_matches_observer": boot_match,
            "exits": [sim.voice_ids[i] for i in self.exits],
        }


class RngWithhold(Adversary):
    """Voices withhold their records (and reveals) for a whole cycle."""

    name = "rng_withhold"

    def setup(self, sim) -> None:
        self.withholders = [sim.voice_ids[i] for i in self.knob("withholders", [0, 1])]
        self.late = [sim.voice_ids[i] for i in self.knob("release_late", [])]
        self.controlled = set(self.withholders) | set(self.late)
        self.cycle = self.knob("cycle", 1)
        self.held: list[tuple[str, Record]] = []
        end = cycle_start(self.cycle + 1, sim.params)
        sim.schedule(end * sim.slot_ms + 1_000, "action", ("release", None))

    def produce(self, sim, nid, slot) -> bool:
        if nid not in self.controlled or cycle_of(slot, sim.params) != self.cycle:
            return False
        if nid in self.late:
            rec = sim.nodes[nid].decide_record_action(slot, sim.now).record
            if rec is not None:
                self.held.append((nid, rec))
        return True

    def action(self, sim, name, args) -> None:
        for nid, rec in self.held:
            sim.log(nid, "late_release", slot=rec.slot, record=rec.hash.hex())
            sim.publish(nid, rec)

    def report(self, sim) -> dict:
        obs = sim.nodes[sim.observer_ids[0]]
        slashed = sorted({sim.voice_of[ev.voice] for ev in obs.ledger_events
                          if ev.action == "destroy" and ev.evidence_kind == "silence"
                          and isinstance(ev.evidence, dict) and ev.evidence.get("cycle") == self.cycle})
        cb = obs.cb_chain[self.cycle + 1] if len(obs.cb_chain) > self.cycle + 1 else None
        return {
            "cycle": self.cycle, "withholders": self.withholders, "released_late": self.late,
            "silence_slashed": slashed,
            "cycle_seed": cb.cycle_seed.hex() if cb else None,
        }


_REGISTRY = {cls.name: cls for cls in (Honest, DoubleSpendInsecure, IsolateVoice, IsolateTransactor,
                                       Partition, ColludeFork, HistoryRewrite, RngWithhold)}


def make_adversary(config, sim) -> Adversary:
    return _REGISTRY[config.scenario](sim)
