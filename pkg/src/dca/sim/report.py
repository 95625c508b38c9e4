"""Run reports: latency tables, production counts, slashing, forks and the verdict."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from ..node import EquivocationProof, ForkEvidence, LedgerEvent
from ..records import Record
from ..schedule import cycle_of

DEFENDED = "Defended"
DOUBLE_SPEND_SUCCEEDED = "DoubleSpendSucceeded"
UNRESOLVABLE_FORK = "UnresolvableFork"

EXIT_CODES = {DEFENDED: 0, DOUBLE_SPEND_SUCCEEDED: 3, UNRESOLVABLE_FORK: 4}
EXIT_USAGE = 2


@dataclass
class RunReport:
    data: dict = field(default_factory=dict)
    trace: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return self.data["verdict"]

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1) + "\n"

    def trace_text(self) -> str:
        return "\n".join(self.trace) + "\n"

    def __getitem__(self, key):
        return self.data[key]


def evidence_payload(ev: LedgerEvent) -> dict:
    """The self-verifying material attached to a slashing entry."""
    e = ev.evidence
    if isinstance(e, EquivocationProof):
        return {"type": "equivocation_pair", "records": [e.first.encode().hex(), e.second.encode().hex()]}
    if isinstance(e, Record):
        return {"type": "invalid_tx_record", "records": [e.encode().hex()]}
    if isinstance(e, ForkEvidence):
        return {"type": e.kind.value, "records": [r.hash.hex() for r in e.records]}
    if isinstance(e, dict):
        return {"type": "full_cycle_silence", "cycle": e["cycle"], "scheduled_slots": list(e["slots"])}
    return {"type": "none"}


def _first_times(trace: list[dict], node: str, kind: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for entry in trace:
        if entry["node"] == node and entry["ev"] == kind:
            out.setdefault(entry["tx"], entry["t"])
    return out


def build_report(sim) -> RunReport:
    cfg = sim.cfg
    params = sim.params
    measuring = sim.observer_ids[0]
    parsed = [json.loads(line) for line in sim.trace]
    confirmed = _first_times(parsed, measuring, "tx_confirmed")
    secured = _first_times(parsed, measuring, "tx_secured")

    latencies = []
    for h, sub in sorted(sim.submissions.items(), key=lambda kv: (kv[1].time, kv[0])):
        if sub.tag != "workload":
            continue
        key = h.hex()
        c, s = confirmed.get(key), secured.get(key)
        latencies.append({
            "tx": key[:16], "submitted_ms": sub.time,
            "confirm_ms": None if c is None else c - sub.time,
            "secure_ms": None if s is None else s - sub.time,
        })

    obs = sim.nodes[measuring]
    n_cycles = cycle_of(max(0, cfg.duration_slots - 1), params) + 1
    production = []
    for c in range(n_cycles):
        lo = c * params.slices
        hi = min(cfg.duration_slots, lo + params.slices)
        produced = safe = missing = 0
        for slot in range(lo, hi):
            hs = [h for h in obs.dag.by_slot.get(slot, ()) if h not in obs.excluded]
            if not hs:
                missing += 1
            produced += len(hs)
            safe += sum(1 for h in hs if obs.dag.records[h].safe)
        production.append({"cycle": c, "produced": produced, "missing": missing, "safe": safe})

    destroyed: dict[str, dict] = {}
    jailings: dict[str, dict] = {}
    for nid in sim.honest:
        node = sim.nodes[nid]
        for ev in node.ledger_events:
            voice = sim.voice_of.get(ev.voice, ev.voice.hex())
            book = destroyed if ev.action == "destroy" else jailings if ev.action == "jail" else None
            if book is None:
                continue
            entry = book.setdefault(voice, {
                "voice": voice, "evidence_kind": ev.evidence_kind, "evidence": evidence_payload(ev),
                "slot": ev.slot, "detected_by": 0,
            })
            entry["detected_by"] += 1

    fork_outcomes = {nid: sim.nodes[nid].fork_outcomes for nid in sim.nodes if sim.nodes[nid].fork_outcomes}
    oracle_calls = sum(sim.nodes[nid].oracle_calls for nid in sim.honest)
    warnings = {}
    for entry in parsed:
        if entry["ev"] == "partition_warning":
            warnings.setdefault(entry["node"], []).append({"t": entry["t"], "on": entry["on"]})

    violations = {nid: sim.nodes[nid].violations for nid in sim.honest if sim.nodes[nid].violations}
    unresolvable_nodes = sorted(nid for nid in sim.honest if sim.nodes[nid].ever_unresolvable)
    merchants = [{
        "node": m["node"], "tx": m["tx"].hex(), "wait": m["wait"], "accepted_at": m["accepted_at"],
        "depth_at_accept": m["depth_at_accept"], "deceived": sim.merchant_deceived(m),
    } for m in sim.merchants]
    if any(m["deceived"] for m in merchants):
        verdict = DOUBLE_SPEND_SUCCEEDED
    elif unresolvable_nodes:
        verdict = UNRESOLVABLE_FORK
    else:
        verdict = DEFENDED

    conf = [x["confirm_ms"] for x in latencies if x["confirm_ms"] is not None]
    sec = [x["secure_ms"] for x in latencies if x["secure_ms"] is not None]
    trace_digest = hashlib.sha256(("\n".join(sim.trace) + "\n").encode()).hexdigest()
    data = {
        "name": cfg.name,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "params": params.to_dict(),
        "verdict": verdict,
        "latency": {
            "transactions": latencies,
            "confirmed": len(conf), "secured": len(sec), "submitted": len(latencies),
            "confirm_ms_min": min(conf, default=None), "confirm_ms_max": max(conf, default=None),
            "secure_ms_min": min(sec, default=None), "secure_ms_max": max(sec, default=None),
        },
        "production": production,
        "deposits_destroyed": [destroyed[k] for k in sorted(destroyed)],
        "jailings": [jailings[k] for k in sorted(jailings)],
        "fork_outcomes": fork_outcomes,
        "oracle_calls": oracle_calls,
        "unresolvable_nodes": unresolvable_nodes,
        "partition_warnings": warnings,
        "merchants": merchants,
        "violations": violations,
        "final_state_roots": len({sim.nodes[n].ledger.state_root() for n in sim.honest}),
        "adversary": sim.adversary.report(sim),
        "trace_digest": trace_digest,
        "trace_lines": len(sim.trace),
    }
    return RunReport(data, sim.trace)
