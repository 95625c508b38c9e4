"""Scenario configuration: a JSON document that fully determines a run."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..ledger import LedgerParams
from ..node import NodeConfig
from ..schedule import CycleParams

SEED_ENV = "DCA_SIM_SEED"

SCENARIOS = (
    "honest",
    "double_spend_insecure",
    "isolate_voice",
    "isolate_transactor",
    "partition",
    "collude_fork",
    "history_rewrite",
    "rng_withhold",
)

POLICIES = ("AutoMajorityOfVoices", "AlwaysAsk", "ScriptedAnswer")

DEFAULTS: dict[str, Any] = {
    "name": "unnamed",
    "description": "",
    "seed": 1,
    "params": {
        "slot_duration_s": 10,
        "slices": 360,
        "confirm_depth": 10,
        "cycle_lag_slots": None,    # slices * 3 // 10 when null
        "prep_period_slots": None,  # slices // 10 when null
    },
    "ledger": {"deposit": 10_000, "lock_cycles": 36, "cb_window": 3, "timestamp_window_ms": 20_000},
    "voices": {"count": 20},
    "observers": {"count": 5, "degree": 3, "measuring_links": "all"},
    "genesis": {"users": 20, "balance": 1_000_000},
    "latency": {"model": "fixed", "ms": 500, "low_ms": 300, "high_ms": 700, "matrix": None},
    "workload": {"transfers": 200, "max_amount": 1000, "start_slot": 1, "end_slot": None},
    "duration_slots": 1080,
    "record_offset_ms": 4500,
    "node": {"grace_slots": 1, "partition_window": 30, "partition_threshold": 0.2},
    "arbitration": {"policy": "AutoMajorityOfVoices", "answer": None},
    "adversary": {"scenario": "honest", "knobs": {}},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            if path == "adversary.knobs" or path.startswith("adversary.knobs."):
                out[key] = value
                continue
            raise ConfigError(f"unknown config field {path + key!r}")
        if isinstance(base[key], dict) and key != "knobs":
            if not isinstance(value, dict):
                raise ConfigError(f"field {path + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    # -- construction --------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, *, env: bool = True) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        merged = _merge(DEFAULTS, data)
        if env and os.environ.get(SEED_ENV):
            try:
                merged["seed"] = int(os.environ[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, *, env: bool = True) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(data, env=env)

    def with_overrides(self, **changes) -> "ScenarioConfig":
        data = copy.deepcopy(self.raw)
        for dotted, value in changes.items():
            node = data
            *parents, leaf = dotted.split("__")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return ScenarioConfig.from_dict(data, env=False)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dumps(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    # -- typed views -----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def scenario(self) -> str:
        return self.raw["adversary"]["scenario"]

    @property
    def knobs(self) -> dict:
        return self.raw["adversary"]["knobs"]

    @property
    def cycle_params(self) -> CycleParams:
        p = self.raw["params"]
        slices = p["slices"]
        return CycleParams(
            cycle_length_s=slices * p["slot_duration_s"],
            slot_duration_s=p["slot_duration_s"],
            confirm_depth=p["confirm_depth"],
            cycle_lag_slots=p["cycle_lag_slots"] if p["cycle_lag_slots"] is not None else slices * 3 // 10,
            prep_period_slots=p["prep_period_slots"] if p["prep_period_slots"] is not None else slices // 10,
        )

    @property
    def ledger_params(self) -> LedgerParams:
        return LedgerParams(**self.raw["ledger"])

    @property
    def node_config(self) -> NodeConfig:
        n = self.raw["node"]
        return NodeConfig(self.cycle_params, self.ledger_params, grace_slots=n["grace_slots"],
                          partition_window=n["partition_window"],
                          partition_threshold=n["partition_threshold"])

    @property
    def n_voices(self) -> int:
        return self.raw["voices"]["count"]

    @property
    def n_observers(self) -> int:
        return self.raw["observers"]["count"]

    @property
    def duration_slots(self) -> int:
        return self.raw["duration_slots"]

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        r = self.raw
        def positive(value, what):
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{what} must be a positive integer")

        if not isinstance(r["seed"], int) or not 0 <= r["seed"] < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        positive(r["voices"]["count"], "voices.count")
        if not isinstance(r["observers"]["count"], int) or r["observers"]["count"] < 1:
            raise ConfigError("observers.count must be at least 1 (observer 0 measures latency)")
        positive(r["observers"]["degree"], "observers.degree")
        positive(r["duration_slots"], "duration_slots")
        positive(r["params"]["slices"], "params.slices")
        positive(r["params"]["slot_duration_s"], "params.slot_duration_s")
        positive(r["genesis"]["users"], "genesis.users")
        if r["genesis"]["balance"] < 0:
            raise ConfigError("genesis.balance must be non-negative")
        if r["workload"]["transfers"] < 0:
            raise ConfigError("workload.transfers must be non-negative")
        if r["workload"]["max_amount"] < 1:
            raise ConfigError("workload.max_amount must be at least 1")
        lat = r["latency"]
        if lat["model"] not in ("fixed", "uniform", "matrix"):
            raise ConfigError("latency.model must be fixed, uniform or matrix")
        if lat["model"] == "fixed" and lat["ms"] < 0:
            raise ConfigError("latency.ms must be non-negative")
        if lat["model"] == "uniform" and not 0 <= lat["low_ms"] <= lat["high_ms"]:
            raise ConfigError("latency range must satisfy 0 <= low_ms <= high_ms")
        if lat["model"] == "matrix":
            n = self.n_voices + self.n_observers
            m = lat["matrix"]
            if not (isinstance(m, list) and len(m) == n and all(isinstance(row, list) and len(row) == n for row in m)):
                raise ConfigError(f"latency.matrix must be a {n}x{n} list of lists")
        if not 0 <= r["record_offset_ms"] < r["params"]["slot_duration_s"] * 1000:
            raise ConfigError("record_offset_ms must fall inside the slot")
        if r["adversary"]["scenario"] not in SCENARIOS:
            raise ConfigError(f"unknown scenario {r['adversary']['scenario']!r}; "
                              f"choose from {', '.join(SCENARIOS)}")
        if r["arbitration"]["policy"] not in POLICIES:
            raise ConfigError(f"arbitration.policy must be one of {', '.join(POLICIES)}")
        if not 0 <= r["node"]["partition_threshold"] <= 1:
            raise ConfigError("node.partition_threshold must be within [0, 1]")
        try:
            self.cycle_params
            self.ledger_params
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        needs_cycle = {"partition", "rng_withhold"}
        if self.scenario in needs_cycle and r["duration_slots"] < r["params"]["slices"]:
            raise ConfigError(f"scenario {self.scenario} needs at least one full cycle of slots")
