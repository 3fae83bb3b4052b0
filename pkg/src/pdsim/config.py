"""Run configuration: one human-editable YAML file per experiment.

Latency-like fields carry an ``_ms`` suffix in the file and stay in
milliseconds on the parsed config objects; conversion to engine seconds
happens once, inside the ``build_*`` helpers.  Parse -> serialize -> parse
is the identity because serialization writes the stored values verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .dists import Dist
from .perf import ClusterShape, PerfProfile
from .transfer import LinkModel
from .workload import PrefixSpec, ScenarioSpec, TrafficTrace

MS = 1e-3


class ConfigError(ValueError):
    """Invalid run config; the message names every failing cross-reference."""


@dataclass
class ModelConfig:
    hidden_size: int = 1024
    num_layers: int = 16
    bytes_per_elem: int = 2
    devices_per_instance: int = 4

    def to_dict(self) -> dict:
        return {"hidden_size": self.hidden_size, "num_layers": self.num_layers,
                "bytes_per_elem": self.bytes_per_elem,
                "devices_per_instance": self.devices_per_instance}

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(**raw)


@dataclass
class PrefixConfig:
    id: str
    length_tokens: int
    hit_factor: float = 1.0
    weight: float = 1.0
    prompt_len: int | None = None
    ttft_slo_ms: float | None = None

    def to_dict(self) -> dict:
        out = {"id": self.id, "length_tokens": self.length_tokens,
               "hit_factor": self.hit_factor, "weight": self.weight}
        if self.prompt_len is not None:
            out["prompt_len"] = self.prompt_len
        if self.ttft_slo_ms is not None:
            out["ttft_slo_ms"] = self.ttft_slo_ms
        return out


@dataclass
class ScenarioConfig:
    id: str
    prompt_len_dist: dict[int, float]
    output_len_dist: dict[int, float]
    prefixes: list[PrefixConfig] = field(default_factory=list)
    ttft_slo_ms: float = 10000.0
    e2e_timeout_ms: float = 120000.0

    def build(self) -> ScenarioSpec:
        return ScenarioSpec(
            id=self.id,
            prompt_len_dist=dict(self.prompt_len_dist),
            output_len_dist=dict(self.output_len_dist),
            prefixes=tuple(PrefixSpec(p.id, p.length_tokens, p.hit_factor,
                                      p.weight, p.prompt_len)
                           for p in self.prefixes),
            ttft_slo=self.ttft_slo_ms * MS,
            e2e_timeout=self.e2e_timeout_ms * MS)

    def to_dict(self) -> dict:
        return {"id": self.id,
                "prompt_len_dist": dict(self.prompt_len_dist),
                "output_len_dist": dict(self.output_len_dist),
                "prefixes": [p.to_dict() for p in self.prefixes],
                "ttft_slo_ms": self.ttft_slo_ms,
                "e2e_timeout_ms": self.e2e_timeout_ms}

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        return cls(id=raw["id"],
                   prompt_len_dist={int(k): float(v)
                                    for k, v in raw["prompt_len_dist"].items()},
                   output_len_dist={int(k): float(v)
                                    for k, v in raw["output_len_dist"].items()},
                   prefixes=[PrefixConfig(**p) for p in raw.get("prefixes", [])],
                   ttft_slo_ms=float(raw.get("ttft_slo_ms", 10000.0)),
                   e2e_timeout_ms=float(raw.get("e2e_timeout_ms", 120000.0)))


@dataclass
class ProfileConfig:
    scenario: str
    ttft_by_batch_ms: dict[int, float]
    tpot_by_batch_ms: dict[int, float]
    prefix_benefit: float = 1.0
    mean_generated_tokens: float = 1.0
    transfer_time_ms: float = 0.0

    def build(self) -> PerfProfile:
        return PerfProfile(
            ttft_by_batch={int(b): v * MS for b, v in self.ttft_by_batch_ms.items()},
            tpot_by_batch={int(b): v * MS for b, v in self.tpot_by_batch_ms.items()},
            prefix_benefit=self.prefix_benefit,
            mean_generated_tokens=self.mean_generated_tokens,
            transfer_time=self.transfer_time_ms * MS)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario,
                "ttft_by_batch_ms": dict(self.ttft_by_batch_ms),
                "tpot_by_batch_ms": dict(self.tpot_by_batch_ms),
                "prefix_benefit": self.prefix_benefit,
                "mean_generated_tokens": self.mean_generated_tokens,
                "transfer_time_ms": self.transfer_time_ms}

    @classmethod
    def from_dict(cls, raw: dict) -> "ProfileConfig":
        return cls(scenario=raw["scenario"],
                   ttft_by_batch_ms={int(k): float(v)
                                     for k, v in raw["ttft_by_batch_ms"].items()},
                   tpot_by_batch_ms={int(k): float(v)
                                     for k, v in raw["tpot_by_batch_ms"].items()},
                   prefix_benefit=float(raw.get("prefix_benefit", 1.0)),
                   mean_generated_tokens=float(raw.get("mean_generated_tokens", 1.0)),
                   transfer_time_ms=float(raw.get("transfer_time_ms", 0.0)))


@dataclass
class GroupConfig:
    name: str
    scenario: str
    n_prefill: int
    n_decode: int
    batch_prefill: int
    batch_decode: int
    service: str = "svc"
    prefix_cache_budget_bytes: int = 1 << 34
    retrieval_capacity: int = 1

    def shape(self) -> ClusterShape:
        return ClusterShape(self.n_prefill, self.n_decode,
                            self.batch_prefill, self.batch_decode)

    def to_dict(self) -> dict:
        return {"name": self.name, "scenario": self.scenario,
                "n_prefill": self.n_prefill, "n_decode": self.n_decode,
                "batch_prefill": self.batch_prefill,
                "batch_decode": self.batch_decode, "service": self.service,
                "prefix_cache_budget_bytes": self.prefix_cache_budget_bytes,
                "retrieval_capacity": self.retrieval_capacity}

    @classmethod
    def from_dict(cls, raw: dict) -> "GroupConfig":
        return cls(**raw)


@dataclass
class LinkConfig:
    bandwidth_bytes_per_s: float = 40e9
    control_overhead_ms: float = 0.1
    hop_conflict_prob: float = 0.0
    conflict_penalty_ms: dict = field(
        default_factory=lambda: {"kind": "uniform", "low": 100.0, "high": 400.0})
    transfer_mode: str = "block_free"
    block_size_bytes: int = 4 << 20
    per_layer: bool = False

    def build(self) -> LinkModel:
        return LinkModel(
            bandwidth=self.bandwidth_bytes_per_s,
            control_overhead=self.control_overhead_ms * MS,
            hop_conflict_prob=self.hop_conflict_prob,
            conflict_penalty=Dist.from_config(self.conflict_penalty_ms, scale=MS))

    def to_dict(self) -> dict:
        return {"bandwidth_bytes_per_s": self.bandwidth_bytes_per_s,
                "control_overhead_ms": self.control_overhead_ms,
                "hop_conflict_prob": self.hop_conflict_prob,
                "conflict_penalty_ms": dict(self.conflict_penalty_ms),
                "transfer_mode": self.transfer_mode,
                "block_size_bytes": self.block_size_bytes,
                "per_layer": self.per_layer}

    @classmethod
    def from_dict(cls, raw: dict) -> "LinkConfig":
        return cls(**raw)


@dataclass
class TrafficConfig:
    kind: str = "open"                       # open (Poisson trace) | closed (users)
    slots: list[dict] = field(default_factory=list)
    users: dict[str, int] = field(default_factory=dict)

    def build_trace(self, duration: float) -> TrafficTrace:
        slots = tuple((float(s["start_s"]),
                       {k: float(v) for k, v in s["rates"].items()})
                      for s in self.slots)
        return TrafficTrace(slots=slots, end_time=duration)

    def to_dict(self) -> dict:
        return {"kind": self.kind,
                "slots": [dict(s) for s in self.slots],
                "users": dict(self.users)}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrafficConfig":
        return cls(kind=raw.get("kind", "open"),
                   slots=[dict(s) for s in raw.get("slots", [])],
                   users={k: int(v) for k, v in raw.get("users", {}).items()})


@dataclass
class GatewayConfig:
    retry_subset_size: int = 4
    inter_offer_delay_ms: float = 50.0
    batch_window_fraction: float = 0.1       # of TTFT at batch 1

    def to_dict(self) -> dict:
        return {"retry_subset_size": self.retry_subset_size,
                "inter_offer_delay_ms": self.inter_offer_delay_ms,
                "batch_window_fraction": self.batch_window_fraction}

    @classmethod
    def from_dict(cls, raw: dict) -> "GatewayConfig":
        return cls(**raw)


_DEFAULT_LOAD_MS = {
    "ssd": {"P": {"kind": "uniform", "low": 40000.0, "high": 80000.0},
            "D": {"kind": "uniform", "low": 50000.0, "high": 100000.0}},
    "sfs": {"P": {"kind": "uniform", "low": 120000.0, "high": 240000.0},
            "D": {"kind": "uniform", "low": 150000.0, "high": 300000.0}},
}


@dataclass
class ControlConfig:
    preprovisioned: bool = True
    propagation_delay_ms: float = 200.0
    health_report_interval_ms: float = 10000.0
    miss_threshold: int = 3
    monitor_interval_ms: float = 5000.0
    storage: str = "ssd"
    load_ms: dict = field(default_factory=lambda: {
        b: {r: dict(d) for r, d in roles.items()}
        for b, roles in _DEFAULT_LOAD_MS.items()})
    connect_latency_ms: dict = field(
        default_factory=lambda: {"kind": "uniform", "low": 200.0, "high": 2000.0})
    connect_timeout_ms: float = 30000.0
    report_latency_ms: dict = field(
        default_factory=lambda: {"kind": "uniform", "low": 50.0, "high": 500.0})
    collect_timeout_ms: float = 30000.0
    retry_interval_ms: float = 5000.0
    inplace_reset_ms: float = 30000.0
    spare_containers: int = 2

    def build_timing(self):
        from .control import ControlTiming
        backend = self.load_ms[self.storage]
        return ControlTiming(
            propagation_delay=self.propagation_delay_ms * MS,
            report_latency=Dist.from_config(self.report_latency_ms, scale=MS),
            collect_timeout=self.collect_timeout_ms * MS,
            retry_interval=self.retry_interval_ms * MS,
            connect_latency=Dist.from_config(self.connect_latency_ms, scale=MS),
            connect_timeout=self.connect_timeout_ms * MS,
            load_latency={role: Dist.from_config(conf, scale=MS)
                          for role, conf in backend.items()},
            health_report_interval=self.health_report_interval_ms * MS,
            miss_threshold=self.miss_threshold,
            monitor_interval=self.monitor_interval_ms * MS,
            inplace_reset_latency=Dist.from_config(self.inplace_reset_ms, scale=MS))

    def to_dict(self) -> dict:
        return {"preprovisioned": self.preprovisioned,
                "propagation_delay_ms": self.propagation_delay_ms,
                "health_report_interval_ms": self.health_report_interval_ms,
                "miss_threshold": self.miss_threshold,
                "monitor_interval_ms": self.monitor_interval_ms,
                "storage": self.storage,
                "load_ms": {b: {r: dict(d) for r, d in roles.items()}
                            for b, roles in self.load_ms.items()},
                "connect_latency_ms": dict(self.connect_latency_ms),
                "connect_timeout_ms": self.connect_timeout_ms,
                "report_latency_ms": dict(self.report_latency_ms),
                "collect_timeout_ms": self.collect_timeout_ms,
                "retry_interval_ms": self.retry_interval_ms,
                "inplace_reset_ms": self.inplace_reset_ms,
                "spare_containers": self.spare_containers}

    @classmethod
    def from_dict(cls, raw: dict) -> "ControlConfig":
        return cls(**raw)


@dataclass
class FaultDrillConfig:
    count: int = 0
    start_s: float = 10.0
    spacing_s: float = 10.0
    level: int = 2

    def to_dict(self) -> dict:
        return {"count": self.count, "start_s": self.start_s,
                "spacing_s": self.spacing_s, "level": self.level}

    @classmethod
    def from_dict(cls, raw: dict) -> "FaultDrillConfig":
        return cls(**raw)


@dataclass
class UpgradeConfig:
    scenario: str
    at_s: float = 10.0

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "at_s": self.at_s}

    @classmethod
    def from_dict(cls, raw: dict) -> "UpgradeConfig":
        return cls(**raw)


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    duration_s: float = 60.0
    policy: str = "on_demand"
    metrics_bucket_s: float = 5.0
    warmup_s: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)
    scenarios: list[ScenarioConfig] = field(default_factory=list)
    profiles: list[ProfileConfig] = field(default_factory=list)
    groups: list[GroupConfig] = field(default_factory=list)
    link: LinkConfig = field(default_factory=LinkConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    faults: FaultDrillConfig | None = None
    upgrade: UpgradeConfig | None = None

    # -- lookups -------------------------------------------------------------
    def scenario_ids(self) -> list[str]:
        return [s.id for s in self.scenarios]

    def profile_for(self, scenario: str) -> ProfileConfig:
        for p in self.profiles:
            if p.scenario == scenario:
                return p
        raise KeyError(scenario)

    # -- validation ------------------------------------------------------
    def validate(self) -> None:
        problems: list[str] = []
        if self.duration_s <= 0:
            problems.append("duration_s must be > 0")
        if self.metrics_bucket_s <= 0:
            problems.append("metrics_bucket_s must be > 0")
        if self.policy not in ("baseline", "on_demand"):
            problems.append(f"policy {self.policy!r} not one of baseline/on_demand")
        if self.link.transfer_mode not in ("block_free", "block_fixed"):
            problems.append(f"link.transfer_mode {self.link.transfer_mode!r} invalid")
        if self.link.transfer_mode == "block_fixed" and self.link.block_size_bytes < 1:
            problems.append("block_fixed transfer needs link.block_size_bytes >= 1")
        ids = self.scenario_ids()
        if len(set(ids)) != len(ids):
            problems.append("duplicate scenario ids")
        profiled = {p.scenario for p in self.profiles}
        for sid in ids:
            if sid not in profiled:
                problems.append(f"scenario {sid!r} has no profile")
        for p in self.profiles:
            if p.scenario not in ids:
                problems.append(f"profile references unknown scenario {p.scenario!r}")
        group_names = [g.name for g in self.groups]
        if len(set(group_names)) != len(group_names):
            problems.append("duplicate group names")
        mapped = {g.scenario for g in self.groups}
        for sid in ids:
            if sid not in mapped:
                problems.append(f"scenario {sid!r} mapped to no group")
        for g in self.groups:
            if g.scenario not in ids:
                problems.append(f"group {g.name!r} references unknown scenario "
                                f"{g.scenario!r}")
                continue
            try:
                prof = self.profile_for(g.scenario)
            except KeyError:
                continue
            ttft_keys = sorted(int(k) for k in prof.ttft_by_batch_ms)
            tpot_keys = sorted(int(k) for k in prof.tpot_by_batch_ms)
            if ttft_keys and (ttft_keys[0] > 1 or g.batch_prefill > ttft_keys[-1]):
                problems.append(
                    f"group {g.name!r}: batch_prefill {g.batch_prefill} outside "
                    f"profile ttft table [1..{ttft_keys[-1]}] (table must start at 1)")
            if tpot_keys and (tpot_keys[0] > 1 or g.batch_decode > tpot_keys[-1]):
                problems.append(
                    f"group {g.name!r}: batch_decode {g.batch_decode} outside "
                    f"profile tpot table [1..{tpot_keys[-1]}] (table must start at 1)")
        if self.traffic.kind not in ("open", "closed"):
            problems.append(f"traffic.kind {self.traffic.kind!r} invalid")
        for slot in self.traffic.slots:
            for sid in slot.get("rates", {}):
                if sid not in ids:
                    problems.append(f"traffic slot references unknown scenario {sid!r}")
        for sid in self.traffic.users:
            if sid not in ids:
                problems.append(f"traffic users reference unknown scenario {sid!r}")
        if self.upgrade is not None and self.upgrade.scenario not in ids:
            problems.append(f"upgrade references unknown scenario "
                            f"{self.upgrade.scenario!r}")
        # dist/spec level validation, with context
        for s in self.scenarios:
            try:
                s.build()
            except ValueError as exc:
                problems.append(f"scenario {s.id!r}: {exc}")
        for p in self.profiles:
            try:
                p.build()
            except ValueError as exc:
                problems.append(f"profile {p.scenario!r}: {exc}")
        try:
            self.link.build()
        except ValueError as exc:
            problems.append(f"link: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- (de)serialization -------------------------------------------------
    def to_dict(self) -> dict:
        out = {"name": self.name, "seed": self.seed,
               "duration_s": self.duration_s, "policy": self.policy,
               "metrics_bucket_s": self.metrics_bucket_s,
               "warmup_s": self.warmup_s,
               "model": self.model.to_dict(),
               "scenarios": [s.to_dict() for s in self.scenarios],
               "profiles": [p.to_dict() for p in self.profiles],
               "groups": [g.to_dict() for g in self.groups],
               "link": self.link.to_dict(),
               "traffic": self.traffic.to_dict(),
               "gateway": self.gateway.to_dict(),
               "control": self.control.to_dict()}
        if self.faults is not None:
            out["faults"] = self.faults.to_dict()
        if self.upgrade is not None:
            out["upgrade"] = self.upgrade.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return cls(
            name=raw.get("name", "run"),
            seed=int(raw.get("seed", 0)),
            duration_s=float(raw.get("duration_s", 60.0)),
            policy=raw.get("policy", "on_demand"),
            metrics_bucket_s=float(raw.get("metrics_bucket_s", 5.0)),
            warmup_s=float(raw.get("warmup_s", 0.0)),
            model=ModelConfig.from_dict(raw.get("model", {})),
            scenarios=[ScenarioConfig.from_dict(s) for s in raw.get("scenarios", [])],
            profiles=[ProfileConfig.from_dict(p) for p in raw.get("profiles", [])],
            groups=[GroupConfig.from_dict(g) for g in raw.get("groups", [])],
            link=LinkConfig.from_dict(raw.get("link", {})),
            traffic=TrafficConfig.from_dict(raw.get("traffic", {})),
            gateway=GatewayConfig.from_dict(raw.get("gateway", {})),
            control=ControlConfig.from_dict(raw.get("control", {})),
            faults=(FaultDrillConfig.from_dict(raw["faults"])
                    if raw.get("faults") else None),
            upgrade=(UpgradeConfig.from_dict(raw["upgrade"])
                     if raw.get("upgrade") else None))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text) or {})


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_yaml(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(cfg.to_yaml())
