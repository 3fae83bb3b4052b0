"""Scenario-tagged request generation with tidal arrival rates.

Scenarios differ in prompt length, shared-prefix makeup, output length and
latency objectives; traffic is a step function of per-scenario Poisson rates
over time slots.  Generation is deterministic for a given seed, and a trace
can be exported/imported as line-delimited JSON for replay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .engine import _stream_seed
from .perf import ClusterShape


class Status(str, Enum):
    PENDING = "pending"
    PREFILLING = "prefilling"
    TRANSFERRING = "transferring"
    DECODING = "decoding"
    DONE = "done"
    TIMEOUT_TTFT = "timeout_ttft"
    TIMEOUT_E2E = "timeout_e2e"
    FAILED = "failed"


TERMINAL = {Status.DONE, Status.TIMEOUT_TTFT, Status.TIMEOUT_E2E, Status.FAILED}

# phase keys used in Request.timestamps, in lifecycle order
PHASES = ("submitted", "assigned", "prefill_start", "prefill_end",
          "transfer_start", "transfer_end", "decode_join", "finished")


def _normalized(dist: dict[int, float], name: str) -> dict[int, float]:
    if not dist:
        raise ValueError(f"{name} must be non-empty")
    total = float(sum(dist.values()))
    if total <= 0 or any(w < 0 for w in dist.values()):
        raise ValueError(f"{name} weights must be >= 0 and sum > 0")
    return {int(k): float(w) / total for k, w in sorted(dist.items())}


@dataclass(frozen=True)
class PrefixSpec:
    """One shared prompt prefix: identity, token length and cached-hit speedup.

    A prefix may pin the prompt length of requests that carry it (prompt
    classes in real traffic correlate with their setting part), and may carry
    its own first-token budget, since the acceptable wait for a short prompt
    differs from that of a long one; otherwise the scenario-level values
    apply.
    """

    id: str
    length: int
    hit_factor: float = 1.0   # prefill latency multiplier when cached, in (0, 1]
    weight: float = 1.0       # relative odds a request carries this prefix
    prompt_len: int | None = None
    ttft_slo: float | None = None

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("prefix length must be >= 1")
        if not 0.0 < self.hit_factor <= 1.0:
            raise ValueError("hit_factor must be in (0, 1]")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")
        if self.prompt_len is not None and self.prompt_len <= self.length:
            raise ValueError("pinned prompt_len must exceed the prefix length")
        if self.ttft_slo is not None and self.ttft_slo <= 0:
            raise ValueError("per-prefix ttft_slo must be > 0")


@dataclass(frozen=True)
class ScenarioSpec:
    """Request distributions and latency objectives for one scenario."""

    id: str
    prompt_len_dist: dict[int, float]
    output_len_dist: dict[int, float]
    prefixes: tuple[PrefixSpec, ...] = ()
    ttft_slo: float = 10.0
    e2e_timeout: float = 120.0

    def __post_init__(self):
        object.__setattr__(self, "prompt_len_dist",
                           _normalized(self.prompt_len_dist, "prompt_len_dist"))
        object.__setattr__(self, "output_len_dist",
                           _normalized(self.output_len_dist, "output_len_dist"))
        object.__setattr__(self, "prefixes", tuple(self.prefixes))
        min_prompt = min(self.prompt_len_dist)
        for p in self.prefixes:
            if p.prompt_len is None and p.length >= min_prompt:
                raise ValueError(
                    f"prefix {p.id!r} length {p.length} must be < min prompt "
                    f"length {min_prompt}")
        if min(self.output_len_dist) < 1:
            raise ValueError("output lengths must be >= 1")
        if self.ttft_slo >= self.e2e_timeout:
            raise ValueError("ttft_slo must be < e2e_timeout")
        for p in self.prefixes:
            if p.ttft_slo is not None and p.ttft_slo >= self.e2e_timeout:
                raise ValueError(
                    f"prefix {p.id!r} ttft_slo must be < e2e_timeout")

    def ttft_slo_for(self, prefix_id: str | None) -> float:
        """First-token budget for a request class; prefix override wins."""
        if prefix_id is not None:
            for p in self.prefixes:
                if p.id == prefix_id and p.ttft_slo is not None:
                    return p.ttft_slo
        return self.ttft_slo

    @property
    def mean_output_tokens(self) -> float:
        return sum(k * w for k, w in self.output_len_dist.items())

    @property
    def mean_prompt_tokens(self) -> float:
        return sum(k * w for k, w in self.prompt_len_dist.items())


@dataclass(frozen=True)
class TrafficTrace:
    """Step function of per-scenario request rates: (start_time, {scenario: rps})."""

    slots: tuple[tuple[float, dict[str, float]], ...]
    end_time: float

    def __post_init__(self):
        slots = tuple((float(t), dict(r)) for t, r in self.slots)
        object.__setattr__(self, "slots", slots)
        starts = [t for t, _ in slots]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError("slots must be sorted by start_time and non-overlapping")
        for _, rates in slots:
            if any(v < 0 for v in rates.values()):
                raise ValueError("rates must be >= 0")
        if slots and self.end_time <= slots[-1][0]:
            raise ValueError("end_time must exceed the last slot start")

    def spans(self) -> list[tuple[float, float, dict[str, float]]]:
        out = []
        for i, (start, rates) in enumerate(self.slots):
            end = self.slots[i + 1][0] if i + 1 < len(self.slots) else self.end_time
            out.append((start, end, rates))
        return out


@dataclass
class Request:
    """One prompt's lifecycle record."""

    id: int
    scenario: str
    prompt_len: int
    prefix_id: str | None
    output_len: int
    arrival: float
    timestamps: dict[str, float] = field(default_factory=dict)
    status: Status = Status.PENDING
    # simulator-internal bookkeeping (not part of the replay format)
    location: str = "none"
    assigned_prefill: str | None = None
    sse_prefill: str | None = None
    transfer_xi: float | None = None
    attempts: int = 0
    default_text: bool = False

    def mark(self, phase: str, t: float) -> None:
        last = max(self.timestamps.values(), default=self.arrival)
        if t < last - 1e-9:
            raise ValueError(f"timestamp {phase}={t} before {last}")
        self.timestamps[phase] = t

    def finish(self, status: Status, t: float) -> None:
        if self.is_terminal:
            raise ValueError(f"request {self.id} already terminal ({self.status})")
        self.status = status
        self.mark("finished", t)

    @property
    def is_terminal(self) -> bool:
        return self.status in TERMINAL

    def to_record(self) -> dict:
        return {"id": self.id, "scenario": self.scenario,
                "prompt_len": self.prompt_len, "prefix_id": self.prefix_id,
                "output_len": self.output_len, "arrival": self.arrival}

    @classmethod
    def from_record(cls, rec: dict) -> "Request":
        return cls(id=int(rec["id"]), scenario=rec["scenario"],
                   prompt_len=int(rec["prompt_len"]), prefix_id=rec["prefix_id"],
                   output_len=int(rec["output_len"]), arrival=float(rec["arrival"]))


def _choice(dist: dict[int, float], rng: np.random.Generator) -> int:
    keys = list(dist)
    probs = np.fromiter(dist.values(), dtype=float)
    return int(keys[rng.choice(len(keys), p=probs / probs.sum())])


def sample_request(spec: ScenarioSpec, rng: np.random.Generator,
                   rid: int, arrival: float) -> Request:
    """Draw one request i.i.d. from the scenario's distributions."""
    prompt_len = _choice(spec.prompt_len_dist, rng)
    output_len = _choice(spec.output_len_dist, rng)
    prefix_id = None
    if spec.prefixes:
        weights = np.array([p.weight for p in spec.prefixes], dtype=float)
        if weights.sum() > 0:
            prefix = spec.prefixes[
                int(rng.choice(len(spec.prefixes), p=weights / weights.sum()))]
            prefix_id = prefix.id
            if prefix.prompt_len is not None:
                prompt_len = prefix.prompt_len
    return Request(id=rid, scenario=spec.id, prompt_len=prompt_len,
                   prefix_id=prefix_id, output_len=output_len, arrival=arrival)


def generate_trace(specs: list[ScenarioSpec], trace: TrafficTrace,
                   seed: int) -> list[Request]:
    """Poisson arrivals per scenario per slot, deterministic for a given seed.

    Each scenario draws from its own seeded stream, so adding a scenario never
    perturbs another's arrivals.  Requests come back sorted by arrival time
    with ids assigned in that order.
    """
    if not specs:
        raise ValueError("need at least one scenario")
    pending: list[tuple[float, int, Request]] = []
    for order, spec in enumerate(specs):
        # stream keyed by scenario name: adding a scenario leaves others intact
        rng = np.random.default_rng(_stream_seed(seed, f"workload/{spec.id}"))
        for start, end, rates in trace.spans():
            rate = rates.get(spec.id, 0.0)
            if rate <= 0:
                continue
            t = start
            while True:
                t += rng.exponential(1.0 / rate)
                if t >= end:
                    break
                pending.append((t, order, sample_request(spec, rng, -1, t)))
    pending.sort(key=lambda item: (item[0], item[1]))
    requests = []
    for rid, (_, _, req) in enumerate(pending):
        req.id = rid
        requests.append(req)
    return requests


def export_jsonl(requests: list[Request], path) -> None:
    with open(path, "w") as fh:
        for req in requests:
            fh.write(json.dumps(req.to_record(), sort_keys=True) + "\n")


def import_jsonl(path) -> list[Request]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Request.from_record(json.loads(line)))
    return out


def empirical_mismatch(log: list[Request], shape: ClusterShape) -> float:
    """Measured prefill capability over measured decode capability.

    Capability per side is instances * batch / mean observed phase time,
    using prefill_end - prefill_start for prefill and finished -
    transfer_start (handoff plus token generation) for decode.  A balanced
    group drives this toward 1.0.
    """
    tp, td = [], []
    for req in log:
        ts = req.timestamps
        if "prefill_start" in ts and "prefill_end" in ts:
            tp.append(ts["prefill_end"] - ts["prefill_start"])
        if "transfer_start" in ts and "finished" in ts and req.status is Status.DONE:
            td.append(ts["finished"] - ts["transfer_start"])
    if not tp or not td:
        raise ValueError("log has no completed requests with both phases")
    mean_tp = sum(tp) / len(tp)
    mean_td = sum(td) / len(td)
    prefill_cap = shape.n_prefill * shape.batch_prefill / mean_tp
    decode_cap = shape.n_decode * shape.batch_decode / mean_td
    return prefill_cap / decode_cap
