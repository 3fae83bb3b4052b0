"""Analytic end-to-end performance model for disaggregated serving.

A cluster is a pool of prefill instances and a pool of decode instances.
Phase latencies come from measured per-batch-size tables:

    t_p = ttft(b_p) * prefix_benefit
    t_d = transfer_time + tpot(b_d) * mean_generated_tokens

and the per-instance throughput is capped by whichever of traffic, prefill
capability or decode capability is smallest:

    phi = min(traffic, n_p * b_p / t_p, n_d * b_d / t_d) / (n_p + n_d)

Per-instance processing capability ``n * b / t`` is in requests per second.
Latency tables hold measured values; batch sizes between two tabulated
points interpolate linearly, batch sizes outside the tabulated range are an
error (extrapolating measured latencies is how capacity plans go wrong).

All functions here are pure and safe to call from concurrent sweep workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal


class BatchOutOfRange(ValueError):
    """Requested batch size lies outside the tabulated range."""


def _validated_table(table: dict[int, float], name: str) -> dict[int, float]:
    if not table:
        raise ValueError(f"{name} must have at least one entry")
    items = sorted((int(b), float(v)) for b, v in table.items())
    prev = None
    for b, v in items:
        if b < 1:
            raise ValueError(f"{name} batch sizes must be >= 1, got {b}")
        if v < 0:
            raise ValueError(f"{name} latencies must be >= 0, got {v}")
        if prev is not None and v < prev:
            raise ValueError(f"{name} must be non-decreasing in batch size")
        prev = v
    return dict(items)


def _interp(table: dict[int, float], batch: int, name: str) -> float:
    sizes = list(table)
    if batch < sizes[0] or batch > sizes[-1]:
        raise BatchOutOfRange(
            f"batch {batch} outside tabulated {name} range [{sizes[0]}, {sizes[-1]}]")
    if batch in table:
        return table[batch]
    # linear interpolation between the bracketing tabulated sizes
    lo = max(b for b in sizes if b < batch)
    hi = min(b for b in sizes if b > batch)
    frac = (batch - lo) / (hi - lo)
    return table[lo] + frac * (table[hi] - table[lo])


@dataclass(frozen=True)
class PerfProfile:
    """Measured latency tables plus scenario constants for one workload.

    ttft_by_batch / tpot_by_batch map batch size to seconds and must be
    non-decreasing in batch size.  prefix_benefit is the multiplicative
    speedup of prefill from cached shared prefixes, in (0, 1].
    mean_generated_tokens is the average number of decode iterations per
    request (>= 1).  transfer_time is the per-request KVCache handoff time
    in seconds, the maximum over a request's parallel sub-transfers.
    """

    ttft_by_batch: dict[int, float]
    tpot_by_batch: dict[int, float]
    prefix_benefit: float = 1.0
    mean_generated_tokens: float = 1.0
    transfer_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "ttft_by_batch",
                           _validated_table(self.ttft_by_batch, "ttft_by_batch"))
        object.__setattr__(self, "tpot_by_batch",
                           _validated_table(self.tpot_by_batch, "tpot_by_batch"))
        if not 0.0 < self.prefix_benefit <= 1.0:
            raise ValueError(f"prefix_benefit must be in (0, 1], got {self.prefix_benefit}")
        if self.mean_generated_tokens < 1:
            raise ValueError("mean_generated_tokens must be >= 1")
        if self.transfer_time < 0:
            raise ValueError("transfer_time must be >= 0")

    def ttft(self, batch: int) -> float:
        return _interp(self.ttft_by_batch, batch, "ttft")

    def tpot(self, batch: int) -> float:
        return _interp(self.tpot_by_batch, batch, "tpot")


@dataclass(frozen=True)
class ClusterShape:
    """Instance counts and batch sizes for one prefill/decode group."""

    n_prefill: int
    n_decode: int
    batch_prefill: int
    batch_decode: int

    def __post_init__(self):
        for name in ("n_prefill", "n_decode", "batch_prefill", "batch_decode"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def total(self) -> int:
        return self.n_prefill + self.n_decode


Bottleneck = Literal["traffic", "prefill", "decode"]


@dataclass(frozen=True)
class ThroughputEstimate:
    per_instance_rps: float
    bottleneck: Bottleneck
    t_p: float
    t_d: float

    @property
    def e2e(self) -> float:
        return self.t_p + self.t_d


def phase_latency_prefill(profile: PerfProfile, batch: int) -> float:
    """Prefill latency for a batch: tabulated TTFT scaled by the prefix benefit."""
    return profile.ttft(batch) * profile.prefix_benefit


def phase_latency_decode(profile: PerfProfile, batch: int) -> float:
    """Decode latency per request: KVCache handoff plus one TPOT per generated token."""
    return profile.transfer_time + profile.tpot(batch) * profile.mean_generated_tokens


def cluster_throughput(profile: PerfProfile, shape: ClusterShape,
                       input_traffic: float) -> ThroughputEstimate:
    """Per-instance request throughput, capped by the slowest of the three terms.

    Ties between terms resolve in the order traffic > prefill > decode, so a
    zero-traffic cluster reports "traffic" and a perfectly balanced group
    under saturating load reports its first constrained side.
    """
    if input_traffic < 0:
        raise ValueError("input_traffic must be >= 0")
    t_p = phase_latency_prefill(profile, shape.batch_prefill)
    t_d = phase_latency_decode(profile, shape.batch_decode)
    prefill_cap = shape.n_prefill * shape.batch_prefill / t_p if t_p > 0 else math.inf
    decode_cap = shape.n_decode * shape.batch_decode / t_d if t_d > 0 else math.inf
    terms: list[tuple[float, Bottleneck]] = [
        (input_traffic, "traffic"), (prefill_cap, "prefill"), (decode_cap, "decode")]
    cap, label = min(terms, key=lambda item: item[0])  # min is stable: ties keep order
    return ThroughputEstimate(cap / shape.total, label, t_p, t_d)


def optimal_pd_ratio(profile: PerfProfile, batch_prefill: int, batch_decode: int,
                     total_instances: int) -> ClusterShape:
    """Integer split of a fixed instance budget minimizing the capability mismatch.

    Searches every (n_p, n_d) with n_p + n_d = total and both >= 1 for the
    smallest |n_p*b_p/t_p - n_d*b_d/t_d|.  Ties prefer more decode instances,
    since decode holds long-running requests and is the costlier side to
    under-provision.
    """
    if total_instances < 2:
        raise ValueError("total_instances must be >= 2")
    t_p = phase_latency_prefill(profile, batch_prefill)
    t_d = phase_latency_decode(profile, batch_decode)
    per_prefill = batch_prefill / t_p
    per_decode = batch_decode / t_d
    best_np = 1
    best_gap = math.inf
    # ascending n_p with strict '<' keeps the largest n_d on ties
    for n_p in range(1, total_instances):
        n_d = total_instances - n_p
        gap = abs(n_p * per_prefill - n_d * per_decode)
        if gap < best_gap:
            best_gap = gap
            best_np = n_p
    return ClusterShape(best_np, total_instances - best_np,
                        batch_prefill, batch_decode)


def required_prefill_count(profile: PerfProfile, batch_prefill: int,
                           input_traffic: float) -> int:
    """Smallest prefill count whose capability covers the given traffic."""
    if input_traffic <= 0:
        raise ValueError("input_traffic must be > 0")
    t_p = phase_latency_prefill(profile, batch_prefill)
    # tolerate float dust so an exact-match load does not round up
    needed = math.ceil(input_traffic * t_p / batch_prefill - 1e-12)
    return max(1, needed)


def kvcache_size_bytes(batch: int, hidden_size: int, query_len: int,
                       num_layers: int, bytes_per_elem: int) -> int:
    """Total KVCache bytes: elem_bytes * batch * hidden * 2 (K and V) * tokens * layers."""
    for name, v in (("batch", batch), ("hidden_size", hidden_size),
                    ("query_len", query_len), ("num_layers", num_layers),
                    ("bytes_per_elem", bytes_per_elem)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    return bytes_per_elem * batch * hidden_size * 2 * query_len * num_layers
