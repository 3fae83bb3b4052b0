"""Mock prefill and decode engines driven by the event engine.

A prefill instance runs one batch at a time.  In ``reject`` mode it holds no
queue: an offer is accepted only while the instance is idle and has free
slots, otherwise the gateway hears a rejection and tries elsewhere.  In
``local_queue`` mode (the baseline policy) every offer is accepted and parks
in a local queue.  A request keeps its prefill slot from acceptance until
its KVCache has left for a decode instance, so a slow handoff back-pressures
admission.

A decode instance batches continuously: every running request advances one
token per iteration, the iteration period being the tabulated TPOT at the
current batch size.  New KVCaches join at iteration boundaries; when the
batch is full, a small retrieval queue lets the next transfer overlap with
ongoing generation, and a completed request admits the queue head in the
same boundary.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .engine import Engine
from .perf import PerfProfile
from .workload import Request, ScenarioSpec, Status


class InstanceHooks:
    """Callbacks the embedding simulation provides; no-ops for unit tests."""

    def prefill_ready(self, prefill: "PrefillInstance", request: Request) -> None:
        pass

    def prefill_freed(self, prefill: "PrefillInstance") -> None:
        pass

    def decode_capacity_freed(self, decode: "DecodeInstance") -> None:
        pass

    def request_finished(self, request: Request) -> None:
        pass


# ---------------------------------------------------------------------------
# prefix cache
# ---------------------------------------------------------------------------

@dataclass
class CacheEntry:
    length: int
    size: int
    last_used: float
    inserted: int


class PrefixCache:
    """HBM-budgeted store of shared-prefix KVCaches with LRU eviction."""

    def __init__(self, budget_bytes: int, size_of_tokens):
        self.budget = budget_bytes
        self.size_of_tokens = size_of_tokens   # tokens -> bytes
        self.entries: dict[str, CacheEntry] = {}
        self.used = 0
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self._seq = 0
        self.hit_log: list[tuple[float, bool]] = []

    def lookup(self, prefix_id: str, length: int, now: float) -> bool:
        entry = self.entries.get(prefix_id)
        if entry is not None:
            entry.last_used = now
            self.hits += 1
            self.hit_log.append((now, True))
            return True
        self.misses += 1
        self.hit_log.append((now, False))
        size = self.size_of_tokens(length)
        if size <= self.budget:
            while self.used + size > self.budget:
                victim = min(self.entries,
                             key=lambda k: (self.entries[k].last_used,
                                            self.entries[k].inserted))
                self.used -= self.entries[victim].size
                del self.entries[victim]
                self.evictions += 1
            self.entries[prefix_id] = CacheEntry(length, size, now, self._seq)
            self._seq += 1
            self.used += size
        return False

    def hit_rate(self, since: float = 0.0) -> float | None:
        seen = [hit for t, hit in self.hit_log if t >= since]
        if not seen:
            return None
        return sum(seen) / len(seen)


# ---------------------------------------------------------------------------
# prefill
# ---------------------------------------------------------------------------

class PrefillInstance:
    def __init__(self, instance_id: str, group: str, engine: Engine,
                 profile: PerfProfile, scenario: ScenarioSpec, max_batch: int,
                 cache: PrefixCache, hooks: InstanceHooks,
                 mode: str = "reject", batch_window: float = 0.0):
        if mode not in ("reject", "local_queue"):
            raise ValueError(f"unknown prefill mode {mode!r}")
        self.id = instance_id
        self.group = group
        self.engine = engine
        self.profile = profile
        self.scenario = scenario
        self.max_batch = max_batch
        self.cache = cache
        self.hooks = hooks
        self.mode = mode
        self.batch_window = batch_window
        self._prefix_by_id = {p.id: p for p in scenario.prefixes}

        self.alive = True
        self.busy = False
        self.forming: list[Request] = []
        self.executing: list[Request] = []
        self.awaiting: list[Request] = []     # prefill done, KVCache not yet shipped
        self.local_queue: deque[Request] = deque()
        self._window_event = None

        self.batches = 0
        self.batched_requests = 0
        self.accepted = 0
        self.rejected = 0
        self.busy_time = 0.0

    # -- admission ----------------------------------------------------------
    @property
    def occupied_slots(self) -> int:
        return len(self.forming) + len(self.executing) + len(self.awaiting)

    @property
    def free_slots(self) -> int:
        return self.max_batch - self.occupied_slots

    def offer(self, request: Request) -> str:
        """Admission decision: 'accepted' or 'rejected' (a value, not an error)."""
        now = self.engine.now
        if not self.alive:
            # a crashed process refuses connections outright
            self.rejected += 1
            return "rejected"
        if self.mode == "local_queue":
            self.local_queue.append(request)
            request.location = "prefill_queue"
            request.assigned_prefill = self.id
            self.accepted += 1
            self._try_form(now)
            return "accepted"
        if self.busy or self.free_slots <= 0:
            self.rejected += 1
            return "rejected"
        self.accepted += 1
        request.location = "forming"
        request.assigned_prefill = self.id
        request.mark("assigned", now)
        self.forming.append(request)
        self._after_admission(now)
        return "accepted"

    def _after_admission(self, now: float) -> None:
        # a truly full batch starts at once; a partial one waits out the
        # formation window for more arrivals (or for handoff slots to free)
        if len(self.forming) == self.max_batch:
            self._launch(now)
        elif self.forming and self._window_event is None:
            self._window_event = self.engine.after(
                self.batch_window, f"batch_window/{self.id}",
                lambda: self._launch(self.engine.now))

    # -- batch formation and execution --------------------------------------
    def _try_form(self, now: float) -> None:
        """Baseline mode: pull from the local queue whenever idle with slots free."""
        if self.mode != "local_queue" or self.busy or not self.alive:
            return
        while self.local_queue and self.free_slots > 0:
            req = self.local_queue.popleft()
            if req.is_terminal:
                continue
            req.mark("assigned", now)
            req.location = "forming"
            self.forming.append(req)
        self._after_admission(now)

    def _launch(self, now: float) -> None:
        if self._window_event is not None:
            self.engine.cancel(self._window_event)
            self._window_event = None
        if self.busy or not self.alive:
            return
        # timeout check before inference: expired waiters never burn compute
        batch = []
        for req in self.forming:
            if req.is_terminal:
                continue
            if now - req.arrival > self.scenario.ttft_slo_for(req.prefix_id):
                req.finish(Status.TIMEOUT_TTFT, now)
                self.hooks.request_finished(req)
                continue
            batch.append(req)
        self.forming = []
        if not batch:
            self._try_form(now)
            return
        factor = 0.0
        for req in batch:
            req.status = Status.PREFILLING
            req.location = "executing"
            req.mark("prefill_start", now)
            factor = max(factor, self._hit_factor(req, now))
        self.executing = batch
        self.busy = True
        latency = self.profile.ttft(len(batch)) * factor
        self.batches += 1
        self.batched_requests += len(batch)
        self.busy_time += latency
        self.engine.after(latency, f"prefill_done/{self.id}",
                          lambda: self._complete(self.engine.now))

    def _hit_factor(self, request: Request, now: float) -> float:
        # batch latency is gated by its slowest member, so the aggregate
        # prefix outcome is the max of the per-request factors
        if request.prefix_id is None:
            return 1.0
        prefix = self._prefix_by_id.get(request.prefix_id)
        if prefix is None:
            return 1.0
        hit = self.cache.lookup(prefix.id, prefix.length, now)
        return prefix.hit_factor if hit else 1.0

    def _complete(self, now: float) -> None:
        if not self.alive:
            return   # crashed mid-batch; fault protection tears the batch down
        self.busy = False
        batch, self.executing = self.executing, []
        for req in batch:
            if req.is_terminal:
                continue
            req.mark("prefill_end", now)
            # timeout check after inference: broke the threshold mid-run,
            # still counted against the SLO
            if now - req.arrival > self.scenario.ttft_slo_for(req.prefix_id):
                req.finish(Status.TIMEOUT_TTFT, now)
                self.hooks.request_finished(req)
                continue
            req.status = Status.TRANSFERRING
            req.location = "awaiting"
            self.awaiting.append(req)
            self.hooks.prefill_ready(self, req)
        self._try_form(now)
        self.hooks.prefill_freed(self)

    # -- slot bookkeeping ----------------------------------------------------
    def release_slot(self, request: Request) -> None:
        """KVCache shipped (or request torn down): the slot frees."""
        if request in self.awaiting:
            self.awaiting.remove(request)
            self._try_form(self.engine.now)
            self.hooks.prefill_freed(self)

    def remove_pending(self, request: Request) -> None:
        """Drop a not-yet-executing request (timeout or teardown)."""
        if request in self.forming:
            self.forming.remove(request)
        try:
            self.local_queue.remove(request)
        except ValueError:
            pass

    def remove_executing(self, request: Request) -> None:
        if request in self.executing:
            self.executing.remove(request)


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

class DecodeInstance:
    def __init__(self, instance_id: str, group: str, engine: Engine,
                 profile: PerfProfile, scenario: ScenarioSpec, max_batch: int,
                 hooks: InstanceHooks, retrieval_capacity: int = 1):
        self.id = instance_id
        self.group = group
        self.engine = engine
        self.profile = profile
        self.scenario = scenario
        self.max_batch = max_batch
        self.retrieval_capacity = retrieval_capacity
        self.hooks = hooks

        self.alive = True
        self.running: list[Request] = []
        self.joining: list[Request] = []
        self.retrieval_queue: deque[Request] = deque()
        self.reserved = 0              # transfers in flight toward this instance
        self._iterating = False
        self._start_pending = False
        self._emitted: dict[int, int] = {}

        self.iterations = 0
        self.tokens = 0
        self.completed = 0
        self.busy_time = 0.0

    # -- capacity ------------------------------------------------------------
    @property
    def batch_slots_used(self) -> int:
        return len(self.running) + len(self.joining)

    def free_capacity(self) -> int:
        """Pull credit: open batch slots plus open retrieval-queue slots."""
        slots = self.max_batch - self.batch_slots_used
        queue = self.retrieval_capacity - len(self.retrieval_queue)
        return slots + queue - self.reserved

    def reserve(self) -> None:
        self.reserved += 1

    def unreserve(self) -> None:
        self.reserved -= 1

    # -- admission -----------------------------------------------------------
    def admit(self, request: Request) -> str:
        """Place an arrived KVCache: 'running', 'queued' or 'refused'."""
        if not self.alive:
            return "refused"
        if self.batch_slots_used < self.max_batch:
            self.joining.append(request)
            request.location = "decode_joining"
            if not self._iterating and not self._start_pending:
                # defer one event so arrivals at the same instant batch up
                self._start_pending = True
                self.engine.after(0.0, f"decode_start/{self.id}", self._start)
            return "running"
        if len(self.retrieval_queue) < self.retrieval_capacity:
            self.retrieval_queue.append(request)
            request.location = "decode_queue"
            return "queued"
        return "refused"

    def _start(self) -> None:
        self._start_pending = False
        if self._iterating or not self.alive:
            return
        self._merge_joining(self.engine.now)
        self._schedule_iteration(self.engine.now)

    def kv_arrived(self, request: Request) -> str:
        self.unreserve()
        return self.admit(request)

    # -- iteration loop ------------------------------------------------------
    def _merge_joining(self, now: float) -> None:
        for req in self.joining:
            req.status = Status.DECODING
            req.location = "decode_running"
            req.mark("decode_join", now)
            self._emitted[req.id] = 0
            self.running.append(req)
        self.joining = []

    def _schedule_iteration(self, now: float) -> None:
        if self._iterating or not self.running:
            return
        period = self.profile.tpot(len(self.running))
        self._iterating = True
        self.busy_time += period
        self.engine.after(period, f"decode_iter/{self.id}",
                          lambda: self._boundary(self.engine.now))

    def _boundary(self, now: float) -> None:
        self._iterating = False
        if not self.alive:
            return
        self.iterations += 1
        finished: list[Request] = []
        survivors: list[Request] = []
        for req in self.running:
            if req.is_terminal:        # torn down mid-flight
                self._emitted.pop(req.id, None)
                continue
            self._emitted[req.id] += 1
            self.tokens += 1
            if self._emitted[req.id] >= req.output_len:
                finished.append(req)
            else:
                survivors.append(req)
        self.running = survivors
        freed = False
        for req in finished:
            self._emitted.pop(req.id, None)
            self.completed += 1
            freed = True
            if now - req.arrival > self.scenario.e2e_timeout:
                req.finish(Status.TIMEOUT_E2E, now)
            else:
                req.finish(Status.DONE, now)
            self.hooks.request_finished(req)
        # a completed request admits the retrieval-queue head in this same
        # boundary; the new KVCache emits its first token next iteration
        while self.retrieval_queue and self.batch_slots_used < self.max_batch:
            self.joining.append(self.retrieval_queue.popleft())
            freed = True
        self._merge_joining(now)
        if freed:
            self.hooks.decode_capacity_freed(self)
        self._schedule_iteration(now)

    # -- teardown ------------------------------------------------------------
    def remove_request(self, request: Request) -> None:
        if request in self.running:
            self.running.remove(request)
            self._emitted.pop(request.id, None)
            self.hooks.decode_capacity_freed(self)
        elif request in self.joining:
            self.joining.remove(request)
            self.hooks.decode_capacity_freed(self)
        else:
            try:
                self.retrieval_queue.remove(request)
                self.hooks.decode_capacity_freed(self)
            except ValueError:
                pass
