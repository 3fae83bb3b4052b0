"""Full simulation assembly: registry, instances, gateway, transfers, drivers.

One :class:`Cluster` owns one engine and everything scheduled on it.  The
wiring mirrors the serving path: a driver submits requests to the gateway,
the gateway places them on prefill instances (per policy), finished prefills
hand KVCaches to the per-group transfer coordinator, which picks a decode
instance with free capacity, models the device-to-device transfer time and
delivers; decodes batch continuously until each request has all its tokens.

The control plane runs on the same engine: groups can be pre-provisioned
(healthy at t=0) or brought up through the full setup workflow, faults can
be injected on a schedule, and a rolling upgrade can drain groups one at a
time.  Routing always reads the registry's lagged view, so control-plane
changes reach the data path only after the propagation delay.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .config import MS, GroupConfig, RunConfig
from .control import (DECODE_ROLE, PREFILL_ROLE, Container, ContainerPool,
                      ControlHooks, GroupRecord, Member, Registry)
from .engine import Engine
from .gateway import Gateway
from .instance import DecodeInstance, InstanceHooks, PrefillInstance, PrefixCache
from .metrics import MetricsRecorder
from .perf import cluster_throughput, kvcache_size_bytes
from .transfer import (ContiguousLayout, layout_buffer, per_layer_completion,
                       request_transfer_time, utilization)
from .workload import Request, Status, generate_trace, sample_request


@dataclass
class RunResult:
    config: RunConfig
    frame: object
    report: dict
    violations: list[str]
    requests: list[Request]
    cluster: "Cluster"


class TransferCoordinator:
    """Per-group KVCache handoff: ready queue, decode choice, latency model."""

    def __init__(self, cluster: "Cluster", group_cfg: GroupConfig):
        self.cluster = cluster
        self.cfg = group_cfg
        self.link = cluster.link
        self.mode = cluster.cfg.link.transfer_mode
        self.block_size = cluster.cfg.link.block_size_bytes
        self.per_layer = cluster.cfg.link.per_layer
        self.ready: deque[tuple[Request, PrefillInstance]] = deque()
        self.decodes: list[DecodeInstance] = []
        self.active = 0
        self.assign_log: list[tuple[float, str]] = []
        self.rng = cluster.engine.rng(f"transfer/{group_cfg.name}")

    def add_decode(self, decode: DecodeInstance) -> None:
        self.decodes.append(decode)

    def enqueue_ready(self, request: Request, prefill: PrefillInstance) -> None:
        self.ready.append((request, prefill))
        self.try_assign()

    def _pick_decode(self) -> DecodeInstance | None:
        allowed = set(self.cluster.registry.view.decode_ids(self.cfg.name))
        best = None
        for decode in self.decodes:
            if decode.id not in allowed or not decode.alive:
                continue
            cap = decode.free_capacity()
            if cap > 0 and (best is None or cap > best.free_capacity()):
                best = decode
        return best

    def try_assign(self) -> None:
        while self.ready:
            request, prefill = self.ready[0]
            if request.is_terminal:
                self.ready.popleft()
                continue
            target = self._pick_decode()
            if target is None:
                return
            self.ready.popleft()
            target.reserve()
            request.assigned_decode = target.id
            self.assign_log.append((self.cluster.engine.now, target.id))
            self._start_transfer(request, prefill, target)

    def _start_transfer(self, request: Request, prefill: PrefillInstance,
                        target: DecodeInstance) -> None:
        model = self.cluster.cfg.model
        total = kvcache_size_bytes(1, model.hidden_size, request.prompt_len,
                                   model.num_layers, model.bytes_per_elem)
        devices = model.devices_per_instance
        base, rem = divmod(total, devices)
        sub_sizes = [base + (1 if i < rem else 0) for i in range(devices)]
        concurrent = self.active + 1   # fair share, frozen at start
        if self.per_layer:
            # layers left as prefill produced them; each device pair streams
            # its shard of every layer, so only the tail trails the compute
            ts = request.timestamps
            exec_time = ts.get("prefill_end", 0.0) - ts.get("prefill_start", 0.0)
            whole = layout_buffer(request.prompt_len, model.hidden_size,
                                  model.num_layers, model.bytes_per_elem)
            shard_len = max(1, whole.lengths[0] // devices)
            shard = ContiguousLayout(
                offsets=tuple(i * shard_len for i in range(model.num_layers)),
                lengths=(shard_len,) * model.num_layers)
            xi = max(0.0, per_layer_completion(shard, exec_time, self.link,
                                               concurrent=concurrent,
                                               rng=self.rng))
        else:
            xi, _times = request_transfer_time(
                sub_sizes, self.mode, self.link, block_size=self.block_size,
                concurrent=concurrent, rng=self.rng)
        request.mark("transfer_start", self.cluster.engine.now)
        request.location = "transferring"
        self.active += 1
        util = utilization(max(sub_sizes), xi, self.link) if xi > 0 else 1.0
        self.cluster.engine.after(
            xi, f"kv_arrive/{self.cfg.name}",
            lambda: self._arrive(request, prefill, target, xi, util))

    def _arrive(self, request: Request, prefill: PrefillInstance,
                target: DecodeInstance, xi: float, util: float) -> None:
        self.active -= 1
        now = self.cluster.engine.now
        self.cluster.metrics.on_transfer(now, xi, util)
        if request.is_terminal:
            target.unreserve()
            self.try_assign()
            return
        request.transfer_xi = xi
        request.mark("transfer_end", now)
        outcome = target.kv_arrived(request)
        if outcome == "refused":
            # the sender keeps the slot and retries another decode
            request.assigned_decode = None
            self.ready.appendleft((request, prefill))
        else:
            prefill.release_slot(request)
        self.try_assign()


class _InstanceAdapter(InstanceHooks):
    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster

    def prefill_ready(self, prefill, request):
        self.cluster.coordinators[prefill.group].enqueue_ready(request, prefill)

    def prefill_freed(self, prefill):
        self.cluster.gateway.poke(prefill.scenario.id)

    def decode_capacity_freed(self, decode):
        self.cluster.coordinators[decode.group].try_assign()

    def request_finished(self, request):
        self.cluster.on_request_finished(request)


class _ControlAdapter(ControlHooks):
    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster

    def instance_activated(self, group: GroupRecord, member: Member) -> None:
        self.cluster.materialize(group, member)

    def instance_deactivated(self, group: GroupRecord, member: Member) -> None:
        pass   # routing exclusion flows through the lagged view

    def drain(self, instance_id: str, done) -> None:
        self.cluster.drain_when_idle(instance_id, done)

    def protect_requests(self, instance_id: str, now: float) -> int:
        return self.cluster.protect_requests(instance_id)


class ClosedLoopDriver:
    """Constant-requests load: each user immediately replaces a finished one."""

    def __init__(self, cluster: "Cluster", users: dict[str, int]):
        self.cluster = cluster
        self.users = users
        self.live: set[int] = set()

    def start(self) -> None:
        for scenario_id in sorted(self.users):
            for _ in range(self.users[scenario_id]):
                self._submit(scenario_id)

    def _submit(self, scenario_id: str) -> None:
        spec = self.cluster.specs[scenario_id]
        rng = self.cluster.engine.rng(f"closedloop/{scenario_id}")
        req = sample_request(spec, rng, self.cluster.next_request_id(),
                             self.cluster.engine.now)
        self.live.add(req.id)
        self.cluster.submit(req)

    def on_finished(self, request: Request) -> None:
        if request.id in self.live:
            self.live.discard(request.id)
            self._submit(request.scenario)


class Cluster:
    def __init__(self, cfg: RunConfig, keep_event_log: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.engine = Engine(cfg.seed, keep_log=keep_event_log)
        self.specs = {s.id: s.build() for s in cfg.scenarios}
        self.profiles = {p.scenario: p.build() for p in cfg.profiles}
        self.link = cfg.link.build()
        self.group_cfgs = {g.name: g for g in cfg.groups}
        total_instances = sum(g.n_prefill + g.n_decode for g in cfg.groups)
        self.metrics = MetricsRecorder(total_instances)
        pool = ContainerPool.synthetic(
            total_instances + cfg.control.spare_containers,
            cfg.model.devices_per_instance)
        self.registry = Registry(self.engine, pool, cfg.control.build_timing(),
                                 hooks=_ControlAdapter(self))
        self.prefills: dict[str, PrefillInstance] = {}
        self.decodes: dict[str, DecodeInstance] = {}
        self.instance_group: dict[str, str] = {}
        self.coordinators = {g.name: TransferCoordinator(self, g)
                             for g in cfg.groups}
        self.requests: list[Request] = []
        self.violations: list[str] = []
        self._rid = 0
        self._hooks = _InstanceAdapter(self)
        self.gateway = Gateway(
            self.engine, self.specs, self.candidates, self.terminate,
            policy=cfg.policy, retry_subset_size=cfg.gateway.retry_subset_size,
            inter_offer_delay=cfg.gateway.inter_offer_delay_ms * MS)
        self.driver: ClosedLoopDriver | None = None
        self._build_groups()
        self._build_drivers()
        self._build_drills()
        self._schedule_invariant_checks()

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------
    def _build_groups(self) -> None:
        for g in self.cfg.groups:
            if self.cfg.control.preprovisioned:
                self.registry.bootstrap_group(g.name, g.service, g.scenario,
                                              g.n_prefill, g.n_decode)
            else:
                self.registry.setup_group(g.name, g.service, g.scenario,
                                          g.n_prefill, g.n_decode)

    def materialize(self, group: GroupRecord, member: Member) -> None:
        g = self.group_cfgs[group.name]
        profile = self.profiles[g.scenario]
        spec = self.specs[g.scenario]
        self.instance_group[member.instance_id] = group.name
        if member.role == PREFILL_ROLE:
            model = self.cfg.model
            cache = PrefixCache(
                g.prefix_cache_budget_bytes,
                lambda tokens: kvcache_size_bytes(
                    1, model.hidden_size, tokens, model.num_layers,
                    model.bytes_per_elem))
            window = profile.ttft(1) * self.cfg.gateway.batch_window_fraction
            mode = "reject" if self.cfg.policy == "on_demand" else "local_queue"
            prefill = PrefillInstance(
                member.instance_id, group.name, self.engine, profile, spec,
                g.batch_prefill, cache, self._hooks, mode=mode,
                batch_window=window)
            self.prefills[member.instance_id] = prefill
            self.gateway.poke(g.scenario)
        else:
            decode = DecodeInstance(
                member.instance_id, group.name, self.engine, profile, spec,
                g.batch_decode, self._hooks,
                retrieval_capacity=g.retrieval_capacity)
            self.decodes[member.instance_id] = decode
            self.coordinators[group.name].add_decode(decode)
            self.coordinators[group.name].try_assign()

    def _build_drivers(self) -> None:
        traffic = self.cfg.traffic
        if traffic.kind == "closed":
            self.driver = ClosedLoopDriver(self, dict(traffic.users))
            self.engine.schedule(0.0, "closed_loop_start", self.driver.start)
            return
        trace = traffic.build_trace(self.cfg.duration_s)
        specs = [s.build() for s in self.cfg.scenarios]
        for req in generate_trace(specs, trace, self.cfg.seed):
            req.id = self.next_request_id()
            self.engine.schedule(req.arrival, "arrival",
                                 lambda r=req: self.submit(r))

    def _build_drills(self) -> None:
        faults = self.cfg.faults
        if faults is not None and faults.count > 0:
            rng = self.engine.rng("faults")
            for k in range(faults.count):
                at = faults.start_s + k * faults.spacing_s
                self.engine.schedule(at, "fault_inject",
                                     lambda: self._inject_fault(rng, faults.level))
        upgrade = self.cfg.upgrade
        if upgrade is not None:
            self.engine.schedule(
                upgrade.at_s, "rolling_upgrade",
                lambda: self.registry.rolling_upgrade(upgrade.scenario))

    def _inject_fault(self, rng, level: int) -> None:
        candidates = []
        for group in self.registry.groups.values():
            for member in group.members.values():
                if member.active:
                    candidates.append(member.instance_id)
        if not candidates:
            return
        victim = candidates[int(rng.integers(len(candidates)))]
        actor = self.prefills.get(victim) or self.decodes.get(victim)
        if actor is not None:
            actor.alive = False
        self.registry.record_fault(victim, level)

    # ------------------------------------------------------------------
    # runtime plumbing
    # ------------------------------------------------------------------
    def next_request_id(self) -> int:
        rid = self._rid
        self._rid += 1
        return rid

    def submit(self, request: Request) -> None:
        self.requests.append(request)
        self.metrics.on_arrival(request)
        self.gateway.submit(request)

    def candidates(self, scenario: str) -> list[PrefillInstance]:
        ids = self.registry.view.prefill_ids(scenario)
        return [self.prefills[i] for i in ids if i in self.prefills]

    def terminate(self, request: Request, status: Status) -> None:
        if request.is_terminal:
            return
        loc = request.location
        if loc in ("prefill_queue", "forming"):
            prefill = self.prefills.get(request.assigned_prefill)
            if prefill is not None:
                prefill.remove_pending(request)
        elif loc == "executing":
            prefill = self.prefills.get(request.assigned_prefill)
            if prefill is not None:
                prefill.remove_executing(request)
        elif loc in ("awaiting", "transferring"):
            prefill = self.prefills.get(request.assigned_prefill)
            if prefill is not None:
                prefill.release_slot(request)
        elif loc in ("decode_joining", "decode_queue", "decode_running"):
            decode = self.decodes.get(request.assigned_decode)
            if decode is not None:
                decode.remove_request(request)
        request.finish(status, self.engine.now)
        self.on_request_finished(request)

    def on_request_finished(self, request: Request) -> None:
        request.location = "finished"
        self.metrics.on_request_finished(request)
        self.gateway.on_request_terminal(request)
        if self.driver is not None:
            self.driver.on_finished(request)

    # ------------------------------------------------------------------
    # control-plane adapters
    # ------------------------------------------------------------------
    def drain_when_idle(self, instance_id: str, done) -> None:
        def check():
            prefill = self.prefills.get(instance_id)
            decode = self.decodes.get(instance_id)
            idle = True
            if prefill is not None:
                idle = (not prefill.busy and not prefill.forming
                        and not prefill.awaiting and not prefill.local_queue)
            elif decode is not None:
                idle = (not decode.running and not decode.joining
                        and not decode.retrieval_queue and decode.reserved == 0)
            if idle:
                done()
            else:
                self.engine.after(0.5, "drain_poll", check)
        check()

    def protect_requests(self, instance_id: str) -> int:
        prefill_locs = {"prefill_queue", "forming", "executing", "awaiting",
                        "transferring"}
        decode_locs = {"transferring", "decode_joining", "decode_queue",
                       "decode_running"}
        count = 0
        for request in self.requests:
            if request.is_terminal:
                continue
            hit = ((request.assigned_prefill == instance_id
                    and request.location in prefill_locs)
                   or (request.assigned_decode == instance_id
                       and request.location in decode_locs))
            if hit:
                request.default_text = True
                self.terminate(request, Status.FAILED)
                count += 1
        return count

    # ------------------------------------------------------------------
    # invariants
    # ------------------------------------------------------------------
    def _schedule_invariant_checks(self) -> None:
        period = self.cfg.metrics_bucket_s

        def check():
            self.check_invariants()
            self.engine.after(period, "invariant_check", check)

        self.engine.after(period, "invariant_check", check)

    def check_invariants(self) -> None:
        now = self.engine.now
        for prefill in self.prefills.values():
            if prefill.occupied_slots > prefill.max_batch:
                self.violations.append(
                    f"t={now}: {prefill.id} occupies {prefill.occupied_slots} "
                    f"> max_batch {prefill.max_batch}")
            if prefill.mode == "reject" and prefill.local_queue:
                self.violations.append(
                    f"t={now}: reject-mode {prefill.id} holds a local queue")
            for req in prefill.executing:
                if req.status is not Status.PREFILLING:
                    self.violations.append(
                        f"t={now}: {prefill.id} executing holds {req.id} "
                        f"in {req.status.value}")
            for req in prefill.awaiting:
                if req.status is not Status.TRANSFERRING:
                    self.violations.append(
                        f"t={now}: {prefill.id} awaiting holds {req.id} "
                        f"in {req.status.value}")
            cache = prefill.cache
            if cache.used > cache.budget:
                self.violations.append(
                    f"t={now}: {prefill.id} cache {cache.used} over budget")
        for pid, count in self.gateway.sse_counts.items():
            if count < 0:
                self.violations.append(f"t={now}: negative SSE count on {pid}")

    def _final_checks(self) -> None:
        open_now = sum(1 for r in self.requests
                       if not r.is_terminal and r.sse_prefill is not None)
        if self.gateway.sse_opens - self.gateway.sse_closes != open_now:
            self.violations.append(
                f"SSE conservation broken: opens {self.gateway.sse_opens}, "
                f"closes {self.gateway.sse_closes}, live {open_now}")
        delay = self.cfg.control.propagation_delay_ms * MS
        removal = self.registry.removal_times
        for rid, attempts in self.gateway.attempt_log.items():
            for t, pid, _outcome in attempts:
                if pid in removal and t > removal[pid] + delay + 1e-9:
                    self.violations.append(
                        f"request {rid} offered to {pid} at {t} after removal")
        for coord in self.coordinators.values():
            for t, did in coord.assign_log:
                if did in removal and t > removal[did] + delay + 1e-9:
                    self.violations.append(
                        f"transfer assigned to {did} at {t} after removal")
        for req in self.requests:
            if req.assigned_prefill is not None:
                group = self.instance_group.get(req.assigned_prefill)
                if group and self.group_cfgs[group].scenario != req.scenario:
                    self.violations.append(
                        f"request {req.id} ({req.scenario}) crossed into "
                        f"group {group}")

    # ------------------------------------------------------------------
    # run
    # ------------------------------------------------------------------
    def run(self) -> RunResult:
        self.engine.run_until(self.cfg.duration_s)
        self.check_invariants()
        self._final_checks()
        for prefill in self.prefills.values():
            self.metrics.add_cache_events(prefill.cache.hit_log)
        frame = self.metrics.frame(self.cfg.duration_s, self.cfg.metrics_bucket_s)
        report = self._report(frame)
        return RunResult(self.cfg, frame, report, list(self.violations),
                         list(self.requests), self)

    def measured_phi(self, group: str, since: float = 0.0) -> float:
        g = self.group_cfgs[group]
        window = self.cfg.duration_s - since
        done = [r for r in self.metrics.finished
                if r.status is Status.DONE
                and r.timestamps.get("finished", -1.0) >= since
                and self.instance_group.get(r.assigned_prefill) == group]
        return len(done) / window / (g.n_prefill + g.n_decode)

    def _report(self, frame) -> dict:
        offered: dict[str, float] = {}
        for start, end, rates in (self.cfg.traffic.build_trace(self.cfg.duration_s)
                                  .spans() if self.cfg.traffic.kind == "open" else []):
            for sid, rate in rates.items():
                offered[sid] = offered.get(sid, 0.0) + rate * (end - start)
        analytic = {}
        for g in self.cfg.groups:
            profile = self.profiles[g.scenario]
            if self.cfg.traffic.kind == "open":
                load = offered.get(g.scenario, 0.0) / self.cfg.duration_s
            else:
                load = float("inf")
            est = cluster_throughput(profile, g.shape(), load)
            analytic[g.name] = {
                "per_instance_rps": est.per_instance_rps,
                "bottleneck": est.bottleneck,
                "t_p": est.t_p, "t_d": est.t_d, "e2e": est.e2e,
            }
        measured = {g.name: {"per_instance_rps": self.measured_phi(g.name,
                                                                   self.cfg.warmup_s)}
                    for g in self.cfg.groups}
        totals = self.metrics.totals()
        totals.update(self.metrics.phase_means(self.cfg.warmup_s))
        recoveries = [
            {"instance": t.instance_id, "group": t.group, "level": t.level,
             "containers_added": t.containers_added,
             "protected_requests": t.protected_requests,
             "completed": t.completed,
             "steps": [{"t": st, "name": name, "detail": detail}
                       for st, name, detail in t.steps]}
            for t in self.registry.recoveries]
        return {
            "name": self.cfg.name,
            "seed": self.cfg.seed,
            "duration_s": self.cfg.duration_s,
            "policy": self.cfg.policy,
            "totals": totals,
            "per_scenario": self.metrics.per_scenario_totals(),
            "analytic": analytic,
            "measured": measured,
            "gateway": {
                "routing_errors": self.gateway.routing_errors,
                "sse_opens": self.gateway.sse_opens,
                "sse_closes": self.gateway.sse_closes,
                "attempts_histogram": self.gateway.attempts_histogram(),
            },
            "recoveries": recoveries,
            "alerts": [{"t": t, "message": m} for t, m in self.registry.alerts],
            "violations": list(self.violations),
        }


def run_config(cfg: RunConfig, keep_event_log: bool = False) -> RunResult:
    return Cluster(cfg, keep_event_log=keep_event_log).run()
