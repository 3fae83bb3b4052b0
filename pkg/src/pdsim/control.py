"""Group registry and orchestration state machine.

The registry is the in-process authority over prefill/decode groups: which
containers belong to which group under which role, group lifecycle state and
a monotonically increasing meta version per group.  Instance-local and
gateway routing decisions read a *lagged view* of the registry; every
mutation publishes a fresh snapshot that takes effect one propagation delay
later, which is what makes "no traffic after logical removal plus
propagation" checkable.

Workflows modeled as event sequences on the engine:

* group setup: collect endpoint reports (with retry and an abort threshold),
  issue init, establish connections (timeout bounded), load the pre-compiled
  model (role- and storage-specific latency draw), first health report,
  confirm, label prefills as request entrances;
* membership changes: connect-then-load for added containers, logical
  removal followed by drain for removed ones, with a guard against removing
  the last instance of either role;
* ratio adjustment: a step plan of removals/additions toward a target shape,
  either profile driven or triggered by monitored latency shifts;
* fault recovery: classify, logically remove, push meta, substitute with
  exactly one stateless container, erase the fault instance, and protect
  (terminate and answer with default text) whatever was running on it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .dists import Dist
from .engine import Engine


class GroupState(str, Enum):
    COLLECTING = "collecting"
    INITIALIZING = "initializing"
    HEALTHY = "healthy"
    DEGRADED = "degraded"
    DRAINING = "draining"
    REMOVED = "removed"


PREFILL_ROLE = "P"
DECODE_ROLE = "D"


@dataclass(frozen=True)
class Container:
    """A stateless resource unit with its ordered device endpoints."""

    id: str
    endpoints: tuple[str, ...]


class ContainerPool:
    def __init__(self, containers: list[Container]):
        self.available: deque[Container] = deque(containers)
        self.taken = 0

    @classmethod
    def synthetic(cls, count: int, devices_per_instance: int) -> "ContainerPool":
        containers = [
            Container(f"c{i:04d}", tuple(f"roce://c{i:04d}/dev{d}"
                                         for d in range(devices_per_instance)))
            for i in range(count)]
        return cls(containers)

    def take(self, n: int) -> list[Container] | None:
        if len(self.available) < n:
            return None
        self.taken += n
        return [self.available.popleft() for _ in range(n)]

    def release(self, container: Container) -> None:
        self.available.append(container)


@dataclass
class Member:
    instance_id: str
    role: str
    endpoints: tuple[str, ...]
    added_at: float
    removed_at: float | None = None
    fault: bool = False

    @property
    def active(self) -> bool:
        return self.removed_at is None and not self.fault


@dataclass
class GroupRecord:
    name: str
    service: str
    scenario: str
    state: GroupState = GroupState.COLLECTING
    meta_version: int = 0
    members: dict[str, Member] = field(default_factory=dict)
    log: list[tuple[float, str]] = field(default_factory=list)

    def active_ids(self, role: str) -> list[str]:
        return [m.instance_id for m in self.members.values()
                if m.role == role and m.active]

    def note(self, t: float, event: str) -> None:
        self.log.append((t, event))


@dataclass(frozen=True)
class GroupSnapshot:
    """What routing sees: published to the lagged view on every meta change."""

    name: str
    scenario: str
    state: GroupState
    meta_version: int
    prefill_ids: tuple[str, ...]
    decode_ids: tuple[str, ...]

    @property
    def serving(self) -> bool:
        return self.state in (GroupState.HEALTHY, GroupState.DEGRADED)


class RegistryView:
    """Instance/gateway-local picture of the registry, behind by one delay."""

    def __init__(self):
        self.groups: dict[str, GroupSnapshot] = {}

    def meta_version(self, group: str) -> int:
        snap = self.groups.get(group)
        return snap.meta_version if snap else 0

    def groups_for(self, scenario: str) -> list[GroupSnapshot]:
        return [g for g in self.groups.values()
                if g.scenario == scenario and g.serving]

    def prefill_ids(self, scenario: str) -> list[str]:
        out: list[str] = []
        for snap in self.groups_for(scenario):
            out.extend(snap.prefill_ids)
        return out

    def decode_ids(self, group: str) -> list[str]:
        snap = self.groups.get(group)
        if snap is None or not snap.serving:
            return []
        return list(snap.decode_ids)


# ---------------------------------------------------------------------------
# health
# ---------------------------------------------------------------------------

@dataclass
class HealthRecord:
    last_report: float
    status: str = "ok"       # ok | fault_level_1 | fault_level_2 | missing


class HealthLedger:
    def __init__(self, report_interval: float, miss_threshold: int):
        self.report_interval = report_interval
        self.miss_threshold = miss_threshold
        self.records: dict[str, HealthRecord] = {}

    def report(self, instance_id: str, t: float) -> None:
        rec = self.records.get(instance_id)
        if rec is None:
            self.records[instance_id] = HealthRecord(t)
        else:
            rec.last_report = t
            if rec.status == "missing":
                rec.status = "ok"

    def refresh(self, now: float) -> None:
        horizon = self.report_interval * self.miss_threshold
        for rec in self.records.values():
            if rec.status == "ok" and now - rec.last_report > horizon:
                rec.status = "missing"

    def drop(self, instance_id: str) -> None:
        self.records.pop(instance_id, None)


@dataclass(frozen=True)
class FaultEvent:
    instance_id: str
    level: int               # 1: recoverable in place, 2: needs a substitute
    detected_at: float

    @property
    def recoverable(self) -> bool:
        return self.level == 1


@dataclass
class RecoveryTranscript:
    instance_id: str
    group: str
    level: int
    steps: list[tuple[float, str, str]] = field(default_factory=list)
    containers_added: int = 0
    protected_requests: int = 0
    completed: bool = False

    def step(self, t: float, name: str, detail: str = "") -> None:
        self.steps.append((t, name, detail))


# ---------------------------------------------------------------------------
# timing knobs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlTiming:
    propagation_delay: float = 0.2
    report_latency: Dist = Dist("uniform", low=0.05, high=0.5)
    collect_timeout: float = 30.0
    retry_interval: float = 5.0
    connect_latency: Dist = Dist("uniform", low=0.2, high=2.0)
    connect_timeout: float = 30.0
    # model load draws are role specific and depend on the storage backend
    load_latency: dict[str, Dist] = field(default_factory=lambda: {
        PREFILL_ROLE: Dist("uniform", low=40.0, high=80.0),
        DECODE_ROLE: Dist("uniform", low=50.0, high=100.0),
    })
    health_report_interval: float = 10.0
    miss_threshold: int = 3
    monitor_interval: float = 5.0
    inplace_reset_latency: Dist = Dist("constant", value=30.0)


class ControlHooks:
    """Adapter the embedding simulation implements; defaults are inert."""

    def instance_activated(self, group: GroupRecord, member: Member) -> None:
        pass

    def instance_deactivated(self, group: GroupRecord, member: Member) -> None:
        pass

    def drain(self, instance_id: str, done: Callable[[], None]) -> None:
        done()

    def protect_requests(self, instance_id: str, now: float) -> int:
        return 0


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

class Registry:
    def __init__(self, engine: Engine, pool: ContainerPool,
                 timing: ControlTiming = ControlTiming(),
                 hooks: ControlHooks | None = None):
        self.engine = engine
        self.pool = pool
        self.timing = timing
        self.hooks = hooks or ControlHooks()
        self.groups: dict[str, GroupRecord] = {}
        self.view = RegistryView()
        self.health = HealthLedger(timing.health_report_interval,
                                   timing.miss_threshold)
        self.recoveries: list[RecoveryTranscript] = []
        self.alerts: list[tuple[float, str]] = []
        self.removal_times: dict[str, float] = {}
        self._endpoints_seen: set[str] = set()
        self._faults_pending: deque[FaultEvent] = deque()
        self._recovering: set[str] = set()
        self._owner: dict[str, str] = {}    # instance id -> group name
        self._monitor_started = False
        self._rng = engine.rng("control")

    # ------------------------------------------------------------------
    # meta publication
    # ------------------------------------------------------------------
    def _snapshot(self, group: GroupRecord) -> GroupSnapshot:
        return GroupSnapshot(
            name=group.name, scenario=group.scenario, state=group.state,
            meta_version=group.meta_version,
            prefill_ids=tuple(group.active_ids(PREFILL_ROLE)),
            decode_ids=tuple(group.active_ids(DECODE_ROLE)))

    def _bump(self, group: GroupRecord, note: str, instant: bool = False) -> None:
        group.meta_version += 1
        group.note(self.engine.now, note)
        snap = self._snapshot(group)
        if instant:
            self.view.groups[snap.name] = snap
        else:
            self.engine.after(self.timing.propagation_delay, "meta_propagate",
                              lambda: self._publish(snap))

    def _publish(self, snap: GroupSnapshot) -> None:
        # stale publications cannot roll the view backwards
        if self.view.meta_version(snap.name) <= snap.meta_version:
            self.view.groups[snap.name] = snap

    # ------------------------------------------------------------------
    # membership helpers
    # ------------------------------------------------------------------
    def _register_member(self, group: GroupRecord, container: Container,
                         role: str) -> Member:
        for ep in container.endpoints:
            if ep in self._endpoints_seen:
                raise ValueError(f"endpoint {ep} already registered")
        self._endpoints_seen.update(container.endpoints)
        member = Member(container.id, role, container.endpoints, self.engine.now)
        group.members[container.id] = member
        self._owner[container.id] = group.name
        return member

    def _activate(self, group: GroupRecord, member: Member) -> None:
        self.health.report(member.instance_id, self.engine.now)
        self._schedule_health_report(member.instance_id)
        self.hooks.instance_activated(group, member)

    def _schedule_health_report(self, instance_id: str) -> None:
        def report():
            member = self._member(instance_id)
            if member is None or not member.active:
                return
            self.health.report(instance_id, self.engine.now)
            self._schedule_health_report(instance_id)
        self.engine.after(self.timing.health_report_interval,
                          "health_report", report)

    def _member(self, instance_id: str) -> Member | None:
        owner = self._owner.get(instance_id)
        if owner is None:
            return None
        return self.groups[owner].members.get(instance_id)

    # ------------------------------------------------------------------
    # bootstrap (pre-provisioned groups, no setup latency)
    # ------------------------------------------------------------------
    def bootstrap_group(self, name: str, service: str, scenario: str,
                        n_prefill: int, n_decode: int) -> GroupRecord:
        """Stand a group up healthy at the current instant, for experiments
        that measure steady state rather than provisioning."""
        containers = self.pool.take(n_prefill + n_decode)
        if containers is None:
            raise ValueError(f"container pool too small for group {name}")
        group = GroupRecord(name, service, scenario)
        self.groups[name] = group
        for i, container in enumerate(containers):
            role = PREFILL_ROLE if i < n_prefill else DECODE_ROLE
            member = self._register_member(group, container, role)
            self._activate(group, member)
        group.state = GroupState.HEALTHY
        self._bump(group, "bootstrap", instant=True)
        self._start_monitor()
        return group

    # ------------------------------------------------------------------
    # six-step setup workflow
    # ------------------------------------------------------------------
    def setup_group(self, name: str, service: str, scenario: str,
                    n_prefill: int, n_decode: int,
                    done: Callable[[GroupRecord], None] | None = None,
                    unresponsive: set[str] | None = None,
                    connect_fail: set[str] | None = None) -> GroupRecord:
        """Gather endpoint reports, init, connect, load models, confirm."""
        unresponsive = unresponsive or set()
        connect_fail = connect_fail or set()
        containers = self.pool.take(n_prefill + n_decode)
        if containers is None:
            raise ValueError(f"container pool too small for group {name}")
        group = GroupRecord(name, service, scenario)
        self.groups[name] = group
        roles = [PREFILL_ROLE] * n_prefill + [DECODE_ROLE] * n_decode
        t0 = self.engine.now
        reported: set[str] = set()
        aborted = False
        group.note(t0, "collect_start")

        def deliver_report(container: Container):
            if aborted or group.state is not GroupState.COLLECTING:
                return
            reported.add(container.id)
            group.note(self.engine.now, f"report {container.id}")
            if len(reported) == len(containers):
                start_init()

        def request_reports(round_no: int):
            for container in containers:
                if container.id in reported or container.id in unresponsive:
                    continue
                delay = self.timing.report_latency.sample(self._rng)
                self.engine.after(delay, "endpoint_report",
                                  lambda c=container: deliver_report(c))
            if round_no == 0 and unresponsive:
                # retry the silent ones once within the threshold
                self.engine.after(self.timing.retry_interval, "collect_retry",
                                  lambda: request_reports(1))

        def collect_deadline():
            nonlocal aborted
            if group.state is GroupState.COLLECTING and len(reported) < len(containers):
                aborted = True
                group.note(self.engine.now, "collect_abort")
                for container in containers:
                    if container.id not in unresponsive:
                        self.pool.release(container)
                if done:
                    done(group)

        def start_init():
            group.state = GroupState.INITIALIZING
            group.note(self.engine.now, "init_order")
            if connect_fail:
                self.engine.after(self.timing.connect_timeout, "connect_timeout",
                                  lambda: connect_aborted())
                return
            t_connect = max(self.timing.connect_latency.sample(self._rng)
                            for _ in containers)
            self.engine.after(t_connect, "connections_up", load_models)

        def connect_aborted():
            if group.state is GroupState.INITIALIZING:
                group.note(self.engine.now, "connect_abort")
                if done:
                    done(group)

        def load_models():
            group.note(self.engine.now, "connections_established")
            finish_at = 0.0
            for container, role in zip(containers, roles):
                load = self.timing.load_latency[role].sample(self._rng)
                group.note(self.engine.now, f"load {container.id} {role} {load:.3f}")
                finish_at = max(finish_at, load)
            self.engine.after(finish_at, "models_loaded", first_reports)

        def first_reports():
            group.note(self.engine.now, "models_loaded")
            delay = max(self.timing.report_latency.sample(self._rng)
                        for _ in containers)
            self.engine.after(delay, "first_health_reports", confirm)

        def confirm():
            for container, role in zip(containers, roles):
                member = self._register_member(group, container, role)
                self._activate(group, member)
            group.state = GroupState.HEALTHY
            # prefill members double as the request entrances from here on
            self._bump(group, "setup_complete")
            self._start_monitor()
            if done:
                done(group)

        request_reports(0)
        self.engine.after(self.timing.collect_timeout, "collect_deadline",
                          collect_deadline)
        return group

    # ------------------------------------------------------------------
    # scaling
    # ------------------------------------------------------------------
    def add_members(self, group_name: str, count: int, role: str,
                    done: Callable[[list[str]], None] | None = None,
                    connect_fail: bool = False) -> None:
        """Three steps: connect new containers, load + health report, meta update."""
        group = self.groups[group_name]
        if group.state in (GroupState.REMOVED, GroupState.COLLECTING):
            raise ValueError(f"cannot add members to {group.state.value} group")
        containers = self.pool.take(count)
        if containers is None:
            raise ValueError("container pool exhausted")
        if connect_fail:
            def discard():
                group.note(self.engine.now, "add_connect_abort")
                for c in containers:
                    self.pool.release(c)
                if done:
                    done([])
            self.engine.after(self.timing.connect_timeout, "connect_timeout",
                              discard)
            return
        t_connect = max(self.timing.connect_latency.sample(self._rng)
                        for _ in containers)

        def loaded():
            new_ids = []
            for container in containers:
                member = self._register_member(group, container, role)
                self._activate(group, member)
                new_ids.append(container.id)
            # view (prefills' decode map included) changes only at propagation
            self._bump(group, f"add {role} {','.join(new_ids)}")
            if done:
                done(new_ids)

        def connected():
            load = max(self.timing.load_latency[role].sample(self._rng)
                       for _ in containers)
            report = self.timing.report_latency.sample(self._rng)
            self.engine.after(load + report, "member_loaded", loaded)

        self.engine.after(t_connect, "member_connected", connected)

    def remove_members(self, group_name: str, instance_ids: list[str],
                       done: Callable[[], None] | None = None,
                       release: bool = True) -> None:
        """Logical removal first, then drain of running work, then release."""
        group = self.groups[group_name]
        for iid in instance_ids:
            if iid not in group.members:
                raise ValueError(f"{iid} not in group {group_name}")
        for role in (PREFILL_ROLE, DECODE_ROLE):
            active = set(group.active_ids(role))
            dropping = active & set(instance_ids)
            if dropping and not (active - dropping):
                raise ValueError(
                    f"refusing to remove the last {role} instance of {group_name}")
        now = self.engine.now
        for iid in instance_ids:
            member = group.members[iid]
            member.removed_at = now
            self.removal_times[iid] = now
            self.hooks.instance_deactivated(group, member)
        self._bump(group, f"remove {','.join(instance_ids)}")

        remaining = set(instance_ids)

        def drained(iid: str):
            remaining.discard(iid)
            member = group.members[iid]
            self.health.drop(iid)
            if release:
                self.pool.release(Container(iid, member.endpoints))
            self._endpoints_seen.difference_update(member.endpoints)
            del group.members[iid]
            del self._owner[iid]
            if not remaining:
                group.note(self.engine.now, "remove_complete")
                if done:
                    done()

        for iid in instance_ids:
            self.hooks.drain(iid, lambda iid=iid: drained(iid))

    # ------------------------------------------------------------------
    # ratio adjustment
    # ------------------------------------------------------------------
    def plan_ratio_adjustment(self, group_name: str, target_prefill: int,
                              target_decode: int) -> list[tuple[str, str, int]]:
        """Step plan (op, role, count) reaching the target member counts."""
        if target_prefill < 1 or target_decode < 1:
            raise ValueError("target must keep at least one instance per role")
        group = self.groups[group_name]
        cur_p = len(group.active_ids(PREFILL_ROLE))
        cur_d = len(group.active_ids(DECODE_ROLE))
        plan: list[tuple[str, str, int]] = []
        for role, cur, target in ((PREFILL_ROLE, cur_p, target_prefill),
                                  (DECODE_ROLE, cur_d, target_decode)):
            if target < cur:
                plan.append(("remove", role, cur - target))
        adds = 0
        for role, cur, target in ((PREFILL_ROLE, cur_p, target_prefill),
                                  (DECODE_ROLE, cur_d, target_decode)):
            if target > cur:
                plan.append(("add", role, target - cur))
                adds += target - cur
        if adds > len(self.pool.available):
            raise ValueError(
                f"plan needs {adds} free containers, pool has {len(self.pool.available)}")
        return plan

    def apply_plan(self, group_name: str, plan: list[tuple[str, str, int]],
                   done: Callable[[], None] | None = None) -> None:
        steps = deque(plan)
        group = self.groups[group_name]

        def advance():
            if not steps:
                if done:
                    done()
                return
            op, role, count = steps.popleft()
            if op == "remove":
                victims = group.active_ids(role)[-count:]
                self.remove_members(group_name, victims, done=advance)
            else:
                self.add_members(group_name, count, role,
                                 done=lambda _ids: advance())

        advance()

    @staticmethod
    def recommend_adjustment(e2e_delta: float, tp_share_delta: float,
                             threshold: float = 0.0) -> str | None:
        """Monitor rule: rising end-to-end latency plus a rising prefill share
        of it wants more prefill; rising latency with a falling share wants
        more decode."""
        if e2e_delta <= threshold:
            return None
        return "add_prefill" if tp_share_delta > 0 else "add_decode"

    # ------------------------------------------------------------------
    # faults and recovery
    # ------------------------------------------------------------------
    def record_fault(self, instance_id: str, level: int) -> None:
        """The per-node resident process wrote a fault into the status file."""
        member = self._member(instance_id)
        if member is None:
            return
        rec = self.health.records.get(instance_id)
        if rec is not None:
            rec.status = f"fault_level_{level}"
        self._faults_pending.append(
            FaultEvent(instance_id, level, detected_at=self.engine.now))

    def _start_monitor(self) -> None:
        if self._monitor_started:
            return
        self._monitor_started = True
        self._monitor_tick()

    def _monitor_tick(self) -> None:
        self.health.refresh(self.engine.now)
        while self._faults_pending:
            fault = self._faults_pending.popleft()
            self.detect_and_recover(fault)
        for iid, rec in list(self.health.records.items()):
            if rec.status == "missing" and iid not in self._recovering:
                self.detect_and_recover(
                    FaultEvent(iid, level=2, detected_at=self.engine.now))
        self.engine.after(self.timing.monitor_interval, "monitor_tick",
                          self._monitor_tick)

    def detect_and_recover(self, fault: FaultEvent) -> RecoveryTranscript | None:
        member = self._member(fault.instance_id)
        owner = self._owner.get(fault.instance_id)
        if member is None or owner is None:
            return None
        group = self.groups[owner]
        if group.state is GroupState.REMOVED or not member.active:
            return None
        if fault.instance_id in self._recovering:
            return None
        self._recovering.add(fault.instance_id)
        now = self.engine.now
        transcript = RecoveryTranscript(fault.instance_id, group.name, fault.level)
        self.recoveries.append(transcript)

        if fault.recoverable:
            # in-place reset: the instance drops out briefly, no substitute
            member.fault = True
            self.removal_times[fault.instance_id] = now
            self._bump(group, f"fault_reset {fault.instance_id}")
            transcript.step(now, "logical_removal", fault.instance_id)
            transcript.protected_requests = self.hooks.protect_requests(
                fault.instance_id, now)
            transcript.step(now, "protection",
                            f"{transcript.protected_requests} requests")

            def reset_done():
                member.fault = False
                self.removal_times.pop(fault.instance_id, None)
                rec = self.health.records.get(fault.instance_id)
                if rec is not None:
                    rec.status = "ok"
                self.health.report(fault.instance_id, self.engine.now)
                self._schedule_health_report(fault.instance_id)
                self._bump(group, f"fault_reset_done {fault.instance_id}")
                transcript.step(self.engine.now, "reset_complete")
                transcript.completed = True
                self._recovering.discard(fault.instance_id)

            self.engine.after(self.timing.inplace_reset_latency.sample(self._rng),
                              "inplace_reset", reset_done)
            return transcript

        # substitute-required path
        group.state = GroupState.DEGRADED
        member.fault = True
        member.removed_at = now
        self.removal_times[fault.instance_id] = now
        # 1) logically removed: no new traffic once the view catches up
        self._bump(group, f"fault_remove {fault.instance_id}")
        transcript.step(now, "logical_removal", fault.instance_id)
        # 2) meta pushed to peers so they stop transmitting toward it
        transcript.step(now, "meta_push", f"group {group.name}")
        self.hooks.instance_deactivated(group, member)
        # running work cannot migrate; stop connections, answer default text
        transcript.protected_requests = self.hooks.protect_requests(
            fault.instance_id, now)
        transcript.step(now, "protection",
                        f"{transcript.protected_requests} requests")

        if not self.pool.available:
            self.alerts.append((now, f"no container for {fault.instance_id}"))
            transcript.step(now, "alert_no_container")
            self._recovering.discard(fault.instance_id)
            return transcript

        # 3) exactly one stateless container substitutes the fault instance
        def added(new_ids: list[str]):
            transcript.containers_added += len(new_ids)
            transcript.step(self.engine.now, "container_added", ",".join(new_ids))
            # 4) meta update reached the group with the add's bump
            transcript.step(self.engine.now, "meta_update")
            # 5) fault instance state erased
            self.health.drop(fault.instance_id)
            self._endpoints_seen.difference_update(member.endpoints)
            group.members.pop(fault.instance_id, None)
            self._owner.pop(fault.instance_id, None)
            transcript.step(self.engine.now, "fault_state_erased")
            if group.state is GroupState.DEGRADED:
                group.state = GroupState.HEALTHY
                self._bump(group, "recovered")
            transcript.completed = True
            self._recovering.discard(fault.instance_id)

        self.add_members(group.name, 1, member.role, done=added)
        return transcript

    # ------------------------------------------------------------------
    # rolling upgrade
    # ------------------------------------------------------------------
    def rolling_upgrade(self, scenario: str,
                        done: Callable[[], None] | None = None) -> None:
        """Sequential per-group drain and re-setup; with two or more groups,
        the scenario keeps serving throughout."""
        names = deque(sorted(g.name for g in self.groups.values()
                             if g.scenario == scenario
                             and g.state is GroupState.HEALTHY))

        def upgrade_next():
            if not names:
                if done:
                    done()
                return
            name = names.popleft()
            group = self.groups[name]
            group.state = GroupState.DRAINING
            self._bump(group, "upgrade_drain")
            members = [m.instance_id for m in group.members.values() if m.active]
            remaining = set(members)

            def drained(iid: str):
                remaining.discard(iid)
                if remaining:
                    return
                reload_t = max(
                    self.timing.load_latency[group.members[i].role].sample(self._rng)
                    for i in members)
                group.note(self.engine.now, f"upgrade_reload {reload_t:.3f}")

                def back_up():
                    group.state = GroupState.HEALTHY
                    self._bump(group, "upgrade_complete")
                    upgrade_next()

                self.engine.after(reload_t, "upgrade_reload", back_up)

            for iid in members:
                self.hooks.drain(iid, lambda iid=iid: drained(iid))

        upgrade_next()
