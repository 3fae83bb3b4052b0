import pytest

from pdsim.engine import Engine
from pdsim.gateway import Gateway
from pdsim.instance import InstanceHooks, PrefillInstance, PrefixCache
from pdsim.perf import PerfProfile
from pdsim.workload import Request, ScenarioSpec, Status


def scenario(slo=2.0):
    return ScenarioSpec(id="chat", prompt_len_dist={512: 1.0},
                        output_len_dist={4: 1.0}, prefixes=(),
                        ttft_slo=slo, e2e_timeout=60.0)


def profile():
    return PerfProfile(ttft_by_batch={1: 0.5, 4: 0.8},
                       tpot_by_batch={1: 0.05}, prefix_benefit=1.0,
                       mean_generated_tokens=4)


class _LifecycleHooks(InstanceHooks):
    """Stand-in for the downstream pipeline: instant handoff, instant decode."""

    def __init__(self, harness):
        self.harness = harness

    def prefill_ready(self, prefill, request):
        prefill.release_slot(request)
        self.harness.finish(request, Status.DONE)

    def prefill_freed(self, prefill):
        self.harness.gateway.poke("chat")

    def request_finished(self, request):
        self.harness.gateway.on_request_terminal(request)


class Harness:
    """Gateway wired to real prefill instances and a trivial terminator."""

    def __init__(self, n_prefills=2, policy="on_demand", slo=2.0, max_batch=4,
                 window=0.0, subset=4, delay=0.05):
        self.engine = Engine(0)
        self.spec = scenario(slo)
        hooks = _LifecycleHooks(self)
        mode = "reject" if policy == "on_demand" else "local_queue"
        self.prefills = [
            PrefillInstance(f"p{i}", "g0", self.engine, profile(), self.spec,
                            max_batch, PrefixCache(1 << 30, lambda t: t),
                            hooks, mode=mode, batch_window=window)
            for i in range(n_prefills)]
        self.terminated = []
        self.gateway = Gateway(self.engine, {"chat": self.spec},
                               lambda s: list(self.prefills) if s == "chat" else [],
                               self._terminate, policy=policy,
                               retry_subset_size=subset,
                               inter_offer_delay=delay)

    def finish(self, request, status):
        if request.is_terminal:
            return
        request.finish(status, self.engine.now)
        self.gateway.on_request_terminal(request)

    def _terminate(self, request, status):
        if request.is_terminal:
            return
        self.terminated.append(request)
        self.finish(request, status)

    def submit(self, rid, arrival=None):
        req = Request(rid, "chat", 512, None, 4,
                      arrival if arrival is not None else self.engine.now)
        self.gateway.submit(req)
        return req


def test_single_idle_prefill_accepts_first_attempt():
    h = Harness(n_prefills=1)
    req = h.submit(0)
    assert req.attempts == 1
    assert h.gateway.attempt_log[0][0][2] == "accepted"
    assert h.gateway.sse_counts["p0"] == 1


def test_least_connections_order():
    h = Harness(n_prefills=2)
    h.gateway.sse_counts = {"p0": 3, "p1": 1}
    req = h.submit(0)
    # lower-count p1 is offered first
    assert h.gateway.attempt_log[0][0][1] == "p1"
    assert req.assigned_prefill == "p1"


def test_rejection_walks_candidates():
    h = Harness(n_prefills=2, max_batch=1)
    first = h.submit(0)       # takes p0 (busy immediately at batch 1)
    second = h.submit(1)      # p0 rejects, p1 accepts
    outcomes = [o for _, pid, o in h.gateway.attempt_log[1]]
    assert outcomes[-1] == "accepted"
    assert second.assigned_prefill == "p1"
    assert first.assigned_prefill == "p0"


def test_all_busy_terminates_at_slo_with_zero_queueing():
    h = Harness(n_prefills=1, max_batch=1, slo=0.4)
    h.submit(0)                    # occupies the only instance for 0.5s
    waiting = h.submit(1)
    h.engine.run_until(5.0)
    assert waiting.status is Status.TIMEOUT_TTFT
    # never queued on the instance, never executed
    assert "prefill_start" not in waiting.timestamps
    assert waiting.timestamps["finished"] == pytest.approx(0.4)
    # retries kept going until the deadline
    assert waiting.attempts >= 2


def test_acceptance_implies_idle_instance():
    h = Harness(n_prefills=2, max_batch=1)
    reqs = [h.submit(i) for i in range(6)]
    h.engine.run_until(20.0)
    for req in reqs:
        entries = h.gateway.attempt_log[req.id]
        accepted = [e for e in entries if e[2] == "accepted"]
        assert len(accepted) <= 1


def test_fill_batch_streams_to_accepting_prefill():
    h = Harness(n_prefills=2, max_batch=4, window=0.1)
    reqs = [h.submit(i) for i in range(4)]
    # all four stream into the same instance before it launches
    assert len({r.assigned_prefill for r in reqs}) == 1
    target = h.prefills[0] if reqs[0].assigned_prefill == "p0" else h.prefills[1]
    assert target.busy                       # full batch launches immediately


def test_partial_batch_launches_after_window():
    h = Harness(n_prefills=1, max_batch=4, window=0.1)
    h.submit(0)
    h.submit(1)
    prefill = h.prefills[0]
    assert not prefill.busy
    h.engine.run_until(0.1)
    assert prefill.busy
    assert len(prefill.executing) == 2


def test_zero_pending_keeps_prefill_idle():
    h = Harness(n_prefills=1)
    h.engine.run_until(1.0)
    assert not h.prefills[0].busy


def test_baseline_pushes_once_no_retries():
    h = Harness(n_prefills=2, policy="baseline", max_batch=1)
    reqs = [h.submit(i) for i in range(4)]
    for req in reqs:
        assert len(h.gateway.attempt_log[req.id]) == 1
    # both queues got work per least-connections counts
    queued = sum(len(p.local_queue) for p in h.prefills)
    executing = sum(len(p.executing) for p in h.prefills)
    assert queued + executing == 4


def test_unmapped_scenario_is_routing_error():
    h = Harness(n_prefills=1)
    req = Request(9, "unknown", 512, None, 4, 0.0)
    h.gateway.submit(req)
    assert req.status is Status.FAILED
    assert h.gateway.routing_errors == 1


def test_sse_opens_close_at_terminal():
    h = Harness(n_prefills=1)
    req = h.submit(0)
    assert h.gateway.sse_counts["p0"] == 1
    h._terminate(req, Status.DONE)
    assert h.gateway.sse_counts["p0"] == 0
    assert h.gateway.sse_opens == h.gateway.sse_closes == 1


def test_sse_close_without_open_asserts():
    h = Harness(n_prefills=1)
    with pytest.raises(AssertionError):
        h.gateway.sse_close("p0")


def test_connection_conservation_over_run():
    h = Harness(n_prefills=2, max_batch=2)
    reqs = [h.submit(i) for i in range(5)]
    h.engine.run_until(10.0)
    for req in reqs:
        if not req.is_terminal:
            h._terminate(req, Status.DONE)
    assert h.gateway.sse_opens == h.gateway.sse_closes
    assert all(v == 0 for v in h.gateway.sse_counts.values())


def test_attempts_strictly_time_ordered():
    h = Harness(n_prefills=2, max_batch=1, slo=1.0)
    for i in range(5):
        h.submit(i)
    h.engine.run_until(10.0)
    for entries in h.gateway.attempt_log.values():
        times = [t for t, _, _ in entries]
        assert times == sorted(times)
