import pytest

from pdsim.engine import Engine
from pdsim.instance import (DecodeInstance, InstanceHooks, PrefillInstance,
                            PrefixCache)
from pdsim.perf import PerfProfile
from pdsim.workload import PrefixSpec, Request, ScenarioSpec, Status


class RecordingHooks(InstanceHooks):
    def __init__(self):
        self.ready = []
        self.freed = []
        self.finished = []
        self.decode_freed = []

    def prefill_ready(self, prefill, request):
        self.ready.append(request)

    def prefill_freed(self, prefill):
        self.freed.append(prefill.id)

    def decode_capacity_freed(self, decode):
        self.decode_freed.append(decode.id)

    def request_finished(self, request):
        self.finished.append(request)


def profile(ttft=None, tpot=None):
    return PerfProfile(ttft_by_batch=ttft or {1: 0.5, 4: 1.0},
                       tpot_by_batch=tpot or {1: 0.05, 8: 0.06},
                       prefix_benefit=1.0, mean_generated_tokens=8)


def scenario(prefixes=(), slo=10.0):
    return ScenarioSpec(id="chat", prompt_len_dist={1024: 1.0},
                        output_len_dist={3: 1.0}, prefixes=prefixes,
                        ttft_slo=slo, e2e_timeout=1000.0)


def request(rid, prefix=None, output=3, arrival=0.0):
    return Request(rid, "chat", 1024, prefix, output, arrival)


def cache(budget=1 << 40):
    return PrefixCache(budget, size_of_tokens=lambda tokens: tokens * 1024)


def make_prefill(engine, hooks, mode="reject", max_batch=4, prefixes=(),
                 slo=10.0, window=0.0):
    return PrefillInstance("p0", "g0", engine, profile(), scenario(prefixes, slo),
                           max_batch, cache(), hooks, mode=mode,
                           batch_window=window)


# ---------------------------------------------------------------------------
# admission
# ---------------------------------------------------------------------------

def test_idle_instance_accepts():
    eng = Engine(0)
    prefill = make_prefill(eng, RecordingHooks())
    assert prefill.offer(request(0)) == "accepted"


def test_busy_reject_mode_rejects():
    eng = Engine(0)
    prefill = make_prefill(eng, RecordingHooks(), max_batch=1)
    assert prefill.offer(request(0)) == "accepted"   # full batch launches
    assert prefill.busy
    assert prefill.offer(request(1)) == "rejected"


def test_busy_baseline_mode_queues():
    eng = Engine(0)
    prefill = make_prefill(eng, RecordingHooks(), mode="local_queue", max_batch=1)
    assert prefill.offer(request(0)) == "accepted"
    assert prefill.busy
    assert prefill.offer(request(1)) == "accepted"
    assert len(prefill.local_queue) == 1


def test_reject_mode_never_holds_a_queue():
    eng = Engine(0)
    prefill = make_prefill(eng, RecordingHooks(), max_batch=1)
    prefill.offer(request(0))
    prefill.offer(request(1))
    assert not prefill.local_queue


# ---------------------------------------------------------------------------
# batch execution and prefix benefit
# ---------------------------------------------------------------------------

def test_full_prefix_hit_scales_latency():
    eng = Engine(0)
    hooks = RecordingHooks()
    shared = PrefixSpec("sys", 256, hit_factor=0.6)
    prefill = make_prefill(eng, hooks, max_batch=1, prefixes=(shared,))
    prefill.cache.lookup("sys", 256, 0.0)        # warm the cache
    prefill.offer(request(0, prefix="sys"))
    eng.run_until(10.0)
    req = hooks.ready[0]
    # table TTFT(1)=0.5s scaled by the 0.6 hit factor
    assert req.timestamps["prefill_end"] == pytest.approx(0.3)


def test_prefix_miss_gets_no_benefit():
    eng = Engine(0)
    hooks = RecordingHooks()
    shared = PrefixSpec("sys", 256, hit_factor=0.6)
    prefill = make_prefill(eng, hooks, max_batch=1, prefixes=(shared,))
    prefill.offer(request(0, prefix="sys"))      # cold cache: miss
    eng.run_until(10.0)
    assert hooks.ready[0].timestamps["prefill_end"] == pytest.approx(0.5)


def test_slowest_member_gates_the_batch():
    eng = Engine(0)
    hooks = RecordingHooks()
    shared = PrefixSpec("sys", 256, hit_factor=0.5)
    prefill = make_prefill(eng, hooks, max_batch=4, prefixes=(shared,))
    prefill.cache.lookup("sys", 256, 0.0)
    for i in range(3):
        prefill.offer(request(i, prefix="sys"))
    prefill.offer(request(3, prefix=None))       # no prefix: full latency
    eng.run_until(10.0)
    # TTFT(4)=1.0s, a missing member pins the factor at 1.0
    assert hooks.ready[0].timestamps["prefill_end"] == pytest.approx(1.0)


def test_batch_window_launches_partial_batch():
    eng = Engine(0)
    hooks = RecordingHooks()
    prefill = make_prefill(eng, hooks, max_batch=4, window=0.05)
    prefill.offer(request(0))
    prefill.offer(request(1))
    assert not prefill.busy          # waiting out the formation window
    eng.run_until(0.05)
    assert prefill.busy
    assert len(prefill.executing) == 2


def test_full_batch_skips_the_window():
    eng = Engine(0)
    prefill = make_prefill(eng, RecordingHooks(), max_batch=2, window=5.0)
    prefill.offer(request(0))
    prefill.offer(request(1))
    assert prefill.busy


def test_slots_stay_occupied_until_release():
    eng = Engine(0)
    hooks = RecordingHooks()
    prefill = make_prefill(eng, hooks, max_batch=2)
    prefill.offer(request(0))
    prefill.offer(request(1))
    eng.run_until(5.0)
    assert prefill.occupied_slots == 2           # awaiting transfer
    assert prefill.offer(request(2)) == "rejected"
    for req in list(prefill.awaiting):
        prefill.release_slot(req)
    assert prefill.occupied_slots == 0
    assert prefill.offer(request(3)) == "accepted"


# ---------------------------------------------------------------------------
# prefill timeout checks
# ---------------------------------------------------------------------------

def test_expired_request_dropped_before_inference():
    eng = Engine(0)
    hooks = RecordingHooks()
    prefill = make_prefill(eng, hooks, mode="local_queue", max_batch=1, slo=0.3)
    prefill.offer(request(0))                        # runs 0.5s
    stale = request(1, arrival=0.0)
    prefill.offer(stale)                             # queued behind
    eng.run_until(0.2)
    assert stale.status is Status.PENDING
    eng.run_until(2.0)
    # stale broke its 0.3s budget while queued: dropped at the pre-check,
    # never burning compute
    assert stale.status is Status.TIMEOUT_TTFT
    assert "prefill_start" not in stale.timestamps


def test_mid_execution_timeout_completes_but_counts():
    eng = Engine(0)
    hooks = RecordingHooks()
    prefill = make_prefill(eng, hooks, max_batch=1, slo=0.3)
    req = request(0)
    prefill.offer(req)                               # runs 0.5s > slo 0.3s
    eng.run_until(1.0)
    assert req.status is Status.TIMEOUT_TTFT
    assert req.timestamps["prefill_end"] == pytest.approx(0.5)
    assert req in hooks.finished
    assert prefill.occupied_slots == 0


# ---------------------------------------------------------------------------
# prefix cache
# ---------------------------------------------------------------------------

def test_lru_eviction_keeps_budget():
    pc = PrefixCache(budget_bytes=1000, size_of_tokens=lambda t: t)
    pc.lookup("a", 400, now=0.0)
    pc.lookup("b", 400, now=1.0)
    pc.lookup("a", 400, now=2.0)          # refresh a
    pc.lookup("c", 400, now=3.0)          # evicts b (least recently used)
    assert pc.used <= 1000
    assert set(pc.entries) == {"a", "c"}
    assert pc.evictions == 1


def test_oversized_prefix_not_cached():
    pc = PrefixCache(budget_bytes=100, size_of_tokens=lambda t: t)
    pc.lookup("huge", 500, now=0.0)
    assert pc.entries == {}
    assert pc.used == 0


def test_hit_rate_converges_after_warmup():
    pc = PrefixCache(budget_bytes=10_000, size_of_tokens=lambda t: t)
    for i in range(100):
        pc.lookup("sys", 500, now=float(i))
    assert pc.hit_rate(since=1.0) == 1.0


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def make_decode(engine, hooks, max_batch=8, queue=1):
    return DecodeInstance("d0", "g0", engine, profile(), scenario(),
                          max_batch, hooks, retrieval_capacity=queue)


def test_empty_instance_admits_to_running():
    eng = Engine(0)
    decode = make_decode(eng, RecordingHooks())
    assert decode.admit(request(0)) == "running"


def test_full_running_queues_then_refuses():
    eng = Engine(0)
    decode = make_decode(eng, RecordingHooks(), max_batch=1, queue=1)
    assert decode.admit(request(0)) == "running"
    assert decode.admit(request(1)) == "queued"
    assert decode.admit(request(2)) == "refused"


def test_three_iterations_for_three_tokens():
    eng = Engine(0)
    hooks = RecordingHooks()
    decode = make_decode(eng, hooks, max_batch=1)
    req = request(0, output=3)
    decode.admit(req)
    eng.run_until(1.0)
    assert req.status is Status.DONE
    # TPOT(1)=0.05s, three iterations
    assert req.timestamps["finished"] == pytest.approx(0.15)


def test_shared_iteration_period_for_batch():
    eng = Engine(0)
    hooks = RecordingHooks()
    decode = make_decode(eng, hooks, max_batch=8)
    for i in range(8):
        decode.admit(request(i, output=1))
    eng.run_until(1.0)
    # all eight complete together after one iteration at TPOT(8)=0.06
    for req in hooks.finished:
        assert req.timestamps["finished"] == pytest.approx(0.06)
    assert len(hooks.finished) == 8


def test_completion_admits_queue_head_same_boundary():
    eng = Engine(0)
    hooks = RecordingHooks()
    decode = make_decode(eng, hooks, max_batch=1, queue=1)
    first = request(0, output=2)
    queued = request(1, output=1)
    decode.admit(first)
    assert decode.admit(queued) == "queued"
    eng.run_until(0.1)      # two iterations at TPOT(1)=0.05 complete `first`
    assert first.status is Status.DONE
    assert queued.location == "decode_running"
    assert queued.timestamps["decode_join"] == pytest.approx(0.1)
    eng.run_until(0.2)
    assert queued.status is Status.DONE
    assert queued.timestamps["finished"] == pytest.approx(0.15)


def test_new_arrival_waits_for_boundary():
    eng = Engine(0)
    hooks = RecordingHooks()
    decode = make_decode(eng, hooks, max_batch=8)
    decode.admit(request(0, output=4))
    eng.run_until(0.02)     # mid-iteration
    late = request(1, output=1)
    decode.admit(late)
    assert late.location == "decode_joining"
    eng.run_until(0.05)
    assert late.location == "decode_running"
    # joined at the 0.05 boundary; one iteration at the interpolated TPOT(2)
    tpot_2 = 0.05 + (0.06 - 0.05) * (2 - 1) / (8 - 1)
    eng.run_until(1.0)
    assert late.timestamps["finished"] == pytest.approx(0.05 + tpot_2)


def test_capacity_accounting_with_reservations():
    eng = Engine(0)
    decode = make_decode(eng, RecordingHooks(), max_batch=2, queue=1)
    assert decode.free_capacity() == 3
    decode.reserve()
    assert decode.free_capacity() == 2
    decode.admit(request(0))
    decode.unreserve()
    assert decode.free_capacity() == 2
