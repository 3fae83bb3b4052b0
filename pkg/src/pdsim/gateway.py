"""Request entry point: least-connections push vs on-demand forwarding.

The gateway tracks one open SSE connection per request for its entire
lifecycle (acceptance through terminal status), so connection counts are a
coarse load hint only.  Two policies:

* ``baseline``: push each request once into the local queue of the prefill
  with the fewest open connections; no retries, queueing happens at the
  instance.
* ``on_demand``: requests wait at the gateway.  The gateway offers the head
  request to the least-connections prefill; a busy prefill rejects, and the
  gateway walks the next candidates among the top few, then retries after a
  pacing delay until some prefill accepts or the request's TTFT budget runs
  out.  An acceptance therefore means the target was idle, and once one
  prefill accepts, following requests stream to it first so its batch fills
  before execution starts.

Offers and rejections are control messages and cost no simulated time.
"""

from __future__ import annotations

from collections import deque
from typing import Callable

from .engine import Engine
from .instance import PrefillInstance
from .workload import Request, ScenarioSpec, Status


class Gateway:
    def __init__(self, engine: Engine, scenarios: dict[str, ScenarioSpec],
                 candidates: Callable[[str], list[PrefillInstance]],
                 terminate: Callable[[Request, Status], None],
                 policy: str = "on_demand", retry_subset_size: int = 4,
                 inter_offer_delay: float = 0.05,
                 keep_attempt_details: bool = True):
        if policy not in ("baseline", "on_demand"):
            raise ValueError(f"unknown gateway policy {policy!r}")
        self.engine = engine
        self.scenarios = scenarios
        self.candidates = candidates
        self.terminate = terminate
        self.policy = policy
        self.retry_subset_size = retry_subset_size
        self.inter_offer_delay = inter_offer_delay
        self.keep_attempt_details = keep_attempt_details

        self.sse_counts: dict[str, int] = {}
        self.sse_opens = 0
        self.sse_closes = 0
        self.pending: dict[str, deque[Request]] = {s: deque() for s in scenarios}
        self.attempt_log: dict[int, list[tuple[float, str, str]]] = {}
        self.routing_errors = 0
        self._retry_scheduled: set[str] = set()
        self._sticky: dict[str, PrefillInstance | None] = {s: None for s in scenarios}

    # ------------------------------------------------------------------
    # SSE connection accounting
    # ------------------------------------------------------------------
    def sse_open(self, prefill_id: str) -> None:
        self.sse_counts[prefill_id] = self.sse_counts.get(prefill_id, 0) + 1
        self.sse_opens += 1

    def sse_close(self, prefill_id: str) -> None:
        count = self.sse_counts.get(prefill_id, 0)
        assert count > 0, f"SSE close without open for {prefill_id}"
        self.sse_counts[prefill_id] = count - 1
        self.sse_closes += 1

    # ------------------------------------------------------------------
    # routing
    # ------------------------------------------------------------------
    def submit(self, request: Request) -> None:
        now = self.engine.now
        request.mark("submitted", now)
        spec = self.scenarios.get(request.scenario)
        cands = self.candidates(request.scenario) if spec else []
        if spec is None or not cands:
            self.routing_errors += 1
            request.location = "gateway"
            self.terminate(request, Status.FAILED)
            return
        self._set_deadlines(request, spec)
        if self.policy == "baseline":
            target = self._ranked(cands)[0]
            outcome = target.offer(request)   # local-queue mode always accepts
            self._log_attempt(request, target, outcome)
            self._connect(request, target)
            return
        request.location = "gateway"
        self.pending[request.scenario].append(request)
        self.dispatch(request.scenario)

    def _set_deadlines(self, request: Request, spec: ScenarioSpec) -> None:
        self.engine.schedule(request.arrival + spec.ttft_slo_for(request.prefix_id),
                             "ttft_deadline",
                             lambda: self._ttft_deadline(request))
        self.engine.schedule(request.arrival + spec.e2e_timeout,
                             "e2e_deadline",
                             lambda: self._e2e_deadline(request))

    def _ttft_deadline(self, request: Request) -> None:
        # early intervention: still waiting anywhere short of execution means
        # the first token cannot arrive in time, so stop forwarding
        if request.is_terminal:
            return
        if request.location in ("gateway", "prefill_queue", "forming"):
            self.terminate(request, Status.TIMEOUT_TTFT)

    def _e2e_deadline(self, request: Request) -> None:
        if not request.is_terminal:
            self.terminate(request, Status.TIMEOUT_E2E)

    def _ranked(self, cands: list[PrefillInstance]) -> list[PrefillInstance]:
        # ascending connection count, stable on the registry's instance order
        order = sorted(enumerate(cands),
                       key=lambda item: (self.sse_counts.get(item[1].id, 0), item[0]))
        return [prefill for _, prefill in order]

    def _log_attempt(self, request: Request, prefill: PrefillInstance,
                     outcome: str) -> None:
        request.attempts += 1
        if self.keep_attempt_details:
            self.attempt_log.setdefault(request.id, []).append(
                (self.engine.now, prefill.id, outcome))

    def _connect(self, request: Request, prefill: PrefillInstance) -> None:
        self.sse_open(prefill.id)
        request.sse_prefill = prefill.id

    def dispatch(self, scenario: str) -> None:
        """Drain the waiting queue while some prefill keeps accepting."""
        queue = self.pending.get(scenario)
        if queue is None:
            return
        while queue:
            head = queue[0]
            if head.is_terminal:
                queue.popleft()
                continue
            if not self._place(head, scenario):
                self._schedule_retry(scenario)
                return
            queue.popleft()

    def _place(self, request: Request, scenario: str) -> bool:
        cands = self.candidates(scenario)
        if not cands:
            return False
        ranked = self._ranked(cands)
        trial: list[PrefillInstance] = []
        sticky = self._sticky.get(scenario)
        if sticky is not None and sticky in cands:
            trial.append(sticky)   # keep filling the accepting prefill's batch
        for cand in ranked[:self.retry_subset_size]:
            if cand not in trial:
                trial.append(cand)
        for cand in trial:
            outcome = cand.offer(request)
            self._log_attempt(request, cand, outcome)
            if outcome == "accepted":
                self._connect(request, cand)
                self._sticky[scenario] = cand
                return True
            if cand is sticky:
                self._sticky[scenario] = None
        return False

    def _schedule_retry(self, scenario: str) -> None:
        if scenario in self._retry_scheduled:
            return
        self._retry_scheduled.add(scenario)
        self.engine.after(self.inter_offer_delay, "gateway_retry",
                          lambda: self._retry(scenario))

    def _retry(self, scenario: str) -> None:
        self._retry_scheduled.discard(scenario)
        self.dispatch(scenario)

    def poke(self, scenario: str) -> None:
        """A prefill freed capacity; try to place waiting work right away."""
        if self.policy == "on_demand":
            self.dispatch(scenario)

    # ------------------------------------------------------------------
    # lifecycle hooks
    # ------------------------------------------------------------------
    def on_request_terminal(self, request: Request) -> None:
        if request.sse_prefill is not None:
            self.sse_close(request.sse_prefill)
            request.sse_prefill = None

    def attempts_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for entries in self.attempt_log.values():
            hist[len(entries)] = hist.get(len(entries), 0) + 1
        return dict(sorted(hist.items()))
