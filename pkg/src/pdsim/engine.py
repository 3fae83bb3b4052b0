"""Deterministic discrete-event engine.

A single virtual clock advances only by dispatching events; events fire in
(fire_time, sequence) order, where sequence is the insertion order.  That
ordering is total, so a run is fully determined by the seed and the initial
schedule.  Randomness is handed out as named streams derived from the run
seed, one stream per component, so adding a component never perturbs the
draws seen by the others.

Time is in seconds as double precision throughout the simulator; config
files carry latencies in milliseconds and convert on load (see
:mod:`pdsim.config`).
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class TimeTravel(Exception):
    """An event was scheduled before the current virtual time."""


@dataclass
class Event:
    """A scheduled callback. Returned by :meth:`Engine.schedule` as a handle."""

    fire_time: float
    sequence: int
    kind: str
    action: Callable[[], None]
    payload: Any = None
    cancelled: bool = False


@dataclass
class EngineStats:
    dispatched: int = 0
    cancelled: int = 0
    end_time: float = 0.0


def _stream_seed(seed: int, name: str) -> int:
    # Stable across platforms and runs: independent of PYTHONHASHSEED.
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Engine:
    """Virtual clock plus ordered event queue plus named PRNG streams."""

    def __init__(self, seed: int = 0, start: float = 0.0, keep_log: bool = False):
        self.seed = seed
        self.now = start
        self._heap: list[tuple[float, int, Event]] = []
        self._seq = 0
        self._rngs: dict[str, np.random.Generator] = {}
        self._last_dispatched: tuple[float, int] | None = None
        self.keep_log = keep_log
        self.log: list[tuple[float, int, str]] = []

    # ------------------------------------------------------------------
    # randomness
    # ------------------------------------------------------------------
    def rng(self, name: str) -> np.random.Generator:
        """Seeded stream for one component, created on first use."""
        gen = self._rngs.get(name)
        if gen is None:
            gen = np.random.default_rng(_stream_seed(self.seed, name))
            self._rngs[name] = gen
        return gen

    # ------------------------------------------------------------------
    # scheduling
    # ------------------------------------------------------------------
    def schedule(self, at: float, kind: str, action: Callable[[], None],
                 payload: Any = None) -> Event:
        if at < self.now:
            raise TimeTravel(f"schedule {kind!r} at {at} < now {self.now}")
        event = Event(at, self._seq, kind, action, payload)
        self._seq += 1
        heapq.heappush(self._heap, (at, event.sequence, event))
        return event

    def after(self, delay: float, kind: str, action: Callable[[], None],
              payload: Any = None) -> Event:
        return self.schedule(self.now + delay, kind, action, payload)

    def cancel(self, event: Event) -> None:
        event.cancelled = True

    # ------------------------------------------------------------------
    # running
    # ------------------------------------------------------------------
    def run_until(self, t_end: float) -> EngineStats:
        """Dispatch every event with fire_time <= t_end; clock ends at t_end."""
        if t_end < self.now:
            raise TimeTravel(f"run_until {t_end} < now {self.now}")
        stats = EngineStats()
        while self._heap and self._heap[0][0] <= t_end:
            _, _, event = heapq.heappop(self._heap)
            if event.cancelled:
                stats.cancelled += 1
                continue
            key = (event.fire_time, event.sequence)
            if self._last_dispatched is not None and key < self._last_dispatched:
                raise AssertionError(
                    f"dispatch order violated: {key} after {self._last_dispatched}")
            self._last_dispatched = key
            self.now = event.fire_time
            if self.keep_log:
                self.log.append((event.fire_time, event.sequence, event.kind))
            stats.dispatched += 1
            event.action()
        self.now = t_end
        stats.end_time = t_end
        return stats

    def pending(self) -> int:
        return sum(1 for _, _, e in self._heap if not e.cancelled)

    def dump_log(self) -> list[str]:
        """Line-delimited dispatch log, for debugging and golden-file tests."""
        return [f"{t!r} {seq} {kind}" for t, seq, kind in self.log]
