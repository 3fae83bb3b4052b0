"""Per-run metrics: request records, transfer samples, time-bucketed series.

Raw values are never normalized in place; the 0-1 presentation used for
plots is a report-time flag.  CSV and JSON emission use a fixed field order
and repr floats, so two runs of the same config and seed produce
byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .workload import Request, Status

CSV_COLUMNS = [
    "bucket_start", "arrivals", "completions", "rps", "per_instance_rps",
    "success_rate", "t_p_mean", "t_d_mean", "e2e_mean", "tp_e2e_share",
    "transfer_time_mean", "d2d_utilization_mean", "cache_hit_rate",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _mean(values: list[float]) -> float | None:
    if not values:
        return None
    return sum(values) / len(values)


@dataclass
class MetricsFrame:
    bucket_s: float
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row.get(col)) for col in CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def series(self, column: str) -> list:
        return [row.get(column) for row in self.rows]


def normalized(values: list) -> list:
    """Scale a series to 0..1 for presentation; raw data stays untouched."""
    present = [v for v in values if v is not None]
    if not present:
        return values
    top = max(present)
    if top <= 0:
        return [0.0 if v is not None else None for v in values]
    return [v / top if v is not None else None for v in values]


class MetricsRecorder:
    def __init__(self, total_instances: int):
        self.total_instances = max(1, total_instances)
        self.finished: list[Request] = []
        self.arrivals: list[float] = []
        self.transfers: list[tuple[float, float, float]] = []  # (t, xi, util)
        self.cache_events: list[tuple[float, bool]] = []

    # -- ingestion -----------------------------------------------------------
    def on_arrival(self, request: Request) -> None:
        self.arrivals.append(request.arrival)

    def on_request_finished(self, request: Request) -> None:
        self.finished.append(request)

    def on_transfer(self, t: float, xi: float, util: float) -> None:
        self.transfers.append((t, xi, util))

    def add_cache_events(self, events: list[tuple[float, bool]]) -> None:
        self.cache_events.extend(events)

    # -- aggregation -----------------------------------------------------
    def totals(self) -> dict:
        counts = {status.value: 0 for status in Status}
        for req in self.finished:
            counts[req.status.value] += 1
        terminal = len(self.finished)
        done = counts[Status.DONE.value]
        return {
            "arrived": len(self.arrivals),
            "terminal": terminal,
            "done": done,
            "timeout_ttft": counts[Status.TIMEOUT_TTFT.value],
            "timeout_e2e": counts[Status.TIMEOUT_E2E.value],
            "failed": counts[Status.FAILED.value],
            "success_rate": (done / terminal) if terminal else None,
        }

    def per_scenario_totals(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for req in self.finished:
            entry = out.setdefault(req.scenario, {"terminal": 0, "done": 0})
            entry["terminal"] += 1
            if req.status is Status.DONE:
                entry["done"] += 1
        for entry in out.values():
            entry["success_rate"] = entry["done"] / entry["terminal"]
        return dict(sorted(out.items()))

    def phase_means(self, since: float = 0.0) -> dict:
        tp, td, e2e, xi = [], [], [], []
        for req in self.finished:
            ts = req.timestamps
            end = ts.get("finished", 0.0)
            if end < since or req.status is not Status.DONE:
                continue
            if "prefill_start" in ts and "prefill_end" in ts:
                tp.append(ts["prefill_end"] - ts["prefill_start"])
            if "transfer_start" in ts:
                td.append(end - ts["transfer_start"])
            e2e.append(end - req.arrival)
            if req.transfer_xi is not None:
                xi.append(req.transfer_xi)
        return {"t_p_mean": _mean(tp), "t_d_mean": _mean(td),
                "e2e_mean": _mean(e2e), "transfer_time_mean": _mean(xi)}

    def frame(self, duration: float, bucket_s: float) -> MetricsFrame:
        n_buckets = max(1, int(round(duration / bucket_s)))
        rows = []
        for i in range(n_buckets):
            lo, hi = i * bucket_s, (i + 1) * bucket_s
            arrivals = sum(1 for t in self.arrivals if lo <= t < hi)
            in_bucket = [r for r in self.finished
                         if lo <= r.timestamps.get("finished", -1.0) < hi]
            done = [r for r in in_bucket if r.status is Status.DONE]
            tp = [r.timestamps["prefill_end"] - r.timestamps["prefill_start"]
                  for r in done
                  if "prefill_end" in r.timestamps and "prefill_start" in r.timestamps]
            td = [r.timestamps["finished"] - r.timestamps["transfer_start"]
                  for r in done if "transfer_start" in r.timestamps]
            e2e = [r.timestamps["finished"] - r.arrival for r in done]
            tp_mean, td_mean, e2e_mean = _mean(tp), _mean(td), _mean(e2e)
            xis = [x for t, x, _ in self.transfers if lo <= t < hi]
            utils = [u for t, _, u in self.transfers if lo <= t < hi]
            cache = [hit for t, hit in self.cache_events if lo <= t < hi]
            rows.append({
                "bucket_start": lo,
                "arrivals": arrivals,
                "completions": len(done),
                "rps": len(done) / bucket_s,
                "per_instance_rps": len(done) / bucket_s / self.total_instances,
                "success_rate": (len(done) / len(in_bucket)) if in_bucket else None,
                "t_p_mean": tp_mean,
                "t_d_mean": td_mean,
                "e2e_mean": e2e_mean,
                "tp_e2e_share": (tp_mean / e2e_mean
                                 if tp_mean is not None and e2e_mean else None),
                "transfer_time_mean": _mean(xis),
                "d2d_utilization_mean": _mean(utils),
                "cache_hit_rate": (sum(cache) / len(cache)) if cache else None,
            })
        return MetricsFrame(bucket_s=bucket_s, rows=rows)


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, default=str) + "\n"
