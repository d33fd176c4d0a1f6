"""Metrics derived from a finished run.

Everything here is recomputable from the event log alone; the writers
take structured results when available but never require them.  The
percentile is nearest-rank so reported numbers are always values that
actually occurred.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile, q in (0, 100]."""
    if not values:
        raise ValueError("percentile of empty sequence")
    if not 0 < q <= 100:
        raise ValueError(f"q out of range: {q}")
    ordered = sorted(values)
    idx = math.ceil(q / 100 * len(ordered)) - 1
    return ordered[idx]


def slo_violation_fraction(latencies: Sequence[float], baseline: float,
                           scale: float) -> float:
    if not latencies:
        return 0.0
    limit = baseline * scale
    return sum(1 for v in latencies if v > limit) / len(latencies)


# ---------------------------------------------------------------- log parse

def parse_line(line: str) -> tuple[int, str, dict[str, str]]:
    parts = line.split(" ")
    time_us = int(parts[0])
    kind = parts[1]
    fields = {}
    for part in parts[2:]:
        key, _, val = part.partition("=")
        fields[key] = val
    return time_us, kind, fields


@dataclass
class RequestStats:
    rid: int
    arrival_us: int = 0
    input_len: int = 0
    output_len: int = 0
    first_token_us: Optional[int] = None
    token_times: list[int] = field(default_factory=list)
    finished_us: Optional[int] = None
    evicted: int = 0

    @property
    def ttft_s(self) -> Optional[float]:
        if self.first_token_us is None:
            return None
        return (self.first_token_us - self.arrival_us) / 1e6

    @property
    def tpot_s(self) -> Optional[float]:
        emits = self.token_times
        if self.first_token_us is not None:
            emits = [self.first_token_us] + [t for t in self.token_times
                                             if t != self.first_token_us]
        if len(emits) < 2:
            return None
        return (emits[-1] - emits[0]) / (len(emits) - 1) / 1e6


@dataclass
class RunStats:
    requests: dict[int, RequestStats]
    end_us: int
    drop_events: int = 0
    evictions: int = 0
    oom_events: int = 0

    def ttfts(self) -> list[float]:
        return [r.ttft_s for r in self.requests.values() if r.ttft_s is not None]

    def tpots(self) -> list[float]:
        return [r.tpot_s for r in self.requests.values() if r.tpot_s is not None]

    def finished(self) -> int:
        return sum(1 for r in self.requests.values() if r.finished_us is not None)

    def throughput_tps(self) -> float:
        toks = sum(len(r.token_times) for r in self.requests.values())
        if self.end_us == 0:
            return 0.0
        return toks / (self.end_us / 1e6)


def collect(log_lines: Iterable[str]) -> RunStats:
    reqs: dict[int, RequestStats] = {}
    end_us = 0
    drops = evict = oom = 0
    for line in log_lines:
        t, kind, f = parse_line(line)
        end_us = max(end_us, t)
        if kind == "ARRIVE":
            rid = int(f["req"])
            reqs[rid] = RequestStats(rid=rid, arrival_us=t,
                                     input_len=int(f["inp"]),
                                     output_len=int(f["out"]))
        elif kind == "FIRST_TOKEN":
            rid = int(f["req"])
            reqs[rid].first_token_us = t
            reqs[rid].token_times.append(t)
        elif kind == "TOKEN":
            rid = int(f["req"])
            reqs[rid].token_times.append(t)
        elif kind == "FINISH":
            reqs[int(f["req"])].finished_us = t
        elif kind == "EVICT":
            reqs[int(f["req"])].evicted += 1
            evict += 1
        elif kind == "SWAP_OUT":
            evict += 1
        elif kind == "PLAN":
            drops += int(f.get("merges", "0"))
        elif kind == "OOM":
            oom += 1
    return RunStats(requests=reqs, end_us=end_us, drop_events=drops,
                    evictions=evict, oom_events=oom)


# -------------------------------------------------------------- bubble ratio

def bubble_ratio(log_lines: Iterable[str],
                 group: Optional[int] = None) -> float:
    """Pipeline idleness: each round's window runs from its first stage
    start to its last stage finish, and every stage of that round is idle
    whenever it is not executing inside the window.  The ratio is total
    idle over total busy across rounds.  A balanced S-stage round with m
    equal microbatches scores (S-1)/m, and a fully packed single-stage
    round scores zero."""
    rounds: dict[tuple[int, int], dict[int, list[tuple[int, int]]]] = {}
    for line in log_lines:
        t, kind, f = parse_line(line)
        if kind != "STAGE":
            continue
        gid = int(f["group"])
        if group is not None and gid != group:
            continue
        stages = rounds.setdefault((gid, int(f["rnd"])), {})
        stages.setdefault(int(f["stage"]), []).append(
            (int(f["start"]), int(f["end"])))
    busy = idle = 0
    for stages in rounds.values():
        lo = min(s for spans in stages.values() for s, _ in spans)
        hi = max(e for spans in stages.values() for _, e in spans)
        for spans in stages.values():
            occupied = sum(e - s for s, e in spans)
            busy += occupied
            idle += (hi - lo) - occupied
    if busy == 0:
        return 0.0
    return idle / busy


def max_microbatch_cost(log_lines: Iterable[str]) -> float:
    """Longest single stage execution seen, in seconds."""
    worst = 0
    for line in log_lines:
        _, kind, f = parse_line(line)
        if kind == "STAGE":
            worst = max(worst, int(f["end"]) - int(f["start"]))
    return worst / 1e6


# ------------------------------------------------------------------ writers

REPORT_COLUMNS = ["policy", "requests", "finished", "p50_ttft_s", "p99_ttft_s",
                  "p50_tpot_s", "p99_tpot_s", "throughput_tps", "drop_events",
                  "evictions", "oom_events"]


def report_row(policy: str, stats: RunStats) -> dict[str, str]:
    ttfts = stats.ttfts()
    tpots = stats.tpots()
    def fmt(vals, q):
        return f"{percentile(vals, q):.6f}" if vals else ""
    return {
        "policy": policy,
        "requests": str(len(stats.requests)),
        "finished": str(stats.finished()),
        "p50_ttft_s": fmt(ttfts, 50),
        "p99_ttft_s": fmt(ttfts, 99),
        "p50_tpot_s": fmt(tpots, 50),
        "p99_tpot_s": fmt(tpots, 99),
        "throughput_tps": f"{stats.throughput_tps():.3f}",
        "drop_events": str(stats.drop_events),
        "evictions": str(stats.evictions),
        "oom_events": str(stats.oom_events),
    }


def write_report(path: str, rows: list[dict[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


TIMELINE_COLUMNS = ["t_start_s", "occupancy", "queued", "stalled",
                    "mean_ttft_s", "throughput_tps"]


def timeline_rows(log_lines: Iterable[str],
                  window_s: float = 1.0) -> list[dict[str, str]]:
    """Windowed view over the run: occupancy and queue depth sampled from
    monitor lines, TTFT and token throughput aggregated per window."""
    occ_samples: list[tuple[int, int, int, int]] = []
    firsts: list[tuple[int, int]] = []  # (time, ttft_us)
    tokens: list[int] = []
    end_us = 0
    for line in log_lines:
        t, kind, f = parse_line(line)
        end_us = max(end_us, t)
        if kind == "OCC":
            occ_samples.append((t, int(f["bp"]), int(f["queued"]),
                                int(f["stalled"])))
        elif kind == "FIRST_TOKEN":
            firsts.append((t, int(f["ttft_us"])))
            tokens.append(t)
        elif kind == "TOKEN":
            tokens.append(t)
    win_us = int(window_s * 1e6)
    if win_us <= 0:
        raise ValueError("window_s must be positive")
    n_windows = end_us // win_us + 1
    rows = []
    oi = fi = ti = 0
    occ_samples.sort()
    firsts.sort()
    tokens.sort()
    last_occ = (0, 0, 0)
    for w in range(n_windows):
        lo, hi = w * win_us, (w + 1) * win_us
        samples = []
        while oi < len(occ_samples) and occ_samples[oi][0] < hi:
            samples.append(occ_samples[oi])
            oi += 1
        if samples:
            last_occ = (samples[-1][1], samples[-1][2], samples[-1][3])
        ttfts = []
        while fi < len(firsts) and firsts[fi][0] < hi:
            ttfts.append(firsts[fi][1])
            fi += 1
        ntok = 0
        while ti < len(tokens) and tokens[ti] < hi:
            ntok += 1
            ti += 1
        rows.append({
            "t_start_s": f"{lo / 1e6:.3f}",
            "occupancy": f"{last_occ[0] / 10_000:.4f}",
            "queued": str(last_occ[1]),
            "stalled": str(last_occ[2]),
            "mean_ttft_s": f"{sum(ttfts) / len(ttfts) / 1e6:.6f}" if ttfts else "",
            "throughput_tps": f"{ntok / window_s:.3f}",
        })
    return rows


def write_timeline(path: str, rows: list[dict[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIMELINE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
