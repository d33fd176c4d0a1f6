"""Arrival traces: CSV load/save, rate rescaling, synthetic bursts.

Trace CSV columns: arrival_s,input_len,output_len.  Arrival times are
seconds in the file and integer microseconds in memory.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass

from .core import s_to_us


@dataclass(frozen=True)
class TraceRecord:
    arrival_us: int
    input_len: int
    output_len: int


HEADER = ["arrival_s", "input_len", "output_len"]


def load_trace(path: str) -> list[TraceRecord]:
    """Read and validate a trace file.

    Row problems report the 1-based file line; arrivals must be
    non-decreasing and lengths positive.
    """
    records: list[TraceRecord] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise ValueError(f"line 1: expected header {','.join(HEADER)}")
        prev_us = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"line {lineno}: expected 3 columns, got {len(row)}")
            try:
                arrival_s = float(row[0])
                input_len = int(row[1])
                output_len = int(row[2])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
            if arrival_s < 0:
                raise ValueError(f"line {lineno}: negative arrival time")
            if input_len < 1 or output_len < 1:
                raise ValueError(f"line {lineno}: lengths must be >= 1")
            us = s_to_us(arrival_s)
            if prev_us is not None and us < prev_us:
                raise ValueError(f"line {lineno}: arrivals must be non-decreasing")
            prev_us = us
            records.append(TraceRecord(us, input_len, output_len))
    return records


def save_trace(path: str, records: list[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in records:
            w.writerow([f"{r.arrival_us / 1_000_000:.6f}", r.input_len, r.output_len])


def rescale(records: list[TraceRecord], factor: float,
            seed: int = 0) -> list[TraceRecord]:
    """Change a trace's arrival rate while keeping its temporal pattern.

    factor > 1: every arrival is replicated ceil(factor)-1 extra times
    with deterministic jitter at most half the local inter-arrival gap,
    then replicas are thinned evenly to hit round(n * factor) arrivals.
    factor < 1: stride-thin the originals.  factor == 1 returns a copy.
    """
    if factor <= 0:
        raise ValueError("rescale factor must be > 0")
    n = len(records)
    if n == 0 or factor == 1.0:
        return list(records)

    if factor < 1.0:
        kept = [r for i, r in enumerate(records)
                if math.floor((i + 1) * factor) > math.floor(i * factor)]
        return kept

    target = int(round(n * factor))
    rng = random.Random(seed)
    extra_per = math.ceil(factor) - 1
    replicas: list[TraceRecord] = []
    for i, r in enumerate(records):
        # local gap: to the next arrival, or backwards at the tail
        if i + 1 < n:
            gap = records[i + 1].arrival_us - r.arrival_us
        elif i > 0:
            gap = r.arrival_us - records[i - 1].arrival_us
        else:
            gap = 2
        gap = max(gap, 2)
        for _ in range(extra_per):
            jitter = rng.randrange(0, gap // 2 + 1)
            replicas.append(TraceRecord(r.arrival_us + jitter,
                                        r.input_len, r.output_len))
    need = target - n
    if need < 0:
        raise ValueError("factor > 1 cannot shrink a trace")
    if need > len(replicas):
        need = len(replicas)
    # even selection keeps replicas spread over the whole trace
    picked = [replicas[(j * len(replicas)) // need] for j in range(need)] if need else []
    out = list(records) + picked
    out.sort(key=lambda r: (r.arrival_us, r.input_len, r.output_len))
    return out


def _draw_len(rng: random.Random, dist: str, mean: int, sigma: float) -> int:
    if dist == "fixed":
        return max(1, mean)
    if dist == "uniform":
        return max(1, rng.randint(max(1, mean // 2), mean + mean // 2))
    if dist == "lognormal":
        mu = math.log(mean) - sigma * sigma / 2.0
        return max(1, round(rng.lognormvariate(mu, sigma)))
    raise ValueError(f"unknown length distribution {dist!r}")


def synth_burst(duration_s: float, base_rps: float, burst_rps: float,
                burst_start_s: float, burst_end_s: float,
                input_mean: int, output_mean: int,
                length_dist: str = "lognormal", sigma: float = 0.6,
                seed: int = 0) -> list[TraceRecord]:
    """Poisson arrivals with a rate step inside [burst_start, burst_end).

    Fully determined by the seed.  Lengths are drawn per request from the
    configured distribution.
    """
    if duration_s <= 0 or base_rps <= 0 or burst_rps <= 0:
        raise ValueError("duration and rates must be positive")
    rng = random.Random(seed)
    records: list[TraceRecord] = []
    t = 0.0
    while True:
        rate = burst_rps if burst_start_s <= t < burst_end_s else base_rps
        t += rng.expovariate(rate)
        if t >= duration_s:
            break
        records.append(TraceRecord(
            s_to_us(t),
            _draw_len(rng, length_dist, input_mean, sigma),
            _draw_len(rng, length_dist, output_mean, sigma)))
    return records
