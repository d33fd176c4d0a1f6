"""Core types shared across the simulator.

All timestamps and durations are 64-bit integer microseconds.  Floating point
only appears at the edges (cost model seconds, metric output); keeping the
clock integral makes event logs byte-stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

US_PER_S = 1_000_000


def s_to_us(seconds: float) -> int:
    """Convert seconds to integer microseconds (round half away from drift)."""
    return int(round(seconds * US_PER_S))


def us_to_s(us: int) -> float:
    return us / US_PER_S


class RequestState(Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    STALLED = "stalled"
    FINISHED = "finished"
    DROPPED = "dropped"


# Transitions allowed by the request lifecycle.  DROPPED requeues to QUEUED
# (preemptive eviction); STALLED returns to DECODING when its data lands.
_ALLOWED = {
    RequestState.QUEUED: {RequestState.PREFILLING, RequestState.DROPPED},
    RequestState.PREFILLING: {RequestState.DECODING, RequestState.STALLED,
                              RequestState.DROPPED},
    RequestState.DECODING: {RequestState.FINISHED, RequestState.STALLED,
                            RequestState.DROPPED},
    RequestState.STALLED: {RequestState.DECODING, RequestState.PREFILLING,
                           RequestState.DROPPED},
    RequestState.DROPPED: {RequestState.QUEUED},
    RequestState.FINISHED: set(),
}


@dataclass
class ModelSpec:
    """Static description of the served model on one instance."""

    num_layers: int
    bytes_per_layer: int
    kv_bytes_per_token: int
    hidden_bytes_per_token: int = 10_000

    @property
    def param_bytes(self) -> int:
        """Bytes of one full parameter copy."""
        return self.num_layers * self.bytes_per_layer

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.bytes_per_layer < 1 or self.kv_bytes_per_token < 1:
            raise ValueError("model byte sizes must be positive")


@dataclass
class Request:
    """One inference request moving through the cluster.

    output_len is the oracle answer used to terminate decode; the scheduler
    never reads it ahead of time.
    """

    rid: int
    arrival_us: int
    input_len: int
    output_len: int
    state: RequestState = RequestState.QUEUED
    tokens_prefilled: int = 0
    tokens_decoded: int = 0
    first_token_us: Optional[int] = None
    token_emit_us: list[int] = field(default_factory=list)
    home_instance: Optional[int] = None

    def __post_init__(self) -> None:
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError("request lengths must be >= 1")

    def set_state(self, new: RequestState) -> None:
        if new not in _ALLOWED[self.state]:
            raise ValueError(
                f"illegal transition {self.state.value} -> {new.value} "
                f"for request {self.rid}")
        self.state = new

    def record_token(self, now_us: int) -> None:
        """Emit one output token at now_us.  The first one fixes TTFT."""
        if self.token_emit_us and now_us <= self.token_emit_us[-1]:
            raise ValueError("token emit times must be strictly increasing")
        if self.first_token_us is None:
            self.first_token_us = now_us
        self.token_emit_us.append(now_us)
        self.tokens_decoded += 1
        if self.tokens_decoded > self.output_len:
            raise ValueError("decoded past output_len")

    @property
    def context_len(self) -> int:
        """Tokens currently held in KVCache context."""
        return self.tokens_prefilled + self.tokens_decoded

    @property
    def done(self) -> bool:
        return self.tokens_decoded >= self.output_len


def ttft(request: Request) -> int:
    """Time to first token in microseconds.

    Raises if the request has not yet produced its first token.
    """
    if request.first_token_us is None:
        raise ValueError(f"request {request.rid} not yet prefilled")
    return request.first_token_us - request.arrival_us


def tpot(request: Request) -> float:
    """Mean inter-token gap in microseconds over the decode phase.

    token_emit_us[0] is the first token (end of prefill); the gap from
    arrival to that point is TTFT and never counted here.  Needs at least
    two emitted tokens.
    """
    n = len(request.token_emit_us)
    if n < 2:
        raise ValueError(f"undefined TPOT for request {request.rid}")
    return (request.token_emit_us[-1] - request.token_emit_us[0]) / (n - 1)


@dataclass(frozen=True)
class Chunk:
    """A contiguous run of tokens of one request inside a microbatch.

    prefix_len counts tokens of the same request processed in earlier
    chunks (plus any already-cached context); attention over the prefix is
    what makes chunk cost quadratic-ish in practice.
    """

    rid: int
    token_count: int
    prefix_len: int
    decode: bool = False

    def __post_init__(self) -> None:
        if self.token_count < 1:
            raise ValueError("chunk token_count must be >= 1")
        if self.prefix_len < 0:
            raise ValueError("chunk prefix_len must be >= 0")


@dataclass
class Microbatch:
    """Ordered chunks executed together through the pipeline."""

    mbid: int
    chunks: list[Chunk] = field(default_factory=list)

    @property
    def token_count(self) -> int:
        return sum(c.token_count for c in self.chunks)


@dataclass
class Instance:
    """One serving instance (GPU).  Memory state is attached by the
    instance-memory module; core keeps only identity and capacity."""

    iid: int
    hbm_bytes: int
    nic_bandwidth: int  # bytes/s on this instance's link
    table: object = None  # SegmentTable, set by memory.build_instance
    kv: object = None  # KVAllocator, likewise
    failed: bool = False


@dataclass
class Group:
    """A set of instances serving with one shared parameter copy.

    Singleton groups are the normal full-copy state.  stage_layer_map gives
    each member its contiguous layer range in pipeline order.
    """

    gid: int
    member_instances: list[int]
    stage_layer_map: dict[int, tuple[int, int]]

    @property
    def size(self) -> int:
        return len(self.member_instances)

    def layer_range(self, iid: int) -> tuple[int, int]:
        return self.stage_layer_map[iid]

    def validate_coverage(self, num_layers: int) -> None:
        """Members' ranges must tile [0, num_layers) exactly once."""
        ranges = [self.stage_layer_map[i] for i in self.member_instances]
        if sorted(ranges) != ranges:
            raise ValueError(f"group {self.gid}: stages out of layer order")
        cursor = 0
        for lo, hi in ranges:
            if lo != cursor or hi <= lo:
                raise ValueError(
                    f"group {self.gid}: coverage violation at layer {cursor}")
            cursor = hi
        if cursor != num_layers:
            raise ValueError(
                f"group {self.gid}: coverage violation at layer {cursor}")
