"""Transfer planning and link scheduling between instances.

Three payload kinds share each directed link: pipeline activations,
KVCache chunks being rebalanced after a drop, and parameter shards being
restored.  Activations always go first; everything else is FIFO.  A link
never preempts a running task, so KVCache moves are cut into chunks sized
to roughly one pipeline-stage execution and an activation arriving
mid-chunk waits at most one chunk time.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

HOST = -1  # pseudo instance id for the host-memory parameter replica


class TaskKind(Enum):
    ACTIVATION = "activation"
    KVCACHE_CHUNK = "kvcache_chunk"
    PARAM_SHARD = "param_shard"


# Lower value schedules first; KV chunks and param shards share one FIFO class.
_PRIO = {TaskKind.ACTIVATION: 0, TaskKind.KVCACHE_CHUNK: 1, TaskKind.PARAM_SHARD: 1}


@dataclass
class TransferTask:
    tid: int
    kind: TaskKind
    src: int
    dst: int
    size_bytes: int
    enqueue_us: int = 0
    rid: Optional[int] = None  # request the payload belongs to, if any
    layers: Optional[tuple[int, int]] = None  # param shard layer range
    last_for_rid: bool = False  # final chunk of this request's move
    tag: Optional[str] = None  # engine completion hook selector

    def __post_init__(self) -> None:
        if self.size_bytes < 0:
            raise ValueError("transfer size must be >= 0")


@dataclass
class LinkModel:
    """One directed serialized link."""

    src: int
    dst: int
    bandwidth: int  # bytes/s
    base_latency_us: int = 50
    busy_until_us: int = 0
    pending: list[tuple[int, int, int, TransferTask]] = field(default_factory=list)
    running: Optional[TransferTask] = None

    def transfer_time_us(self, size_bytes: int) -> int:
        if self.bandwidth <= 0:
            raise ValueError("link bandwidth must be positive")
        # ceil division keeps durations integral and pessimistic by < 1 us
        wire = (size_bytes * 1_000_000 + self.bandwidth - 1) // self.bandwidth
        return self.base_latency_us + wire

    def enqueue(self, task: TransferTask, now_us: int) -> None:
        task.enqueue_us = now_us
        heapq.heappush(
            self.pending, (_PRIO[task.kind], task.enqueue_us, task.tid, task))

    @property
    def idle(self) -> bool:
        return self.running is None

    def has_pending(self) -> bool:
        return bool(self.pending)


def schedule_link(link: LinkModel, now_us: int) -> Optional[tuple[TransferTask, int, int]]:
    """Start the next task on an idle link.

    Returns (task, start_us, done_us) or None when nothing is pending.
    The oldest activation wins over any KVCache chunk or param shard;
    within a class, FIFO by enqueue time.
    """
    if link.running is not None or not link.pending:
        return None
    _, _, _, task = heapq.heappop(link.pending)
    start = max(now_us, link.busy_until_us)
    done = start + link.transfer_time_us(task.size_bytes)
    link.busy_until_us = done
    link.running = task
    return task, start, done


def finish_link(link: LinkModel, task: TransferTask) -> None:
    if link.running is not task:
        raise ValueError("finishing a task that is not running")
    link.running = None


class Network:
    """Directed links between instances, created on first use."""

    def __init__(self, nic_bandwidth: dict[int, int], host_bandwidth: int,
                 base_latency_us: int = 50):
        self._nic = dict(nic_bandwidth)
        self._host_bw = host_bandwidth
        self._base_latency_us = base_latency_us
        self.links: dict[tuple[int, int], LinkModel] = {}

    def link(self, src: int, dst: int) -> LinkModel:
        key = (src, dst)
        if key not in self.links:
            if src == HOST or dst == HOST:
                bw = self._host_bw
            else:
                bw = min(self._nic[src], self._nic[dst])
            self.links[key] = LinkModel(src, dst, bw, self._base_latency_us)
        return self.links[key]


def share_bytes(tokens: int, lo: int, hi: int, num_layers: int,
                kv_bytes_per_token: int) -> int:
    """KVCache bytes of a request that live on layers [lo, hi).

    Computed as a cumulative difference so shares over any partition of
    [0, num_layers) sum exactly to the request's total bytes.
    """
    total = tokens * kv_bytes_per_token

    def upto(x: int) -> int:
        return total * x // num_layers

    return upto(hi) - upto(lo)


def _overlap(a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    lo = max(a[0], b[0])
    hi = min(a[1], b[1])
    return (lo, hi) if hi > lo else (0, 0)


def plan_exchange(request_tokens: dict[int, int],
                  old_map: dict[int, tuple[int, int]],
                  new_map: dict[int, tuple[int, int]],
                  num_layers: int, kv_bytes_per_token: int,
                  chunk_bytes: int, tid_start: int = 0) -> list[TransferTask]:
    """Plan KVCache moves after a stage-map change.

    For every request, each slice of its cache follows its layers: bytes
    held on old owner j that now belong to new owner k flow j -> k.  Flows
    are cut into chunk_bytes pieces and interleaved round-robin across
    requests so no single move monopolizes a link.  The final chunk per
    request is flagged; the owner stays stalled until it lands.
    """
    if chunk_bytes < 1:
        raise ValueError("chunk_bytes must be >= 1")
    flows: list[tuple[int, int, int, int]] = []  # (rid, src, dst, bytes)
    for rid in sorted(request_tokens):
        tokens = request_tokens[rid]
        for src in sorted(old_map):
            for dst in sorted(new_map):
                if src == dst:
                    continue
                lo, hi = _overlap(old_map[src], new_map[dst])
                if hi <= lo:
                    continue
                b = share_bytes(tokens, lo, hi, num_layers, kv_bytes_per_token)
                if b > 0:
                    flows.append((rid, src, dst, b))

    # one chunk list per flow, then round-robin merge across requests
    per_flow: list[list[TransferTask]] = []
    tid = tid_start
    for rid, src, dst, b in flows:
        chunks = []
        left = b
        while left > 0:
            take = min(chunk_bytes, left)
            chunks.append(TransferTask(tid, TaskKind.KVCACHE_CHUNK, src, dst,
                                       take, rid=rid))
            tid += 1
            left -= take
        per_flow.append(chunks)

    tasks: list[TransferTask] = []
    cursor = [0] * len(per_flow)
    remaining = sum(len(c) for c in per_flow)
    while remaining:
        for i, chunks in enumerate(per_flow):
            if cursor[i] < len(chunks):
                tasks.append(chunks[cursor[i]])
                cursor[i] += 1
                remaining -= 1

    # flag each request's final chunk
    last_by_rid: dict[int, TransferTask] = {}
    for t in tasks:
        last_by_rid[t.rid] = t
    for t in last_by_rid.values():
        t.last_for_rid = True
    return tasks


def plan_restore_transfers(missing: dict[int, tuple[int, int]],
                           holders: dict[int, list[tuple[int, int]]],
                           bytes_per_layer: int, chunk_bytes: int,
                           tid_start: int = 0) -> list[TransferTask]:
    """Plan parameter pulls for instances missing layer ranges.

    missing maps target instance -> layer range to fetch; holders maps live
    instance -> ranges it currently holds.  Each layer comes from the
    lowest-id live holder, falling back to the host replica (slower link)
    when no instance holds it.  Contiguous layers with one source collapse
    into a single flow, cut into chunk_bytes pieces.
    """
    tasks: list[TransferTask] = []
    tid = tid_start
    for target in sorted(missing):
        lo, hi = missing[target]
        source_of = {}
        for layer in range(lo, hi):
            src = HOST
            for holder in sorted(holders):
                if holder == target:
                    continue
                if any(a <= layer < b for a, b in holders[holder]):
                    src = holder
                    break
            source_of[layer] = src
        run_start = lo
        while run_start < hi:
            run_end = run_start
            while run_end < hi and source_of[run_end] == source_of[run_start]:
                run_end += 1
            src = source_of[run_start]
            left = (run_end - run_start) * bytes_per_layer
            while left > 0:
                take = min(chunk_bytes, left)
                tasks.append(TransferTask(
                    tid, TaskKind.PARAM_SHARD, src, target, take,
                    layers=(run_start, run_end)))
                tid += 1
                left -= take
            run_start = run_end
    return tasks
