"""Drop-plan generation.

When queued demand exceeds free KVCache, instances give up parameter
redundancy instead of evicting cache: the planner repeatedly merges the
two smallest serving groups into one pipelined group, freeing one full
parameter copy per merge, until the freed bytes cover the demand.  Small
groups merge first because shallow pipelines lose the least per-token
latency.

Planning is pure: it reads group shapes and writes a DropPlan; executing
the plan (remaps, reschedules, exchanges) is the engine's job.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .core import Group, ModelSpec


def compute_demand(pending_tokens: int, free_kv_bytes: int,
                   kv_bytes_per_token: int) -> int:
    """Unmet KVCache bytes: pending token need minus free capacity, >= 0.

    pending_tokens counts every queued request's full input plus one
    token per allocation-blocked decoder; admitted requests reserved
    their input at admission so they carry no hidden need here.
    """
    if pending_tokens < 0 or free_kv_bytes < 0:
        raise ValueError("demand inputs must be >= 0")
    return max(0, pending_tokens * kv_bytes_per_token - free_kv_bytes)


@dataclass(frozen=True)
class MergeStep:
    gid_a: int
    gid_b: int
    gid: int  # surviving group id, min of the two parents
    members: tuple[int, ...]  # pipeline order
    stage_layer_map: dict[int, tuple[int, int]]
    freed_bytes: int


@dataclass
class DropPlan:
    demand_bytes: int
    freed_bytes: int
    merges: list[MergeStep] = field(default_factory=list)
    fallback: bool = False
    heap_ops: int = 0  # push/pop count, for the O(N log N) bound

    def to_text(self) -> str:
        lines = [f"plan demand={self.demand_bytes} freed={self.freed_bytes} "
                 f"fallback={int(self.fallback)} merges={len(self.merges)}"]
        for m in self.merges:
            lines.append(f"merge a={m.gid_a} b={m.gid_b} gid={m.gid} "
                         f"freed={m.freed_bytes}")
            for iid in m.members:
                lo, hi = m.stage_layer_map[iid]
                lines.append(f"stage gid={m.gid} inst={iid} layers={lo}:{hi}")
        return "\n".join(lines) + "\n"


def _even_ranges(num_layers: int, m: int) -> list[tuple[int, int]]:
    bounds = [k * num_layers // m for k in range(m + 1)]
    return [(bounds[k], bounds[k + 1]) for k in range(m)]


def plan_drop(groups: list[Group], demand_bytes: int,
              model: ModelSpec) -> DropPlan:
    """Greedy two-smallest merging until freed bytes cover the demand.

    Ties break on lowest group id.  Each merge frees exactly one
    parameter copy.  Merged members keep pipeline order by current
    layer-range start (instance id on ties), which makes equal-depth
    merges pure in-place drops.  fallback is set when the queue runs out
    of pairs before the demand is met.
    """
    if demand_bytes < 0:
        raise ValueError("demand must be >= 0")
    plan = DropPlan(demand_bytes=demand_bytes, freed_bytes=0)
    if demand_bytes == 0:
        return plan

    heap = [(g.size, g.gid) for g in groups]
    heapq.heapify(heap)
    plan.heap_ops += len(heap)
    # current members with their held ranges, evolving as merges stack
    live: dict[int, list[tuple[int, int, int]]] = {
        g.gid: [(g.stage_layer_map[iid][0], iid, g.stage_layer_map[iid][1])
                for iid in g.member_instances]
        for g in groups}

    while plan.freed_bytes < demand_bytes and len(heap) >= 2:
        _, gid_a = heapq.heappop(heap)
        _, gid_b = heapq.heappop(heap)
        plan.heap_ops += 2
        members = sorted(live.pop(gid_a) + live.pop(gid_b))
        gid = min(gid_a, gid_b)
        ranges = _even_ranges(model.num_layers, len(members))
        order = tuple(iid for _, iid, _ in members)
        stage_map = {iid: ranges[k] for k, (_, iid, _) in enumerate(members)}
        plan.merges.append(MergeStep(
            gid_a=gid_a, gid_b=gid_b, gid=gid, members=order,
            stage_layer_map=stage_map, freed_bytes=model.param_bytes))
        plan.freed_bytes += model.param_bytes
        live[gid] = [(stage_map[iid][0], iid, stage_map[iid][1])
                     for iid in order]
        heapq.heappush(heap, (len(members), gid))
        plan.heap_ops += 1

    plan.fallback = plan.freed_bytes < demand_bytes
    return plan


def member_moves(held: list[tuple[int, int]],
                 target: tuple[int, int]) -> tuple[list[tuple[int, int]],
                                                   list[tuple[int, int]]]:
    """Layer ranges to drop and to fetch for one member.

    held is the member's current ranges; target its assigned range in
    the new stage map.  Returns (drops, fetches) as contiguous ranges:
    drops = held - target, fetches = target - held.
    """
    held_set = set()
    for lo, hi in held:
        held_set.update(range(lo, hi))
    tlo, thi = target
    target_set = set(range(tlo, thi))

    def to_ranges(layers: set[int]) -> list[tuple[int, int]]:
        out: list[tuple[int, int]] = []
        for l in sorted(layers):
            if out and out[-1][1] == l:
                out[-1] = (out[-1][0], l + 1)
            else:
                out.append((l, l + 1))
        return out

    return to_ranges(held_set - target_set), to_ranges(target_set - held_set)
