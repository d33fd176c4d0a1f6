"""Discrete-event serving simulator.

One Engine instance runs one cluster under one policy over one trace.
The clock is integer microseconds and every scheduling decision iterates
sorted structures, so two runs of the same config produce byte-identical
event logs.

Execution model: each group serves in rounds.  A round snapshots the
group's decodable requests and admissible queue, forms microbatches
(token-budget packing, or cost-balanced lookahead once a group is
pipelined under the kunserve policy), and streams them through the
members' stages.  Stage s of microbatch k starts once stage s finished
microbatch k-1 and k's activation arrived from stage s-1; activations
ride the same links as KVCache and parameter transfers, with priority.

Policies:
  kunserve  - on overload, merge groups per the drop planner, remap
              parameter blocks to KVCache, exchange resident cache to
              match the new stage map; restore and dissolve when the
              cluster drains.  Never evicts KVCache.
  recompute - evict the newest resident, requeue it at the queue head.
  swap      - move the newest resident's cache to host memory, bring it
              back ongoing-first when space frees.
  migrate   - move the newest resident to the least-loaded instance
              with room, or do nothing.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import memory
from .config import SimConfig
from .core import (Chunk, Group, Instance, Microbatch, Request, RequestState,
                   s_to_us)
from .costmodel import batch_cost
from .exchange import (HOST, LinkModel, Network, TaskKind, TransferTask,
                       finish_link, plan_exchange, plan_restore_transfers,
                       schedule_link, share_bytes)
from .formulation import (attach_decode, lookahead_formulation,
                          token_count_chunking)
from .planner import DropPlan, compute_demand, member_moves, plan_drop
from .traceio import TraceRecord


class EventQueue:
    """Min-heap of (time_us, seq, callback); seq breaks ties deterministically."""

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0

    def push(self, time_us: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (time_us, self._seq, fn))
        self._seq += 1

    def pop(self) -> tuple[int, int, Callable[[], None]]:
        return heapq.heappop(self._heap)

    def peek_time(self) -> int:
        return self._heap[0][0]

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class RoundState:
    no: int
    mbs: list[Microbatch]
    members: list[int]
    times: list[list[int]]  # [stage][mb] execution us
    act_ready: list[list[Optional[int]]]  # [stage][mb] arrival time
    next_k: list[int]
    free_at: list[int]
    final_done: int = 0


@dataclass
class GroupRun:
    group: Group
    queue: list[int] = field(default_factory=list)
    active: set[int] = field(default_factory=set)
    admit_order: list[int] = field(default_factory=list)
    ready_at_us: int = 0  # remap gate: no round starts earlier
    in_round: bool = False
    pause: bool = False
    no_admit: bool = False
    round_no: int = 0
    restoring: bool = False
    params_restored: bool = False
    rstate: Optional[RoundState] = None


@dataclass
class MonitorState:
    tick_us: int
    restore_threshold: float
    overload_seen_ticks: int = 0
    above_autoscale_since: Optional[int] = None
    autoscale_logged: bool = False


@dataclass
class SimResult:
    requests: dict[int, Request]
    log_lines: list[str]
    end_us: int
    drop_events: int
    evictions: int
    fallbacks: int


class Engine:
    def __init__(self, cfg: SimConfig, trace: list[TraceRecord],
                 policy: Optional[str] = None, seed: int = 0):
        self.cfg = cfg
        self.policy = policy or cfg.policy.kind
        self.seed = seed  # recorded in the log header only
        self.model = cfg.model
        self.coeffs = cfg.cost
        self.now = 0
        self.evq = EventQueue()
        self.log_lines: list[str] = []
        self.requests: dict[int, Request] = {}
        self.trace = trace

        self.instances: dict[int, Instance] = {}
        self.groups: dict[int, GroupRun] = {}
        self.group_of: dict[int, int] = {}
        for i in range(cfg.cluster.instances):
            self.instances[i] = memory.build_instance(
                i, self.model, cfg.cluster.hbm_bytes, cfg.cluster.nic_bandwidth,
                cfg.cluster.map_latency_us)
        k = cfg.cluster.initial_group_size
        for lead in range(0, cfg.cluster.instances, k):
            members = list(range(lead, lead + k))
            bounds = [j * self.model.num_layers // k for j in range(k + 1)]
            smap = {members[j]: (bounds[j], bounds[j + 1]) for j in range(k)}
            g = Group(gid=lead, member_instances=members, stage_layer_map=smap)
            g.validate_coverage(self.model.num_layers)
            self.groups[lead] = GroupRun(group=g)
            for iid in members:
                self.group_of[iid] = lead
                # a merged member keeps only its stage share resident
                lo, hi = smap[iid]
                if lo > 0:
                    memory.drop_layers(self.instances[iid], (0, lo), g)
                if hi < self.model.num_layers:
                    memory.drop_layers(self.instances[iid],
                                       (hi, self.model.num_layers), g)

        self.network = Network(
            {i: inst.nic_bandwidth for i, inst in self.instances.items()},
            cfg.cluster.host_bandwidth, cfg.cluster.link_base_latency_us)

        self.total_alloc: dict[int, int] = {}  # rid -> reserved tokens
        self.pending_prefill: dict[int, int] = {}  # rid -> tokens still to run
        self.prefilled_in_round: dict[int, int] = {}
        self.resume_state: dict[int, RequestState] = {}
        self.move_outstanding: dict[int, int] = {}  # rid -> in-flight chunks
        self.consolidating: dict[int, dict] = {}  # rid -> {home, peers, bytes}
        self.swapped_out: list[int] = []  # FIFO of rids on host
        self.swap_inflight: set[int] = set()
        self.admit_seq: dict[int, int] = {}
        self._admit_counter = 0
        # engine-wide so (group, rnd) stays unique across regroupings
        self.round_counter = 0
        self._tid = 0
        self._task_cb: dict[int, Callable[[TransferTask, int], None]] = {}
        self.transition_tasks = 0  # exchange + fetch chunks in flight
        self.deferred_drops: dict[int, list[tuple[int, int, int]]] = {}
        self.fetch_gate: dict[int, int] = {}  # gid -> outstanding param fetches

        self.monitor = MonitorState(cfg.policy.monitor_tick_us,
                                    cfg.policy.restore_threshold)
        self.overload_flag = False
        self.policy_pending = False
        self.drop_events = 0
        self.evictions = 0
        self.fallbacks = 0
        self.horizon_us = (trace[-1].arrival_us if trace else 0) \
            + s_to_us(cfg.report.drain_s)

    # ------------------------------------------------------------------ log

    def log(self, kind: str, **fields) -> None:
        parts = [str(self.now), kind]
        for key, val in fields.items():
            parts.append(f"{key}={val}")
        self.log_lines.append(" ".join(parts))

    # ------------------------------------------------------- memory helpers

    def _shares(self, group: Group, total: int) -> dict[int, int]:
        out = {}
        for iid in group.member_instances:
            lo, hi = group.stage_layer_map[iid]
            out[iid] = memory.stage_share(total, lo, hi, self.model.num_layers)
        return out

    def group_can_alloc(self, grun: GroupRun, rid: int, delta: int) -> bool:
        t0 = self.total_alloc.get(rid, 0)
        for iid in grun.group.member_instances:
            lo, hi = grun.group.stage_layer_map[iid]
            inc = (memory.stage_share(t0 + delta, lo, hi, self.model.num_layers)
                   - memory.stage_share(t0, lo, hi, self.model.num_layers))
            if inc > self.instances[iid].kv.free_tokens:
                return False
        return True

    def group_alloc(self, grun: GroupRun, rid: int, delta: int) -> bool:
        if not self.group_can_alloc(grun, rid, delta):
            return False
        t0 = self.total_alloc.get(rid, 0)
        for iid in grun.group.member_instances:
            lo, hi = grun.group.stage_layer_map[iid]
            inc = (memory.stage_share(t0 + delta, lo, hi, self.model.num_layers)
                   - memory.stage_share(t0, lo, hi, self.model.num_layers))
            if inc:
                assert self.instances[iid].kv.alloc(rid, inc)
        self.total_alloc[rid] = t0 + delta
        return True

    def group_free(self, grun: GroupRun, rid: int) -> None:
        for iid in grun.group.member_instances:
            self.instances[iid].kv.free(rid)
        self.total_alloc.pop(rid, None)

    def group_free_tokens(self, grun: GroupRun) -> int:
        """Largest request the group could admit, in tokens."""
        best = None
        for iid in grun.group.member_instances:
            lo, hi = grun.group.stage_layer_map[iid]
            span = hi - lo
            cap = self.instances[iid].kv.free_tokens * self.model.num_layers // span
            best = cap if best is None else min(best, cap)
        return best or 0

    def free_kv_bytes(self) -> int:
        return sum(inst.kv.free_tokens * self.model.kv_bytes_per_token
                   for inst in self.instances.values() if not inst.failed)

    def base_kv_bytes(self) -> int:
        """Cluster KVCache capacity with zero drops (the reference for
        occupancy and the restore threshold)."""
        return sum(inst.hbm_bytes - self.model.param_bytes
                   for inst in self.instances.values() if not inst.failed)

    def used_kv_bytes(self) -> int:
        return sum(inst.kv.used_tokens * self.model.kv_bytes_per_token
                   for inst in self.instances.values() if not inst.failed)

    # ------------------------------------------------------------- dispatch

    def dispatch(self, request: Request) -> int:
        """Instance whose group has the most free KVCache tokens; ties by
        lowest lead instance id."""
        ranked = sorted(
            ((-self.group_free_tokens(grun), grun.group.member_instances[0], gid)
             for gid, grun in self.groups.items()),
            key=lambda t: (t[0], t[1]))
        _, lead, gid = ranked[0]
        grun = self.groups[gid]
        request.home_instance = lead if len(grun.group.member_instances) == 1 \
            else grun.group.member_instances[0]
        grun.queue.append(request.rid)
        self.log("DISPATCH", req=request.rid, inst=request.home_instance, group=gid)
        return request.home_instance

    # ------------------------------------------------------------ transfers

    def _next_tid(self) -> int:
        self._tid += 1
        return self._tid

    def enqueue_task(self, task: TransferTask,
                     cb: Callable[[TransferTask, int], None]) -> None:
        link = self.network.link(task.src, task.dst)
        link.enqueue(task, self.now)
        self._task_cb[task.tid] = cb
        self._pump_link(link)

    def _pump_link(self, link: LinkModel) -> None:
        res = schedule_link(link, self.now)
        if res is None:
            return
        task, start, done = res
        self.evq.push(done, lambda: self._xfer_done(link, task, start, done))

    def _xfer_done(self, link: LinkModel, task: TransferTask,
                   start: int, done: int) -> None:
        finish_link(link, task)
        self.log("XFER", task=task.kind.value, src=task.src, dst=task.dst,
                 bytes=task.size_bytes, start=start,
                 rid=task.rid if task.rid is not None else -1)
        cb = self._task_cb.pop(task.tid, None)
        if cb is not None:
            cb(task, done)
        self._pump_link(link)

    # --------------------------------------------------------------- rounds

    def _formulator_for(self, grun: GroupRun):
        mode = self.cfg.policy.formulation
        if mode == "auto":
            use_lookahead = (self.policy == "kunserve"
                             and grun.group.size >= 2)
        else:
            use_lookahead = mode == "lookahead"
        if use_lookahead:
            return lambda items: lookahead_formulation(
                items, self.coeffs, self.cfg.policy.min_batch_tokens)
        return lambda items: token_count_chunking(
            items, self.cfg.policy.token_budget)

    def kick(self, gid: int) -> None:
        grun = self.groups.get(gid)
        if grun is None or grun.in_round or grun.pause:
            return
        if self.fetch_gate.get(gid, 0) > 0:
            return
        if grun.ready_at_us > self.now:
            at = grun.ready_at_us
            self.evq.push(at, lambda: self.kick(gid))
            return
        self._form_round(grun)

    def _form_round(self, grun: GroupRun) -> None:
        gid = grun.group.gid
        decode_chunks: list[Chunk] = []
        blocked = 0
        for rid in sorted(grun.active):
            req = self.requests[rid]
            if req.state is not RequestState.DECODING:
                continue
            if self.group_alloc(grun, rid, 1):
                decode_chunks.append(Chunk(rid, 1, req.context_len, decode=True))
            else:
                blocked += 1
        if blocked:
            self.overload_flag = True
            self.log("OOM", group=gid, blocked=blocked)

        if self.policy == "swap":
            self._try_swap_in(grun)

        if not grun.no_admit:
            while grun.queue:
                rid = grun.queue[0]
                req = self.requests[rid]
                need = req.input_len + req.tokens_decoded
                if not self.group_alloc(grun, rid, need):
                    self.overload_flag = True
                    self.log("OOM", group=gid, head=rid, need=need)
                    break
                grun.queue.pop(0)
                grun.active.add(rid)
                grun.admit_order.append(rid)
                self._admit_counter += 1
                self.admit_seq[rid] = self._admit_counter
                req.set_state(RequestState.PREFILLING)
                self.pending_prefill[rid] = need
                self.prefilled_in_round[rid] = 0
                self.log("ADMIT", req=rid, group=gid, tokens=need)

        items = []
        for rid in grun.admit_order:
            if rid not in grun.active:
                continue
            req = self.requests[rid]
            if req.state is RequestState.PREFILLING:
                remaining = self.pending_prefill[rid] - req.tokens_prefilled
                if remaining > 0:
                    items.append(Chunk(rid, remaining, req.tokens_prefilled))
        mbs = self._formulator_for(grun)(items) if items else []
        mbs = attach_decode(mbs, decode_chunks)
        if not mbs:
            return

        grun.in_round = True
        self.round_counter += 1
        grun.round_no = self.round_counter
        members = grun.group.member_instances
        spans = [grun.group.stage_layer_map[i][1] - grun.group.stage_layer_map[i][0]
                 for i in members]
        times = []
        for s in range(len(members)):
            row = []
            for mb in mbs:
                cost = batch_cost(mb.chunks, self.coeffs)
                us = max(1, int(round(cost * 1_000_000 * spans[s]
                                      / self.model.num_layers)))
                row.append(us)
            times.append(row)
        act_ready: list[list[Optional[int]]] = [
            [self.now if s == 0 else None for _ in mbs]
            for s in range(len(members))]
        grun.rstate = RoundState(no=grun.round_no, mbs=mbs, members=members,
                                 times=times, act_ready=act_ready,
                                 next_k=[0] * len(members),
                                 free_at=[self.now] * len(members))
        self.log("ROUND", group=gid, rnd=grun.round_no, n_mb=len(mbs),
                 prefill=sum(1 for it in items),
                 decode=len(decode_chunks))
        self._try_start_stage(gid, 0)

    def _try_start_stage(self, gid: int, s: int) -> None:
        grun = self.groups.get(gid)
        if grun is None or grun.rstate is None:
            return
        rs = grun.rstate
        while rs.next_k[s] < len(rs.mbs):
            k = rs.next_k[s]
            ready = rs.act_ready[s][k]
            if ready is None:
                return
            start = max(rs.free_at[s], ready)
            dur = rs.times[s][k]
            rs.free_at[s] = start + dur
            rs.next_k[s] += 1
            self.evq.push(start + dur,
                          lambda k=k, s=s, start=start, end=start + dur:
                          self._stage_done(gid, rs.no, k, s, start, end))

    def _stage_done(self, gid: int, rnd: int, k: int, s: int,
                    start: int, end: int) -> None:
        grun = self.groups.get(gid)
        if grun is None or grun.rstate is None or grun.rstate.no != rnd:
            return  # group dissolved mid-flight; stale event
        rs = grun.rstate
        self.log("STAGE", group=gid, rnd=rnd, stage=s, mb=k, start=start, end=end)
        last_stage = s == len(rs.members) - 1
        if not last_stage:
            bytes_ = max(1, rs.mbs[k].token_count * self.model.hidden_bytes_per_token)
            task = TransferTask(self._next_tid(), TaskKind.ACTIVATION,
                                rs.members[s], rs.members[s + 1], bytes_)
            self.enqueue_task(task, lambda t, done, k=k, s=s:
                              self._act_arrived(gid, rnd, k, s + 1, done))
        else:
            self._complete_microbatch(grun, rs.mbs[k], end)
            rs.final_done += 1
            if rs.final_done == len(rs.mbs):
                self._end_round(grun, end)
                return
        self._try_start_stage(gid, s)

    def _act_arrived(self, gid: int, rnd: int, k: int, s: int, when: int) -> None:
        grun = self.groups.get(gid)
        if grun is None or grun.rstate is None or grun.rstate.no != rnd:
            return
        grun.rstate.act_ready[s][k] = when
        self._try_start_stage(gid, s)

    def _complete_microbatch(self, grun: GroupRun, mb: Microbatch,
                             when: int) -> None:
        saved_now = self.now
        self.now = when
        for ch in mb.chunks:
            req = self.requests[ch.rid]
            if ch.decode:
                req.record_token(when)
                self.log("TOKEN", req=ch.rid, n=req.tokens_decoded)
                if req.done:
                    self._finish(grun, req)
            else:
                req.tokens_prefilled += ch.token_count
                if req.tokens_prefilled >= self.pending_prefill[ch.rid]:
                    # a re-prefill after eviction rebuilt decoded context too;
                    # fold it back so context_len never double counts
                    req.tokens_prefilled = req.input_len
                    req.set_state(RequestState.DECODING)
                    if req.first_token_us is None:
                        req.record_token(when)
                        self.log("FIRST_TOKEN", req=ch.rid,
                                 ttft_us=when - req.arrival_us)
                        # single-token outputs are done at prefill exit
                        if req.done:
                            self._finish(grun, req)
        self.now = saved_now

    def _finish(self, grun: GroupRun, req: Request) -> None:
        req.set_state(RequestState.FINISHED)
        grun.active.discard(req.rid)
        self.group_free(grun, req.rid)
        self.pending_prefill.pop(req.rid, None)
        self.log("FINISH", req=req.rid)

    def _end_round(self, grun: GroupRun, when: int) -> None:
        gid = grun.group.gid
        grun.in_round = False
        grun.rstate = None
        self.log("ROUND_END", group=gid, rnd=grun.round_no)
        if self.policy_pending:
            self._policy_step()
        if grun.params_restored and gid in self.groups:
            if self._dissolve(grun):
                return
        self.kick(gid)

    # -------------------------------------------------------------- arrival

    def _arrive(self, rec: TraceRecord, rid: int) -> None:
        req = Request(rid=rid, arrival_us=rec.arrival_us,
                      input_len=rec.input_len, output_len=rec.output_len)
        self.requests[rid] = req
        self.log("ARRIVE", req=rid, inp=rec.input_len, out=rec.output_len)
        self.dispatch(req)
        gid = self.group_of[req.home_instance]
        self.kick(gid)

    # -------------------------------------------------------------- monitor

    def _occupancy_bp(self) -> int:
        base = self.base_kv_bytes()
        return (self.used_kv_bytes() * 10_000) // base if base else 0

    def _tick(self) -> None:
        queued = sum(len(g.queue) for g in self.groups.values())
        stalled = sum(1 for r in self.requests.values()
                      if r.state is RequestState.STALLED)
        self.log("OCC", bp=self._occupancy_bp(), queued=queued, stalled=stalled)

        # blocked groups stop forming rounds, so round formation alone
        # cannot be trusted to refresh the pressure signal
        if not self.overload_flag:
            for grun in self.groups.values():
                if self._blocked_decode(grun):
                    self.overload_flag = True
                    break
                if grun.queue:
                    rid = grun.queue[0]
                    req = self.requests[rid]
                    need = req.input_len + req.tokens_decoded
                    if not self.group_can_alloc(grun, rid, need):
                        self.overload_flag = True
                        break

        if self.overload_flag:
            self.monitor.overload_seen_ticks += 1
        else:
            self.monitor.overload_seen_ticks = 0
        self.overload_flag = False
        # debounce: demand must persist one full tick before acting
        if self.monitor.overload_seen_ticks >= 2 and not self.policy_pending:
            self.policy_pending = True
        if self.policy_pending:
            self._policy_step()

        if self.policy == "kunserve":
            self._restore_check()
            for gid in sorted(self.groups):
                grun = self.groups.get(gid)
                if grun is not None and grun.params_restored \
                        and not grun.in_round and grun.group.size > 1:
                    self._dissolve(grun)
            self._consolidation_retry()
            self._autoscale_check()
        if self.policy == "swap":
            for gid in sorted(self.groups):
                self.kick(gid)

        next_at = self.now + self.monitor.tick_us
        if next_at <= self.horizon_us:
            self.evq.push(next_at, self._tick)

    def _autoscale_check(self) -> None:
        dropped = any(g.group.size > 1 for g in self.groups.values())
        occ = self._occupancy_bp() / 10_000
        if dropped and occ >= self.cfg.policy.autoscale_occupancy:
            if self.monitor.above_autoscale_since is None:
                self.monitor.above_autoscale_since = self.now
            window_us = s_to_us(self.cfg.policy.autoscale_window_s)
            if (not self.monitor.autoscale_logged
                    and self.now - self.monitor.above_autoscale_since >= window_us):
                self.log("AUTOSCALE", occ_bp=self._occupancy_bp())
                self.monitor.autoscale_logged = True
        else:
            self.monitor.above_autoscale_since = None

    # ------------------------------------------------------- policy actions

    def _group_pending_tokens(self, grun: GroupRun) -> int:
        tokens = 0
        for rid in grun.queue:
            req = self.requests[rid]
            tokens += req.input_len + req.tokens_decoded
        for rid in sorted(grun.active):
            req = self.requests[rid]
            if req.state is RequestState.DECODING and \
                    not self.group_can_alloc(grun, rid, 1):
                tokens += 1
        return tokens

    def _group_free_bytes(self, grun: GroupRun) -> int:
        return sum(self.instances[iid].kv.free_tokens
                   for iid in grun.group.member_instances) \
            * self.model.kv_bytes_per_token

    def _blocked_decode(self, grun: GroupRun) -> bool:
        return any(
            self.requests[rid].state is RequestState.DECODING
            and not self.group_can_alloc(grun, rid, 1)
            for rid in sorted(grun.active))

    def _policy_step(self) -> None:
        if not self.policy_pending:
            return
        if self.policy == "kunserve":
            self._kunserve_step()
        else:
            self._baseline_step()

    def _kunserve_step(self) -> None:
        if self.transition_tasks > 0:
            return  # previous exchange or restore still in flight
        # demand pools per group: a queue blocked on one full group is real
        # pressure even while another group sits empty
        demand = sum(
            compute_demand(self._group_pending_tokens(grun),
                           self._group_free_bytes(grun),
                           self.model.kv_bytes_per_token)
            for _, grun in sorted(self.groups.items()))
        if demand == 0:
            self.policy_pending = False
            for g in self.groups.values():
                g.pause = False
            return
        groups = [g.group for g in self.groups.values()]
        plan = plan_drop(groups, demand, self.model)
        self.log("OVERLOAD", demand=demand)
        if not plan.merges:
            self.fallbacks += 1
            self.log("PLAN", merges=0, freed=0, fallback=1)
            self.log("AUTOSCALE", occ_bp=self._occupancy_bp())
            self._fallback_evict()
            self.policy_pending = False
            return
        busy = [m for step in plan.merges for m in (step.gid_a, step.gid_b)
                if m in self.groups and self.groups[m].in_round]
        if busy:
            for gid in busy:
                self.groups[gid].pause = True
            return  # retried at round ends
        self._apply_plan(plan)
        self.policy_pending = False

    def _redispatch_queues(self) -> None:
        """Topology changed: queued requests re-route to wherever fits now.
        Nothing has started for them, so moving the entry is free."""
        waiting: list[int] = []
        for gid in sorted(self.groups):
            waiting.extend(self.groups[gid].queue)
            self.groups[gid].queue = []
        waiting.sort(key=lambda rid: (self.requests[rid].arrival_us, rid))
        for rid in waiting:
            self.dispatch(self.requests[rid])
        for gid in sorted(self.groups):
            self.kick(gid)

    def _fallback_evict(self) -> None:
        """Drop planning exhausted: recompute-style relief so the cluster
        keeps moving, surfaced as an autoscale condition above."""
        for gid in sorted(self.groups):
            self._act_recompute(self.groups[gid])
            self.kick(gid)

    def _apply_plan(self, plan: DropPlan) -> None:
        self.log("PLAN", merges=len(plan.merges), freed=plan.freed_bytes,
                 fallback=int(plan.fallback))
        # original residency per request: (old stage map, written tokens)
        orig_map: dict[int, dict[int, tuple[int, int]]] = {}
        for step in plan.merges:
            for gid in (step.gid_a, step.gid_b):
                grun = self.groups.get(gid)
                if grun is None:
                    continue
                for rid in grun.active:
                    if rid not in orig_map:
                        orig_map[rid] = dict(grun.group.stage_layer_map)

        for step in plan.merges:
            self._merge_groups(step)
        self.drop_events += len(plan.merges)
        self._redispatch_queues()

        # one exchange per request, original map -> final map
        chunk_bytes = self._exchange_chunk_bytes()
        for gid in sorted(self.groups):
            grun = self.groups[gid]
            if grun.group.size < 2:
                continue
            cohorts: dict[tuple, list[int]] = {}
            for rid in sorted(grun.active):
                if rid not in orig_map:
                    continue
                key = tuple(sorted(orig_map[rid].items()))
                cohorts.setdefault(key, []).append(rid)
            for key in sorted(cohorts):
                old_map = dict(key)
                rids = cohorts[key]
                tokens = {rid: self.requests[rid].context_len for rid in rids
                          if self.requests[rid].context_len > 0}
                if not tokens:
                    continue
                tasks = plan_exchange(tokens, old_map, grun.group.stage_layer_map,
                                      self.model.num_layers,
                                      self.model.kv_bytes_per_token,
                                      chunk_bytes, tid_start=self._tid + 1)
                self._tid += len(tasks)
                total = sum(t.size_bytes for t in tasks)
                if tasks:
                    self.log("EXCHANGE", group=gid, tasks=len(tasks), bytes=total)
                moved_rids = sorted({t.rid for t in tasks})
                for rid in moved_rids:
                    req = self.requests[rid]
                    self.resume_state[rid] = req.state
                    req.set_state(RequestState.STALLED)
                    self.move_outstanding[rid] = sum(
                        1 for t in tasks if t.rid == rid)
                    self.log("STALL", req=rid)
                for t in tasks:
                    self.transition_tasks += 1
                    self.enqueue_task(t, self._exchange_chunk_done)
            self.kick(gid)

    def _exchange_chunk_bytes(self) -> int:
        est = batch_cost([Chunk(0, self.cfg.policy.token_budget, 0)], self.coeffs)
        sizes = [g.group.size for g in self.groups.values()]
        stages = max(sizes) if sizes else 1
        bw = min(inst.nic_bandwidth for inst in self.instances.values())
        return max(1_000_000, int(est / max(1, stages) * bw))

    def _exchange_chunk_done(self, task: TransferTask, when: int) -> None:
        self.transition_tasks -= 1
        rid = task.rid
        left = self.move_outstanding.get(rid, 0) - 1
        self.move_outstanding[rid] = left
        if left == 0:
            del self.move_outstanding[rid]
            req = self.requests[rid]
            if req.state is RequestState.STALLED:
                req.set_state(self.resume_state.pop(rid, RequestState.DECODING))
                self.log("RESUME", req=rid)
            gid = self.group_of.get(req.home_instance)
            if gid is not None:
                self.kick(gid)

    def _merge_groups(self, step) -> None:
        ga = self.groups.pop(step.gid_a)
        gb = self.groups.pop(step.gid_b)
        new_group = Group(gid=step.gid, member_instances=list(step.members),
                          stage_layer_map=dict(step.stage_layer_map))
        new_group.validate_coverage(self.model.num_layers)

        residents: list[tuple[GroupRun, int]] = \
            [(ga, rid) for rid in sorted(ga.active)] + \
            [(gb, rid) for rid in sorted(gb.active)]

        # fetches first: a layer's last live copy must not drop before its
        # fetch lands elsewhere
        holders = {iid: self.instances[iid].table.held_ranges()
                   for iid in step.members}
        fetches: dict[int, list[tuple[int, int]]] = {}
        for iid in step.members:
            _, need = member_moves(holders[iid], step.stage_layer_map[iid])
            if need:
                fetches[iid] = need
        protected: set[tuple[int, int]] = set()
        fetch_tasks: list[TransferTask] = []
        if fetches:
            tasks = plan_restore_transfers(
                {iid: rng for iid, rngs in fetches.items() for rng in rngs},
                holders, self.model.bytes_per_layer,
                self._exchange_chunk_bytes(), tid_start=self._tid + 1)
            self._tid += len(tasks)
            fetch_tasks = tasks
            for t in tasks:
                if t.src != HOST and t.layers:
                    for layer in range(t.layers[0], t.layers[1]):
                        protected.add((t.src, layer))

        max_delay = 0
        for iid in step.members:
            drops, _ = member_moves(holders[iid], step.stage_layer_map[iid])
            freed_now = 0
            blocks = 0
            for lo, hi in drops:
                for layer in range(lo, hi):
                    if (iid, layer) in protected:
                        self.deferred_drops.setdefault(iid, []).append(
                            (layer, layer + 1, step.gid))
                        continue
                    freed_now += memory.drop_layers(
                        self.instances[iid], (layer, layer + 1), new_group)
                    blocks += 1
            if blocks:
                delay = self.instances[iid].table.map_latency_us * blocks
                max_delay = max(max_delay, delay)
                self.log("DROP", inst=iid, blocks=blocks, freed=freed_now)
                self.log("REMAP", inst=iid, blocks=blocks, delay_us=delay)

        merged = GroupRun(group=new_group)
        merged.ready_at_us = max(ga.ready_at_us, gb.ready_at_us,
                                 self.now + max_delay)
        merged.queue = sorted(ga.queue + gb.queue,
                              key=lambda rid: (self.requests[rid].arrival_us, rid))
        merged.active = ga.active | gb.active
        merged.admit_order = sorted(ga.admit_order + gb.admit_order,
                                    key=lambda rid: self.admit_seq[rid])
        merged.admit_order = [rid for rid in merged.admit_order
                              if rid in merged.active]
        self.groups[step.gid] = merged
        for iid in step.members:
            self.group_of[iid] = step.gid
        self.log("GROUP", gid=step.gid, members=",".join(map(str, step.members)),
                 stages=",".join(f"{iid}:{lo}:{hi}"
                                 for iid, (lo, hi) in
                                 sorted(step.stage_layer_map.items())))

        # move allocations to the new shares; capacity grew, so this fits
        for grun, rid in residents:
            total = self.total_alloc.get(rid, 0)
            for iid in grun.group.member_instances:
                self.instances[iid].kv.free(rid)
            for iid, share in sorted(self._shares(new_group, total).items()):
                if share:
                    assert self.instances[iid].kv.alloc(rid, share)

        for t in fetch_tasks:
            self.fetch_gate[step.gid] = self.fetch_gate.get(step.gid, 0) + 1
            self.transition_tasks += 1
            self.enqueue_task(t, lambda task, when, gid=step.gid:
                              self._fetch_done(gid, task, when))

    def _fetch_done(self, gid: int, task: TransferTask, when: int) -> None:
        self.transition_tasks -= 1
        self.fetch_gate[gid] = self.fetch_gate.get(gid, 1) - 1
        if task.layers and task.src != HOST:
            pend = self.deferred_drops.get(task.src, [])
            still = []
            for lo, hi, owner_gid in pend:
                if task.layers[0] <= lo and hi <= task.layers[1]:
                    grun = self.groups.get(owner_gid)
                    freed = memory.drop_layers(
                        self.instances[task.src], (lo, hi),
                        grun.group if grun else None)
                    self.log("DROP", inst=task.src, blocks=hi - lo, freed=freed)
                else:
                    still.append((lo, hi, owner_gid))
            if still:
                self.deferred_drops[task.src] = still
            else:
                self.deferred_drops.pop(task.src, None)
        if self.fetch_gate.get(gid, 0) == 0:
            self.fetch_gate.pop(gid, None)
            self.kick(gid)

    # ------------------------------------------------------------- baselines

    def _baseline_step(self) -> None:
        for gid in sorted(self.groups):
            grun = self.groups[gid]
            if not self._blocked_decode(grun):
                continue
            if grun.in_round:
                grun.pause = True
                continue
            if self.policy == "recompute":
                self._act_recompute(grun)
            elif self.policy == "swap":
                self._act_swap(grun)
            elif self.policy == "migrate":
                self._act_migrate(grun)
            grun.pause = False
            self.kick(gid)
        if not any(g.pause for g in self.groups.values()):
            self.policy_pending = False

    def _victims_newest_first(self, grun: GroupRun) -> list[int]:
        return sorted(
            (rid for rid in grun.active
             if self.requests[rid].state in (RequestState.DECODING,
                                             RequestState.PREFILLING)),
            key=lambda rid: -self.admit_seq[rid])

    def _evict_one(self, grun: GroupRun, rid: int) -> None:
        req = self.requests[rid]
        self.group_free(grun, rid)
        grun.active.discard(rid)
        grun.admit_order.remove(rid)
        req.set_state(RequestState.DROPPED)
        req.set_state(RequestState.QUEUED)
        req.tokens_prefilled = 0
        self.pending_prefill.pop(rid, None)
        grun.queue.insert(0, rid)
        self.evictions += 1
        self.log("EVICT", req=rid, group=grun.group.gid)

    def _act_recompute(self, grun: GroupRun) -> None:
        # preempt newest first until every remaining decoder can take a block
        while self._blocked_decode(grun):
            victims = self._victims_newest_first(grun)
            if not victims:
                return
            self._evict_one(grun, victims[0])

    def _act_swap(self, grun: GroupRun) -> None:
        iid = grun.group.member_instances[0]
        if self._blocked_decode(grun):
            victims = [rid for rid in self._victims_newest_first(grun)
                       if rid not in self.swap_inflight]
            if not victims:
                return
            rid = victims[0]
            req = self.requests[rid]
            self.resume_state[rid] = req.state
            req.set_state(RequestState.STALLED)
            self.swap_inflight.add(rid)
            bytes_ = self.total_alloc.get(rid, 0) * self.model.kv_bytes_per_token
            task = TransferTask(self._next_tid(), TaskKind.KVCACHE_CHUNK,
                                iid, HOST, bytes_, rid=rid)
            self.evictions += 1
            self.log("SWAP_OUT", req=rid, bytes=bytes_)
            self.enqueue_task(task, lambda t, when, g=grun.group.gid:
                              self._swap_out_done(g, t, when))
            return  # one victim per step; memory frees when the copy lands

    def _swap_out_done(self, gid: int, task: TransferTask, when: int) -> None:
        rid = task.rid
        grun = self.groups.get(gid)
        if grun is None:
            return
        self.group_free(grun, rid)
        grun.active.discard(rid)
        if rid in grun.admit_order:
            grun.admit_order.remove(rid)
        self.swap_inflight.discard(rid)
        self.swapped_out.append(rid)
        self.kick(gid)

    def _try_swap_in(self, grun: GroupRun) -> None:
        """Ongoing-first: swapped requests come back before new admissions."""
        iid = grun.group.member_instances[0]
        while self.swapped_out:
            rid = self.swapped_out[0]
            req = self.requests[rid]
            need = req.context_len
            if rid in self.swap_inflight or not self.group_can_alloc(
                    grun, rid, need + self.cfg.policy.swap_headroom_tokens):
                return
            self.swapped_out.pop(0)
            self.swap_inflight.add(rid)
            assert self.group_alloc(grun, rid, need)
            bytes_ = need * self.model.kv_bytes_per_token
            task = TransferTask(self._next_tid(), TaskKind.KVCACHE_CHUNK,
                                HOST, iid, bytes_, rid=rid)
            self.log("SWAP_IN", req=rid, bytes=bytes_)
            self.enqueue_task(task, lambda t, when, g=grun.group.gid:
                              self._swap_in_done(g, t, when))

    def _swap_in_done(self, gid: int, task: TransferTask, when: int) -> None:
        rid = task.rid
        grun = self.groups.get(gid)
        if grun is None:
            return
        req = self.requests[rid]
        self.swap_inflight.discard(rid)
        grun.active.add(rid)
        grun.admit_order.append(rid)
        self._admit_counter += 1
        self.admit_seq[rid] = self._admit_counter
        req.set_state(self.resume_state.pop(rid, RequestState.DECODING))
        self.log("RESUME", req=rid)
        self.kick(gid)

    def _act_migrate(self, grun: GroupRun) -> None:
        while self._blocked_decode(grun):
            victims = [rid for rid in self._victims_newest_first(grun)
                       if rid not in self.move_outstanding]
            if not victims:
                return
            rid = victims[0]
            req = self.requests[rid]
            need = self.total_alloc.get(rid, 0)
            dests = sorted(
                ((-self.group_free_tokens(g), g.group.gid)
                 for g in self.groups.values() if g is not grun),
                key=lambda t: t)
            dest = None
            for _, gid in dests:
                cand = self.groups[gid]
                if self.group_free_tokens(cand) >= need:
                    dest = cand
                    break
            if dest is None:
                # nowhere to move it; shed load locally so decode survives
                self.log("MIGRATE_NOOP", group=grun.group.gid)
                self._evict_one(grun, rid)
                continue
            src_iid = grun.group.member_instances[0]
            dst_iid = dest.group.member_instances[0]
            # commit at destination up front, release source when it lands
            saved = self.total_alloc.pop(rid)
            assert self.group_alloc(dest, rid, saved)
            for_src = saved
            self.resume_state[rid] = req.state
            req.set_state(RequestState.STALLED)
            grun.active.discard(rid)
            grun.admit_order.remove(rid)
            bytes_ = req.context_len * self.model.kv_bytes_per_token
            task = TransferTask(self._next_tid(), TaskKind.KVCACHE_CHUNK,
                                src_iid, dst_iid, max(1, bytes_), rid=rid)
            self.log("MIGRATE", req=rid, src=src_iid, dst=dst_iid, bytes=bytes_)
            self.move_outstanding[rid] = 1
            self.enqueue_task(
                task,
                lambda t, when, g=grun.group.gid, d=dest.group.gid,
                tok=for_src: self._migrate_done(g, d, t, tok, when))
            # source bytes free only when the copy lands, so the blocked
            # check would double-count them: one move per step, then the
            # next tick re-evaluates against landed state
            return

    def _migrate_done(self, src_gid: int, dst_gid: int, task: TransferTask,
                      tokens: int, when: int) -> None:
        rid = task.rid
        src = self.groups.get(src_gid)
        dst = self.groups.get(dst_gid)
        if src is not None:
            self.instances[src.group.member_instances[0]].kv.free(rid)
        self.move_outstanding.pop(rid, None)
        req = self.requests[rid]
        if dst is not None:
            dst.active.add(rid)
            dst.admit_order.append(rid)
            self._admit_counter += 1
            self.admit_seq[rid] = self._admit_counter
            req.home_instance = dst.group.member_instances[0]
        req.set_state(self.resume_state.pop(rid, RequestState.DECODING))
        self.log("RESUME", req=rid)
        if src is not None:
            self.kick(src_gid)
        if dst is not None:
            self.kick(dst_gid)

    # --------------------------------------------------------------- restore

    def _restore_check(self) -> None:
        if self.transition_tasks > 0:
            return
        merged = [g for g in self.groups.values() if g.group.size > 1]
        if not merged:
            return
        occ = self.used_kv_bytes() / self.base_kv_bytes()
        if occ >= self.monitor.restore_threshold:
            return
        chunk = self._exchange_chunk_bytes()
        for grun in merged:
            if grun.restoring:
                continue
            if self._plan_homes(grun) is None:
                continue
            self._start_restore(grun, chunk)

    def _plan_homes(self, grun: GroupRun) -> Optional[dict[int, int]]:
        """Pack residents onto members for the dissolve, leaving room for
        the decode tokens each still has coming.  First fit decreasing;
        None means the group cannot dissolve yet."""
        room = {}
        for iid in grun.group.member_instances:
            room[iid] = (self.instances[iid].hbm_bytes
                         - self.model.param_bytes) \
                // self.model.kv_bytes_per_token
        needs = []
        for rid in sorted(grun.active):
            req = self.requests[rid]
            need = self.total_alloc.get(rid, 0) \
                + (req.output_len - req.tokens_decoded)
            needs.append((need, rid))
        needs.sort(key=lambda t: (-t[0], t[1]))
        homes: dict[int, int] = {}
        for need, rid in needs:
            iid = max(sorted(room), key=lambda i: (room[i], -i))
            if room[iid] < need:
                return None
            room[iid] -= need
            homes[rid] = iid
        return homes

    def _start_restore(self, grun: GroupRun, chunk_bytes: int) -> None:
        gid = grun.group.gid
        missing: dict[int, list[tuple[int, int]]] = {}
        holders: dict[int, list[tuple[int, int]]] = {}
        for iid in grun.group.member_instances:
            table = self.instances[iid].table
            holders[iid] = table.held_ranges()
            _, need = member_moves(holders[iid], (0, self.model.num_layers))
            if need:
                missing[iid] = need
        if not missing:
            grun.restoring = True
            grun.params_restored = True
            return
        # reserve space on every member first; any refusal delays the whole
        # group to the next tick (natural drain unblocks it)
        tickets = []
        try:
            for iid in sorted(missing):
                for rng in missing[iid]:
                    tickets.append((iid, rng,
                                    memory.restore_layers(self.instances[iid],
                                                          rng, HOST,
                                                          tid=self._next_tid())))
        except ValueError:
            for iid, rng, _ in tickets:
                bytes_ = (rng[1] - rng[0]) * self.model.bytes_per_layer
                self.instances[iid].kv.release_reservation(bytes_)
                for layer in range(rng[0], rng[1]):
                    pass  # ownership never flipped; nothing else to undo
            return
        grun.restoring = True
        self.log("RESTORE", group=gid,
                 members=",".join(map(str, sorted(missing))))
        flat = {iid: rng for iid, rngs in missing.items() for rng in rngs}
        tasks = plan_restore_transfers(flat, holders, self.model.bytes_per_layer,
                                       chunk_bytes, tid_start=self._tid + 1)
        self._tid += len(tasks)
        outstanding: dict[int, int] = {}
        for t in tasks:
            outstanding[t.dst] = outstanding.get(t.dst, 0) + 1
        self._restore_left = getattr(self, "_restore_left", {})
        self._restore_left[gid] = outstanding
        self._restore_ranges = getattr(self, "_restore_ranges", {})
        self._restore_ranges[gid] = missing
        for t in tasks:
            self.transition_tasks += 1
            self.enqueue_task(t, lambda task, when, g=gid:
                              self._restore_chunk_done(g, task, when))

    def _restore_chunk_done(self, gid: int, task: TransferTask, when: int) -> None:
        self.transition_tasks -= 1
        left = self._restore_left[gid]
        left[task.dst] -= 1
        if left[task.dst] == 0:
            for rng in self._restore_ranges[gid][task.dst]:
                memory.complete_restore(self.instances[task.dst], rng)
            self.log("RESTORE_DONE", inst=task.dst)
        grun = self.groups.get(gid)
        if grun is None:
            return
        if all(v == 0 for v in left.values()):
            grun.params_restored = True
            if not grun.in_round:
                self._dissolve(grun)

    def _dissolve(self, grun: GroupRun) -> bool:
        """Members return to singleton service; distributed residents stall
        until their cache consolidates back on their home instance."""
        gid = grun.group.gid
        old_map = dict(grun.group.stage_layer_map)
        members = list(grun.group.member_instances)
        residents = sorted(grun.active)
        queued = list(grun.queue)
        homes = self._plan_homes(grun)
        if homes is None:
            return False  # load grew back since the restore started
        del self.groups[gid]

        for iid in members:
            g = Group(gid=iid, member_instances=[iid],
                      stage_layer_map={iid: (0, self.model.num_layers)})
            self.groups[iid] = GroupRun(group=g)
            self.group_of[iid] = iid
        self.log("DISSOLVE", gid=gid, members=",".join(map(str, members)))

        for rid in residents:
            req = self.requests[rid]
            home = homes[rid]
            req.home_instance = home
            self.groups[home].active.add(rid)
            self.groups[home].admit_order.append(rid)
            peers = {}
            written = req.context_len
            for iid in members:
                if iid == home:
                    continue
                if self.instances[iid].kv.allocated_tokens.get(rid, 0) > 0:
                    lo, hi = old_map[iid]
                    peers[iid] = share_bytes(written, lo, hi,
                                             self.model.num_layers,
                                             self.model.kv_bytes_per_token)
            if not peers:
                continue
            if req.state is not RequestState.STALLED:
                self.resume_state[rid] = req.state
                req.set_state(RequestState.STALLED)
                self.log("STALL", req=rid)
            self.consolidating[rid] = {"home": home, "peers": peers,
                                       "started": False}
        self._consolidation_retry()

        for rid in queued:
            self.dispatch(self.requests[rid])
        for iid in members:
            self.kick(iid)
        return True

    def _consolidation_retry(self) -> None:
        chunk = self._exchange_chunk_bytes()
        for rid in sorted(self.consolidating):
            st = self.consolidating[rid]
            if st["started"]:
                continue
            home = st["home"]
            inst = self.instances[home]
            total = self.total_alloc.get(rid, 0)
            have = inst.kv.allocated_tokens.get(rid, 0)
            extra = total - have
            if extra > inst.kv.free_tokens:
                continue
            if extra:
                assert inst.kv.alloc(rid, extra)
            st["started"] = True
            st["left"] = 0
            for iid in sorted(st["peers"]):
                bytes_ = st["peers"][iid]
                left = bytes_
                while left > 0:
                    take = min(chunk, left)
                    left -= take
                    task = TransferTask(self._next_tid(), TaskKind.KVCACHE_CHUNK,
                                        iid, home, take, rid=rid)
                    st["left"] += 1
                    self.transition_tasks += 1
                    self.enqueue_task(task, lambda t, when, r=rid:
                                      self._consolidate_chunk_done(r, t, when))

    def _consolidate_chunk_done(self, rid: int, task: TransferTask,
                                when: int) -> None:
        self.transition_tasks -= 1
        st = self.consolidating[rid]
        st["left"] -= 1
        if st["left"] > 0:
            return
        for iid in sorted(st["peers"]):
            self.instances[iid].kv.free(rid)
        del self.consolidating[rid]
        req = self.requests[rid]
        req.set_state(self.resume_state.pop(rid, RequestState.DECODING))
        self.log("RESUME", req=rid)
        self.kick(self.group_of[st["home"]])

    # ------------------------------------------------------------------ run

    def run(self) -> SimResult:
        self.log("CONFIG", policy=self.policy, seed=self.seed,
                 instances=len(self.instances),
                 layers=self.model.num_layers)
        for rid, rec in enumerate(self.trace):
            self.evq.push(rec.arrival_us, lambda rec=rec, rid=rid:
                          self._arrive(rec, rid))
        self.evq.push(self.monitor.tick_us, self._tick)

        while len(self.evq):
            if self.evq.peek_time() > self.horizon_us:
                break
            time_us, _, fn = self.evq.pop()
            self.now = max(self.now, time_us)
            fn()

        self.log("END", finished=sum(1 for r in self.requests.values()
                                     if r.state is RequestState.FINISHED),
                 queued=sum(1 for r in self.requests.values()
                            if r.state is RequestState.QUEUED))
        return SimResult(requests=self.requests, log_lines=self.log_lines,
                         end_us=self.now, drop_events=self.drop_events,
                         evictions=self.evictions, fallbacks=self.fallbacks)


def run_sim(cfg: SimConfig, trace: list[TraceRecord],
            policy: Optional[str] = None, seed: int = 0) -> SimResult:
    return Engine(cfg, trace, policy=policy, seed=seed).run()
