"""Per-instance HBM bookkeeping behind a segment table.

The unified-memory trick: parameter layers and KVCache share one physical
pool, and dropping a layer just flips its block's owner so the KVCache
virtual extent grows without copying anything.  Blocks are sized at one
model layer (the smallest drop unit); the residual KVCache region at
build time is one base block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import Group, Instance, ModelSpec
from .exchange import TaskKind, TransferTask

PARAM = "param"
KVCACHE = "kv"
FREE = "free"


@dataclass
class Block:
    size: int
    owner: str
    layer: Optional[int] = None  # stable layer identity even while owner=="kv"


@dataclass
class SegmentTable:
    model: ModelSpec
    blocks: list[Block]
    map_latency_us: int = 5000  # per remap call (one call per block)

    @property
    def total_bytes(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def kvcache_virtual_extent(self) -> int:
        return sum(b.size for b in self.blocks if b.owner == KVCACHE)

    def layers_held(self) -> list[int]:
        return sorted(b.layer for b in self.blocks
                      if b.owner == PARAM and b.layer is not None)

    def holds_range(self, lo: int, hi: int) -> bool:
        held = set(self.layers_held())
        return all(l in held for l in range(lo, hi))

    def held_ranges(self) -> list[tuple[int, int]]:
        """Held layers as sorted maximal contiguous ranges."""
        held = self.layers_held()
        ranges: list[tuple[int, int]] = []
        for l in held:
            if ranges and ranges[-1][1] == l:
                ranges[-1] = (ranges[-1][0], l + 1)
            else:
                ranges.append((l, l + 1))
        return ranges

    def _layer_block(self, layer: int) -> Block:
        for b in self.blocks:
            if b.layer == layer:
                return b
        raise ValueError(f"layer {layer} absent from segment table")


class KVAllocator:
    """Token-granular KVCache accounting over the segment table extent."""

    def __init__(self, table: SegmentTable):
        self.table = table
        self.allocated_tokens: dict[int, int] = {}
        self.reserved_bytes = 0  # held back for an in-flight restore

    @property
    def kv_bytes_per_token(self) -> int:
        return self.table.model.kv_bytes_per_token

    @property
    def capacity_tokens(self) -> int:
        usable = self.table.kvcache_virtual_extent - self.reserved_bytes
        return max(0, usable // self.kv_bytes_per_token)

    @property
    def used_tokens(self) -> int:
        return sum(self.allocated_tokens.values())

    @property
    def free_tokens(self) -> int:
        return self.capacity_tokens - self.used_tokens

    def alloc(self, rid: int, n_tokens: int) -> bool:
        """Grow rid's allocation by n_tokens.  False signals out-of-memory."""
        if n_tokens < 0:
            raise ValueError("n_tokens must be >= 0")
        if n_tokens > self.free_tokens:
            return False
        self.allocated_tokens[rid] = self.allocated_tokens.get(rid, 0) + n_tokens
        return True

    def free(self, rid: int) -> int:
        return self.allocated_tokens.pop(rid, 0)

    def shrink(self, rid: int, n_tokens: int) -> None:
        cur = self.allocated_tokens.get(rid, 0)
        if n_tokens > cur:
            raise ValueError("shrinking below zero")
        if n_tokens == cur:
            self.allocated_tokens.pop(rid, None)
        else:
            self.allocated_tokens[rid] = cur - n_tokens

    def reserve(self, n_bytes: int) -> bool:
        """Fence off bytes ahead of an extent shrink.  Fails rather than
        cutting into live allocations."""
        after = (self.table.kvcache_virtual_extent - self.reserved_bytes
                 - n_bytes) // self.kv_bytes_per_token
        if after < self.used_tokens:
            return False
        self.reserved_bytes += n_bytes
        return True

    def release_reservation(self, n_bytes: int) -> None:
        if n_bytes > self.reserved_bytes:
            raise ValueError("releasing more than reserved")
        self.reserved_bytes -= n_bytes


def build_instance(iid: int, model: ModelSpec, hbm_bytes: int,
                   nic_bandwidth: int, map_latency_us: int = 5000) -> Instance:
    """Wire an instance with a full parameter copy and the residual KV block."""
    if hbm_bytes <= model.param_bytes:
        raise ValueError(
            f"instance {iid}: HBM {hbm_bytes} cannot hold one parameter copy")
    blocks = [Block(model.bytes_per_layer, PARAM, layer=l)
              for l in range(model.num_layers)]
    blocks.append(Block(hbm_bytes - model.param_bytes, KVCACHE))
    inst = Instance(iid=iid, hbm_bytes=hbm_bytes, nic_bandwidth=nic_bandwidth)
    inst.table = SegmentTable(model, blocks, map_latency_us)
    inst.kv = KVAllocator(inst.table)
    return inst


def drop_layers(instance: Instance, layer_range: tuple[int, int],
                group: Optional[Group] = None) -> int:
    """Remap layers [lo, hi) from parameter to KVCache ownership.

    Returns bytes freed.  The caller charges map_latency_us per block
    remapped to the simulation clock.  With a group given, dropping a
    layer the stage map still assigns to this instance is refused.
    """
    table: SegmentTable = instance.table
    lo, hi = layer_range
    if hi <= lo:
        raise ValueError("empty layer range")
    if group is not None:
        mlo, mhi = group.stage_layer_map[instance.iid]
        if lo < mhi and hi > mlo:
            raise ValueError(
                f"coverage violation: instance {instance.iid} is assigned "
                f"layers [{mlo},{mhi}) and cannot drop [{lo},{hi})")
    freed = 0
    for layer in range(lo, hi):
        block = table._layer_block(layer)
        if block.owner != PARAM:
            raise ValueError(f"layer {layer} absent on instance {instance.iid}")
        block.owner = KVCACHE
        freed += block.size
    return freed


def restore_layers(instance: Instance, layer_range: tuple[int, int],
                   source: int, tid: int = 0) -> TransferTask:
    """Start pulling dropped layers back from `source`.

    Reserves the bytes immediately so new allocations cannot claim them,
    and emits the parameter transfer; ownership flips on completion via
    complete_restore.  Raises "restore blocked" while live KVCache still
    needs the space.
    """
    table: SegmentTable = instance.table
    lo, hi = layer_range
    need = 0
    for layer in range(lo, hi):
        block = table._layer_block(layer)
        if block.owner != KVCACHE:
            raise ValueError(f"layer {layer} already held on instance {instance.iid}")
        need += block.size
    if not instance.kv.reserve(need):
        raise ValueError(
            f"restore blocked on instance {instance.iid}: "
            f"{need} bytes not reclaimable yet")
    return TransferTask(tid, TaskKind.PARAM_SHARD, source, instance.iid,
                        need, layers=(lo, hi))


def complete_restore(instance: Instance, layer_range: tuple[int, int]) -> None:
    """Land a finished restore: blocks revert to parameter ownership."""
    table: SegmentTable = instance.table
    lo, hi = layer_range
    need = 0
    for layer in range(lo, hi):
        block = table._layer_block(layer)
        if block.owner != KVCACHE:
            raise ValueError(f"layer {layer} not awaiting restore")
        need += block.size
    instance.kv.release_reservation(need)
    for layer in range(lo, hi):
        table._layer_block(layer).owner = PARAM


def stage_share(n_tokens: int, lo: int, hi: int, num_layers: int) -> int:
    """Token share a pipeline member carries for an n_tokens request.

    Ceil of the proportional slice: conservative, and exact for even
    splits of even token counts.
    """
    span = hi - lo
    return -((-n_tokens * span) // num_layers)
