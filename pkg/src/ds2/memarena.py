"""Buddy allocator over one preallocated buffer, with a counted fallback pool.

Blocks of order ``k`` span ``min_block << k`` bytes and start at offsets that
are multiples of their size.  Freeing a block merges it with its buddy
(``offset ^ size``) for as long as the buddy is free.  Requests the arena
cannot satisfy are served from a separate pool of individually allocated
buffers, each tagged as fallback and counted; these are the only system
allocations made after the arena is constructed.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass

import numpy as np

DEFAULT_CAPACITY = 64 * 1024 * 1024
DEFAULT_MIN_BLOCK = 256


class ArenaError(RuntimeError):
    pass


class DoubleFreeError(ArenaError):
    pass


class ForeignHandleError(ArenaError):
    pass


class OutOfMemoryError(ArenaError, MemoryError):
    pass


@dataclass(frozen=True)
class Block:
    id: int
    offset: int
    size: int  # rounded capacity in bytes
    requested: int
    order: int
    fallback: bool = False
    owner: int = 0


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


class Arena:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, min_block: int = DEFAULT_MIN_BLOCK,
                 fallback_capacity: int | None = None):
        if not _is_pow2(capacity) or not _is_pow2(min_block) or min_block > capacity:
            raise ValueError("capacity and min_block must be powers of two with min_block <= capacity")
        self.capacity = capacity
        self.min_block = min_block
        self.max_order = (capacity // min_block).bit_length() - 1
        self.fallback_capacity = capacity if fallback_capacity is None else fallback_capacity
        self.buffer = np.zeros(capacity, dtype=np.uint8)
        self._heaps: list[list[int]] = [[] for _ in range(self.max_order + 1)]
        self._free: list[set[int]] = [set() for _ in range(self.max_order + 1)]
        self._push(0, self.max_order)
        self._live: dict[int, Block] = {}
        self._freed: set[int] = set()
        self._fallback: dict[int, np.ndarray] = {}
        self._ids = itertools.count(1)
        self._token = id(self)
        self.allocs = 0
        self.frees = 0
        self.fallback_allocs = 0
        self.fallback_bytes_live = 0
        self.system_calls_after_warmup = 0

    # free-list helpers: set for membership, heap for lowest-offset choice
    def _push(self, off, k):
        self._free[k].add(off)
        heapq.heappush(self._heaps[k], off)

    def _pop_lowest(self, k):
        heap, live = self._heaps[k], self._free[k]
        while heap:
            off = heapq.heappop(heap)
            if off in live:
                live.remove(off)
                return off
        return None

    def order_for(self, size: int) -> int:
        blocks = -(-max(size, self.min_block) // self.min_block)
        return (blocks - 1).bit_length()

    def alloc(self, size: int) -> Block:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        k = self.order_for(size)
        if k <= self.max_order:
            j = k
            while j <= self.max_order and not self._free[j]:
                j += 1
            if j <= self.max_order:
                off = self._pop_lowest(j)
                while j > k:
                    j -= 1
                    self._push(off + (self.min_block << j), j)
                blk = Block(next(self._ids), off, self.min_block << k, size, k, False, self._token)
                self._live[blk.id] = blk
                self.allocs += 1
                return blk
        return self._alloc_fallback(size, k)

    def _alloc_fallback(self, size, k):
        rounded = self.min_block << k
        if self.fallback_bytes_live + rounded > self.fallback_capacity:
            raise OutOfMemoryError(
                f"request of {size} bytes exceeds arena and fallback pool "
                f"({self.fallback_bytes_live} of {self.fallback_capacity} fallback bytes in use)"
            )
        blk = Block(next(self._ids), -1, rounded, size, k, True, self._token)
        self._fallback[blk.id] = np.zeros(rounded, dtype=np.uint8)
        self.system_calls_after_warmup += 1
        self.fallback_allocs += 1
        self.fallback_bytes_live += rounded
        self._live[blk.id] = blk
        self.allocs += 1
        return blk

    def free(self, blk: Block):
        if not isinstance(blk, Block) or blk.owner != self._token:
            raise ForeignHandleError("handle was not issued by this arena")
        live = self._live.get(blk.id)
        if live is None:
            if blk.id in self._freed:
                raise DoubleFreeError(f"block {blk.id} already freed")
            raise ForeignHandleError(f"unknown block {blk.id}")
        if live != blk:
            raise ForeignHandleError("handle does not match the live block")
        del self._live[blk.id]
        self._freed.add(blk.id)
        self.frees += 1
        if blk.fallback:
            del self._fallback[blk.id]
            self.fallback_bytes_live -= blk.size
            return
        off, k = blk.offset, blk.order
        while k < self.max_order:
            buddy = off ^ (self.min_block << k)
            if buddy not in self._free[k]:
                break
            self._free[k].remove(buddy)
            off = min(off, buddy)
            k += 1
        self._push(off, k)

    def view(self, blk: Block) -> np.ndarray:
        """Writable byte view of a live block (no copy, no allocation of storage)."""
        if blk.id not in self._live:
            raise ForeignHandleError("block is not live")
        if blk.fallback:
            return self._fallback[blk.id][: blk.requested]
        return self.buffer[blk.offset : blk.offset + blk.requested]

    # ------------------------------------------------------------------
    def free_blocks(self) -> list[tuple[int, int]]:
        """(offset, size) of every free block, sorted."""
        return sorted((off, self.min_block << k) for k in range(self.max_order + 1) for off in self._free[k])

    def live_blocks(self) -> list[Block]:
        return list(self._live.values())

    def stats(self) -> dict:
        arena_live = [b for b in self._live.values() if not b.fallback]
        live_bytes = sum(b.size for b in arena_live)
        requested = sum(b.requested for b in arena_live)
        free = self.free_blocks()
        return {
            "capacity": self.capacity,
            "min_block": self.min_block,
            "allocs": self.allocs,
            "frees": self.frees,
            "live_blocks": len(self._live),
            "live_bytes": live_bytes,
            "requested_bytes": requested,
            "internal_fragmentation": live_bytes - requested,
            "free_bytes": sum(s for _, s in free),
            "free_blocks": len(free),
            "largest_free_block": max((s for _, s in free), default=0),
            "fallback_allocs": self.fallback_allocs,
            "fallback_bytes_live": self.fallback_bytes_live,
            "system_calls_after_warmup": self.system_calls_after_warmup,
        }

    def dump_stats(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.stats().items())

    def check_invariants(self):
        """Raise AssertionError if any structural invariant is violated."""
        spans = []
        for b in self._live.values():
            if b.fallback:
                continue
            assert b.offset % b.size == 0, f"block {b.id} misaligned"
            spans.append((b.offset, b.offset + b.size, "live"))
        for k in range(self.max_order + 1):
            size = self.min_block << k
            for off in self._free[k]:
                assert off % size == 0, "free block misaligned"
                if k < self.max_order:
                    assert (off ^ size) not in self._free[k], "uncoalesced free buddies"
                spans.append((off, off + size, "free"))
        spans.sort()
        pos = 0
        for lo, hi, _ in spans:
            assert lo == pos, f"gap or overlap at {pos}"
            pos = hi
        assert pos == self.capacity, "blocks do not tile the arena"
        st = self.stats()
        assert st["free_bytes"] + st["requested_bytes"] + st["internal_fragmentation"] == self.capacity


def bench_alloc(n_ops: int = 2000, sizes=(1 << 16, 1 << 18, 1 << 20), capacity: int = 1 << 26, seed: int = 0):
    """Time many short-lived large buffers: arena vs fresh numpy allocations."""
    rng = np.random.default_rng(seed)
    req = rng.choice(np.array(sizes), size=n_ops)
    arena = Arena(capacity)
    t0 = time.perf_counter()
    live = []
    for s in req:
        blk = arena.alloc(int(s))
        arena.view(blk)[:8] = 1
        live.append(blk)
        if len(live) > 8:
            arena.free(live.pop(0))
    for b in live:
        arena.free(b)
    t_arena = time.perf_counter() - t0
    t0 = time.perf_counter()
    keep = []
    for s in req:
        buf = np.empty(int(s), dtype=np.uint8)
        buf[:8] = 1
        keep.append(buf)
        if len(keep) > 8:
            keep.pop(0)
    t_sys = time.perf_counter() - t0
    return {
        "ops": n_ops,
        "arena_seconds": t_arena,
        "system_seconds": t_sys,
        "system_calls_after_warmup": arena.system_calls_after_warmup,
        "fallback_allocs": arena.fallback_allocs,
    }
