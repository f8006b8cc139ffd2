"""Per-worker pooled allocator and growable arrays built on it.

A :class:`Pool` owns one aligned byte region, reserved and pre-touched at
construction, and hands out aligned sub-blocks with a first-fit policy.
Freed blocks are merged with free neighbours on both sides.  Requests the
region cannot satisfy fall back to a fresh aligned system allocation.

The bookkeeping lives in small numpy arrays so the same operations are
callable from jitted loops (``pool_alloc_nb``/``pool_free_nb``/
``index_push_nb``) with the GIL released; the Python classes are thin
wrappers over them.  A pool is single-owner: never share one between
threads.
"""

from __future__ import annotations

import ctypes
import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numba as nb
import numpy as np
from numba import types
from numba.extending import intrinsic

from .errors import ConfigError, PoolError

ORIGIN_POOL = 0
ORIGIN_FALLBACK = 1

# meta slots
M_NFREE = 0
M_ALIGN = 1
M_SIZE = 2
M_ALLOCS = 3
M_FREES = 4
M_FALLBACKS = 5
M_IN_USE = 6
M_PEAK = 7
M_BAD_FREES = 8
M_FB_LIVE = 9
M_FB_BYTES = 10
M_GROWS = 11
M_FB_HWM = 12
N_META = 13

# free() status codes
FREE_OK = 0
FREE_DOUBLE = 1
FREE_FOREIGN = 2

# index-array header columns
H_ORIGIN = 0
H_OFFSET = 1
H_NBYTES = 2
H_COUNT = 3
H_CAPACITY = 4
N_HDR = 5

DEFAULT_POOL_MB = 64
DEFAULT_ALIGNMENT = 64
INITIAL_INDEX_CAPACITY = 16
FALLBACK_SLOTS = 65536

_pool_ids = itertools.count(1)

_aligned_alloc = types.ExternalFunction("aligned_alloc", types.voidptr(types.uintp, types.uintp))
_sys_free = types.ExternalFunction("free", types.void(types.voidptr))
_memcpy = types.ExternalFunction("memcpy", types.voidptr(types.voidptr, types.voidptr, types.uintp))
_libc_free = ctypes.CDLL(None).free
_libc_free.argtypes = [ctypes.c_void_p]
_libc_free.restype = None


@intrinsic
def _addr_of(typingctx, ptr):
    def codegen(context, builder, sig, args):
        return builder.ptrtoint(args[0], context.get_value_type(types.int64))

    return types.int64(ptr), codegen


@intrinsic
def _byte_ptr(typingctx, addr):
    sig = types.CPointer(types.uint8)(addr)

    def codegen(context, builder, sig, args):
        return builder.inttoptr(args[0], context.get_value_type(sig.return_type))

    return sig, codegen


@intrinsic
def _void_ptr(typingctx, addr):
    def codegen(context, builder, sig, args):
        return builder.inttoptr(args[0], context.get_value_type(types.voidptr))

    return types.voidptr(addr), codegen


@nb.njit(nogil=True, cache=True)
def _round_up(size, align):
    return (size + align - 1) // align * align


@nb.njit(nogil=True, cache=True)
def system_bytes_nb(addr, nbytes):
    """uint8 array over a system-allocated block (no ownership)."""
    return nb.carray(_byte_ptr(addr), nbytes)


@nb.njit(nogil=True, cache=True)
def pool_alloc_nb(free_list, meta, fb_table, size):
    """First-fit allocation. Returns ``(origin, offset_or_address, length)``."""
    align = meta[M_ALIGN]
    need = _round_up(size, align)
    nfree = meta[M_NFREE]
    for i in range(nfree):
        if free_list[i, 1] >= need:
            off = free_list[i, 0]
            if free_list[i, 1] == need:
                for j in range(i, nfree - 1):
                    free_list[j, 0] = free_list[j + 1, 0]
                    free_list[j, 1] = free_list[j + 1, 1]
                meta[M_NFREE] = nfree - 1
            else:
                free_list[i, 0] = off + need
                free_list[i, 1] -= need
            meta[M_ALLOCS] += 1
            meta[M_IN_USE] += need
            if meta[M_IN_USE] > meta[M_PEAK]:
                meta[M_PEAK] = meta[M_IN_USE]
            return ORIGIN_POOL, off, need
    # region exhausted: standard aligned allocation
    hwm = meta[M_FB_HWM]
    slot = hwm
    for j in range(hwm):
        if fb_table[j, 0] == 0:
            slot = j
            break
    if slot == fb_table.shape[0]:
        raise MemoryError("pool fallback table full")
    if slot == hwm:
        meta[M_FB_HWM] = hwm + 1
    addr = _addr_of(_aligned_alloc(align, need))
    if addr == 0:
        raise MemoryError("system aligned allocation failed")
    fb_table[slot, 0] = addr
    fb_table[slot, 1] = need
    meta[M_ALLOCS] += 1
    meta[M_FALLBACKS] += 1
    meta[M_FB_LIVE] += 1
    meta[M_FB_BYTES] += need
    return ORIGIN_FALLBACK, addr, need


@nb.njit(nogil=True, cache=True)
def pool_free_nb(free_list, meta, fb_table, origin, offset, length):
    """Release a block. Returns a FREE_* status; on error nothing changes."""
    align = meta[M_ALIGN]
    if origin == ORIGIN_FALLBACK:
        for j in range(meta[M_FB_HWM]):
            if fb_table[j, 0] == offset and offset != 0:
                if fb_table[j, 1] != length:
                    return FREE_FOREIGN
                _sys_free(_void_ptr(offset))
                fb_table[j, 0] = 0
                fb_table[j, 1] = 0
                meta[M_FREES] += 1
                meta[M_FB_LIVE] -= 1
                meta[M_FB_BYTES] -= length
                return FREE_OK
        return FREE_DOUBLE
    if (
        origin != ORIGIN_POOL
        or offset < 0
        or length <= 0
        or offset % align != 0
        or length % align != 0
        or offset + length > meta[M_SIZE]
    ):
        return FREE_FOREIGN
    nfree = meta[M_NFREE]
    # first free block starting after `offset`
    lo, hi = 0, nfree
    while lo < hi:
        mid = (lo + hi) // 2
        if free_list[mid, 0] <= offset:
            lo = mid + 1
        else:
            hi = mid
    pos = lo
    if pos > 0 and free_list[pos - 1, 0] + free_list[pos - 1, 1] > offset:
        return FREE_DOUBLE
    if pos < nfree and offset + length > free_list[pos, 0]:
        return FREE_DOUBLE
    merge_left = pos > 0 and free_list[pos - 1, 0] + free_list[pos - 1, 1] == offset
    merge_right = pos < nfree and offset + length == free_list[pos, 0]
    if merge_left and merge_right:
        free_list[pos - 1, 1] += length + free_list[pos, 1]
        for j in range(pos, nfree - 1):
            free_list[j, 0] = free_list[j + 1, 0]
            free_list[j, 1] = free_list[j + 1, 1]
        meta[M_NFREE] = nfree - 1
    elif merge_left:
        free_list[pos - 1, 1] += length
    elif merge_right:
        free_list[pos, 0] = offset
        free_list[pos, 1] += length
    else:
        for j in range(nfree, pos, -1):
            free_list[j, 0] = free_list[j - 1, 0]
            free_list[j, 1] = free_list[j - 1, 1]
        free_list[pos, 0] = offset
        free_list[pos, 1] = length
        meta[M_NFREE] = nfree + 1
    meta[M_FREES] += 1
    meta[M_IN_USE] -= length
    return FREE_OK


@nb.njit(nogil=True, cache=True)
def block_bytes_nb(region, origin, offset, length):
    if origin == ORIGIN_POOL:
        return region[offset:offset + length]
    return system_bytes_nb(offset, length)


@nb.njit(nogil=True, cache=True)
def index_grow_nb(hdr, i, new_capacity, region, free_list, meta, fb_table):
    """Move index array ``i`` to a block of ``new_capacity`` int32 slots."""
    origin, off, nbytes = pool_alloc_nb(free_list, meta, fb_table, new_capacity * 4)
    count = hdr[i, H_COUNT]
    if hdr[i, H_NBYTES] > 0:
        src = block_bytes_nb(region, hdr[i, H_ORIGIN], hdr[i, H_OFFSET], hdr[i, H_NBYTES])
        dst = block_bytes_nb(region, origin, off, nbytes)
        _memcpy(_void_ptr(dst.ctypes.data), _void_ptr(src.ctypes.data), count * 4)
        pool_free_nb(free_list, meta, fb_table, hdr[i, H_ORIGIN], hdr[i, H_OFFSET], hdr[i, H_NBYTES])
    hdr[i, H_ORIGIN] = origin
    hdr[i, H_OFFSET] = off
    hdr[i, H_NBYTES] = nbytes
    hdr[i, H_CAPACITY] = new_capacity
    meta[M_GROWS] += 1


@nb.njit(nogil=True, cache=True)
def index_push_nb(hdr, i, value, region, words, free_list, meta, fb_table):
    """Append ``value`` to int32 index array ``i``, doubling on overflow.

    Per-element calls with array arguments are expensive in numba, so hot
    loops repeat this fast path inline and only call
    :func:`index_grow_nb` on overflow.
    """
    count = hdr[i, H_COUNT]
    if count == hdr[i, H_CAPACITY]:
        index_grow_nb(
            hdr, i, max(2 * count, INITIAL_INDEX_CAPACITY), region, free_list, meta, fb_table
        )
    if hdr[i, H_ORIGIN] == ORIGIN_POOL:
        words[(hdr[i, H_OFFSET] >> 2) + count] = value
    else:
        system_bytes_nb(hdr[i, H_OFFSET], hdr[i, H_NBYTES]).view(np.int32)[count] = value
    hdr[i, H_COUNT] = count + 1


@nb.njit(nogil=True, cache=True)
def index_release_nb(hdr, region, free_list, meta, fb_table):
    for i in range(hdr.shape[0]):
        if hdr[i, H_NBYTES] > 0:
            pool_free_nb(free_list, meta, fb_table, hdr[i, H_ORIGIN], hdr[i, H_OFFSET], hdr[i, H_NBYTES])
        for j in range(N_HDR):
            hdr[i, j] = 0


def _system_view(addr, nbytes):
    return np.ctypeslib.as_array((ctypes.c_uint8 * nbytes).from_address(addr))


class Block(NamedTuple):
    origin: int
    offset: int
    length: int
    pool_id: int

    @property
    def is_fallback(self):
        return self.origin == ORIGIN_FALLBACK


@dataclass
class PoolStats:
    allocs: int
    frees: int
    fallbacks: int
    peak_usage: int
    in_use: int
    bad_frees: int
    grows: int
    fallback_live: int


class Pool:
    """Arena of ``region_size`` bytes sub-allocated in ``alignment`` units.

    With ``debug=True`` a double free or a foreign block raises
    :class:`PoolError`; otherwise it is ignored and counted in
    ``stats.bad_frees``.
    """

    def __init__(self, region_size, alignment=DEFAULT_ALIGNMENT, debug=True, owner=None):
        region_size = int(region_size)
        alignment = int(alignment)
        if alignment <= 0 or alignment & (alignment - 1):
            raise ConfigError(f"pool alignment must be a power of two, got {alignment}")
        if region_size < alignment:
            raise ConfigError(f"pool region ({region_size} B) smaller than alignment ({alignment} B)")
        region_size -= region_size % alignment
        raw = np.empty(region_size + alignment, dtype=np.uint8)
        pad = (-raw.ctypes.data) % alignment
        self.region = raw[pad:pad + region_size]
        # reserve physical pages now rather than on first use
        self.region.fill(0)
        self.words = self.region.view(np.int32)
        max_blocks = region_size // alignment // 2 + 2
        self.free_list = np.zeros((max_blocks, 2), dtype=np.int64)
        self.free_list[0] = (0, region_size)
        self.meta = np.zeros(N_META, dtype=np.int64)
        self.meta[M_NFREE] = 1
        self.meta[M_ALIGN] = alignment
        self.meta[M_SIZE] = region_size
        self.fb_table = np.zeros((FALLBACK_SLOTS, 2), dtype=np.int64)
        self.alignment = alignment
        self.region_size = region_size
        self.debug = debug
        self.owner = owner
        self.id = next(_pool_ids)

    def __del__(self):
        table = getattr(self, "fb_table", None)
        if table is not None and _libc_free is not None:
            for addr in table[:, 0][table[:, 0] != 0]:
                _libc_free(int(addr))
            table[:] = 0

    @classmethod
    def from_megabytes(cls, mb=DEFAULT_POOL_MB, alignment=DEFAULT_ALIGNMENT, **kwargs):
        return cls(int(mb * 1024 * 1024), alignment, **kwargs)

    def alloc(self, size):
        size = int(size)
        if size <= 0:
            raise ValueError(f"allocation size must be positive, got {size}")
        origin, off, length = pool_alloc_nb(self.free_list, self.meta, self.fb_table, size)
        return Block(int(origin), int(off), int(length), self.id)

    def free(self, block):
        if block.pool_id != self.id:
            status = FREE_FOREIGN
        else:
            status = pool_free_nb(
                self.free_list, self.meta, self.fb_table, block.origin, block.offset, block.length
            )
        if status != FREE_OK:
            self.meta[M_BAD_FREES] += 1
            if self.debug:
                kind = "double free" if status == FREE_DOUBLE else "foreign block"
                raise PoolError(f"{kind}: {block}")

    def view(self, block):
        """Writable uint8 view of a live block."""
        if block.origin == ORIGIN_POOL:
            return self.region[block.offset:block.offset + block.length]
        return _system_view(block.offset, block.length)

    def address(self, block):
        return self.view(block).ctypes.data

    def free_blocks(self):
        n = int(self.meta[M_NFREE])
        return [(int(o), int(l)) for o, l in self.free_list[:n]]

    @property
    def stats(self):
        m = self.meta
        return PoolStats(
            allocs=int(m[M_ALLOCS]),
            frees=int(m[M_FREES]),
            fallbacks=int(m[M_FALLBACKS]),
            peak_usage=int(m[M_PEAK]),
            in_use=int(m[M_IN_USE]),
            bad_frees=int(m[M_BAD_FREES]),
            grows=int(m[M_GROWS]),
            fallback_live=int(m[M_FB_LIVE]),
        )

    def check(self):
        """Verify free-list invariants; raise :class:`PoolError` if broken."""
        blocks = self.free_blocks()
        for (o1, l1), (o2, _) in zip(blocks, blocks[1:]):
            if o1 + l1 > o2:
                raise PoolError(f"free blocks overlap at {o1}")
            if o1 + l1 == o2:
                raise PoolError(f"uncoalesced neighbours at {o1}/{o2}")
        for o, l in blocks:
            if o % self.alignment or l % self.alignment or l <= 0:
                raise PoolError(f"misaligned free block ({o}, {l})")
        free = sum(l for _, l in blocks)
        if free + int(self.meta[M_IN_USE]) != self.region_size:
            raise PoolError(
                f"accounting mismatch: free {free} + live {int(self.meta[M_IN_USE])} "
                f"!= region {self.region_size}"
            )


def pool_create(region_size, alignment=DEFAULT_ALIGNMENT, **kwargs):
    return Pool(region_size, alignment, **kwargs)


class PoolArray:
    """Growable typed array whose storage comes from one :class:`Pool`.

    Capacity doubles when full: a new block is taken from the same pool,
    live elements are copied across and the old block is returned.
    """

    def __init__(self, pool, dtype=np.int32, capacity=INITIAL_INDEX_CAPACITY, worker=None):
        self.pool = pool
        self.dtype = np.dtype(dtype)
        self.worker = pool.owner if worker is None else worker
        self.count = 0
        self.capacity = 0
        self.block = None
        self._data = None
        if capacity > 0:
            self._move_to(int(capacity))

    def _move_to(self, capacity):
        block = self.pool.alloc(capacity * self.dtype.itemsize)
        data = self.pool.view(block).view(self.dtype)
        if self.block is not None:
            data[: self.count] = self._data[: self.count]
            self.pool.free(self.block)
        self.block, self._data, self.capacity = block, data, capacity

    def push(self, value):
        if self.count == self.capacity:
            self._move_to(max(2 * self.capacity, 1))
        self._data[self.count] = value
        self.count += 1

    append = push

    def extend(self, values):
        values = np.asarray(values, dtype=self.dtype)
        need = self.count + len(values)
        if need > self.capacity:
            cap = max(self.capacity, 1)
            while cap < need:
                cap *= 2
            self._move_to(cap)
        self._data[self.count:need] = values
        self.count = need

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.to_numpy()[i]
        if i < 0:
            i += self.count
        if not 0 <= i < self.count:
            raise IndexError(i)
        return self._data[i]

    def __iter__(self):
        return iter(self.to_numpy())

    def to_numpy(self):
        """View of the live elements; invalidated by the next growth."""
        if self._data is None:
            return np.empty(0, dtype=self.dtype)
        return self._data[: self.count]

    def clear(self):
        self.count = 0

    def release(self):
        if self.block is not None:
            self.pool.free(self.block)
        self.block, self._data = None, None
        self.count = self.capacity = 0


def array_push(arr, element):
    arr.push(element)


class IndexArrays:
    """A fixed set of int32 :class:`PoolArray`-style lists sharing one pool.

    Used for the per-tile particle index lists of one worker; the header
    table lets jitted loops push without touching Python objects.
    """

    def __init__(self, pool, n):
        self.pool = pool
        self.hdr = np.zeros((int(n), N_HDR), dtype=np.int64)

    def __len__(self):
        return self.hdr.shape[0]

    def args(self):
        """Positional arguments expected by :func:`index_push_nb`."""
        p = self.pool
        return self.hdr, p.region, p.words, p.free_list, p.meta, p.fb_table

    def push(self, i, value):
        index_push_nb(self.hdr, i, value, *self.args()[1:])

    def count(self, i):
        return int(self.hdr[i, H_COUNT])

    def capacity(self, i):
        return int(self.hdr[i, H_CAPACITY])

    def get(self, i):
        """View of list ``i``; invalidated by the next push to it."""
        origin, off, nbytes, count, _ = self.hdr[i]
        if nbytes == 0:
            return np.empty(0, dtype=np.int32)
        if origin == ORIGIN_POOL:
            raw = self.pool.region[off:off + nbytes]
        else:
            raw = _system_view(int(off), int(nbytes))
        return raw.view(np.int32)[:count]

    def clear(self):
        """Drop contents but keep blocks for reuse."""
        self.hdr[:, H_COUNT] = 0

    def release(self):
        p = self.pool
        index_release_nb(self.hdr, p.region, p.free_list, p.meta, p.fb_table)


# -- growth benchmark kernel ----------------------------------------------


@nb.njit(nogil=True, cache=True)
def _index_buffer(hdr, i, words):
    """int32 view of index array ``i``'s whole capacity."""
    if hdr[i, H_ORIGIN] == ORIGIN_POOL:
        base = hdr[i, H_OFFSET] >> 2
        return words[base:base + hdr[i, H_CAPACITY]]
    return system_bytes_nb(hdr[i, H_OFFSET], hdr[i, H_NBYTES]).view(np.int32)


@nb.njit(nogil=True, cache=True)
def push_sequence(n, hdr, region, words, free_list, meta, fb_table):
    """Push ``0..n-1`` into index array 0; the array-growth benchmark body.

    Count, capacity and the buffer view live in locals between growths,
    so both allocation origins pay the same per-element cost.
    """
    count = hdr[0, H_COUNT]
    cap = hdr[0, H_CAPACITY]
    buf = _index_buffer(hdr, 0, words)
    for k in range(n):
        if count == cap:
            hdr[0, H_COUNT] = count
            index_grow_nb(hdr, 0, max(2 * count, INITIAL_INDEX_CAPACITY), region, free_list, meta, fb_table)
            cap = hdr[0, H_CAPACITY]
            buf = _index_buffer(hdr, 0, words)
        buf[count] = k
        count += 1
    hdr[0, H_COUNT] = count
    return count


def system_pool(alignment=DEFAULT_ALIGNMENT):
    """A pool with a one-unit region, so every real allocation takes the
    system fallback path: the per-growth global allocation baseline."""
    return Pool(alignment, alignment)
