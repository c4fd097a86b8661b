"""Deliberately unsafe guest-memory primitives.

This module is the single source of truth for every vulnerable semantic in
the lab: the flat 32-bit linear memory, the region layout, the bump/free-list
allocator with its loose reuse rule, the canary helpers, and the printf-style
formatter whose %n directive is the write primitive.  Guest programs (whether
simulated in Python or compiled to WebAssembly) never reimplement any of
this; they only sequence calls into it.

All addresses are u32 byte offsets.  Operations validate bounds before
mutating, so a raised fault never leaves a partial write behind.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .faults import (
    BadFormat,
    CanaryClobbered,
    DoubleFree,
    FormatArgsExhausted,
    HeapFull,
    OutOfBounds,
    UnterminatedString,
)

PAGE_SIZE = 65536
U32_MASK = 0xFFFFFFFF

SNAP_MAGIC = b"LMLAB1"
SNAP_VERSION = 1

# Guard word placed between an attacker-writable buffer and the local it
# protects.  Fixed value keeps snapshots reproducible.
CANARY_WORD = 0x5AFEC0DE

# Chunks whose recorded size is within this many bytes above the request are
# eligible for reuse ("roughly the same size").
REUSE_SLACK = 16

# With quarantine hardening on, a freed chunk sits out this many subsequent
# allocations before it may be reused.
QUARANTINE_ALLOCS = 8

_ALIGN = 8


def le32(value: int) -> bytes:
    return struct.pack("<I", value & U32_MASK)


def u32(data: bytes) -> int:
    return struct.unpack("<I", data)[0]


def to_signed32(value: int) -> int:
    """Reinterpret a u32 bit pattern as two's-complement signed."""
    value &= U32_MASK
    return value - (1 << 32) if value >= (1 << 31) else value


def narrow_u32(value: int) -> int:
    """Truncate an arbitrarily large integer to 32 bits, then sign it.

    Models a wide host integer crossing into a 32-bit guest parameter.
    """
    return to_signed32(value & U32_MASK)


class LinearMemory:
    """Flat byte-addressable memory, a fixed number of 64 KiB pages."""

    def __init__(self, pages: int = 2):
        if pages <= 0:
            raise ValueError("pages must be positive")
        self._buf = bytearray(pages * PAGE_SIZE)

    @property
    def size(self) -> int:
        return len(self._buf)

    def _check(self, addr: int, n: int) -> None:
        if not isinstance(addr, int) or not isinstance(n, int):
            raise TypeError("addr and length must be int")
        if addr < 0 or n < 0 or addr > U32_MASK:
            raise OutOfBounds(f"addr={addr} n={n}")
        if addr + n > len(self._buf):
            raise OutOfBounds(f"range [{addr}, {addr + n}) exceeds size {len(self._buf)}")

    def read(self, addr: int, n: int) -> bytes:
        self._check(addr, n)
        return bytes(self._buf[addr:addr + n])

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        self._buf[addr:addr + len(data)] = data

    def read_u32(self, addr: int) -> int:
        return u32(self.read(addr, 4))

    def write_u32(self, addr: int, value: int) -> None:
        self.write(addr, le32(value))

    def read_cstring(self, addr: int, max_scan: int) -> str:
        """Read a NUL-terminated string of at most max_scan bytes.

        Raises ENONUL when the scan window holds no terminator, EOOB when the
        window would run past the end of memory before a terminator appears.
        """
        self._check(addr, 0)
        window_end = addr + max_scan
        clipped = min(window_end, len(self._buf))
        chunk = self._buf[addr:clipped]
        pos = chunk.find(0)
        if pos < 0:
            if window_end > len(self._buf):
                raise OutOfBounds(f"string at {addr:#x} runs past end of memory")
            raise UnterminatedString(f"no NUL within {max_scan} bytes of {addr:#x}")
        return bytes(chunk[:pos]).decode("latin-1")

    def snapshot(self) -> bytes:
        header = SNAP_MAGIC + struct.pack("<HI", SNAP_VERSION, len(self._buf))
        header += b"\x00" * (16 - len(header))
        return header + bytes(self._buf)

    @classmethod
    def from_snapshot(cls, blob: bytes) -> "LinearMemory":
        if len(blob) < 16 or blob[:6] != SNAP_MAGIC:
            raise ValueError("bad snapshot magic")
        version, size = struct.unpack("<HI", blob[6:12])
        if version != SNAP_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        if len(blob) != 16 + size:
            raise ValueError("snapshot length does not match header")
        mem = cls.__new__(cls)
        mem._buf = bytearray(blob[16:])
        return mem


@dataclass(frozen=True)
class RegionMap:
    """Address-space plan shared by every guest.

    The stack grows downward from stack_top; the heap bumps upward from
    heap_base.  Regions are disjoint by construction.
    """

    static_base: int = 0x1000
    static_end: int = 0x2000
    stack_top: int = 0x8000
    stack_limit: int = 0x2000
    heap_base: int = 0x8000

    def __post_init__(self):
        assert self.static_base < self.static_end <= self.stack_limit
        assert self.stack_limit < self.stack_top <= self.heap_base


@dataclass
class HardeningConfig:
    """Per-instance mitigation switches.  Everything defaults to off."""

    canaries: bool = False
    checked_copy: bool = False
    quarantine_and_zero: bool = False
    template_integrity: bool = False
    boundary_validation: bool = False

    def any_enabled(self) -> bool:
        return any(vars(self).values())


@dataclass
class StackFrame:
    """One call frame: named locals laid out at ascending offsets.

    locals_ is a list of (name, offset, length).  canary_offset, when set,
    names the 4-byte guard slot between the writable buffer and the locals
    above it.
    """

    base: int
    locals_: list[tuple[str, int, int]]
    canary_offset: int | None = None

    def __post_init__(self):
        prev_end = 0
        for name, off, length in self.locals_:
            if off < prev_end:
                raise ValueError(f"local {name} overlaps previous local")
            prev_end = off + length

    def addr_of(self, name: str) -> int:
        for n, off, _length in self.locals_:
            if n == name:
                return self.base + off
        raise KeyError(name)

    def extent_of(self, name: str) -> tuple[int, int]:
        for n, off, length in self.locals_:
            if n == name:
                return self.base + off, length
        raise KeyError(name)

    @property
    def end(self) -> int:
        _name, off, length = self.locals_[-1]
        return self.base + off + length


def place_canary(mem: LinearMemory, frame: StackFrame) -> int:
    if frame.canary_offset is None:
        raise ValueError("frame has no canary slot")
    mem.write_u32(frame.base + frame.canary_offset, CANARY_WORD)
    return CANARY_WORD


def check_canary(mem: LinearMemory, frame: StackFrame) -> bool:
    if frame.canary_offset is None:
        raise ValueError("frame has no canary slot")
    return mem.read_u32(frame.base + frame.canary_offset) == CANARY_WORD


def memcpy_unchecked(mem: LinearMemory, dst: int, src: bytes, declared_cap: int) -> int:
    """Copy all of src to dst, ignoring declared_cap.  The core bug.

    declared_cap is what the call site believes the destination holds; it is
    recorded here only so call sites read like their C originals.
    """
    mem.write(dst, bytes(src))
    return len(src)


def memcpy_checked(mem: LinearMemory, dst: int, src: bytes, cap: int) -> tuple[int, bool]:
    """Bounded variant: copies at most cap bytes, reports truncation."""
    if cap < 0:
        raise ValueError("cap must be non-negative")
    portion = bytes(src[:cap])
    mem.write(dst, portion)
    return len(portion), len(src) > cap


# -- allocator --------------------------------------------------------------

def _align(n: int) -> int:
    return (n + _ALIGN - 1) & ~(_ALIGN - 1)


@dataclass
class AllocatorState:
    """Bump allocator with a MRU free list and a loose reuse rule.

    free_list holds (addr, chunk_size) with the most recently freed chunk at
    the front.  malloc(n) reuses the first chunk whose recorded size
    satisfies chunk_size - REUSE_SLACK <= n <= chunk_size, otherwise bumps.
    With quarantine_and_zero hardening, freed chunks are zeroed and parked
    until QUARANTINE_ALLOCS further allocations have happened.
    """

    heap_base: int
    config: HardeningConfig = field(default_factory=HardeningConfig)
    next_bump: int = 0
    free_list: list[tuple[int, int]] = field(default_factory=list)
    live: dict[int, int] = field(default_factory=dict)
    quarantine: list[tuple[int, int, int]] = field(default_factory=list)
    alloc_count: int = 0

    def __post_init__(self):
        if self.next_bump == 0:
            self.next_bump = self.heap_base

    def metadata(self) -> dict:
        return {
            "next_bump": self.next_bump,
            "free_list": list(self.free_list),
            "live": sorted(self.live.items()),
            "quarantine": list(self.quarantine),
            "alloc_count": self.alloc_count,
        }


def _release_quarantine(state: AllocatorState) -> None:
    due = [entry for entry in state.quarantine if state.alloc_count >= entry[2]]
    if not due:
        return
    state.quarantine = [e for e in state.quarantine if state.alloc_count < e[2]]
    # released chunks join the free list in their original free order,
    # each pushed to the front, so the most recently freed stays first
    for addr, size, _release in due:
        state.free_list.insert(0, (addr, size))


def malloc(state: AllocatorState, mem: LinearMemory, n: int) -> int:
    if n <= 0:
        raise ValueError("allocation size must be positive")
    _release_quarantine(state)
    for idx, (addr, chunk_size) in enumerate(state.free_list):
        if chunk_size - REUSE_SLACK <= n <= chunk_size:
            state.free_list.pop(idx)
            state.live[addr] = chunk_size
            state.alloc_count += 1
            return addr
    addr = _align(state.next_bump)
    if addr + n > mem.size:
        raise HeapFull(f"bump to {addr + n:#x} exceeds memory size {mem.size:#x}")
    state.next_bump = addr + n
    state.live[addr] = n
    state.alloc_count += 1
    return addr


def free(state: AllocatorState, mem: LinearMemory, addr: int) -> None:
    if addr not in state.live:
        raise DoubleFree(f"addr {addr:#x} is not a live chunk")
    chunk_size = state.live.pop(addr)
    if state.config.quarantine_and_zero:
        mem.write(addr, b"\x00" * chunk_size)
        state.quarantine.append((addr, chunk_size, state.alloc_count + QUARANTINE_ALLOCS))
    else:
        state.free_list.insert(0, (addr, chunk_size))


# -- printf-style formatter -------------------------------------------------

_DIRECTIVES = "dxscn"


@dataclass(frozen=True)
class FormatProgram:
    """Parsed format string: literal runs and directives in order.

    items entries are ("lit", bytes) or ("spec", kind, arg_index) with
    arg_index assigned consecutively from zero.
    """

    source: str
    items: tuple

    @property
    def spec_count(self) -> int:
        return sum(1 for item in self.items if item[0] == "spec")


def parse_format(fmt: str) -> FormatProgram:
    items: list = []
    lit = bytearray()
    arg_index = 0
    i = 0
    raw = fmt.encode("latin-1", errors="strict")
    while i < len(raw):
        b = raw[i]
        if b != ord("%"):
            lit.append(b)
            i += 1
            continue
        if i + 1 >= len(raw):
            raise BadFormat("dangling % at end of format")
        nxt = chr(raw[i + 1])
        if nxt == "%":
            lit.append(ord("%"))
            i += 2
            continue
        if nxt not in _DIRECTIVES:
            raise BadFormat(f"unknown directive %{nxt}")
        if lit:
            items.append(("lit", bytes(lit)))
            lit = bytearray()
        items.append(("spec", nxt, arg_index))
        arg_index += 1
        i += 2
    if lit:
        items.append(("lit", bytes(lit)))
    return FormatProgram(source=fmt, items=tuple(items))


def mini_printf(mem: LinearMemory, prog: FormatProgram, varargs: list[int]) -> str:
    """Render a FormatProgram.  Returns the emitted text.

    %d signed decimal, %x lowercase hex, %c the low byte, %s a C string read
    from guest memory, %n a 32-bit little-endian store of the byte count
    emitted so far.  Arguments are taken from varargs in order; running out
    raises EARGS.
    """
    out = bytearray()
    for item in prog.items:
        if item[0] == "lit":
            out.extend(item[1])
            continue
        _tag, kind, arg_index = item
        if arg_index >= len(varargs):
            raise FormatArgsExhausted(
                f"directive %{kind} wants arg {arg_index}, only {len(varargs)} supplied")
        value = varargs[arg_index] & U32_MASK
        if kind == "d":
            out.extend(str(to_signed32(value)).encode("ascii"))
        elif kind == "x":
            out.extend(format(value, "x").encode("ascii"))
        elif kind == "c":
            out.append(value & 0xFF)
        elif kind == "s":
            text = mem.read_cstring(value, mem.size - value if value < mem.size else 1)
            out.extend(text.encode("latin-1"))
        elif kind == "n":
            mem.write(value, le32(len(out)))
    return out.decode("latin-1")
