"""Unit tests for the unsafe memory primitives.

The allocator tests check against ListModel, an independent reimplementation
of the reuse rule kept deliberately dumb (linear scans over plain lists) so
it can serve as an oracle for randomized sequences.
"""

import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wasmlab import linmem
from wasmlab.faults import (
    BadFormat,
    DoubleFree,
    FormatArgsExhausted,
    HeapFull,
    OutOfBounds,
    UnterminatedString,
)
from wasmlab.linmem import (
    AllocatorState,
    HardeningConfig,
    LinearMemory,
    RegionMap,
    StackFrame,
    check_canary,
    free,
    malloc,
    memcpy_checked,
    memcpy_unchecked,
    mini_printf,
    parse_format,
    place_canary,
)


def fresh():
    return LinearMemory(pages=2)


# -- raw memory -------------------------------------------------------------

class TestMemory:
    def test_size_is_two_pages(self):
        assert fresh().size == 131072

    def test_write_read_roundtrip(self):
        mem = fresh()
        mem.write(0x1000, b"ABCD")
        assert mem.read(0x1000, 4) == b"ABCD"

    def test_read_past_end(self):
        with pytest.raises(OutOfBounds):
            fresh().read(131072, 1)

    def test_write_at_end_boundary_no_partial(self):
        mem = fresh()
        with pytest.raises(OutOfBounds):
            mem.write(131070, b"\x01\x02\x03\x04")
        # nothing may have been written before the fault surfaced
        assert mem.read(131070, 2) == b"\x00\x00"

    def test_no_silent_wraparound(self):
        mem = fresh()
        with pytest.raises(OutOfBounds):
            mem.read(0xFFFFFFFF, 2)

    def test_negative_addr_rejected(self):
        with pytest.raises(OutOfBounds):
            fresh().read(-4, 4)

    @given(addr=st.integers(0, 131072 - 64), data=st.binary(min_size=0, max_size=64))
    @settings(max_examples=100)
    def test_roundtrip_property(self, addr, data):
        mem = fresh()
        mem.write(addr, data)
        assert mem.read(addr, len(data)) == data


class TestCString:
    def test_simple(self):
        mem = fresh()
        mem.write(0x2000, b"hello\x00")
        assert mem.read_cstring(0x2000, 16) == "hello"

    def test_no_nul_in_window(self):
        mem = fresh()
        mem.write(0x2000, b"A" * 64)
        mem.write(0x2040, b"\x00")
        with pytest.raises(UnterminatedString):
            mem.read_cstring(0x2000, 64)

    def test_runs_off_memory_end(self):
        mem = fresh()
        mem.write(131072 - 8, b"\xff" * 8)
        with pytest.raises(OutOfBounds):
            mem.read_cstring(131072 - 8, 64)

    def test_reads_through_stale_bytes(self):
        # the terminator position defines the value even if junk follows
        mem = fresh()
        mem.write(0x3000, b"SELECT 1\x00 FROM users\x00")
        assert mem.read_cstring(0x3000, 64) == "SELECT 1"


class TestSnapshot:
    def test_header_bytes_frozen(self):
        blob = fresh().snapshot()
        assert blob[:6] == b"LMLAB1"
        assert blob[6:16] == struct.pack("<HI", 1, 131072) + b"\x00" * 4
        assert len(blob) == 16 + 131072

    def test_roundtrip(self):
        mem = fresh()
        mem.write(0x1234, b"payload")
        clone = LinearMemory.from_snapshot(mem.snapshot())
        assert clone.read(0x1234, 7) == b"payload"
        assert clone.snapshot() == mem.snapshot()

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            LinearMemory.from_snapshot(b"NOTLAB" + b"\x00" * 26)


# -- regions and frames -----------------------------------------------------

class TestRegions:
    def test_defaults_are_ordered_and_disjoint(self):
        rm = RegionMap()
        assert rm.static_base == 0x1000
        assert rm.static_end == 0x2000
        assert rm.stack_limit == 0x2000
        assert rm.stack_top == 0x8000
        assert rm.heap_base == 0x8000

    def test_bad_ordering_rejected(self):
        with pytest.raises(AssertionError):
            RegionMap(static_base=0x3000, static_end=0x1000)


class TestStackFrame:
    def test_addr_of(self):
        frame = StackFrame(base=0x7F80, locals_=[("buf", 0, 32), ("query", 32, 64)])
        assert frame.addr_of("buf") == 0x7F80
        assert frame.addr_of("query") == 0x7FA0
        assert frame.end == 0x7FE0

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            StackFrame(base=0x7F80, locals_=[("a", 0, 32), ("b", 16, 8)])

    def test_adjacency_means_overflow_reaches_next_local(self):
        mem = fresh()
        frame = StackFrame(base=0x7F80, locals_=[("buf", 0, 32), ("query", 32, 64)])
        memcpy_unchecked(mem, frame.addr_of("buf"), b"A" * 32 + b"tail", 32)
        assert mem.read(frame.addr_of("query"), 4) == b"tail"


class TestCanary:
    def make_frame(self):
        return StackFrame(
            base=0x7F80,
            locals_=[("buf", 0, 32), ("guard", 32, 4), ("query", 36, 64)],
            canary_offset=32,
        )

    def test_place_then_check_true(self):
        mem = fresh()
        frame = self.make_frame()
        place_canary(mem, frame)
        assert check_canary(mem, frame) is True

    def test_overflow_crossing_guard_detected(self):
        mem = fresh()
        frame = self.make_frame()
        place_canary(mem, frame)
        memcpy_unchecked(mem, frame.addr_of("buf"), b"A" * 40, 32)
        assert check_canary(mem, frame) is False

    def test_frame_without_slot_rejected(self):
        mem = fresh()
        frame = StackFrame(base=0x7F80, locals_=[("buf", 0, 32)])
        with pytest.raises(ValueError):
            place_canary(mem, frame)


class TestMemcpy:
    def test_unchecked_ignores_cap(self):
        mem = fresh()
        written = memcpy_unchecked(mem, 0x5000, b"X" * 48, 32)
        assert written == 48
        assert mem.read(0x5000, 48) == b"X" * 48

    def test_checked_clips_and_reports(self):
        mem = fresh()
        mem.write(0x5000, b"\xee" * 48)
        written, truncated = memcpy_checked(mem, 0x5000, b"Y" * 48, 32)
        assert (written, truncated) == (32, True)
        assert mem.read(0x5000, 32) == b"Y" * 32
        assert mem.read(0x5020, 16) == b"\xee" * 16

    def test_checked_exact_fit_not_truncated(self):
        mem = fresh()
        written, truncated = memcpy_checked(mem, 0x5000, b"Z" * 32, 32)
        assert (written, truncated) == (32, False)

    @given(size=st.integers(0, 200), cap=st.integers(0, 64))
    @settings(max_examples=100)
    def test_checked_never_writes_past_cap(self, size, cap):
        mem = fresh()
        base = 0x6000
        mem.write(base, b"\xaa" * 300)
        memcpy_checked(mem, base, b"B" * size, cap)
        assert mem.read(base + cap, 300 - cap) == b"\xaa" * (300 - cap)


# -- allocator --------------------------------------------------------------

class ListModel:
    """Independent allocator model used as an oracle.

    Same observable rule as the real allocator, written separately: bump
    pointer, MRU free list, reuse when chunk_size - 16 <= n <= chunk_size,
    8-byte alignment of fresh chunks.
    """

    def __init__(self, heap_base, mem_size, quarantine=False):
        self.bump = heap_base
        self.mem_size = mem_size
        self.quarantine_on = quarantine
        self.frees = []          # MRU first: (addr, size)
        self.live = {}
        self.parked = []         # (addr, size, release_at)
        self.count = 0

    def malloc(self, n):
        self.parked, due = (
            [e for e in self.parked if self.count < e[2]],
            [e for e in self.parked if self.count >= e[2]],
        )
        for addr, size, _r in due:
            self.frees.insert(0, (addr, size))
        for i, (addr, size) in enumerate(self.frees):
            if size - 16 <= n <= size:
                del self.frees[i]
                self.live[addr] = size
                self.count += 1
                return addr
        addr = (self.bump + 7) & ~7
        if addr + n > self.mem_size:
            return "EHEAPFULL"
        self.bump = addr + n
        self.live[addr] = n
        self.count += 1
        return addr

    def free(self, addr):
        if addr not in self.live:
            return "EDOUBLEFREE"
        size = self.live.pop(addr)
        if self.quarantine_on:
            self.parked.append((addr, size, self.count + 8))
        else:
            self.frees.insert(0, (addr, size))
        return None


def fresh_alloc(quarantine=False):
    mem = fresh()
    cfg = HardeningConfig(quarantine_and_zero=quarantine)
    return mem, AllocatorState(heap_base=0x8000, config=cfg)


class TestAllocator:
    def test_reuse_within_slack(self):
        mem, state = fresh_alloc()
        a = malloc(state, mem, 32)
        free(state, mem, a)
        assert malloc(state, mem, 30) == a

    def test_no_reuse_when_larger(self):
        mem, state = fresh_alloc()
        a = malloc(state, mem, 32)
        free(state, mem, a)
        assert malloc(state, mem, 64) != a

    def test_no_reuse_when_too_small(self):
        mem, state = fresh_alloc()
        a = malloc(state, mem, 64)
        free(state, mem, a)
        assert malloc(state, mem, 20) != a  # 20 < 64 - 16

    def test_mru_order(self):
        mem, state = fresh_alloc()
        a = malloc(state, mem, 32)
        b = malloc(state, mem, 32)
        free(state, mem, a)
        free(state, mem, b)
        # b freed last, so b is reused first
        assert malloc(state, mem, 32) == b
        assert malloc(state, mem, 32) == a

    def test_double_free(self):
        mem, state = fresh_alloc()
        a = malloc(state, mem, 32)
        free(state, mem, a)
        with pytest.raises(DoubleFree):
            free(state, mem, a)

    def test_free_of_unknown_addr(self):
        mem, state = fresh_alloc()
        with pytest.raises(DoubleFree):
            free(state, mem, 0x9999)

    def test_heap_exhaustion(self):
        mem, state = fresh_alloc()
        with pytest.raises(HeapFull):
            malloc(state, mem, 131072)

    def test_vulnerable_free_leaves_bytes(self):
        mem, state = fresh_alloc()
        a = malloc(state, mem, 16)
        mem.write(a, b"SENSITIVE_BYTES\x00")
        free(state, mem, a)
        assert mem.read(a, 16) == b"SENSITIVE_BYTES\x00"

    def test_quarantine_zeroes_on_free(self):
        mem, state = fresh_alloc(quarantine=True)
        a = malloc(state, mem, 16)
        mem.write(a, b"SENSITIVE_BYTES\x00")
        free(state, mem, a)
        assert mem.read(a, 16) == b"\x00" * 16

    def test_quarantine_blocks_reuse_for_eight_allocs(self):
        mem, state = fresh_alloc(quarantine=True)
        a = malloc(state, mem, 64)
        free(state, mem, a)
        others = [malloc(state, mem, 200) for _ in range(8)]
        assert a not in others
        # ninth allocation after the free may finally reuse the chunk
        assert malloc(state, mem, 64) == a

    def test_quarantined_chunk_not_reused_even_on_exact_fit(self):
        mem, state = fresh_alloc(quarantine=True)
        a = malloc(state, mem, 64)
        free(state, mem, a)
        assert malloc(state, mem, 64) != a

    def test_random_sequences_match_model(self):
        rng = random.Random(0xA11C)
        for quarantine in (False, True):
            for _trial in range(40):
                mem, state = fresh_alloc(quarantine=quarantine)
                model = ListModel(0x8000, mem.size, quarantine=quarantine)
                held = []
                for _step in range(120):
                    if held and rng.random() < 0.4:
                        victim = held.pop(rng.randrange(len(held)))
                        got = None
                        try:
                            free(state, mem, victim)
                        except DoubleFree:
                            got = "EDOUBLEFREE"
                        assert got == model.free(victim)
                    else:
                        n = rng.choice([8, 24, 32, 48, 64, 200])
                        got = None
                        try:
                            got = malloc(state, mem, n)
                        except HeapFull:
                            got = "EHEAPFULL"
                        expect = model.malloc(n)
                        assert got == expect
                        if isinstance(got, int):
                            held.append(got)
                assert state.next_bump == model.bump
                assert sorted(state.live) == sorted(model.live)

    def test_live_chunks_never_overlap(self):
        rng = random.Random(7)
        mem, state = fresh_alloc()
        held = []
        for _ in range(200):
            if held and rng.random() < 0.45:
                free(state, mem, held.pop(rng.randrange(len(held))))
            else:
                try:
                    held.append(malloc(state, mem, rng.choice([8, 16, 32, 64, 96])))
                except HeapFull:
                    break
            spans = sorted((a, a + s) for a, s in state.live.items())
            for (s1, e1), (s2, _e2) in zip(spans, spans[1:]):
                assert e1 <= s2


# -- format engine ----------------------------------------------------------

class TestParseFormat:
    def test_literal_and_directive(self):
        prog = parse_format("id=%d")
        assert prog.items == (("lit", b"id="), ("spec", "d", 0))

    def test_unknown_directive(self):
        with pytest.raises(BadFormat):
            parse_format("%q")

    def test_percent_escape_consumes_no_arg(self):
        prog = parse_format("100%%")
        assert prog.items == (("lit", b"100%"),)
        assert prog.spec_count == 0

    def test_dangling_percent(self):
        with pytest.raises(BadFormat):
            parse_format("abc%")

    def test_arg_indices_consecutive(self):
        prog = parse_format("%d%x%c%s%n")
        specs = [item for item in prog.items if item[0] == "spec"]
        assert [s[2] for s in specs] == [0, 1, 2, 3, 4]


class TestMiniPrintf:
    def test_signed_decimal(self):
        mem = fresh()
        out = mini_printf(mem, parse_format("(%d)"), [4294967295])
        assert out == "(-1)"

    def test_hex_lowercase(self):
        mem = fresh()
        assert mini_printf(mem, parse_format("%x"), [3735928559]) == "deadbeef"

    def test_char_low_byte(self):
        mem = fresh()
        assert mini_printf(mem, parse_format("%c"), [0x141]) == "A"

    def test_string_read(self):
        mem = fresh()
        mem.write(0x2000, b"guest\x00")
        assert mini_printf(mem, parse_format("[%s]"), [0x2000]) == "[guest]"

    def test_n_writes_count_emitted_so_far(self):
        mem = fresh()
        out = mini_printf(mem, parse_format("AAAAA%n"), [0x3000])
        assert out == "AAAAA"
        assert mem.read(0x3000, 4) == b"\x05\x00\x00\x00"

    def test_n_emits_nothing(self):
        mem = fresh()
        out = mini_printf(mem, parse_format("ab%ncd"), [0x3000])
        assert out == "abcd"
        assert mem.read_u32(0x3000) == 2

    def test_args_exhausted(self):
        mem = fresh()
        with pytest.raises(FormatArgsExhausted):
            mini_printf(mem, parse_format("%d%d"), [1])

    def test_n_with_bad_address_propagates_oob(self):
        mem = fresh()
        with pytest.raises(OutOfBounds):
            mini_printf(mem, parse_format("%n"), [131070])

    def test_write_primitive_two_n_directives(self):
        # two stores in one call observe strictly increasing counts
        mem = fresh()
        mini_printf(mem, parse_format("AB%nCD%n"), [0x3000, 0x3010])
        assert mem.read_u32(0x3000) == 2
        assert mem.read_u32(0x3010) == 4

    @staticmethod
    def independent_count(prog, varargs, mem):
        """Oracle: compute expected byte counts at each %n without the engine."""
        count = 0
        expected = {}
        for item in prog.items:
            if item[0] == "lit":
                count += len(item[1])
                continue
            _tag, kind, idx = item
            value = varargs[idx] & 0xFFFFFFFF
            if kind == "d":
                count += len(str(linmem.to_signed32(value)))
            elif kind == "x":
                count += len(format(value, "x"))
            elif kind == "c":
                count += 1
            elif kind == "s":
                count += len(mem.read_cstring(value, mem.size - value))
            elif kind == "n":
                expected[value] = count
        return count, expected

    def test_counter_against_oracle_on_random_programs(self):
        rng = random.Random(0xF0F0)
        mem = fresh()
        mem.write(0x2000, b"seed-string\x00")
        for _ in range(250):
            parts = []
            nargs = 0
            for _ in range(rng.randrange(1, 8)):
                choice = rng.randrange(6)
                if choice == 0:
                    parts.append("".join(rng.choice("ABCxyz! ") for _ in range(rng.randrange(0, 9))))
                else:
                    parts.append("%" + "dxcsn"[rng.randrange(5)])
                    nargs += 1
            fmt = "".join(parts)
            varargs = []
            for item in parse_format(fmt).items:
                if item[0] != "spec":
                    continue
                kind = item[1]
                if kind == "s":
                    varargs.append(0x2000)
                elif kind == "n":
                    varargs.append(0x4000 + 8 * len(varargs))
                else:
                    varargs.append(rng.randrange(0, 2 ** 32))
            prog = parse_format(fmt)
            total, expected = self.independent_count(prog, varargs, mem)
            out = mini_printf(mem, prog, varargs)
            assert len(out.encode("latin-1")) == total
            for addr, want in expected.items():
                assert mem.read_u32(addr) == want


class TestNarrowing:
    def test_wraps_to_zero(self):
        assert linmem.narrow_u32(2 ** 32) == 0

    def test_wraps_to_minus_one(self):
        assert linmem.narrow_u32(2 ** 32 - 1) == -1

    def test_small_values_pass_through(self):
        assert linmem.narrow_u32(7) == 7

    @given(st.integers(0, 2 ** 53 - 1))
    @settings(max_examples=200)
    def test_matches_ctypes_oracle(self, value):
        import ctypes
        assert linmem.narrow_u32(value) == ctypes.c_int32(value & 0xFFFFFFFF).value
