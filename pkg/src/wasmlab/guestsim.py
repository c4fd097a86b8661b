"""Simulated guest modules.

Each function below mirrors one export of the corresponding text-format
module, instruction for instruction: u32 loads and stores of the
memory-backed globals, trivial address arithmetic, a branch on the
variant code, and calls into the host import surface.  All real work
(copying, allocation, formatting, nonce generation) happens host-side,
so the vulnerability semantics have exactly one implementation.

Variant codes: 0 bof, 1 ufs, 2 uaf, 3 iof.
"""

from __future__ import annotations

from . import layout
from .faults import GuestTrap


class GuestContext:
    """What a guest can touch: aligned u32 memory words plus imports.

    Out-of-range word access raises ETRAP, matching the trap a wasm
    i32.load/i32.store would take.
    """

    def __init__(self, env):
        self.env = env
        self.mem = env.mem

    def load(self, addr: int) -> int:
        if addr < 0 or addr + 4 > self.mem.size:
            raise GuestTrap(f"word load at {addr:#x} outside linear memory")
        return self.mem.read_u32(addr)

    def store(self, addr: int, value: int) -> None:
        if addr < 0 or addr + 4 > self.mem.size:
            raise GuestTrap(f"word store at {addr:#x} outside linear memory")
        self.mem.write_u32(addr, value & 0xFFFFFFFF)


# -- sqli module -------------------------------------------------------------


def sqli_set_token(ctx: GuestContext, src: int, length: int) -> int:
    v = ctx.load(layout.G_VARIANT)
    if v == 0:
        # bof: the token lands in the frame buffer, declared 32 bytes,
        # and the copy does not honor the declaration
        ctx.env.copy_unsafe(layout.FRAME_BASE, layout.FRAME_BUF_CAP, src, length)
        return 0
    if v == 2:
        # uaf: drop the query buffer, then allocate the token; the query
        # pointer published in G_ADDR_A keeps pointing at the old chunk
        old = ctx.load(layout.G_ADDR_A)
        if ctx.load(layout.G_LIVE):
            ctx.env.free(old)
            ctx.store(layout.G_LIVE, 0)
        p = ctx.env.malloc(length)
        ctx.env.copy_exact(p, src, length)
        ctx.store(layout.G_ADDR_B, p)
        return p
    # ufs/iof: bounded copy into the benign static token field
    ctx.env.copy_bounded(layout.SQLI_TOKEN_STATIC, layout.TOKEN_CAP, src, length)
    return 0


def sqli_get_query_addr(ctx: GuestContext) -> int:
    return ctx.load(layout.G_ADDR_A)


# -- ssti module -------------------------------------------------------------


def ssti_set_input(ctx: GuestContext, src: int, length: int) -> int:
    ctx.store(layout.G_INPUT_LEN, length)
    v = ctx.load(layout.G_VARIANT)
    if v == 2:
        # uaf: the page cache keeps a heap copy of the input
        p = ctx.env.malloc(length)
        ctx.env.copy_exact(p, src, length)
        ctx.store(layout.G_ADDR_B, p)
        return p
    return 0


def ssti_make_nonce(ctx: GuestContext) -> int:
    v = ctx.load(layout.G_VARIANT)
    if v == 0:
        # bof: fresh nonce in the frame local, then the stored input is
        # replayed into the adjacent buffer without honoring its size
        addr = ctx.load(layout.G_ADDR_A)
        ctx.env.gen_nonce(addr)
        ctx.env.copy_unsafe(
            layout.FRAME_BASE,
            layout.FRAME_BUF_CAP,
            layout.INPUT_STAGE,
            ctx.load(layout.G_INPUT_LEN),
        )
        return addr
    if v == 1:
        return ctx.load(layout.G_ADDR_A)
    # uaf: allocate lazily once; a dangling pointer is reused as-is
    p = ctx.load(layout.G_ADDR_A)
    if p == 0:
        p = ctx.env.malloc(layout.NONCE_CAP)
        ctx.store(layout.G_ADDR_A, p)
        ctx.store(layout.G_LIVE, 1)
        ctx.env.gen_nonce(p)
    return p


def ssti_free_nonce(ctx: GuestContext) -> int:
    v = ctx.load(layout.G_VARIANT)
    if v == 2 and ctx.load(layout.G_LIVE) and ctx.load(layout.G_ADDR_A):
        ctx.env.free(ctx.load(layout.G_ADDR_A))
        ctx.store(layout.G_LIVE, 0)
    return 0


# -- xsleak module -----------------------------------------------------------


def xsleak_store_secret(ctx: GuestContext, slot: int, src: int, length: int) -> int:
    dst = layout.XSLEAK_SECRETS_ADDR + slot * layout.XSLEAK_SLOT_SIZE
    v = ctx.load(layout.G_VARIANT)
    if v == 0:
        ctx.env.copy_unsafe(dst, layout.XSLEAK_SLOT_SIZE, src, length)
        return 0
    # uaf: bounded slot copy plus a heap audit copy of the raw input
    ctx.env.copy_bounded(dst, layout.XSLEAK_SLOT_SIZE, src, length)
    p = ctx.env.malloc(length)
    ctx.env.copy_exact(p, src, length)
    ctx.store(layout.G_ADDR_B, p)
    return p


def xsleak_get_pattern_addr(ctx: GuestContext) -> int:
    return ctx.load(layout.G_ADDR_A)


def xsleak_free_pattern(ctx: GuestContext) -> int:
    v = ctx.load(layout.G_VARIANT)
    if v != 2:
        return 0
    if ctx.load(layout.G_LIVE) and ctx.load(layout.G_ADDR_A):
        ctx.env.free(ctx.load(layout.G_ADDR_A))
        ctx.store(layout.G_LIVE, 0)
    elif ctx.load(layout.G_ADDR_B):
        # cleanup call with the pattern already dropped: release the
        # retained audit copy instead, so its chunk can be reused again
        ctx.env.free(ctx.load(layout.G_ADDR_B))
        ctx.store(layout.G_ADDR_B, 0)
    return 0


# -- shared ------------------------------------------------------------------


def fmt_echo(ctx: GuestContext, fmt_addr: int, a0: int, a1: int) -> int:
    return ctx.env.fmt_exec(fmt_addr, a0, a1)


# xsleak deliberately exports no format surface
EXPORTS = {
    "sqli": {
        "sqli_set_token": sqli_set_token,
        "sqli_get_query_addr": sqli_get_query_addr,
        "fmt_echo": fmt_echo,
    },
    "ssti": {
        "ssti_set_input": ssti_set_input,
        "ssti_make_nonce": ssti_make_nonce,
        "ssti_free_nonce": ssti_free_nonce,
        "fmt_echo": fmt_echo,
    },
    "xsleak": {
        "xsleak_store_secret": xsleak_store_secret,
        "xsleak_get_pattern_addr": xsleak_get_pattern_addr,
        "xsleak_free_pattern": xsleak_free_pattern,
    },
}
