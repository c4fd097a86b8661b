"""Address and layout contract for the three scenario modules.

Everything here is position-constant by design: exploit payloads assume
precise static offsets, and the lab grants them by construction.  The
same numbers drive the in-process simulator and the WebAssembly guest
modules, so this file is the single place where the memory map lives.

Static region map (within linmem's RegionMap defaults):

    0x1000  sqli benign token field (32)
    0x1040  corruptible query template field (64)
    0x1080  parameterized query template field (64)
    0x1100  xsleak secret slots, 4 x 32
    0x117c  xsleak guard word (canaries build only; carved from slot 3)
    0x1180  xsleak search pattern field (64)
    0x1200  ssti static nonce field (17)
    0x1fe0  memory-backed globals (see G_* below)

The unmanaged stack frame used by sqli and ssti sits just below
stack_top; scratch staging areas for format strings and user input live
high in the second page, far above any heap bump the lab can reach.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

from .faults import BadConfig
from .linmem import StackFrame

SCENARIOS = ("sqli", "ssti", "xsleak")

# vector codes as stored in the G_VARIANT memory global
VARIANT_CODES = {"bof": 0, "ufs": 1, "uaf": 2, "iof": 3}
VARIANTS = tuple(VARIANT_CODES)

VALID_COMBINATIONS = {
    "sqli": ("bof", "ufs", "uaf", "iof"),
    "ssti": ("bof", "ufs", "uaf"),
    "xsleak": ("bof", "uaf"),
}

# the duality matrix: the one hardening flag expected to stop each pair
DESIGNATED_HARDENING = {
    ("sqli", "bof"): "canaries",
    ("sqli", "ufs"): "template_integrity",
    ("sqli", "uaf"): "quarantine_and_zero",
    ("sqli", "iof"): "boundary_validation",
    ("ssti", "bof"): "canaries",
    ("ssti", "ufs"): "boundary_validation",
    ("ssti", "uaf"): "quarantine_and_zero",
    ("xsleak", "bof"): "checked_copy",
    ("xsleak", "uaf"): "quarantine_and_zero",
}

# -- static data fields ------------------------------------------------------

SQLI_TOKEN_STATIC = 0x1000
TOKEN_CAP = 32

SQLI_TEMPLATE_ADDR = 0x1040
SQLI_SLOTTED_ADDR = 0x1080
TEMPLATE_CAP = 64

T_PLAIN = "SELECT name FROM users WHERE id = 1"
T_SLOTTED = "SELECT id, name, secret, role FROM users WHERE id = ?"

XSLEAK_SECRETS_ADDR = 0x1100
XSLEAK_SLOT_SIZE = 32
XSLEAK_SLOT_COUNT = 4
XSLEAK_GUARD_ADDR = 0x117C
XSLEAK_PATTERN_ADDR = 0x1180
PATTERN_CAP = 64

DEFAULT_PATTERN = "trust"
PLANTED_SECRET = "trustno1trustno1trustno1"
SECRET_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"

SSTI_STATIC_NONCE_ADDR = 0x1200
NONCE_CAP = 17  # 16 hex chars + NUL

# -- memory-backed globals ---------------------------------------------------
#
# Plain wasm globals would be invisible to the differential snapshots, so
# guest-visible state lives at fixed memory words instead.

GLOBALS_BASE = 0x1FE0
G_LIVE = 0x1FE8  # heap object live flag (0/1)
G_INPUT_LEN = 0x1FEC  # staged user input length including NUL
G_ADDR_C = 0x1FF0
G_ADDR_B = 0x1FF4
G_ADDR_A = 0x1FF8  # published primary address (query / nonce / pattern)
G_VARIANT = 0x1FFC

# -- unmanaged stack frame ---------------------------------------------------

FRAME_BASE = 0x7F80
FRAME_BUF_CAP = 32
FRAME_PROT_CAP = {"sqli": 64, "ssti": 32}

# -- host staging areas ------------------------------------------------------

FMT_SCRATCH = 0x18000
FMT_REGION_LEN = 4224  # padding cap 4096 plus directive slack
FMT_PAD_MAX = 4096

INPUT_STAGE = 0x1A000
INPUT_MAX = 4096

NONCE_SEED = 0x5EED


def check_combination(scenario: str, variant: str) -> None:
    """Reject combinations that have no implemented flow.

    xsleak with the format-string vector is a documented exclusion and
    gets its own fault; everything else unknown is a config error.
    """
    if scenario not in SCENARIOS:
        raise BadConfig(f"unknown scenario {scenario!r}")
    if variant not in VARIANTS:
        raise BadConfig(f"unknown vector {variant!r}")
    if variant in VALID_COMBINATIONS[scenario]:
        return
    if (scenario, variant) == ("xsleak", "ufs"):
        from .faults import UnsupportedCombination

        raise UnsupportedCombination(
            "xsleak has no format-string vector: the module exports no "
            "format surface, so the chain cannot be built"
        )
    raise BadConfig(f"{scenario} has no {variant} vector")


def build_frame(scenario: str, canaries: bool) -> Optional[StackFrame]:
    """Stack frame for scenarios with frame-resident buffers.

    The user buffer sits at the frame base; the protected local follows
    immediately, or four bytes later when a canary word is wedged in.
    """
    if scenario not in ("sqli", "ssti"):
        return None
    prot_name = "query" if scenario == "sqli" else "nonce"
    prot_cap = FRAME_PROT_CAP[scenario]
    if canaries:
        return StackFrame(
            base=FRAME_BASE,
            locals_=[("buf", 0, FRAME_BUF_CAP), (prot_name, 36, prot_cap)],
            canary_offset=32,
        )
    return StackFrame(
        base=FRAME_BASE,
        locals_=[("buf", 0, FRAME_BUF_CAP), (prot_name, 32, prot_cap)],
        canary_offset=None,
    )


def slot_addr(slot: int) -> int:
    if not 0 <= slot < XSLEAK_SLOT_COUNT:
        raise ValueError(f"slot {slot} out of range")
    return XSLEAK_SECRETS_ADDR + slot * XSLEAK_SLOT_SIZE


def static_image(scenario: str) -> Tuple[Tuple[int, bytes], ...]:
    """Initial data segments, identical for every variant of a scenario."""
    if scenario == "sqli":
        return (
            (SQLI_TEMPLATE_ADDR, T_PLAIN.encode() + b"\x00"),
            (SQLI_SLOTTED_ADDR, T_SLOTTED.encode() + b"\x00"),
        )
    if scenario == "ssti":
        return ()
    if scenario == "xsleak":
        return (
            (XSLEAK_SECRETS_ADDR, PLANTED_SECRET.encode() + b"\x00"),
            (XSLEAK_PATTERN_ADDR, DEFAULT_PATTERN.encode() + b"\x00"),
        )
    raise BadConfig(f"unknown scenario {scenario!r}")


@dataclass(frozen=True)
class GuardSite:
    """A canary word plus the span it shields.

    On a tripped check the span is restored from its pre-copy image,
    modeling the process abort that stops the corrupted data from ever
    being used.
    """

    guard_addr: int
    span_addr: int
    span_len: int


def guard_sites(scenario: str, canaries: bool) -> Tuple[GuardSite, ...]:
    if not canaries:
        return ()
    if scenario in ("sqli", "ssti"):
        frame = build_frame(scenario, canaries=True)
        prot = "query" if scenario == "sqli" else "nonce"
        span_addr, span_len = frame.extent_of(prot)
        return (GuardSite(frame.base + frame.canary_offset, span_addr, span_len),)
    if scenario == "xsleak":
        return (GuardSite(XSLEAK_GUARD_ADDR, XSLEAK_PATTERN_ADDR, PATTERN_CAP),)
    return ()
