"""Execution backends and marshaling.

Two backends expose one operation surface (call_export, memory access,
snapshot): an in-process simulator running the guest programs from
guestsim, and a WebAssembly backend that instantiates the real guest
modules inside a Node child process and services their imports over a
line-JSON pipe.  The unsafe-libc import surface (LabEnv) is the same
Python object in both cases, so vulnerability semantics cannot drift
between them.
"""

from __future__ import annotations

import base64
import json
import os
import random
import shutil
import struct
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import faults as faults_mod
from . import guestsim, layout
from .faults import (
    BadConfig,
    CanaryClobbered,
    BoundaryRejected,
    GuestTrap,
    InstantiateFailed,
    LabFault,
    NoSuchExport,
    OutOfBounds,
    UnterminatedString,
)
from .linmem import (
    CANARY_WORD,
    SNAP_MAGIC,
    SNAP_VERSION,
    AllocatorState,
    HardeningConfig,
    LinearMemory,
    RegionMap,
    le32,
    malloc as heap_malloc,
    free as heap_free,
    memcpy_checked,
    memcpy_unchecked,
    mini_printf,
    parse_format,
    u32,
)

U32_MASK = 0xFFFFFFFF

_FAULT_BY_CODE = {
    cls.code: cls
    for cls in vars(faults_mod).values()
    if isinstance(cls, type) and issubclass(cls, LabFault)
}


def _fault_from_code(code: str, detail: str) -> LabFault:
    cls = _FAULT_BY_CODE.get(code)
    if cls is None:
        return LabFault(f"{code}: {detail}")
    try:
        return cls(detail)
    except TypeError:
        fault = LabFault(detail)
        fault.code = code
        return fault


# -- snapshots ---------------------------------------------------------------


@dataclass(frozen=True, eq=True)
class Snapshot:
    """Full memory dump plus allocator bookkeeping; compares byte-wise."""

    mem_blob: bytes
    alloc_meta: str  # canonical JSON text so equality is plain

    def to_bytes(self) -> bytes:
        return self.mem_blob + self.alloc_meta.encode("utf-8")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Snapshot":
        if len(blob) < 16 or blob[:6] != SNAP_MAGIC:
            raise ValueError("bad snapshot blob")
        _version, size = struct.unpack("<HI", blob[6:12])
        cut = 16 + size
        return cls(mem_blob=blob[:cut], alloc_meta=blob[cut:].decode("utf-8"))

    @staticmethod
    def meta_text(alloc: AllocatorState) -> str:
        return json.dumps(alloc.metadata(), sort_keys=True, separators=(",", ":"))


def _raw_to_snapshot_blob(raw: bytes) -> bytes:
    header = SNAP_MAGIC + struct.pack("<HI", SNAP_VERSION, len(raw))
    header += b"\x00" * (16 - len(header))
    return header + raw


# -- unsafe-libc import surface ----------------------------------------------


class LabEnv:
    """Host side of the guest import surface.

    Owns the allocator, the hardening switches, the canary guard sites,
    and the deterministic nonce source.  Works over any memory object
    with the LinearMemory read/write surface, local or remote.
    """

    def __init__(self, mem, scenario: str, variant: str, hardening: HardeningConfig):
        self.mem = mem
        self.scenario = scenario
        self.variant = variant
        self.hardening = hardening
        self.alloc = AllocatorState(heap_base=RegionMap().heap_base, config=hardening)
        self.guards = layout.guard_sites(scenario, hardening.canaries)
        self.frame = layout.build_frame(scenario, hardening.canaries)
        self.nonce_rng = random.Random(layout.NONCE_SEED)
        self.last_format_output = ""

    # each method below is one guest import

    def copy_unsafe(self, dst: int, cap: int, src: int, length: int) -> int:
        data = self.mem.read(src, length)
        if self.hardening.checked_copy:
            written, _truncated = memcpy_checked(self.mem, dst, data, cap)
            return written
        saved = [(g, self.mem.read(g.span_addr, g.span_len)) for g in self.guards]
        written = memcpy_unchecked(self.mem, dst, data, cap)
        for site, span_image in saved:
            if self.mem.read_u32(site.guard_addr) != CANARY_WORD:
                # modeled abort: the shielded span never becomes visible
                # in its corrupted form
                self.mem.write(site.span_addr, span_image)
                self.mem.write_u32(site.guard_addr, CANARY_WORD)
                raise CanaryClobbered(
                    f"guard at {site.guard_addr:#x} clobbered by copy to {dst:#x}"
                )
        return written

    def copy_bounded(self, dst: int, cap: int, src: int, length: int) -> int:
        data = self.mem.read(src, length)
        written, _truncated = memcpy_checked(self.mem, dst, data, cap)
        return written

    def copy_exact(self, dst: int, src: int, length: int) -> int:
        self.mem.write(dst, self.mem.read(src, length))
        return length

    def malloc(self, n: int) -> int:
        return heap_malloc(self.alloc, self.mem, n)

    def free(self, addr: int) -> int:
        heap_free(self.alloc, self.mem, addr)
        return 0

    def fmt_exec(self, fmt_addr: int, a0: int, a1: int) -> int:
        text = self.mem.read_cstring(fmt_addr, layout.FMT_REGION_LEN)
        prog = parse_format(text)
        args = [a0, a1]
        if self.hardening.boundary_validation:
            lo = layout.FMT_SCRATCH
            hi = lo + layout.FMT_REGION_LEN
            for item in prog.items:
                if item[0] == "spec" and item[1] == "n" and item[2] < len(args):
                    target = args[item[2]]
                    if not (lo <= target and target + 4 <= hi):
                        raise BoundaryRejected(
                            f"%n target {target:#x} outside the format scratch region"
                        )
        out = mini_printf(self.mem, prog, args)
        self.last_format_output = out
        return len(out)

    def gen_nonce(self, dst: int) -> int:
        text = "".join(self.nonce_rng.choice("0123456789abcdef") for _ in range(16))
        self.mem.write(dst, text.encode("ascii") + b"\x00")
        return 16

    # ------------------------------------------------------------------

    def serve_import(self, name: str, args: Sequence[int]) -> int:
        fn = getattr(self, name, None)
        if fn is None or name.startswith("_") or name in ("serve_import", "setup"):
            raise NoSuchExport(f"no such import {name!r}")
        return int(fn(*args)) & U32_MASK

    def setup(self, write_segments: bool) -> None:
        """Initialize scenario memory.

        Static data segments are written only for the simulator; the
        WebAssembly modules carry their own, and the differential tests
        prove they agree.  Everything variant- or hardening-dependent is
        written here for both backends.
        """
        mem = self.mem
        if write_segments:
            for addr, blob in layout.static_image(self.scenario):
                mem.write(addr, blob)
        mem.write_u32(layout.G_VARIANT, layout.VARIANT_CODES[self.variant])
        for word in (
            layout.G_LIVE,
            layout.G_INPUT_LEN,
            layout.G_ADDR_A,
            layout.G_ADDR_B,
            layout.G_ADDR_C,
        ):
            mem.write_u32(word, 0)
        for site in self.guards:
            mem.write_u32(site.guard_addr, CANARY_WORD)

        template = layout.T_PLAIN.encode() + b"\x00"
        if self.scenario == "sqli":
            if self.variant == "bof":
                addr = self.frame.addr_of("query")
                mem.write(addr, template)
            elif self.variant == "ufs":
                addr = layout.SQLI_TEMPLATE_ADDR
            elif self.variant == "iof":
                addr = layout.SQLI_SLOTTED_ADDR
            else:  # uaf: the query template lives on the heap
                addr = self.malloc(layout.TEMPLATE_CAP)
                mem.write(addr, template)
                mem.write_u32(layout.G_LIVE, 1)
            mem.write_u32(layout.G_ADDR_A, addr)
        elif self.scenario == "ssti":
            if self.variant == "bof":
                mem.write_u32(layout.G_ADDR_A, self.frame.addr_of("nonce"))
            elif self.variant == "ufs":
                # generated once and kept static between requests
                self.gen_nonce(layout.SSTI_STATIC_NONCE_ADDR)
                mem.write_u32(layout.G_ADDR_A, layout.SSTI_STATIC_NONCE_ADDR)
            # uaf allocates lazily on first use; G_ADDR_A stays 0
        elif self.scenario == "xsleak":
            if self.variant == "bof":
                mem.write_u32(layout.G_ADDR_A, layout.XSLEAK_PATTERN_ADDR)
            else:  # uaf: the live pattern is a heap copy of the default
                addr = self.malloc(layout.PATTERN_CAP)
                mem.write(addr, layout.DEFAULT_PATTERN.encode() + b"\x00")
                mem.write_u32(layout.G_ADDR_A, addr)
                mem.write_u32(layout.G_LIVE, 1)


# -- simulator backend -------------------------------------------------------


class SimBackend:
    kind = "sim"

    def __init__(self, scenario: str, variant: str, hardening: HardeningConfig):
        layout.check_combination(scenario, variant)
        self.scenario = scenario
        self.variant = variant
        self.mem = LinearMemory(pages=2)
        self.env = LabEnv(self.mem, scenario, variant, hardening)
        self.env.setup(write_segments=True)
        self._exports: Dict[str, Callable] = guestsim.EXPORTS[scenario]
        self._ctx = guestsim.GuestContext(self.env)

    @property
    def export_names(self) -> Tuple[str, ...]:
        return tuple(sorted(self._exports))

    def call_export(self, name: str, args: Sequence[int] = ()) -> int:
        fn = self._exports.get(name)
        if fn is None:
            raise NoSuchExport(f"{self.scenario} module exports no {name!r}")
        want = fn.__code__.co_argcount - 1
        if len(args) != want:
            raise ValueError(f"{name} takes {want} args, got {len(args)}")
        try:
            ret = fn(self._ctx, *args)
        except OutOfBounds as exc:
            # a linear-memory overrun inside a guest call is a trap
            raise GuestTrap(
                f"linear memory access faulted during {name}", cause=exc
            ) from exc
        return int(ret) & U32_MASK

    def snapshot(self) -> Snapshot:
        return Snapshot(self.mem.snapshot(), Snapshot.meta_text(self.env.alloc))

    def close(self) -> None:
        pass


# -- WebAssembly backend -----------------------------------------------------


class RemoteMemory:
    """LinearMemory surface over the runner's RPC read/write primitives."""

    def __init__(self, rpc: "_NodeRpc"):
        self._rpc = rpc
        self._size = rpc.size()

    @property
    def size(self) -> int:
        return self._size

    def _check(self, addr: int, n: int) -> None:
        if not isinstance(addr, int) or not isinstance(n, int):
            raise TypeError("addr and length must be int")
        if addr < 0 or n < 0 or addr > U32_MASK:
            raise OutOfBounds(f"addr={addr} n={n}")
        if addr + n > self._size:
            raise OutOfBounds(f"range [{addr}, {addr + n}) exceeds size {self._size}")

    def read(self, addr: int, n: int) -> bytes:
        self._check(addr, n)
        return self._rpc.read(addr, n)

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        self._rpc.write(addr, bytes(data))

    def read_u32(self, addr: int) -> int:
        return u32(self.read(addr, 4))

    def write_u32(self, addr: int, value: int) -> None:
        self.write(addr, le32(value))

    def read_cstring(self, addr: int, max_scan: int) -> str:
        # same contract as LinearMemory.read_cstring
        self._check(addr, 0)
        window_end = addr + max_scan
        clipped = min(window_end, self._size)
        chunk = self.read(addr, clipped - addr)
        pos = chunk.find(0)
        if pos < 0:
            if window_end > self._size:
                raise OutOfBounds(f"string at {addr:#x} runs past end of memory")
            raise UnterminatedString(f"no NUL within {max_scan} bytes of {addr:#x}")
        return chunk[:pos].decode("latin-1")

    def snapshot(self) -> bytes:
        return _raw_to_snapshot_blob(self.read(0, self._size))


class _NodeRpc:
    """Line-JSON conversation with the Node guest runner."""

    def __init__(self, runner: Path, module_path: Path):
        node = shutil.which("node")
        if node is None:
            raise InstantiateFailed("node runtime not found on PATH")
        try:
            self.proc = subprocess.Popen(
                [node, str(runner), str(module_path)],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise InstantiateFailed(f"could not spawn runner: {exc}") from exc
        hello = self._read()
        if not hello.get("ready"):
            raise InstantiateFailed(f"runner refused module: {hello}")
        self.exports = tuple(hello.get("exports", ()))
        self._memory_size = int(hello["size"])

    def _read(self) -> dict:
        line = self.proc.stdout.readline()
        if not line:
            err = ""
            if self.proc.stderr is not None:
                err = self.proc.stderr.read()[-1000:]
            raise InstantiateFailed(f"runner exited unexpectedly: {err.strip()}")
        return json.loads(line)

    def _send(self, obj: dict) -> None:
        self.proc.stdin.write(json.dumps(obj) + "\n")
        self.proc.stdin.flush()

    def request(self, obj: dict, import_handler=None) -> dict:
        self._send(obj)
        while True:
            msg = self._read()
            if "import" in msg:
                name = msg["import"]
                args = msg.get("args", [])
                try:
                    ret = import_handler(name, args)
                    self._send({"ret": int(ret) & U32_MASK})
                except LabFault as fault:
                    self._send({"fault": fault.code, "detail": fault.detail})
                continue
            return msg

    def size(self) -> int:
        return self._memory_size

    def read(self, addr: int, n: int) -> bytes:
        resp = self.request({"op": "read", "addr": addr, "len": n})
        if "error" in resp:
            raise OutOfBounds(str(resp["error"]))
        return base64.b64decode(resp["data"])

    def write(self, addr: int, data: bytes) -> None:
        resp = self.request(
            {"op": "write", "addr": addr, "data": base64.b64encode(data).decode()}
        )
        if "error" in resp:
            raise OutOfBounds(str(resp["error"]))

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self._send({"op": "exit"})
                self.proc.wait(timeout=3)
            except Exception:
                self.proc.kill()
        for stream in (self.proc.stdin, self.proc.stdout, self.proc.stderr):
            if stream is not None:
                stream.close()


def _default_module_dir() -> Optional[Path]:
    env_dir = os.environ.get("WASMLAB_GUEST_DIR")
    if env_dir:
        return Path(env_dir)
    for candidate in (Path.cwd() / "guests" / "build",
                      Path(__file__).resolve().parents[2] / "guests" / "build"):
        if candidate.is_dir():
            return candidate
    return None


class WasmBackend:
    kind = "wasm"

    def __init__(
        self,
        scenario: str,
        variant: str,
        hardening: HardeningConfig,
        module_path: Optional[Path] = None,
    ):
        layout.check_combination(scenario, variant)
        self.scenario = scenario
        self.variant = variant
        if module_path is None:
            module_dir = _default_module_dir()
            if module_dir is None:
                raise InstantiateFailed(
                    "no guest module directory; build guests/ or set WASMLAB_GUEST_DIR"
                )
            module_path = module_dir / f"{scenario}.wasm"
        module_path = Path(module_path)
        if not module_path.is_file():
            raise InstantiateFailed(f"guest module {module_path} does not exist")
        runner = Path(__file__).resolve().parent / "runner" / "guest_host.mjs"
        self._rpc = _NodeRpc(runner, module_path)
        self.mem = RemoteMemory(self._rpc)
        self.env = LabEnv(self.mem, scenario, variant, hardening)
        self.env.setup(write_segments=False)

    @property
    def export_names(self) -> Tuple[str, ...]:
        return tuple(sorted(self._rpc.exports))

    def call_export(self, name: str, args: Sequence[int] = ()) -> int:
        if name not in self._rpc.exports:
            raise NoSuchExport(f"{self.scenario} module exports no {name!r}")
        resp = self._rpc.request(
            {"op": "call", "name": name, "args": [int(a) & U32_MASK for a in args]},
            import_handler=self.env.serve_import,
        )
        if "error" in resp:
            err = resp["error"]
            code = err.get("fault")
            detail = err.get("detail", "")
            if code == "EOOB":
                cause = _fault_from_code(code, detail)
                raise GuestTrap(
                    f"linear memory access faulted during {name}", cause=cause
                )
            if code:
                raise _fault_from_code(code, detail)
            raise GuestTrap(f"guest trap during {name}: {err.get('message', err)}")
        return int(resp["ret"]) & U32_MASK

    def snapshot(self) -> Snapshot:
        return Snapshot(self.mem.snapshot(), Snapshot.meta_text(self.env.alloc))

    def close(self) -> None:
        self._rpc.close()


def instantiate(
    kind: str,
    scenario: str,
    hardening: Optional[HardeningConfig] = None,
    variant: str = "bof",
    module_path: Optional[Path] = None,
):
    """Build a backend with the scenario layout initialized."""
    if hardening is None:
        hardening = HardeningConfig()
    if kind == "sim":
        return SimBackend(scenario, variant, hardening)
    if kind == "wasm":
        return WasmBackend(scenario, variant, hardening, module_path=module_path)
    raise BadConfig(f"unknown backend kind {kind!r}")


# -- scripted call lists -----------------------------------------------------


@dataclass(frozen=True)
class ScriptConfig:
    scenario: str
    variant: str
    hardening: HardeningConfig


def parse_script(text: str) -> Tuple[ScriptConfig, List[tuple]]:
    """Parse a line-oriented attack script.

    Directives: SCENARIO s, VARIANT v, HARDEN flag[,flag]|none, then any
    of CALL name arg..., WRITE addr hexbytes, EXPECT_SNAPSHOT file.
    '#' starts a comment.  Addresses and args accept 0x-prefixed hex.
    """
    scenario = None
    variant = None
    flags: Dict[str, bool] = {}
    ops: List[tuple] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        word = parts[0].upper()
        try:
            if word == "SCENARIO":
                scenario = parts[1]
            elif word == "VARIANT":
                variant = parts[1]
            elif word == "HARDEN":
                for flag in parts[1].split(","):
                    if flag and flag != "none":
                        flags[flag] = True
            elif word == "CALL":
                ops.append(("call", parts[1], [int(tok, 0) for tok in parts[2:]]))
            elif word == "WRITE":
                ops.append(("write", int(parts[1], 0), bytes.fromhex(parts[2])))
            elif word == "EXPECT_SNAPSHOT":
                ops.append(("expect_snapshot", parts[1]))
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"script line {lineno}: {exc}") from exc
    if scenario is None or variant is None:
        raise ValueError("script must declare SCENARIO and VARIANT")
    try:
        hardening = HardeningConfig(**flags)
    except TypeError as exc:
        raise ValueError(f"unknown hardening flag: {exc}") from exc
    return ScriptConfig(scenario, variant, hardening), ops


def run_script(
    backend,
    ops: Sequence[tuple],
    base_dir: Optional[Path] = None,
    update_golden: bool = False,
) -> List[dict]:
    results: List[dict] = []
    for op in ops:
        tag = op[0]
        if tag == "call":
            _tag, name, args = op
            try:
                ret = backend.call_export(name, args)
                results.append({"op": "call", "name": name, "ret": ret})
            except LabFault as fault:
                results.append({"op": "call", "name": name, "fault": fault.code})
        elif tag == "write":
            _tag, addr, data = op
            backend.mem.write(addr, data)
            results.append({"op": "write", "addr": addr, "len": len(data)})
        elif tag == "expect_snapshot":
            _tag, fname = op
            blob = backend.snapshot().to_bytes()
            path = Path(fname) if base_dir is None else Path(base_dir) / fname
            if path.is_file():
                entry = {
                    "op": "expect_snapshot",
                    "file": fname,
                    "match": path.read_bytes() == blob,
                }
            elif update_golden:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(blob)
                entry = {"op": "expect_snapshot", "file": fname, "match": True,
                         "created": True}
            else:
                entry = {"op": "expect_snapshot", "file": fname, "match": False,
                         "missing": True}
            results.append(entry)
        else:
            raise ValueError(f"unknown op {tag!r}")
    return results


def diff_outcomes(
    script_text: str,
    base_dir: Optional[Path] = None,
    kinds: Tuple[str, str] = ("sim", "wasm"),
    module_path: Optional[Path] = None,
) -> dict:
    """Run one script on two backends and compare everything observable."""
    config, ops = parse_script(script_text)
    runs = []
    for kind in kinds:
        backend = instantiate(
            kind,
            config.scenario,
            config.hardening,
            variant=config.variant,
            module_path=module_path if kind == "wasm" else None,
        )
        try:
            results = run_script(backend, ops, base_dir=base_dir)
            snap = backend.snapshot()
        finally:
            backend.close()
        runs.append((results, snap))
    (res_a, snap_a), (res_b, snap_b) = runs
    mismatches = []
    for idx, (a, b) in enumerate(zip(res_a, res_b)):
        if a != b:
            mismatches.append({"index": idx, kinds[0]: a, kinds[1]: b})
    snapshots_equal = snap_a == snap_b
    return {
        "scenario": config.scenario,
        "variant": config.variant,
        "kinds": list(kinds),
        "ops": len(ops),
        "mismatches": mismatches,
        "snapshots_equal": snapshots_equal,
        "identical": not mismatches and snapshots_equal,
    }
