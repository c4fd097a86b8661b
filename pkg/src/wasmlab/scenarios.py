"""Stateful web-application flows layered over a guest backend.

Each ScenarioState owns one instantiated guest plus the host-side pieces a
real deployment would add around it: a prepared statement frozen at startup,
a page body, a search endpoint with session checks. The frontend policy
models the first line of defense a conventional web framework provides, as
opposed to the memory-level hardening toggles that live in the guest runtime.
"""

from __future__ import annotations

import importlib.resources
import threading
import time
from dataclasses import dataclass
from typing import Optional

from .faults import (
    BadConfig,
    Forbidden,
    BoundaryRejected,
    PayloadTooLarge,
    RegexSyntax,
)
from .layout import (
    FMT_REGION_LEN,
    FMT_SCRATCH,
    INPUT_MAX,
    INPUT_STAGE,
    NONCE_CAP,
    PATTERN_CAP,
    PLANTED_SECRET,
    TEMPLATE_CAP,
    T_PLAIN,
    T_SLOTTED,
    XSLEAK_SLOT_COUNT,
    XSLEAK_SLOT_SIZE,
    check_combination,
    slot_addr,
)
from .linmem import HardeningConfig, narrow_u32
from .host import instantiate
from . import miniquery
from .minitemplate import render_page
from .regexlite import DEFAULT_MAX_STEPS, StepBudget, match_pattern

# Characters stripped from honest search terms before they reach the pattern
# buffer. Everything that carries structure in the pattern language.
PATTERN_METACHARS = "^$.()*+{}"

DEFAULT_AUTH_TOKEN = "victim-session-9b1c"


@dataclass
class FrontendPolicy:
    """Checks the application tier applies before anything touches the guest.

    id_nonzero_check rejects lookups for the reserved id 0 row. The check
    runs on the value as received, before any width narrowing, which is
    exactly the gap the overflow lookup walks through.

    pattern_sanitizer strips regex metacharacters from search terms, so the
    text path cannot plant a pathological pattern. auth_token is the victim
    session credential the search endpoint demands.
    """

    id_nonzero_check: bool = True
    pattern_sanitizer: bool = True
    safe_nonce: bool = False
    auth_token: str = DEFAULT_AUTH_TOKEN


@dataclass
class ResponseEnvelope:
    """What a caller of the search endpoint can observe.

    body_out is intentionally constant for searches. steps is populated only
    in deterministic test mode; production-shaped runs leave it None and the
    caller falls back to elapsed wall time.
    """

    route: str
    status: int
    body_out: str
    elapsed: float
    steps: Optional[int] = None


def _users_table_path():
    return importlib.resources.files("wasmlab") / "data" / "users.tab"


def _encode_braces(text: str) -> str:
    """Entity-encode braces so encoded text cannot open an interpolation."""
    return text.replace("{", "&#123;").replace("}", "&#125;")


class ScenarioState:
    """One deployed application instance: guest backend plus host fixtures."""

    def __init__(
        self,
        scenario: str,
        variant: str,
        hardening: Optional[HardeningConfig] = None,
        policy: Optional[FrontendPolicy] = None,
        backend_kind: str = "sim",
        module_path=None,
        step_budget: int = DEFAULT_MAX_STEPS,
        test_mode: bool = True,
    ):
        check_combination(scenario, variant)
        self.scenario = scenario
        self.variant = variant
        self.hardening = hardening if hardening is not None else HardeningConfig()
        self.policy = policy if policy is not None else FrontendPolicy()
        self.backend = instantiate(
            backend_kind, scenario, self.hardening, variant=variant,
            module_path=module_path)
        self.step_budget = step_budget
        self.test_mode = test_mode
        self.lock = threading.RLock()
        self.requests = 0

        if scenario == "sqli":
            store = miniquery.load_tables_file(_users_table_path())
            template = T_SLOTTED if variant == "iof" else T_PLAIN
            self.statement = miniquery.prepare(store, template)
        elif scenario == "ssti":
            self.body_text = "welcome back"
        elif scenario == "xsleak":
            # The timing oracle needs enough secret length that a prefix
            # probe has headroom; the planted fixture guarantees it.
            assert len(PLANTED_SECRET) >= 21

    # -- shared helpers ------------------------------------------------------

    def _stage(self, payload: bytes) -> int:
        """Copy payload to the staging area, returning length incl. NUL."""
        if len(payload) > INPUT_MAX:
            raise PayloadTooLarge(
                f"payload {len(payload)} exceeds {INPUT_MAX}")
        self.backend.mem.write(INPUT_STAGE, payload + b"\x00")
        return len(payload) + 1

    def _call(self, name: str, args=()):
        return self.backend.call_export(name, list(args))

    def snapshot(self):
        with self.lock:
            return self.backend.snapshot()

    def close(self) -> None:
        close = getattr(self.backend, "close", None)
        if close is not None:
            close()

    # -- query scenario ------------------------------------------------------

    def sqli_set_token(self, token: bytes) -> dict:
        with self.lock:
            self.requests += 1
            length = self._stage(token)
            self._call("sqli_set_token", [INPUT_STAGE, length])
            return {"ok": True, "length": len(token)}

    def sqli_lookup(self, user_id: int) -> miniquery.QueryResult:
        """Look a user up by id, running whatever template memory holds.

        The frontend check sees the id exactly as received; the guest only
        ever sees the narrowed 32-bit value.
        """
        with self.lock:
            self.requests += 1
            if self.policy.id_nonzero_check and user_id == 0:
                raise Forbidden("id 0 is reserved")
            if self.hardening.boundary_validation and not (0 < user_id < 2 ** 31):
                raise BoundaryRejected(f"id {user_id} outside (0, 2^31)")
            narrowed = narrow_u32(user_id)
            query_addr = self._call("sqli_get_query_addr")
            template_now = self.backend.mem.read_cstring(query_addr, TEMPLATE_CAP)
            bindings = [narrowed] if self.variant == "iof" else []
            return miniquery.execute(
                self.statement, template_now, bindings,
                integrity=self.hardening.template_integrity)

    # -- format echo surface -------------------------------------------------

    def fmt_request(self, fmt_text: str, a0: int = 0, a1: int = 0) -> dict:
        """Echo a diagnostic format string through the guest formatter."""
        with self.lock:
            self.requests += 1
            data = fmt_text.encode("latin-1")
            if len(data) >= FMT_REGION_LEN:
                raise PayloadTooLarge(
                    f"format {len(data)} exceeds {FMT_REGION_LEN - 1}")
            self.backend.mem.write(FMT_SCRATCH, data + b"\x00")
            length = self._call("fmt_echo", [FMT_SCRATCH, a0, a1])
            return {"output": self.backend.env.last_format_output,
                    "length": length}

    # -- template scenario ---------------------------------------------------

    def ssti_set_input(self, text: str) -> dict:
        with self.lock:
            self.requests += 1
            data = text.encode("latin-1")
            length = self._stage(data)
            self._call("ssti_set_input", [INPUT_STAGE, length])
            self.body_text = text
            return {"ok": True, "length": len(data)}

    def ssti_free_nonce(self) -> dict:
        with self.lock:
            self.requests += 1
            self._call("ssti_free_nonce")
            return {"ok": True}

    def ssti_render(self) -> dict:
        """Build and render the page around the guest-produced nonce.

        The body goes through output encoding, the standard framework
        defense, so user text can never become template code on that path.
        The nonce is treated as a trusted server value and skips encoding,
        which is why corrupting it is worth an attacker's time.
        """
        with self.lock:
            self.requests += 1
            addr = self._call("ssti_make_nonce")
            nonce = self.backend.mem.read_cstring(addr, NONCE_CAP)
            body = _encode_braces(self.body_text)
            report = render_page(nonce, body,
                                 safe_nonce=self.policy.safe_nonce)
            return {"page": report.output, "evaluated": report.evaluated,
                    "ace": report.ace, "nonce": nonce}

    # -- search scenario -----------------------------------------------------

    def xsleak_store_secret(self, slot: int, secret: bytes) -> dict:
        with self.lock:
            self.requests += 1
            if not 0 <= slot < XSLEAK_SLOT_COUNT:
                raise BadConfig(f"slot {slot} outside 0..{XSLEAK_SLOT_COUNT - 1}")
            length = self._stage(secret)
            self._call("xsleak_store_secret", [slot, INPUT_STAGE, length])
            return {"ok": True, "slot": slot}

    def xsleak_free_pattern(self) -> dict:
        with self.lock:
            self.requests += 1
            self._call("xsleak_free_pattern")
            return {"ok": True}

    def xsleak_search(self, term: Optional[str] = None,
                      requester: str = "victim",
                      auth: Optional[str] = None) -> ResponseEnvelope:
        """Run the victim-session search and answer with a constant body.

        A request with a term writes the sanitized term into the pattern
        field first; a bare request reuses whatever the field already holds.
        Match outcome never reaches the response. The only externally
        observable signal is time, plus the step count in test mode.
        """
        with self.lock:
            self.requests += 1
            if requester != "victim":
                raise Forbidden("search only runs in the victim session")
            if auth != self.policy.auth_token:
                raise Forbidden("missing or wrong session token")
            pattern_addr = self._call("xsleak_get_pattern_addr")
            if term is not None:
                cleaned = term
                if self.policy.pattern_sanitizer:
                    cleaned = "".join(
                        ch for ch in term if ch not in PATTERN_METACHARS)
                data = cleaned.encode("latin-1")[:PATTERN_CAP - 1]
                self.backend.mem.write(pattern_addr, data + b"\x00")
            pattern = self.backend.mem.read_cstring(pattern_addr, PATTERN_CAP)
            secret = self.backend.mem.read_cstring(
                slot_addr(0), XSLEAK_SLOT_SIZE)
            started = time.perf_counter()
            try:
                outcome = match_pattern(pattern, secret,
                                        StepBudget(self.step_budget))
                steps = outcome.steps
            except RegexSyntax:
                # A broken pattern is rejected before the engine runs. The
                # response stays identical; only the cost collapses.
                steps = 0
            elapsed = time.perf_counter() - started
            return ResponseEnvelope(
                route="/xsleak/search", status=200, body_out="ok",
                elapsed=elapsed, steps=steps if self.test_mode else None)
