"""HTTP frontend for one deployed scenario.

create_app builds a FastAPI application around a single ScenarioState, so a
served instance looks like one small production app: a lookup service, a
page server, or a search service. Guest faults surface as JSON error bodies
with stable codes; the search route keeps its constant-body contract.

Configuration is a plain key=value file. LAB_PORT overrides the port.
"""

from __future__ import annotations

import os
from typing import Optional

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import HTMLResponse, JSONResponse, PlainTextResponse
from pydantic import BaseModel

from .faults import BadConfig, LabFault
from .linmem import HardeningConfig
from .scenarios import FrontendPolicy, ScenarioState

DEFAULT_PORT = 8000

# Fault code to HTTP status. Anything unlisted is a server-side failure.
STATUS_BY_CODE = {
    "EFORBIDDEN": 403,
    "EBOUNDARY": 422,
    "ESIZE": 413,
    "ECONFIG": 400,
    "ENOEXPORT": 404,
    "EUNSUPPORTED": 400,
    "EREGEX": 400,
}

_HARDENING_KEYS = ("canaries", "checked_copy", "quarantine_and_zero",
                   "template_integrity", "boundary_validation")
_POLICY_BOOL_KEYS = ("id_nonzero_check", "pattern_sanitizer", "safe_nonce")
_STR_KEYS = ("scenario", "variant", "backend", "module", "auth_token")
_INT_KEYS = ("port", "step_budget")
_BOOL_KEYS = _HARDENING_KEYS + _POLICY_BOOL_KEYS + ("test_mode",)


def _parse_bool(key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise BadConfig(f"{key} wants a boolean, got {raw!r}")


def load_config(path) -> dict:
    """Parse a key=value config file into a typed dict."""
    config: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise BadConfig(f"line {lineno}: expected key=value")
            key, _, raw = text.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key in _BOOL_KEYS:
                config[key] = _parse_bool(key, raw)
            elif key in _INT_KEYS:
                try:
                    config[key] = int(raw, 0)
                except ValueError:
                    raise BadConfig(f"{key} wants an integer, got {raw!r}")
            elif key in _STR_KEYS:
                config[key] = raw
            else:
                raise BadConfig(f"line {lineno}: unknown key {key!r}")
    return config


def state_from_config(config: dict) -> ScenarioState:
    if "scenario" not in config or "variant" not in config:
        raise BadConfig("config needs scenario= and variant=")
    hardening = HardeningConfig(
        **{k: config[k] for k in _HARDENING_KEYS if k in config})
    policy = FrontendPolicy(
        **{k: config[k] for k in _POLICY_BOOL_KEYS if k in config})
    if "auth_token" in config:
        policy.auth_token = config["auth_token"]
    kwargs = {}
    if "step_budget" in config:
        kwargs["step_budget"] = config["step_budget"]
    if "test_mode" in config:
        kwargs["test_mode"] = config["test_mode"]
    if "module" in config:
        kwargs["module_path"] = config["module"]
    return ScenarioState(
        config["scenario"], config["variant"], hardening=hardening,
        policy=policy, backend_kind=config.get("backend", "sim"), **kwargs)


def resolve_port(explicit: Optional[int], config: dict) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get("LAB_PORT")
    if env:
        return int(env)
    return config.get("port", DEFAULT_PORT)


# -- request bodies ----------------------------------------------------------


class TokenBody(BaseModel):
    token: str


class FmtBody(BaseModel):
    fmt: str
    a0: int = 0
    a1: int = 0


class InputBody(BaseModel):
    text: str


class SecretBody(BaseModel):
    slot: int
    secret: str


class SearchBody(BaseModel):
    term: Optional[str] = None
    requester: str = "victim"
    auth: Optional[str] = None


def _latin1(text: str) -> bytes:
    try:
        return text.encode("latin-1")
    except UnicodeEncodeError:
        raise HTTPException(status_code=400,
                            detail="payload bytes must be latin-1")


# -- application -------------------------------------------------------------


def create_app(state: ScenarioState) -> FastAPI:
    app = FastAPI(title=f"lab-{state.scenario}", docs_url=None,
                  redoc_url=None, openapi_url=None)
    app.state.lab = state

    @app.exception_handler(LabFault)
    async def _fault_handler(_request: Request, exc: LabFault):
        status = STATUS_BY_CODE.get(exc.code, 500)
        return JSONResponse(status_code=status,
                            content={"error": exc.code, "detail": str(exc)})

    @app.get("/health")
    def health():
        return PlainTextResponse("ok")

    if state.scenario == "sqli":
        @app.post("/sqli/token")
        def set_token(body: TokenBody):
            return state.sqli_set_token(_latin1(body.token))

        @app.get("/sqli/lookup")
        def lookup(id: int = Query(...)):
            result = state.sqli_lookup(id)
            return {"columns": result.columns, "rows": result.rows}

        @app.post("/sqli/fmt")
        def sqli_fmt(body: FmtBody):
            return state.fmt_request(body.fmt, body.a0, body.a1)

    elif state.scenario == "ssti":
        @app.post("/ssti/input")
        def set_input(body: InputBody):
            _latin1(body.text)
            return state.ssti_set_input(body.text)

        @app.post("/ssti/free")
        def free_nonce():
            return state.ssti_free_nonce()

        @app.get("/ssti/page")
        def page():
            r = state.ssti_render()
            headers = {}
            if state.test_mode:
                headers["x-lab-evaluated"] = str(r["evaluated"])
                headers["x-lab-ace"] = "true" if r["ace"] else "false"
            return HTMLResponse(r["page"], headers=headers)

        @app.post("/ssti/fmt")
        def ssti_fmt(body: FmtBody):
            return state.fmt_request(body.fmt, body.a0, body.a1)

    elif state.scenario == "xsleak":
        @app.post("/xsleak/secret")
        def store_secret(body: SecretBody):
            return state.xsleak_store_secret(body.slot, _latin1(body.secret))

        @app.post("/xsleak/free")
        def free_pattern():
            return state.xsleak_free_pattern()

        @app.post("/xsleak/search")
        def run_search(body: SearchBody):
            env = state.xsleak_search(term=body.term,
                                      requester=body.requester,
                                      auth=body.auth)
            headers = {}
            if env.steps is not None:
                headers["x-lab-steps"] = str(env.steps)
            return PlainTextResponse(env.body_out, status_code=env.status,
                                     headers=headers)

    return app


def serve(config_path, port: Optional[int] = None,
          host: str = "127.0.0.1") -> None:
    """Run one configured scenario service until interrupted."""
    import uvicorn

    config = load_config(config_path)
    state = state_from_config(config)
    app = create_app(state)
    uvicorn.run(app, host=host, port=resolve_port(port, config),
                log_level="warning")
