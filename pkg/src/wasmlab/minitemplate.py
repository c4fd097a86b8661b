"""String-template renderer with interpolation, the injection sink.

Interpolations look like #{expr}.  Expressions are integer arithmetic with
truncating division, identifiers resolved from a caller context, or the
exec(...) form.  exec never runs anything: it appends the "[ACE]" marker to
the output and raises a flag in the report, which is all the evidence an
injection chain needs.

build_page splices a nonce into the page source before compilation.  That
ordering is the deliberate flaw: a nonce containing #{...} becomes live
template code.  The safe variant renders first and only then substitutes
the nonce into the finished output as inert text.
"""

from __future__ import annotations

from dataclasses import dataclass

from .faults import DivisionByZero, TemplateSyntax

PAGE_TEMPLATE = ('<html><body><p>{body}</p>'
                 '<script nonce="{nonce}">boot();</script></body></html>')

_SAFE_SLOT = "\x00NONCE\x00"

ACE_MARKER = "[ACE]"


@dataclass
class RenderReport:
    output: str
    evaluated: int
    ace: bool


# -- expression evaluation --------------------------------------------------

def _trunc_div(a: int, b: int) -> int:
    if b == 0:
        raise DivisionByZero(f"{a} / 0")
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


class _ExprParser:
    """Recursive descent over +, -, *, /, parens, ints and context names."""

    def __init__(self, text: str, context: dict):
        self.text = text
        self.context = context
        self.pos = 0

    def _skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] == " ":
            self.pos += 1

    def _peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> int:
        value = self._expr()
        self._skip_ws()
        if self.pos != len(self.text):
            raise TemplateSyntax(f"trailing text in expression: {self.text[self.pos:]!r}")
        return value

    def _expr(self) -> int:
        value = self._term()
        while self._peek() in ("+", "-"):
            op = self.text[self.pos]
            self.pos += 1
            rhs = self._term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def _term(self) -> int:
        value = self._factor()
        while self._peek() in ("*", "/"):
            op = self.text[self.pos]
            self.pos += 1
            rhs = self._factor()
            value = value * rhs if op == "*" else _trunc_div(value, rhs)
        return value

    def _factor(self) -> int:
        ch = self._peek()
        if ch == "-":
            self.pos += 1
            return -self._factor()
        if ch == "(":
            self.pos += 1
            value = self._expr()
            if self._peek() != ")":
                raise TemplateSyntax("missing )")
            self.pos += 1
            return value
        if ch.isdigit():
            j = self.pos
            while j < len(self.text) and self.text[j].isdigit():
                j += 1
            value = int(self.text[self.pos:j])
            self.pos = j
            return value
        if ch.isalpha() or ch == "_":
            j = self.pos
            while j < len(self.text) and (self.text[j].isalnum() or self.text[j] == "_"):
                j += 1
            name = self.text[self.pos:j]
            self.pos = j
            if name not in self.context:
                raise TemplateSyntax(f"unknown name {name!r}")
            return self.context[name]
        raise TemplateSyntax(f"unexpected character {ch!r} in expression")


def _eval_interpolation(body: str, context: dict) -> tuple[str, bool]:
    """Returns (rendered text, ace flag) for one #{...} body."""
    stripped = body.strip()
    if stripped.startswith("exec(") and stripped.endswith(")"):
        return ACE_MARKER, True
    return str(_ExprParser(body, context).parse()), False


def compile_and_render(source: str, context: dict | None = None) -> RenderReport:
    """Scan source for #{...} spans and evaluate each in order."""
    context = context or {}
    out = []
    evaluated = 0
    ace = False
    i = 0
    while i < len(source):
        ch = source[i]
        if ch == "#" and i + 1 < len(source) and source[i + 1] == "{":
            close = source.find("}", i + 2)
            if close < 0:
                raise TemplateSyntax(f"unterminated interpolation at offset {i}")
            body = source[i + 2:close]
            text, was_ace = _eval_interpolation(body, context)
            out.append(text)
            evaluated += 1
            ace = ace or was_ace
            i = close + 1
            continue
        out.append(ch)
        i += 1
    return RenderReport(output="".join(out), evaluated=evaluated, ace=ace)


# -- page assembly ----------------------------------------------------------

def build_page(nonce: str, body: str) -> str:
    """Vulnerable page build: nonce joins the source before compilation."""
    return PAGE_TEMPLATE.format(body=body, nonce=nonce)


def render_page(nonce: str, body: str, context: dict | None = None,
                safe_nonce: bool = False) -> RenderReport:
    """Render the page around a nonce.

    safe_nonce renders with a placeholder and substitutes the nonce into the
    finished output, so nonce bytes can never become template code.
    """
    if not safe_nonce:
        return compile_and_render(build_page(nonce, body), context)
    report = compile_and_render(build_page(_SAFE_SLOT, body), context)
    return RenderReport(output=report.output.replace(_SAFE_SLOT, nonce),
                        evaluated=report.evaluated, ace=report.ace)
