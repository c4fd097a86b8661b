"""Backtracking regex matcher with deterministic step accounting.

The supported grammar is deliberately small: literals, ".", greedy "+"
and "*", exact repetition "{n}", non-capturing groups, and the two
anchors "^" (pattern head only) and "$" (pattern tail only).  No
alternation, no character classes, no lazy quantifiers.

Matching is classic backtracking over compiled bytecode.  Every opcode
dispatch and every backtrack counts as one step, so the step total is a
deterministic stand-in for wall-clock time.  Exact repetition is driven
by a counter, not by unrolling, and deliberately does no memoization:
catastrophic backtracking is an intended behavior here, not a bug.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

from .faults import RegexSyntax

DEFAULT_MAX_STEPS = 10_000_000

# repetition counts are carried in a u32
MAX_REPEAT = 0xFFFFFFFF


# -- AST nodes ---------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    ch: str


@dataclass(frozen=True)
class Dot:
    pass


@dataclass(frozen=True)
class AnchorStart:
    pass


@dataclass(frozen=True)
class AnchorEnd:
    pass


@dataclass(frozen=True)
class Concat:
    children: Tuple["Node", ...]


@dataclass(frozen=True)
class Group:
    child: "Node"


@dataclass(frozen=True)
class Plus:
    child: "Node"


@dataclass(frozen=True)
class Star:
    child: "Node"


@dataclass(frozen=True)
class RepeatExact:
    child: "Node"
    n: int


Node = Union[
    Literal, Dot, AnchorStart, AnchorEnd, Concat, Group, Plus, Star, RepeatExact
]


@dataclass(frozen=True)
class RegexAst:
    """Parsed pattern: the node tree plus the source text it came from."""

    root: Node
    source: str


@dataclass(frozen=True)
class StepBudget:
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("step budget must be positive")


@dataclass(frozen=True)
class MatchOutcome:
    matched: bool
    steps: int
    budget_exceeded: bool


# -- parser ------------------------------------------------------------------


def parse_regex(pattern: str) -> RegexAst:
    """Parse an ASCII pattern into an AST.

    Raises RegexSyntax (EREGEX) with a byte offset on unbalanced parens,
    a quantifier with nothing to repeat, a malformed or zero "{n}", a
    non-ASCII byte, or an anchor in the wrong position.
    """
    for i, ch in enumerate(pattern):
        if ord(ch) > 127:
            raise RegexSyntax("non-ASCII byte in pattern", offset=i)
    nodes = []
    i = 0
    if pattern.startswith("^"):
        nodes.append(AnchorStart())
        i = 1
    seq, i = _parse_seq(pattern, i, in_group=False)
    nodes.extend(seq)
    if i != len(pattern):
        # only an unbalanced ")" can stop the top-level sequence early
        raise RegexSyntax("unbalanced ')'", offset=i)
    return RegexAst(root=Concat(tuple(nodes)), source=pattern)


def _parse_seq(pat: str, i: int, in_group: bool):
    """Parse atoms until end of text or a ')'. Returns (nodes, next index)."""
    out = []
    end = len(pat)
    while i < end:
        ch = pat[i]
        if ch == ")":
            if in_group:
                return out, i
            break  # top level lets the caller report the offset
        if ch == "(":
            open_at = i
            inner, j = _parse_seq(pat, i + 1, in_group=True)
            if j >= end or pat[j] != ")":
                raise RegexSyntax("unbalanced '('", offset=open_at)
            atom: Node = Group(Concat(tuple(inner)))
            i = j + 1
        elif ch == ".":
            atom = Dot()
            i += 1
        elif ch in ("+", "*"):
            raise RegexSyntax("quantifier with nothing to repeat", offset=i)
        elif ch == "{":
            raise RegexSyntax("repetition with nothing to repeat", offset=i)
        elif ch == "^":
            raise RegexSyntax("'^' only allowed at pattern start", offset=i)
        elif ch == "$":
            if i == end - 1 and not in_group:
                out.append(AnchorEnd())
                return out, end
            raise RegexSyntax("'$' only allowed at pattern end", offset=i)
        else:
            atom = Literal(ch)
            i += 1
        # at most one quantifier; a second one falls into the branches above
        if i < end:
            q = pat[i]
            if q == "+":
                atom = Plus(atom)
                i += 1
            elif q == "*":
                atom = Star(atom)
                i += 1
            elif q == "{":
                atom, i = _parse_repeat(pat, atom, i)
        out.append(atom)
    return out, i


def _parse_repeat(pat: str, atom: Node, i: int):
    # pat[i] == "{"; digits may carry leading zeros, the value decides
    brace_at = i
    j = i + 1
    digits_at = j
    while j < len(pat) and pat[j].isdigit():
        j += 1
    if j == digits_at:
        raise RegexSyntax("repetition count must be digits", offset=brace_at)
    if j >= len(pat) or pat[j] != "}":
        raise RegexSyntax("unterminated '{n}'", offset=brace_at)
    n = int(pat[digits_at:j])
    if n < 1:
        raise RegexSyntax("repetition count must be at least 1", offset=brace_at)
    if n > MAX_REPEAT:
        raise RegexSyntax("repetition count too large", offset=brace_at)
    return RepeatExact(atom, n), j + 1


# -- compiler ----------------------------------------------------------------
#
# Opcodes (tuples):
#   ("char", c)        consume c or fail
#   ("any",)           consume one char or fail
#   ("eol",)           succeed only at end of subject
#   ("match",)         overall success
#   ("jmp", t)
#   ("split", t1, t2)  try t1 first, leave a choicepoint at t2
#   ("mark",)          push current position onto the mark chain
#   ("progress", t)    pop mark; jump to t if position advanced, else fall through
#   ("ctr_push", n)    push a repetition counter
#   ("ctr_loop", t)    decrement; jump to t while iterations remain, else pop


def _compile(ast: RegexAst):
    code: list = []
    root = ast.root
    anchored = (
        isinstance(root, Concat)
        and len(root.children) > 0
        and isinstance(root.children[0], AnchorStart)
    )
    _emit(root, code)
    code.append(("match",))
    return tuple(code), anchored


def _emit(node: Node, code: list) -> None:
    t = type(node)
    if t is Literal:
        code.append(("char", node.ch))
    elif t is Dot:
        code.append(("any",))
    elif t is AnchorEnd:
        code.append(("eol",))
    elif t is AnchorStart:
        pass  # start anchoring is handled by the offset loop
    elif t is Concat:
        for child in node.children:
            _emit(child, code)
    elif t is Group:
        _emit(node.child, code)
    elif t is Star:
        _emit_star(node.child, code)
    elif t is Plus:
        # one mandatory copy, then the guarded loop
        _emit(node.child, code)
        _emit_star(node.child, code)
    elif t is RepeatExact:
        code.append(("ctr_push", node.n))
        body = len(code)
        _emit(node.child, code)
        code.append(("ctr_loop", body))
    else:  # pragma: no cover
        raise TypeError(f"unknown node {node!r}")


def _emit_star(child: Node, code: list) -> None:
    # greedy loop; the mark/progress pair stops iteration once the body
    # matches empty, so star over an empty-matching body terminates
    l1 = len(code)
    code.append(None)
    code.append(("mark",))
    _emit(child, code)
    code.append(("progress", l1))
    code[l1] = ("split", l1 + 1, len(code))


# -- matcher -----------------------------------------------------------------


def match_steps(
    ast: RegexAst, subject: str, budget: Optional[StepBudget] = None
) -> MatchOutcome:
    """Run the backtracking search and count every transition.

    Unanchored patterns retry at each start offset.  Budget exhaustion is
    reported in the outcome, never raised; an exceeded outcome always
    carries matched=False and steps equal to the budget.
    """
    if budget is None:
        budget = StepBudget()
    prog, anchored = _compile(ast)
    max_steps = budget.max_steps
    steps = 0
    n = len(subject)
    starts = (0,) if anchored else range(n + 1)
    for start in starts:
        pc = 0
        sp = start
        marks = None  # (pos, parent) chain
        ctrs = None  # (remaining, parent) chain
        stack: list = []  # choicepoints (pc, sp, marks, ctrs)
        while True:
            if steps >= max_steps:
                return MatchOutcome(False, max_steps, True)
            steps += 1
            op = prog[pc]
            tag = op[0]
            if tag == "char":
                if sp < n and subject[sp] == op[1]:
                    sp += 1
                    pc += 1
                    continue
            elif tag == "any":
                if sp < n:
                    sp += 1
                    pc += 1
                    continue
            elif tag == "eol":
                if sp == n:
                    pc += 1
                    continue
            elif tag == "match":
                return MatchOutcome(True, steps, False)
            elif tag == "jmp":
                pc = op[1]
                continue
            elif tag == "split":
                stack.append((op[2], sp, marks, ctrs))
                pc = op[1]
                continue
            elif tag == "mark":
                marks = (sp, marks)
                pc += 1
                continue
            elif tag == "progress":
                pos0, marks = marks
                pc = op[1] if sp > pos0 else pc + 1
                continue
            elif tag == "ctr_push":
                ctrs = (op[1], ctrs)
                pc += 1
                continue
            else:  # ctr_loop
                remaining, parent = ctrs
                if remaining > 1:
                    ctrs = (remaining - 1, parent)
                    pc = op[1]
                else:
                    ctrs = parent
                    pc += 1
                continue
            # the active thread failed; a backtrack is a counted transition
            if not stack:
                break
            if steps >= max_steps:
                return MatchOutcome(False, max_steps, True)
            steps += 1
            pc, sp, marks, ctrs = stack.pop()
    return MatchOutcome(False, steps, False)


def match_pattern(
    pattern: str, subject: str, budget: Optional[StepBudget] = None
) -> MatchOutcome:
    """Parse then match in one call. Raises RegexSyntax on a bad pattern."""
    return match_steps(parse_regex(pattern), subject, budget)
