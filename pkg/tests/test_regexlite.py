"""Regex engine tests.

The heavyweight check is the exhaustive small-instance grid: every
generated pattern is matched both by the engine and by an independent
brute-force oracle that enumerates reachable end positions set-wise.
The oracle shares no code with the engine.
"""

import itertools

import pytest

from wasmlab.faults import RegexSyntax
from wasmlab.regexlite import (
    AnchorEnd,
    AnchorStart,
    Concat,
    Dot,
    Group,
    Literal,
    MatchOutcome,
    Plus,
    RegexAst,
    RepeatExact,
    Star,
    StepBudget,
    match_pattern,
    match_steps,
    parse_regex,
)


# -- independent oracle ------------------------------------------------------


def _positions(node, subject, i, memo):
    """Set of end positions reachable by matching node at position i."""
    key = (node, i)
    hit = memo.get(key)
    if hit is not None:
        return hit
    t = type(node)
    if t is Literal:
        out = frozenset({i + 1}) if i < len(subject) and subject[i] == node.ch else frozenset()
    elif t is Dot:
        out = frozenset({i + 1}) if i < len(subject) else frozenset()
    elif t is AnchorStart:
        out = frozenset({i}) if i == 0 else frozenset()
    elif t is AnchorEnd:
        out = frozenset({i}) if i == len(subject) else frozenset()
    elif t is Group:
        out = _positions(node.child, subject, i, memo)
    elif t is Concat:
        cur = {i}
        for child in node.children:
            nxt = set()
            for p in cur:
                nxt |= _positions(child, subject, p, memo)
            cur = nxt
            if not cur:
                break
        out = frozenset(cur)
    elif t is Star:
        seen = {i}
        frontier = {i}
        while frontier:
            step = set()
            for p in frontier:
                step |= _positions(node.child, subject, p, memo)
            frontier = step - seen
            seen |= frontier
        out = frozenset(seen)
    elif t is Plus:
        first = set()
        for p in _positions(node.child, subject, i, memo):
            first |= _positions(Star(node.child), subject, p, memo)
        out = frozenset(first)
    elif t is RepeatExact:
        cur = {i}
        for _ in range(node.n):
            nxt = set()
            for p in cur:
                nxt |= _positions(node.child, subject, p, memo)
            cur = nxt
            if not cur:
                break
        out = frozenset(cur)
    else:
        raise TypeError(node)
    memo[key] = out
    return out


def oracle_match(ast: RegexAst, subject: str) -> bool:
    root = ast.root
    children = root.children
    anchored = bool(children) and isinstance(children[0], AnchorStart)
    body = Concat(children[1:]) if anchored else root
    starts = (0,) if anchored else range(len(subject) + 1)
    for start in starts:
        if _positions(body, subject, start, {}):
            return True
    return False


# -- parser ------------------------------------------------------------------


class TestParse:
    def test_simple_anchored(self):
        ast = parse_regex("^a.b")
        assert ast.root == Concat(
            (AnchorStart(), Literal("a"), Dot(), Literal("b"))
        )
        assert ast.source == "^a.b"

    def test_prefix_probe_shape(self):
        ast = parse_regex("^secret_prefix(.+){21}")
        kids = ast.root.children
        assert isinstance(kids[0], AnchorStart)
        literals = kids[1:14]
        assert all(isinstance(k, Literal) for k in literals)
        assert "".join(k.ch for k in literals) == "secret_prefix"
        tail = kids[14]
        assert tail == RepeatExact(Group(Concat((Plus(Dot()),))), 21)
        assert len(kids) == 15

    def test_unbalanced_open(self):
        with pytest.raises(RegexSyntax) as ei:
            parse_regex("(.+")
        assert ei.value.offset == 0

    def test_unbalanced_close(self):
        with pytest.raises(RegexSyntax) as ei:
            parse_regex("ab)")
        assert ei.value.offset == 2

    def test_quantifier_without_atom(self):
        for pat, off in [("+a", 0), ("*", 0), ("a++", 2), ("{3}", 0), ("^+", 1)]:
            with pytest.raises(RegexSyntax) as ei:
                parse_regex(pat)
            assert ei.value.offset == off, pat

    def test_bad_repetition(self):
        for pat in ["a{}", "a{x}", "a{0}", "a{21", "a{2x}", "a{4294967296}"]:
            with pytest.raises(RegexSyntax) as ei:
                parse_regex(pat)
            assert ei.value.offset == 1, pat

    def test_repeat_bounds(self):
        assert parse_regex("a{1}").root.children[0] == RepeatExact(Literal("a"), 1)
        big = parse_regex("a{4294967295}").root.children[0]
        assert big.n == 0xFFFFFFFF

    def test_leading_zeros_in_count(self):
        ast = parse_regex("a{000021}")
        assert ast.root.children[0] == RepeatExact(Literal("a"), 21)
        # padding the count field changes pattern length but not meaning
        wide = parse_regex("(.*){0000000000025000}")
        assert wide.root.children[0].n == 25000

    def test_misplaced_anchors(self):
        for pat, off in [("a^b", 1), ("a$b", 1), ("(a$)", 2), ("($)", 1)]:
            with pytest.raises(RegexSyntax) as ei:
                parse_regex(pat)
            assert ei.value.offset == off, pat

    def test_anchor_only_patterns(self):
        assert parse_regex("^").root == Concat((AnchorStart(),))
        assert parse_regex("$").root == Concat((AnchorEnd(),))
        assert parse_regex("^$").root == Concat((AnchorStart(), AnchorEnd()))
        assert parse_regex("").root == Concat(())

    def test_empty_group(self):
        ast = parse_regex("(){21}")
        assert ast.root.children[0] == RepeatExact(Group(Concat(())), 21)

    def test_close_brace_is_literal(self):
        assert parse_regex("a}").root.children[1] == Literal("}")
        assert match_pattern("a}", "xa}x").matched

    def test_non_ascii_rejected(self):
        with pytest.raises(RegexSyntax) as ei:
            parse_regex("aéb")
        assert ei.value.offset == 1


# -- matching basics ---------------------------------------------------------


class TestMatchBasics:
    def test_linear_walk(self):
        out = match_pattern("^a.b", "axb")
        assert out == MatchOutcome(matched=True, steps=4, budget_exceeded=False)
        assert out.steps < 50

    def test_anchor_rejection_is_cheap(self):
        out = match_pattern("^z(.+){21}", "a" + "x" * 23)
        assert out == MatchOutcome(matched=False, steps=1, budget_exceeded=False)
        assert out.steps < 50

    def test_unanchored_substring(self):
        assert match_pattern("abc", "xxabcxx").matched
        assert not match_pattern("abc", "xxabxcx").matched

    def test_end_anchor(self):
        assert match_pattern("abc$", "xabc").matched
        assert not match_pattern("abc$", "abcx").matched
        assert match_pattern("^$", "").matched
        assert not match_pattern("^$", "x").matched

    def test_empty_pattern_matches_anything(self):
        assert match_pattern("", "").matched
        assert match_pattern("", "xyz").matched

    def test_plus_needs_one(self):
        assert not match_pattern("^a+$", "").matched
        assert match_pattern("^a+$", "aaa").matched
        assert not match_pattern("^a+$", "aab").matched

    def test_star_allows_zero(self):
        assert match_pattern("^a*$", "").matched
        assert match_pattern("^a*b$", "b").matched

    def test_repeat_exact(self):
        assert match_pattern("^a{3}$", "aaa").matched
        assert not match_pattern("^a{3}$", "aa").matched
        assert not match_pattern("^a{3}$", "aaaa").matched

    def test_empty_body_loops_terminate(self):
        out = match_pattern("(a*)*b", "aab")
        assert out.matched
        miss = match_pattern("(a*)*b", "aaa")
        assert not miss.matched
        assert miss.steps < 500
        rep = match_pattern("(){21}", "")
        assert rep == MatchOutcome(matched=True, steps=23, budget_exceeded=False)

    def test_group_transparent(self):
        assert match_pattern("^(ab)+$", "ababab").matched
        assert not match_pattern("^(ab)+$", "ababa").matched


# -- step accounting ---------------------------------------------------------


# fixed calibration subject: 'a' plus 23 alphanumeric tail characters
CAL_SUBJECT = "albh1mt401vk11tgwhvjp1ei"


class TestStepAccounting:
    def test_probe_family_ratio(self):
        # correct-first-char probe explodes; wrong-first-char probe dies at
        # the anchor.  The ratio is the whole timing oracle.
        budget = StepBudget(200_000)
        hit = match_pattern("^a(.+){21}", CAL_SUBJECT, budget)
        miss = match_pattern("^z(.+){21}", CAL_SUBJECT, budget)
        assert hit.budget_exceeded and hit.steps == 200_000
        assert miss == MatchOutcome(matched=False, steps=1, budget_exceeded=False)
        assert hit.steps / miss.steps >= 100

    def test_amplified_family_fast_match(self):
        # "(.*){n}" lands a real match in ~5n steps once the prefix holds,
        # independent of where in the secret the probe sits
        hit = match_pattern("^a(.*){25000}", CAL_SUBJECT)
        miss = match_pattern("^z(.*){25000}", CAL_SUBJECT)
        assert hit == MatchOutcome(matched=True, steps=125095, budget_exceeded=False)
        assert miss.steps == 1
        assert hit.steps / miss.steps >= 100

    def test_amplified_uniform_across_positions(self):
        counts = []
        for k in (0, 7, 15, 23):
            pat = "^" + CAL_SUBJECT[: k + 1] + "(.*){25000}"
            out = match_pattern(pat, CAL_SUBJECT)
            assert out.matched
            counts.append(out.steps)
        assert max(counts) - min(counts) < 200

    def test_monotone_near_miss(self):
        prev = 0
        for k in (2, 4, 6, 8, 10, 12):
            out = match_pattern("^a(.+){21}", "a" + "x" * k)
            assert not out.matched and not out.budget_exceeded
            assert out.steps >= prev
            prev = out.steps

    def test_deterministic(self):
        for _ in range(3):
            out = match_pattern("^a(.+){21}", "a" + "x" * 9)
            assert out.steps == match_pattern("^a(.+){21}", "a" + "x" * 9).steps
            assert out == match_pattern("^a(.+){21}", "a" + "x" * 9)


class TestBudget:
    def test_budget_must_be_positive(self):
        with pytest.raises(ValueError):
            StepBudget(0)
        with pytest.raises(ValueError):
            StepBudget(-5)

    def test_exhaustion_is_a_value(self):
        out = match_pattern("^a(.+){21}", "a" + "x" * 9, StepBudget(100))
        assert out == MatchOutcome(matched=False, steps=100, budget_exceeded=True)

    def test_exhaustion_masks_possible_match(self):
        out = match_pattern("^a.b", "axb", StepBudget(1))
        assert out == MatchOutcome(matched=False, steps=1, budget_exceeded=True)

    def test_steps_never_exceed_budget(self):
        for cap in (1, 7, 50, 1000):
            out = match_pattern("(a*)*(b*)*c", "ab" * 8, StepBudget(cap))
            assert out.steps <= cap
            if out.budget_exceeded:
                assert out.steps == cap and not out.matched


# -- exhaustive small-instance grid against the oracle -----------------------


def _pattern_cores():
    """Every core is a pattern body without anchors, nesting depth <= 3."""
    atoms = ["a", "b", "."]
    quants = ["", "+", "*", "{2}", "{3}"]
    units = [a + q for a in atoms for q in quants if q == "" or a != "b"]
    cores = list(units)
    pair_units = [a + q for a in atoms for q in ("", "+", "*", "{2}")]
    cores += [u + v for u, v in itertools.product(pair_units, repeat=2)]
    group_bodies = units + [
        u + v for u, v in itertools.product(["a", "b", "a+", "a*", "."], repeat=2)
    ]
    cores += ["(" + body + ")" + q for body in group_bodies for q in quants]
    nested = ["(a)b", "a(b)", "(ab)", "(a+)b", "(a*)*", "(a+){2}", "(.)(.)", "(a)(b)", "((a)b)", "(a(b+))"]
    cores += ["(" + g + ")" + q for g in nested for q in quants]
    return sorted(set(cores))


def _subjects(max_len):
    out = [""]
    for n in range(1, max_len + 1):
        out += ["".join(t) for t in itertools.product("ab", repeat=n)]
    return out


class TestOracleGrid:
    def test_engine_agrees_with_decomposition_oracle(self):
        cores = _pattern_cores()
        short = _subjects(4)
        long_tail = [s for s in _subjects(6) if len(s) > 4]
        budget = StepBudget(2_000_000)
        checked = 0
        for idx, core in enumerate(cores):
            subjects = short if idx % 3 else short + long_tail
            for head, tail in (("", ""), ("^", ""), ("", "$"), ("^", "$")):
                pat = head + core + tail
                ast = parse_regex(pat)
                for subject in subjects:
                    got = match_steps(ast, subject, budget)
                    assert not got.budget_exceeded, (pat, subject)
                    want = oracle_match(ast, subject)
                    assert got.matched == want, (pat, subject)
                    checked += 1
        assert checked > 50_000
