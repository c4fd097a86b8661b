"""Tiny prepared-statement query engine.

Templates are parsed fresh on every execute from whatever text the caller
hands over.  A statement prepared over guest memory therefore runs whatever
the memory holds at execution time; that window is what the corruption
chains in this lab aim at.  Bind values never touch the template text, so
the engine itself cannot be injected through bindings.

Grammar (keywords uppercase, idents case-sensitive):

    query  := SELECT items [FROM ident [WHERE ident = rhs]]
    items  := item (',' item)*
    item   := ident | const
    const  := integer | 'single quoted text'
    rhs    := '?' | const

A query without FROM may project constants only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .faults import (
    BindMismatch,
    NoSuchColumn,
    NoSuchTable,
    QuerySyntax,
    TemplateTampered,
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

Value = int | str


def fnv1a_64(data: bytes) -> int:
    """FNV-1a over 64 bits; the template integrity digest."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[Value]]


class TableStore:
    """In-memory table set, read-mostly after load."""

    def __init__(self):
        self.tables: dict[str, Table] = {}

    def add(self, table: Table) -> None:
        self.tables[table.name] = table

    def get(self, name: str) -> Table:
        if name not in self.tables:
            raise NoSuchTable(name)
        return self.tables[name]


def _type_cell(text: str) -> Value:
    try:
        return int(text)
    except ValueError:
        return text


def load_tables(text: str) -> TableStore:
    """Parse fixture tables.

    Format: one table per block, blocks separated by blank lines.  The
    header line is `TABLE name(col,...)`; each following line is one row,
    tab-separated, integer-looking cells typed as int.
    """
    store = TableStore()
    current: Table | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            current = None
            continue
        if line.startswith("TABLE "):
            head = line[len("TABLE "):].strip()
            if "(" not in head or not head.endswith(")"):
                raise ValueError(f"line {lineno}: malformed table header")
            name, cols = head[:-1].split("(", 1)
            columns = [c.strip() for c in cols.split(",") if c.strip()]
            if not name.strip() or not columns:
                raise ValueError(f"line {lineno}: empty table name or column list")
            current = Table(name=name.strip(), columns=columns, rows=[])
            store.add(current)
            continue
        if current is None:
            raise ValueError(f"line {lineno}: row outside any table block")
        cells = line.split("\t")
        if len(cells) != len(current.columns):
            raise ValueError(
                f"line {lineno}: {len(cells)} cells for {len(current.columns)} columns")
        current.rows.append([_type_cell(c) for c in cells])
    return store


def load_tables_file(path) -> TableStore:
    with open(path, "r", encoding="ascii") as fh:
        return load_tables(fh.read())


# -- parsing ----------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str   # IDENT INT STR PUNCT
    text: str
    value: Value
    offset: int


def _tokenize(text: str) -> list[Token]:
    out = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            i += 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            out.append(Token("IDENT", text[i:j], text[i:j], i))
            i = j
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            out.append(Token("INT", text[i:j], int(text[i:j]), i))
            i = j
            continue
        if ch == "'":
            j = text.find("'", i + 1)
            if j < 0:
                raise QuerySyntax("unterminated string literal", offset=i)
            out.append(Token("STR", text[i:j + 1], text[i + 1:j], i))
            i = j + 1
            continue
        if ch in ",=?":
            out.append(Token("PUNCT", ch, ch, i))
            i += 1
            continue
        raise QuerySyntax(f"unexpected character {ch!r}", offset=i)
    return out


@dataclass(frozen=True)
class ParsedQuery:
    # items: ("col", name, offset) or ("const", value, lexeme)
    items: tuple
    table: str | None
    where: tuple | None   # (column, ("slot",)) or (column, ("const", value))

    @property
    def slot_count(self) -> int:
        if self.where and self.where[1][0] == "slot":
            return 1
        return 0


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self) -> Token | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise QuerySyntax("unexpected end of query", offset=len(self.text))
        self.pos += 1
        return tok

    def expect_ident(self, word: str) -> Token:
        tok = self.take()
        if tok.kind != "IDENT" or tok.text != word:
            raise QuerySyntax(f"expected {word}", offset=tok.offset)
        return tok

    def parse(self) -> ParsedQuery:
        self.expect_ident("SELECT")
        items = [self._item()]
        while self.peek() and self.peek().text == ",":
            self.take()
            items.append(self._item())
        table = None
        where = None
        nxt = self.peek()
        if nxt is not None and nxt.kind == "IDENT" and nxt.text == "FROM":
            self.take()
            table_tok = self.take()
            if table_tok.kind != "IDENT":
                raise QuerySyntax("expected table name", offset=table_tok.offset)
            table = table_tok.text
            nxt = self.peek()
            if nxt is not None and nxt.kind == "IDENT" and nxt.text == "WHERE":
                self.take()
                col_tok = self.take()
                if col_tok.kind != "IDENT":
                    raise QuerySyntax("expected column name", offset=col_tok.offset)
                eq = self.take()
                if eq.text != "=":
                    raise QuerySyntax("expected =", offset=eq.offset)
                rhs = self.take()
                if rhs.text == "?":
                    where = (col_tok.text, ("slot",))
                elif rhs.kind in ("INT", "STR"):
                    where = (col_tok.text, ("const", rhs.value))
                else:
                    raise QuerySyntax("expected ? or constant", offset=rhs.offset)
        tail = self.peek()
        if tail is not None:
            raise QuerySyntax(f"trailing token {tail.text!r}", offset=tail.offset)
        if table is None:
            for item in items:
                if item[0] == "col":
                    raise QuerySyntax("bare SELECT may project constants only",
                                      offset=item[2])
        return ParsedQuery(items=tuple(items), table=table, where=where)

    def _item(self):
        tok = self.take()
        if tok.kind == "IDENT":
            if tok.text in ("SELECT", "FROM", "WHERE"):
                raise QuerySyntax("keyword where item expected", offset=tok.offset)
            return ("col", tok.text, tok.offset)
        if tok.kind in ("INT", "STR"):
            return ("const", tok.value, tok.text)
        raise QuerySyntax("expected column or constant", offset=tok.offset)


def parse_query(text: str) -> ParsedQuery:
    return _Parser(text).parse()


# -- prepared statements ----------------------------------------------------

@dataclass
class QueryResult:
    columns: list[str]
    rows: list[list[Value]]


@dataclass
class PreparedStatement:
    """Template text plus the digest frozen at prepare time."""

    store: TableStore
    template: str
    digest: int = field(init=False)
    slot_count: int = field(init=False)

    def __post_init__(self):
        parsed = parse_query(self.template)
        self.digest = fnv1a_64(self.template.encode("latin-1"))
        self.slot_count = parsed.slot_count


def prepare(store: TableStore, template: str) -> PreparedStatement:
    return PreparedStatement(store=store, template=template)


def execute(stmt: PreparedStatement, template_now: str, bindings: list[Value],
            integrity: bool = False) -> QueryResult:
    """Run the statement against whatever template text exists right now.

    With integrity on, a digest mismatch against the prepared template fails
    closed before the text is even parsed.
    """
    if integrity and fnv1a_64(template_now.encode("latin-1")) != stmt.digest:
        raise TemplateTampered("template digest mismatch at execute")
    parsed = parse_query(template_now)
    if parsed.slot_count != len(bindings):
        raise BindMismatch(
            f"{parsed.slot_count} slot(s), {len(bindings)} binding(s)")
    if parsed.table is None:
        columns = [item[2] for item in parsed.items]
        return QueryResult(columns=columns, rows=[[item[1] for item in parsed.items]])
    table = stmt.store.get(parsed.table)
    for item in parsed.items:
        if item[0] == "col" and item[1] not in table.columns:
            raise NoSuchColumn(item[1])
    selected = table.rows
    if parsed.where is not None:
        col, rhs = parsed.where
        if col not in table.columns:
            raise NoSuchColumn(col)
        needle = bindings[0] if rhs[0] == "slot" else rhs[1]
        idx = table.columns.index(col)
        # typed equality: an int cell never equals a str binding, so a
        # quoted payload in a binding stays inert data
        selected = [row for row in selected if type(row[idx]) is type(needle)
                    and row[idx] == needle]
    out_columns = []
    out_rows = []
    for item in parsed.items:
        out_columns.append(item[1] if item[0] == "col" else item[2])
    for row in selected:
        out_row = []
        for item in parsed.items:
            if item[0] == "col":
                out_row.append(row[table.columns.index(item[1])])
            else:
                out_row.append(item[1])
        out_rows.append(out_row)
    return QueryResult(columns=out_columns, rows=out_rows)
