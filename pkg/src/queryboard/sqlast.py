"""Parser and serializer for a small analytic SQL dialect.

Supported statements:

    SELECT [TOP n] (column | count(*)) FROM table
        [WHERE pred [AND pred ...]]
    pred := column op literal | column BETWEEN number AND number

Each query is held as a labeled ordered tree (`Ast`).  Interior nodes
carry a grammar-rule label and children; leaf nodes carry a label and a
token value.  Numbers are stored as their decimal text, strings without
quotes, and `<>` is normalized to `!=` so that serialize/re-parse is an
identity on the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import hashlib
import json
import re
from typing import Iterator, Optional

# Closed label set; rules and widget binding pattern-match on these.
INTERIOR_LABELS = frozenset(
    {"Select", "Project", "Top", "From", "Where", "And", "BiExpr", "Between"}
)
LEAF_LABELS = frozenset({"ColExpr", "StrExpr", "NumExpr", "Table", "Op", "AggExpr"})
ALL_LABELS = INTERIOR_LABELS | LEAF_LABELS

# Grammar arity per interior label: (min_children, max_children or None).
# `And` is the only variable-arity construct in the dialect.
ARITY = {
    "Select": (2, 4),
    "Project": (1, 1),
    "Top": (1, 1),
    "From": (1, 1),
    "Where": (1, 1),
    "And": (1, None),
    "BiExpr": (3, 3),
    "Between": (3, 3),
}

COMPARISON_OPS = ("<=", ">=", "!=", "<>", "=", "<", ">")


class SqlSyntaxError(Exception):
    """Parse failure with 1-based line/column position."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}:{col}")
        self.line = line
        self.col = col


class IncompleteQueryError(Exception):
    """Raised by to_sql when a required clause is missing."""


@dataclass(frozen=True)
class Ast:
    """One node of a query tree. Leaves carry a value, interiors children."""

    label: str
    value: Optional[str] = None
    children: tuple["Ast", ...] = ()

    def __post_init__(self):
        if self.label not in ALL_LABELS:
            raise ValueError(f"unknown AST label {self.label!r}")
        if self.label in LEAF_LABELS:
            if self.value is None or self.children:
                raise ValueError(f"leaf {self.label} needs a value and no children")
        else:
            if self.value is not None or not self.children:
                raise ValueError(f"interior {self.label} needs children and no value")

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.label.encode())
        h.update(b"\x00")
        h.update((self.value or "").encode())
        for c in self.children:
            h.update(c.digest.encode())
        return h.hexdigest()

    def walk(self) -> Iterator["Ast"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def child(self, label: str) -> Optional["Ast"]:
        for c in self.children:
            if c.label == label:
                return c
        return None

    def to_json(self) -> dict:
        out: dict = {"label": self.label, "children": [c.to_json() for c in self.children]}
        if self.value is not None:
            out["value"] = self.value
        return out

    @staticmethod
    def from_json(obj: dict) -> "Ast":
        return Ast(
            obj["label"],
            obj.get("value"),
            tuple(Ast.from_json(c) for c in obj.get("children", [])),
        )

    def __str__(self) -> str:
        return to_sql(self) if self.label == "Select" else sql_fragment(self)


@dataclass(frozen=True)
class QueryLog:
    """Ordered, non-empty sequence of parsed queries. Order matters:
    the usefulness cost sums over consecutive pairs."""

    queries: tuple[Ast, ...]

    def __post_init__(self):
        if not self.queries:
            raise ValueError("query log is empty")

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self) -> Iterator[Ast]:
        return iter(self.queries)

    def pairs(self) -> Iterator[tuple[Ast, Ast]]:
        for a, b in zip(self.queries, self.queries[1:]):
            yield a, b


def ast_equal(a: Ast, b: Ast) -> bool:
    """Structural equality: labels, values, and child order all match."""
    return a.digest == b.digest


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+(?:\.\d+)?)
  | (?P<string>'[^']*')
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><=|>=|!=|<>|=|<|>)
  | (?P<punct>[(),;*])
    """,
    re.VERBOSE,
)

KEYWORDS = frozenset({"select", "top", "from", "where", "and", "between", "count"})

# Recognized-but-unsupported constructs get a targeted error message.
UNSUPPORTED = frozenset(
    {"join", "inner", "outer", "left", "right", "group", "order", "having",
     "union", "limit", "distinct", "as", "on", "or", "not", "in", "like"}
)


@dataclass(frozen=True)
class _Token:
    kind: str  # number | string | name | keyword | op | punct | eof
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise SqlSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup or ""
        tok = m.group()
        if kind != "ws":
            if kind == "name" and tok.lower() in KEYWORDS:
                tokens.append(_Token("keyword", tok.lower(), line, col))
            else:
                tokens.append(_Token(kind, tok, line, col))
        nl = tok.count("\n")
        if nl:
            line += nl
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, message: str) -> SqlSyntaxError:
        tok = self.peek()
        return SqlSyntaxError(message, tok.line, tok.col)

    def expect_keyword(self, kw: str) -> _Token:
        tok = self.peek()
        if tok.kind != "keyword" or tok.text != kw:
            raise self.error(f"expected {kw.upper()!r}, found {tok.text or 'end of input'!r}")
        return self.advance()

    def expect(self, kind: str, what: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}")
        return self.advance()

    def check_supported(self):
        tok = self.peek()
        if tok.kind == "name" and tok.text.lower() in UNSUPPORTED:
            raise self.error(f"unsupported construct {tok.text.upper()!r}")
        if tok.kind == "punct" and tok.text == "(":
            raise self.error("unsupported construct: subquery or parenthesized expression")

    def parse_statement(self) -> Ast:
        self.expect_keyword("select")
        children: list[Ast] = []
        if self.peek().kind == "keyword" and self.peek().text == "top":
            self.advance()
            num = self.expect("number", "a row count after TOP")
            children.append(Ast("Top", children=(Ast("NumExpr", num.text),)))
        children.append(Ast("Project", children=(self._select_expr(),)))
        self.check_supported()
        self.expect_keyword("from")
        table = self.expect("name", "a table name")
        children.append(Ast("From", children=(Ast("Table", table.text),)))
        if self.peek().kind == "keyword" and self.peek().text == "where":
            self.advance()
            children.append(Ast("Where", children=(self._predicates(),)))
        self.check_supported()
        tok = self.peek()
        if tok.kind != "eof":
            raise self.error(f"unexpected trailing input {tok.text!r}")
        return Ast("Select", children=tuple(children))

    def _select_expr(self) -> Ast:
        self.check_supported()
        tok = self.peek()
        if tok.kind == "keyword" and tok.text == "count":
            self.advance()
            p = self.expect("punct", "'(' after count")
            if p.text != "(":
                raise self.error("expected '(' after count")
            star = self.expect("punct", "'*' inside count()")
            if star.text != "*":
                raise self.error("only count(*) is supported")
            close = self.expect("punct", "')'")
            if close.text != ")":
                raise self.error("expected ')' after count(*")
            return Ast("AggExpr", "count")
        name = self.expect("name", "a column name or count(*)")
        return Ast("ColExpr", name.text)

    def _predicates(self) -> Ast:
        preds = [self._predicate()]
        while self.peek().kind == "keyword" and self.peek().text == "and":
            self.advance()
            preds.append(self._predicate())
        if len(preds) == 1:
            return preds[0]
        return Ast("And", children=tuple(preds))

    def _predicate(self) -> Ast:
        self.check_supported()
        col = self.expect("name", "a column name")
        tok = self.peek()
        if tok.kind == "keyword" and tok.text == "between":
            self.advance()
            lo = self.expect("number", "a number after BETWEEN")
            self.expect_keyword("and")
            hi = self.expect("number", "a number after AND")
            return Ast(
                "Between",
                children=(
                    Ast("ColExpr", col.text),
                    Ast("NumExpr", lo.text),
                    Ast("NumExpr", hi.text),
                ),
            )
        if tok.kind != "op":
            raise self.error(f"expected a comparison operator, found {tok.text!r}")
        self.advance()
        op = "!=" if tok.text == "<>" else tok.text
        lit = self.peek()
        if lit.kind == "number":
            self.advance()
            rhs = Ast("NumExpr", lit.text)
        elif lit.kind == "string":
            self.advance()
            rhs = Ast("StrExpr", lit.text[1:-1])
        else:
            raise self.error(f"expected a literal, found {lit.text or 'end of input'!r}")
        return Ast("BiExpr", children=(Ast("ColExpr", col.text), Ast("Op", op), rhs))


def parse(sql_text: str) -> Ast:
    """Parse one statement into an Ast rooted at Select."""
    tokens = _tokenize(sql_text)
    # Drop a single trailing semicolon.
    if len(tokens) >= 2 and tokens[-2].kind == "punct" and tokens[-2].text == ";":
        tokens = tokens[:-2] + tokens[-1:]
    if tokens[0].kind == "eof":
        raise SqlSyntaxError("empty statement", 1, 1)
    return _Parser(tokens).parse_statement()


def parse_log(text: str) -> QueryLog:
    """Parse a query log: one statement per line or semicolon-separated."""
    statements: list[str] = []
    for chunk in re.split(r";|\n", text):
        if chunk.strip():
            statements.append(chunk.strip())
    if not statements:
        raise ValueError("query log is empty")
    return QueryLog(tuple(parse(s) for s in statements))


# ---------------------------------------------------------------------------
# Serialization back to SQL
# ---------------------------------------------------------------------------


def sql_fragment(node: Ast) -> str:
    """Render any subtree as the SQL text fragment it stands for."""
    label = node.label
    if label == "ColExpr" or label == "Table" or label == "Op":
        return node.value or ""
    if label == "NumExpr":
        return node.value or ""
    if label == "StrExpr":
        return f"'{node.value}'"
    if label == "AggExpr":
        return "count(*)"
    if label == "Project":
        return sql_fragment(node.children[0])
    if label == "Top":
        return f"top {sql_fragment(node.children[0])}"
    if label == "From":
        return f"from {sql_fragment(node.children[0])}"
    if label == "Where":
        return f"where {sql_fragment(node.children[0])}"
    if label == "And":
        return " and ".join(sql_fragment(c) for c in node.children)
    if label == "BiExpr":
        col, op, rhs = node.children
        return f"{sql_fragment(col)} {sql_fragment(op)} {sql_fragment(rhs)}"
    if label == "Between":
        col, lo, hi = node.children
        return f"{sql_fragment(col)} between {sql_fragment(lo)} and {sql_fragment(hi)}"
    if label == "Select":
        return to_sql(node)
    raise ValueError(f"cannot render {label}")


def to_sql(ast: Ast) -> str:
    """Serialize a complete query to canonical SQL text."""
    if ast.label != "Select":
        raise IncompleteQueryError(f"root must be Select, got {ast.label}")
    project = ast.child("Project")
    from_ = ast.child("From")
    if project is None or from_ is None:
        missing = "Project" if project is None else "From"
        raise IncompleteQueryError(f"query lacks required {missing} clause")
    _validate_arities(ast)
    parts = ["select"]
    top = ast.child("Top")
    if top is not None:
        parts.append(sql_fragment(top))
    parts.append(sql_fragment(project))
    parts.append(sql_fragment(from_))
    where = ast.child("Where")
    if where is not None:
        parts.append(sql_fragment(where))
    return " ".join(parts)


def _validate_arities(ast: Ast):
    for node in ast.walk():
        if node.label in ARITY:
            lo, hi = ARITY[node.label]
            n = len(node.children)
            if n < lo or (hi is not None and n > hi):
                raise IncompleteQueryError(
                    f"{node.label} has {n} children, expected "
                    f"{lo if hi == lo else f'{lo}..{hi or chr(8734)}'}"
                )


def log_to_json(log: QueryLog) -> str:
    return json.dumps([q.to_json() for q in log], indent=2)
