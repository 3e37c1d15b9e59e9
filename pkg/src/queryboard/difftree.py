"""The DiffTree algebra over query ASTs.

A DiffTree compresses a set of queries into one tree with four node
kinds: ALL keeps every child, ANY picks one child, OPT makes its single
child optional, MULTI repeats its single child zero or more times.
ANY, OPT and MULTI are *choice nodes*; a concrete query is recovered by
assigning a selection to every reachable choice node.  A plain AST is
the special case where every node is an ALL.

A distinguished ABSENT marker (the empty subtree) may appear only as a
child of an ANY; choosing it contributes no node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import hashlib
import json
from typing import Iterator, Optional, Union

from .sqlast import ARITY, Ast, INTERIOR_LABELS, LEAF_LABELS, QueryLog

ALL = "ALL"
ANY = "ANY"
OPT = "OPT"
MULTI = "MULTI"
ABSENT = "ABSENT"
CHOICE_KINDS = frozenset({ANY, OPT, MULTI})

Path = tuple[int, ...]


class DiffTreeError(Exception):
    pass


class MissingChoiceError(DiffTreeError):
    """An instantiation reached a choice node with no assigned selection."""

    def __init__(self, path: Path):
        super().__init__(f"no selection for choice node at path {list(path)}")
        self.path = path


@dataclass(frozen=True)
class Stamp:
    """An AST node stamp: label plus leaf value (None on interior labels)."""

    label: str
    value: Optional[str] = None

    def to_json(self) -> dict:
        out: dict = {"label": self.label}
        if self.value is not None:
            out["value"] = self.value
        return out

    @staticmethod
    def from_json(obj: dict) -> "Stamp":
        return Stamp(obj["label"], obj.get("value"))

    @staticmethod
    def of(ast: Ast) -> "Stamp":
        return Stamp(ast.label, ast.value)


@dataclass(frozen=True)
class DiffNode:
    kind: str
    payload: tuple[Stamp, ...] = ()
    children: tuple["DiffNode", ...] = ()

    def __post_init__(self):
        if self.kind == ABSENT:
            if self.payload or self.children:
                raise DiffTreeError("ABSENT carries no payload or children")
        elif self.kind == ALL:
            if len(self.payload) != 1:
                raise DiffTreeError("ALL carries exactly one stamp")
            stamp = self.payload[0]
            if stamp.label in LEAF_LABELS:
                if stamp.value is None or self.children:
                    raise DiffTreeError(f"leaf ALL({stamp.label}) needs a value, no children")
            elif stamp.value is not None or not self.children:
                raise DiffTreeError(f"interior ALL({stamp.label}) needs children, no value")
        elif self.kind == OPT or self.kind == MULTI:
            if len(self.children) != 1:
                raise DiffTreeError(f"{self.kind} has exactly one child")
            if self.children[0].kind == ABSENT:
                raise DiffTreeError(f"{self.kind} child cannot be ABSENT")
        elif self.kind == ANY:
            if not self.children:
                raise DiffTreeError("ANY needs at least one child")
        else:
            raise DiffTreeError(f"unknown node kind {self.kind!r}")

    @cached_property
    def digest(self) -> str:
        """Stable content hash, invariant under ANY-child reordering."""
        h = hashlib.sha256()
        h.update(self.kind.encode())
        for s in self.payload:
            h.update(b"\x00" + s.label.encode() + b"\x00" + (s.value or "").encode())
        child_digests = [c.digest for c in self.children]
        if self.kind == ANY:
            child_digests.sort()
        for d in child_digests:
            h.update(bytes.fromhex(d))
        return h.hexdigest()

    @property
    def stamp(self) -> Stamp:
        return self.payload[0]

    @property
    def is_choice(self) -> bool:
        return self.kind in CHOICE_KINDS

    @property
    def is_leaf_all(self) -> bool:
        return self.kind == ALL and self.payload[0].label in LEAF_LABELS

    def at(self, path: Path) -> "DiffNode":
        node = self
        for i in path:
            node = node.children[i]
        return node

    def walk(self, prefix: Path = ()) -> Iterator[tuple[Path, "DiffNode"]]:
        """Pre-order traversal yielding (path, node)."""
        yield prefix, self
        for i, c in enumerate(self.children):
            yield from c.walk(prefix + (i,))

    def choice_paths(self) -> list[Path]:
        return [p for p, n in self.walk() if n.is_choice]

    def replace_at(self, path: Path, new: "DiffNode") -> "DiffNode":
        if not path:
            return new
        i = path[0]
        kids = list(self.children)
        kids[i] = kids[i].replace_at(path[1:], new)
        if self.kind == ANY:
            # Keep ANY children canonical: the rewritten branch may now
            # equal a sibling (merge) or sort differently.
            return make_any(kids)
        return DiffNode(self.kind, self.payload, tuple(kids))

    def to_json(self) -> dict:
        if self.kind == ABSENT:
            return {"kind": ABSENT}
        return {
            "kind": self.kind,
            "payload": [s.to_json() for s in self.payload],
            "children": [c.to_json() for c in self.children],
        }

    @staticmethod
    def from_json(obj: dict) -> "DiffNode":
        if obj["kind"] == ABSENT:
            return ABSENT_NODE
        return DiffNode(
            obj["kind"],
            tuple(Stamp.from_json(s) for s in obj.get("payload", [])),
            tuple(DiffNode.from_json(c) for c in obj.get("children", [])),
        )


ABSENT_NODE = DiffNode(ABSENT)


def make_any(children: list[DiffNode] | tuple[DiffNode, ...]) -> DiffNode:
    """ANY constructor: children deduplicated and put in canonical (digest)
    order, so that equal-up-to-reordering ANYs are structurally identical
    and rule sites computed for one tree apply to any tree with the same
    canonical hash."""
    seen: set[str] = set()
    out: list[DiffNode] = []
    for c in children:
        if c.digest not in seen:
            seen.add(c.digest)
            out.append(c)
    out.sort(key=lambda c: c.digest)
    return DiffNode(ANY, (), tuple(out))


def canonical_hash(tree: DiffNode) -> str:
    return tree.digest


def lift(ast: Ast) -> DiffNode:
    """Lift an AST into the all-ALL DiffTree that expresses exactly it."""
    return DiffNode(ALL, (Stamp.of(ast),), tuple(lift(c) for c in ast.children))


def initial_difftree(log: QueryLog) -> DiffNode:
    """Root ANY over the lifted queries, duplicates removed."""
    return make_any([lift(q) for q in log])


def validate(tree: DiffNode, under_any: bool = False) -> None:
    """Re-check arity and placement invariants over the whole tree."""
    if tree.kind == ABSENT and not under_any:
        raise DiffTreeError("ABSENT is legal only directly under an ANY")
    if tree.kind == ANY:
        digests = [c.digest for c in tree.children]
        if len(set(digests)) != len(digests):
            raise DiffTreeError("ANY children are not deduplicated")
    for c in tree.children:
        validate(c, under_any=tree.kind == ANY)


# ---------------------------------------------------------------------------
# Choice assignments and instantiation
# ---------------------------------------------------------------------------

# Selections: ANY -> child index; OPT -> bool (present);
# MULTI -> tuple of per-copy assignments (paths relative to the template).
Selection = Union[int, bool, tuple]
ChoiceAssignment = dict[Path, Selection]


def instantiate(tree: DiffNode, choices: ChoiceAssignment) -> Ast:
    """Resolve every reachable choice and return the concrete query.

    An interior node whose children all resolve to nothing vanishes with
    them (e.g. a WHERE whose predicate list emptied out drops from the
    query), which keeps every instantiation inside the SQL grammar.
    """
    nodes = _instantiate_seq(tree, (), choices)
    if len(nodes) != 1:
        raise DiffTreeError(f"instantiation produced {len(nodes)} root nodes")
    return nodes[0]


def _instantiate_seq(node: DiffNode, path: Path, choices: ChoiceAssignment) -> list[Ast]:
    if node.kind == ABSENT:
        return []
    if node.kind == ALL:
        stamp = node.stamp
        if stamp.label in LEAF_LABELS:
            return [Ast(stamp.label, stamp.value)]
        kids: list[Ast] = []
        for i, c in enumerate(node.children):
            kids.extend(_instantiate_seq(c, path + (i,), choices))
        if not kids:
            return []  # vanished along with its children
        return [Ast(stamp.label, None, tuple(kids))]
    if node.kind == ANY:
        sel = choices.get(path)
        if sel is None:
            raise MissingChoiceError(path)
        return _instantiate_seq(node.children[sel], path + (sel,), choices)
    if node.kind == OPT:
        sel = choices.get(path)
        if sel is None:
            raise MissingChoiceError(path)
        if not sel:
            return []
        return _instantiate_seq(node.children[0], path + (0,), choices)
    if node.kind == MULTI:
        sel = choices.get(path)
        if sel is None:
            raise MissingChoiceError(path)
        out: list[Ast] = []
        for copy_choices in sel:
            out.extend(_instantiate_seq(node.children[0], (), copy_choices))
        return out
    raise DiffTreeError(f"unknown kind {node.kind}")


# ---------------------------------------------------------------------------
# Expressibility: exact backtracking match of a query against a DiffTree
# ---------------------------------------------------------------------------


def expressible(tree: DiffNode, q: Ast) -> Optional[ChoiceAssignment]:
    """First witnessing assignment with instantiate(tree, w) == q, else None."""
    for w in witnesses(tree, q):
        return w
    return None


class MatchBudgetExceeded(Exception):
    pass


def witnesses(
    tree: DiffNode, q: Ast, limit: Optional[int] = None, max_steps: Optional[int] = None
) -> Iterator[ChoiceAssignment]:
    """All assignments (up to `limit`) that instantiate the tree to exactly q.

    `max_steps` bounds the internal search effort; when it runs out the
    enumeration simply stops early (whatever was already yielded stands).
    Leave it None for exact, exhaustive enumeration.
    """
    matcher = _Matcher(max_steps)
    count = 0
    try:
        for asgn, consumed in matcher.match_one(tree, (), (q,)):
            if consumed == 1:
                yield asgn
                count += 1
                if limit is not None and count >= limit:
                    return
    except MatchBudgetExceeded:
        return


class _Matcher:
    """Backtracking matcher with a dead-end memo.

    Subproblems that produced no match are remembered (keyed by node
    digest and the identities of the remaining targets), which prunes the
    exponential re-exploration of failing branches while keeping the
    enumeration exact.
    """

    def __init__(self, max_steps: Optional[int] = None):
        self._dead: set = set()
        self._steps = 0
        self._max_steps = max_steps

    def match_one(
        self, node: DiffNode, path: Path, targets: tuple[Ast, ...]
    ) -> Iterator[tuple[ChoiceAssignment, int]]:
        if self._max_steps is not None:
            self._steps += 1
            if self._steps > self._max_steps:
                raise MatchBudgetExceeded
        key = (node.digest, tuple(map(id, targets)))
        if key in self._dead:
            return
        produced = False
        for out in self._match_one_raw(node, path, targets):
            produced = True
            yield out
        if not produced:
            self._dead.add(key)

    def _match_one_raw(
        self, node: DiffNode, path: Path, targets: tuple[Ast, ...]
    ) -> Iterator[tuple[ChoiceAssignment, int]]:
        if node.kind == ABSENT:
            yield {}, 0
            return
        if node.kind == ALL:
            stamp = node.stamp
            if stamp.label in LEAF_LABELS:
                if targets and targets[0].label == stamp.label and targets[0].value == stamp.value:
                    yield {}, 1
                return
            if targets and targets[0].label == stamp.label:
                t = targets[0]
                for asgn in self.match_seq(node.children, path, 0, t.children):
                    yield asgn, 1
            # An interior ALL may also vanish entirely when all children can
            # consume nothing (e.g. a MULTI child instantiated to zero copies).
            for asgn in self.match_seq(node.children, path, 0, ()):
                yield asgn, 0
            return
        if node.kind == ANY:
            for i, c in enumerate(node.children):
                for asgn, consumed in self.match_one(c, path + (i,), targets):
                    merged = dict(asgn)
                    merged[path] = i
                    yield merged, consumed
            return
        if node.kind == OPT:
            yield {path: False}, 0
            for asgn, consumed in self.match_one(node.children[0], path + (0,), targets):
                merged = dict(asgn)
                merged[path] = True
                yield merged, consumed
            return
        if node.kind == MULTI:
            template = node.children[0]

            def copies(rest: tuple[Ast, ...]) -> Iterator[tuple[list, int]]:
                yield [], 0
                # Each copy must consume at least one node, which bounds the
                # repetition count by the target sequence length.
                for asgn, consumed in self.match_one(template, (), rest):
                    if consumed == 0:
                        continue
                    for tail, tail_consumed in copies(rest[consumed:]):
                        yield [asgn] + tail, consumed + tail_consumed

            for copy_list, consumed in copies(targets):
                yield {path: tuple(copy_list)}, consumed
            return
        raise DiffTreeError(f"unknown kind {node.kind}")

    def match_seq(
        self, nodes: tuple[DiffNode, ...], base: Path, start: int, targets: tuple[Ast, ...]
    ) -> Iterator[ChoiceAssignment]:
        """Match a child sequence against a target sequence, consuming all of it."""
        if start == len(nodes):
            if not targets:
                yield {}
            return
        for asgn, consumed in self.match_one(nodes[start], base + (start,), targets):
            for rest in self.match_seq(nodes, base, start + 1, targets[consumed:]):
                merged = dict(asgn)
                merged.update(rest)
                yield merged


def expressible_set(tree: DiffNode, queries: list[Ast]) -> list[bool]:
    return [expressible(tree, q) is not None for q in queries]


def tree_to_json_str(tree: DiffNode) -> str:
    return json.dumps(tree.to_json(), indent=2)
