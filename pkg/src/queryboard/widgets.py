"""Widget catalog, widget trees, and widget application semantics.

A widget tree mirrors the structure of its DiffTree: every choice node
is bound by exactly one interaction widget (a MULTI by an adder), and an
ALL node with two or more choice-bearing children becomes a layout
widget grouping them.  Sizes are discrete (small/medium/large) and every
widget's extent is a pure function of its kind, size class, and domain,
measured in abstract character-cell grid units.

A widget is a function from (current query, user pick) to a new query:
it rewrites the subtree at its bound path.  Applying widgets can never
produce an unparseable query; selections are validated against the
widget's domain first.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
import itertools
import math
import random
from typing import Any, Iterator, Optional

from . import difftree as dt
from .difftree import (
    ABSENT,
    ALL,
    ANY,
    MULTI,
    OPT,
    ChoiceAssignment,
    DiffNode,
    Path,
)
from .sqlast import Ast, LEAF_LABELS, parse, to_sql

INTERACTION_KINDS = (
    "label",
    "textbox",
    "dropdown",
    "slider",
    "range_slider",
    "checkboxes",
    "radio_buttons",
    "buttons",
    "toggle",
)
LAYOUT_KINDS = ("horizontal", "vertical", "tabs", "adder")
SIZE_CLASSES = ("small", "medium", "large")
SIZE_MULT = {"small": 1.0, "medium": 1.5, "large": 2.0}

MAX_TOKEN_DISPLAY = 24  # longer option labels are truncated for display


class WidgetError(Exception):
    pass


class UnmappableNodeError(WidgetError):
    """No catalog widget can express the choice node's domain."""


class OutOfDomainError(WidgetError):
    def __init__(self, u: str, domain: list[str]):
        super().__init__(f"selection {u!r} not in domain {domain}")
        self.domain = domain


class PathInvalidError(WidgetError):
    """The widget's bound region is absent from the current query."""


class SpaceTooLargeError(WidgetError):
    pass


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """What a widget lets the user choose from, plus cost-model features."""

    tokens: tuple[str, ...]
    value_type: str  # numeric | string | subtree | binary | count | numeric_pair
    has_absent: bool = False

    @property
    def cardinality(self) -> int:
        return len(self.tokens)

    @cached_property
    def max_token_len(self) -> int:
        return max((len(t) for t in self.tokens), default=1)


def _truncate(s: str) -> str:
    return s if len(s) <= MAX_TOKEN_DISPLAY else s[: MAX_TOKEN_DISPLAY - 1] + "…"


def fragment(node: DiffNode) -> str:
    """Compact SQL-ish rendering of a DiffTree region for option labels."""
    if node.kind == ABSENT:
        return "(none)"
    if node.kind == ANY:
        return "…"
    if node.kind == OPT:
        return f"[{fragment(node.children[0])}]"
    if node.kind == MULTI:
        return f"{fragment(node.children[0])}…"
    stamp = node.stamp
    label = stamp.label
    if label == "AggExpr":
        return "count(*)"
    if label in LEAF_LABELS:
        return "'%s'" % stamp.value if label == "StrExpr" else (stamp.value or "")
    kids = [fragment(c) for c in node.children]
    if label == "Project":
        return kids[0]
    if label == "Top":
        return f"top {kids[0]}"
    if label == "From":
        return f"from {kids[0]}"
    if label == "Where":
        return f"where {kids[0]}"
    if label == "And":
        return " and ".join(kids)
    if label == "BiExpr":
        return " ".join(kids)
    if label == "Between":
        return f"{kids[0]} between {kids[1]} and {kids[2]}"
    if label == "Select":
        return "select " + " ".join(kids)
    return " ".join(kids)


def _option_tokens(children: tuple[DiffNode, ...]) -> tuple[str, ...]:
    tokens: list[str] = []
    seen: dict[str, int] = {}
    for c in children:
        tok = _truncate(fragment(c))
        if tok in seen:
            seen[tok] += 1
            tok = f"{tok}#{seen[tok]}"
        else:
            seen[tok] = 0
        tokens.append(tok)
    return tuple(tokens)


def _is_between_pair_domain(options: list[DiffNode]) -> bool:
    """True when every option is a concrete x BETWEEN lo AND hi subtree over
    the same column, so a range slider can express the choice."""
    cols = set()
    for m in options:
        if m.kind != ALL or m.stamp.label != "Between" or len(m.children) != 3:
            return False
        col, lo, hi = m.children
        for leaf, lbl in ((col, "ColExpr"), (lo, "NumExpr"), (hi, "NumExpr")):
            if leaf.kind != ALL or leaf.stamp.label != lbl:
                return False
        cols.add(col.stamp.value)
    return len(cols) == 1


def node_domain(node: DiffNode) -> Domain:
    if node.kind == OPT:
        return Domain(("on", "off"), "binary")
    if node.kind == MULTI:
        return Domain(("add", "remove"), "count")
    if node.kind != ANY:
        raise WidgetError(f"{node.kind} is not a choice node")
    options = [c for c in node.children if c.kind != ABSENT]
    has_absent = len(options) < len(node.children)
    tokens = _option_tokens(node.children)
    leaf_labels = {dtree_leaf_label(m) for m in options}
    if leaf_labels == {"NumExpr"}:
        vtype = "numeric"
    elif None not in leaf_labels and leaf_labels:
        vtype = "string"
    elif _is_between_pair_domain(options):
        vtype = "numeric_pair"
    else:
        vtype = "subtree"
    return Domain(tokens, vtype, has_absent)


def dtree_leaf_label(node: DiffNode) -> Optional[str]:
    if node.kind == ALL and node.stamp.label in LEAF_LABELS:
        return node.stamp.label
    return None


def candidate_widgets(node: DiffNode) -> list[tuple[str, str]]:
    """All (kind, size_class) pairs able to render the node's domain."""
    if node.kind == MULTI:
        return [("adder", s) for s in SIZE_CLASSES]
    dom = node_domain(node)
    kinds: list[str] = []
    if node.kind == OPT:
        kinds = ["toggle", "checkboxes"]
    else:
        if dom.cardinality == 1:
            kinds.append("label")
        kinds.extend(["dropdown", "radio_buttons", "buttons"])
        if dom.value_type == "numeric" and not dom.has_absent and dom.cardinality >= 2:
            kinds.append("slider")
        if dom.value_type == "numeric_pair" and not dom.has_absent:
            kinds.append("range_slider")
        if dom.value_type in ("numeric", "string") and not dom.has_absent:
            kinds.append("textbox")
        if dom.cardinality == 2:
            kinds.extend(["toggle", "checkboxes"])
    if not kinds:
        raise UnmappableNodeError(f"no widget can render domain {dom.tokens}")
    order = {k: i for i, k in enumerate(INTERACTION_KINDS)}
    kinds.sort(key=lambda k: order[k])
    return [(k, s) for k in kinds for s in SIZE_CLASSES]


# ---------------------------------------------------------------------------
# Widget nodes and extents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WidgetNode:
    kind: str
    size_class: str = "small"
    binding: Optional[Path] = None
    domain: Optional[Domain] = None
    children: tuple["WidgetNode", ...] = ()
    label: str = ""

    @property
    def is_interaction(self) -> bool:
        return self.kind in INTERACTION_KINDS

    def walk(self, prefix: Path = ()) -> Iterator[tuple[Path, "WidgetNode"]]:
        yield prefix, self
        for i, c in enumerate(self.children):
            yield from c.walk(prefix + (i,))

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "size_class": self.size_class,
            "binding_path": list(self.binding) if self.binding is not None else None,
            "domain": list(self.domain.tokens) if self.domain else [],
            "label": self.label,
            "extent": list(layout_extent(self)),
            "children": [c.to_json() for c in self.children],
        }


def _scaled(w: float, h: float, size_class: str) -> tuple[int, int]:
    m = SIZE_MULT[size_class]
    return math.ceil(w * m), math.ceil(h * m)


def interaction_extent(
    kind: str, size_class: str, domain: Domain, label: str
) -> tuple[int, int]:
    lab = len(label) + 2 if label else 0
    n = domain.cardinality
    tok = min(domain.max_token_len, MAX_TOKEN_DISPLAY)
    if kind == "label":
        return _scaled(lab + tok, 1, size_class)
    if kind == "textbox":
        return _scaled(lab + 14, 1, size_class)
    if kind == "dropdown":
        return _scaled(lab + tok + 6, 1, size_class)
    if kind == "slider":
        return _scaled(lab + 18, 2, size_class)
    if kind == "range_slider":
        return _scaled(lab + 22, 2, size_class)
    if kind == "toggle":
        return _scaled(lab + 8, 1, size_class)
    if kind == "checkboxes":
        return _scaled(max(tok + 6, lab), n + 1, size_class)
    if kind == "radio_buttons":
        return _scaled(max(tok + 6, lab), n + 1, size_class)
    if kind == "buttons":
        width = sum(min(len(t), MAX_TOKEN_DISPLAY) + 6 for t in domain.tokens)
        return _scaled(max(width, lab), 2, size_class)
    raise WidgetError(f"no extent rule for {kind}")


def layout_extent(w: WidgetNode) -> tuple[int, int]:
    """Extent in grid cells: interaction widgets by table, layouts by their
    children (vertical stacks, horizontal sums, tabs take the max page)."""
    if w.is_interaction:
        assert w.domain is not None
        return interaction_extent(w.kind, w.size_class, w.domain, w.label)
    kids = [layout_extent(c) for c in w.children]
    if w.kind == "adder":
        kw = max((x for x, _ in kids), default=12)
        kh = sum(y for _, y in kids)
        return max(kw, 12), kh + 1  # one row for the add/remove controls
    if not kids:
        return 0, 0
    gaps = len(kids) - 1
    if w.kind == "vertical":
        return max(x for x, _ in kids), sum(y for _, y in kids) + gaps
    if w.kind == "horizontal":
        return sum(x for x, _ in kids) + 2 * gaps, max(y for _, y in kids)
    if w.kind == "tabs":
        return max(x for x, _ in kids) + 2, max(y for _, y in kids) + 2
    raise WidgetError(f"no extent rule for {w.kind}")


# ---------------------------------------------------------------------------
# Assignment planning: which decisions produce a widget tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChoiceSlot:
    path: Path
    node: DiffNode
    domain: Domain
    label: str
    candidates: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class WidgetPlan:
    """The assignment search space for one DiffTree: one (kind, size)
    decision per choice node plus an orientation per grouping node."""

    tree: DiffNode
    choice_slots: tuple[ChoiceSlot, ...]
    orient_paths: tuple[Path, ...]

    def space_size(self) -> int:
        size = 1
        for slot in self.choice_slots:
            size *= len(slot.candidates)
        size *= 2 ** len(self.orient_paths)
        return size


def _display_label(node: DiffNode, context: Optional[str]) -> str:
    if context:
        return context.lower()
    if node.kind == OPT and node.children[0].kind == ALL:
        return node.children[0].stamp.label.lower()
    if node.kind in (ANY, MULTI):
        for c in node.children:
            if c.kind == ALL:
                return c.stamp.label.lower()
    return "query"


def plan_widgets(tree: DiffNode) -> WidgetPlan:
    slots: list[ChoiceSlot] = []
    orients: list[Path] = []

    def visit(node: DiffNode, path: Path, context: Optional[str]) -> bool:
        """Returns True when the region contributes at least one widget."""
        if node.kind == ABSENT:
            return False
        if node.kind == ALL:
            if node.is_leaf_all:
                return False
            parts = [
                visit(c, path + (i,), node.stamp.label if len(node.children) == 1 else None)
                for i, c in enumerate(node.children)
            ]
            live = sum(parts)
            if live >= 2:
                orients.append(path)
            return live > 0
        label = _display_label(node, context)
        slots.append(ChoiceSlot(path, node, node_domain(node), label, tuple(candidate_widgets(node))))
        if node.kind == ANY:
            nested = sum(visit(c, path + (i,), None) for i, c in enumerate(node.children))
        else:
            nested = 1 if visit(node.children[0], path + (0,), None) else 0
        if nested > 0:
            orients.append(path)
        return True

    visit(tree, (), None)
    slots.sort(key=lambda s: s.path)
    return WidgetPlan(tree, tuple(slots), tuple(sorted(set(orients))))


Decisions = dict[tuple[str, Path], Any]  # ("widget", path) -> (kind, size); ("orient", path) -> str


def random_decisions(plan: WidgetPlan, rng: random.Random) -> Decisions:
    d: Decisions = {}
    for slot in plan.choice_slots:
        d[("widget", slot.path)] = rng.choice(slot.candidates)
    for p in plan.orient_paths:
        d[("orient", p)] = rng.choice(("vertical", "horizontal"))
    return d


def enumerate_decisions(plan: WidgetPlan, bound: int) -> Iterator[Decisions]:
    size = plan.space_size()
    if size > bound:
        raise SpaceTooLargeError(f"assignment space {size} exceeds bound {bound}")
    keys: list[tuple[str, Path]] = [("widget", s.path) for s in plan.choice_slots]
    keys += [("orient", p) for p in plan.orient_paths]
    pools: list[tuple] = [s.candidates for s in plan.choice_slots]
    pools += [("horizontal", "vertical")] * len(plan.orient_paths)
    for combo in itertools.product(*pools):
        yield dict(zip(keys, combo))


def build_widget_tree(plan: WidgetPlan, decisions: Decisions) -> Optional[WidgetNode]:
    """Materialize the widget tree for one full set of decisions."""
    slot_by_path = {s.path: s for s in plan.choice_slots}

    def orient(path: Path) -> str:
        return decisions.get(("orient", path), "vertical")

    def group(path: Path, parts: list[WidgetNode]) -> WidgetNode:
        if len(parts) == 1:
            return parts[0]
        return WidgetNode(orient(path), children=tuple(parts))

    def visit(node: DiffNode, path: Path) -> Optional[WidgetNode]:
        if node.kind == ABSENT or (node.kind == ALL and node.is_leaf_all):
            return None
        if node.kind == ALL:
            parts = [w for i, c in enumerate(node.children) if (w := visit(c, path + (i,)))]
            if not parts:
                return None
            return group(path, parts)
        slot = slot_by_path[path]
        kind, size = decisions[("widget", path)]
        if node.kind == MULTI:
            inner = visit(node.children[0], path + (0,))
            kids = (inner,) if inner else ()
            return WidgetNode("adder", size, path, slot.domain, kids, slot.label)
        own = WidgetNode(kind, size, path, slot.domain, (), slot.label)
        if node.kind == ANY:
            nested = [w for i, c in enumerate(node.children) if (w := visit(c, path + (i,)))]
        else:
            inner = visit(node.children[0], path + (0,))
            nested = [inner] if inner else []
        if not nested:
            return own
        return group(path, [own] + nested)

    return visit(plan.tree, ())


# ---------------------------------------------------------------------------
# Interface specs and live interaction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterfaceSpec:
    tree: DiffNode
    plan: WidgetPlan
    decisions: Decisions
    widget_tree: Optional[WidgetNode]
    screen: tuple[int, int]
    assignment: ChoiceAssignment
    current_query: Ast

    @property
    def current_sql(self) -> str:
        return to_sql(self.current_query)

    def extent(self) -> tuple[int, int]:
        if self.widget_tree is None:
            return (0, 0)
        return layout_extent(self.widget_tree)

    def fits_screen(self) -> bool:
        w, h = self.extent()
        return w <= self.screen[0] and h <= self.screen[1]

    def to_json(self) -> dict:
        return {
            "screen": list(self.screen),
            "widget_tree": self.widget_tree.to_json() if self.widget_tree else None,
            "current_query_sql": self.current_sql,
            "current_query_ast": self.current_query.to_json(),
            "visualization_slot": {"type": "results-table"},
        }


def make_spec(
    tree: DiffNode,
    decisions: Decisions,
    screen: tuple[int, int],
    initial_query: Ast,
    plan: Optional[WidgetPlan] = None,
) -> InterfaceSpec:
    plan = plan or plan_widgets(tree)
    widget_tree = build_widget_tree(plan, decisions)
    witness = dt.expressible(tree, initial_query)
    if witness is None:
        raise WidgetError("initial query is not expressible by the tree")
    return InterfaceSpec(tree, plan, decisions, widget_tree, screen, witness, initial_query)


def reachable_choices(tree: DiffNode, assignment: ChoiceAssignment) -> set[Path]:
    """Choice paths visited when instantiating under the assignment."""
    out: set[Path] = set()

    def visit(node: DiffNode, path: Path):
        if node.kind == ALL:
            for i, c in enumerate(node.children):
                visit(c, path + (i,))
        elif node.kind == ANY:
            out.add(path)
            sel = assignment.get(path)
            if isinstance(sel, int) and 0 <= sel < len(node.children):
                visit(node.children[sel], path + (sel,))
        elif node.kind == OPT:
            out.add(path)
            if assignment.get(path):
                visit(node.children[0], path + (0,))
        elif node.kind == MULTI:
            out.add(path)

    visit(tree, ())
    return out


def default_assignment_for(node: DiffNode, path: Path, into: ChoiceAssignment):
    """Fill defaults for every choice reachable below `node`."""
    if node.kind == ALL:
        for i, c in enumerate(node.children):
            default_assignment_for(c, path + (i,), into)
    elif node.kind == ANY:
        if path not in into or not isinstance(into[path], int):
            idx = next(
                (i for i, c in enumerate(node.children) if c.kind != ABSENT), 0
            )
            into[path] = idx
        sel = into[path]
        default_assignment_for(node.children[sel], path + (sel,), into)
    elif node.kind == OPT:
        if path not in into:
            into[path] = True
        if into[path]:
            default_assignment_for(node.children[0], path + (0,), into)
    elif node.kind == MULTI:
        if path not in into:
            copy: ChoiceAssignment = {}
            default_assignment_for(node.children[0], (), copy)
            into[path] = (copy,)


def complete_assignment(tree: DiffNode, assignment: ChoiceAssignment) -> ChoiceAssignment:
    filled = dict(assignment)
    default_assignment_for(tree, (), filled)
    return filled


def _resolve_option(domain: Domain, u: str) -> int:
    try:
        return domain.tokens.index(u)
    except ValueError:
        raise OutOfDomainError(u, list(domain.tokens)) from None


def apply_widget(
    spec: InterfaceSpec, widget_path: Path, u: str, copy: Optional[int] = None
) -> InterfaceSpec:
    """One interaction: update the bound choice and re-derive the query.

    `widget_path` is the widget's binding path into the DiffTree.  For
    widgets inside an adder template, `copy` picks the template copy.
    Free-typed textbox input is validated by type and must land on one of
    the observed domain values, which keeps the current query expressible.
    """
    slot = next((s for s in spec.plan.choice_slots if s.path == widget_path), None)
    if slot is None:
        raise PathInvalidError(f"no widget bound at {list(widget_path)}")

    assignment = dict(spec.assignment)
    multi_prefix = _enclosing_multi(spec.tree, widget_path)
    if multi_prefix is not None and len(multi_prefix) < len(widget_path):
        # A control inside an adder template: rewrite one copy's choices.
        sel = assignment.get(multi_prefix)
        if not isinstance(sel, tuple) or not sel:
            raise PathInvalidError("no copies to edit")
        idx = 0 if copy is None else copy
        if idx < 0 or idx >= len(sel):
            raise PathInvalidError(f"copy {idx} out of range")
        rel = widget_path[len(multi_prefix) + 1 :]
        copy_asgn = dict(sel[idx])
        node = spec.tree.at(widget_path)
        copy_asgn[rel] = _selection_for(node, slot.domain, u)
        assignment[multi_prefix] = sel[:idx] + (copy_asgn,) + sel[idx + 1 :]
    else:
        node = spec.tree.at(widget_path)
        if node.kind == MULTI:
            sel = assignment.get(widget_path, ())
            assert isinstance(sel, tuple)
            if u == "add":
                copy_asgn: ChoiceAssignment = {}
                default_assignment_for(node.children[0], (), copy_asgn)
                assignment[widget_path] = sel + (copy_asgn,)
            elif u == "remove":
                if not sel:
                    raise OutOfDomainError(u, ["add"])
                assignment[widget_path] = sel[:-1]
            else:
                raise OutOfDomainError(u, ["add", "remove"])
        else:
            if widget_path not in reachable_choices(spec.tree, assignment):
                raise PathInvalidError(
                    f"widget {slot.label!r} is inactive in the current query"
                )
            assignment[widget_path] = _selection_for(node, slot.domain, u)

    assignment = complete_assignment(spec.tree, assignment)
    new_query = dt.instantiate(spec.tree, assignment)
    to_sql(new_query)  # guard: every interaction yields a parseable query
    return replace(spec, assignment=assignment, current_query=new_query)


def _selection_for(node: DiffNode, domain: Domain, u: str):
    if node.kind == OPT:
        if u not in ("on", "off"):
            raise OutOfDomainError(u, ["on", "off"])
        return u == "on"
    return _resolve_option(domain, u)


def _enclosing_multi(tree: DiffNode, path: Path) -> Optional[Path]:
    node = tree
    for depth, i in enumerate(path):
        if node.kind == MULTI:
            return path[:depth]
        node = node.children[i]
    return None


def widget_states(spec: InterfaceSpec) -> list[dict]:
    """Per-widget selection and enabled flag for the UI."""
    reachable = reachable_choices(spec.tree, spec.assignment)
    states = []
    for slot in spec.plan.choice_slots:
        sel = spec.assignment.get(slot.path)
        node = spec.tree.at(slot.path)
        if node.kind == OPT:
            shown = "on" if sel else "off"
        elif node.kind == MULTI:
            shown = str(len(sel)) if isinstance(sel, tuple) else "0"
        elif isinstance(sel, int):
            shown = slot.domain.tokens[sel]
        else:
            shown = None
        multi = _enclosing_multi(spec.tree, slot.path)
        if multi is not None and len(multi) < len(slot.path):
            enabled = multi in reachable and bool(spec.assignment.get(multi))
        else:
            enabled = slot.path in reachable
        states.append(
            {
                "binding_path": list(slot.path),
                "label": slot.label,
                "selection": shown,
                "enabled": enabled,
            }
        )
    return states
