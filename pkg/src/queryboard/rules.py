"""Rewrite rules over DiffTrees.

Every rule preserves expressibility of the whole input log: a query
expressible before an application stays expressible after (the set may
grow).  All rules except Multi come in inverse pairs:

  Any2All / All2Any   factor an ANY of like-rooted trees into an ALL of
                      per-slot choices, and expand one such slot back out
  Any2Opt / Opt2Any   trade ANY{x, empty} against OPT(x)
  AnyPush / AnyPull   nest a group of ANY children under an inner ANY,
                      and flatten an inner ANY back into its parent
  Multi               collapse a run of isomorphic siblings into a MULTI
                      over one template (one-way)

Multi only fires under variable-arity grammar nodes (the AND conjunction)
so that adding or removing copies can never leave the SQL grammar.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Any, Iterator, Optional

from .difftree import (
    ABSENT,
    ABSENT_NODE,
    ALL,
    ANY,
    MULTI,
    OPT,
    DiffNode,
    Path,
    Stamp,
    expressible,
    make_any,
)
from .sqlast import ARITY, LEAF_LABELS, QueryLog

RULE_NAMES = ("All2Any", "Any2All", "Any2Opt", "AnyPull", "AnyPush", "Multi", "Opt2Any")

INVERSE = {
    "Any2All": "All2Any",
    "All2Any": "Any2All",
    "Any2Opt": "Opt2Any",
    "Opt2Any": "Any2Opt",
    "AnyPush": "AnyPull",
    "AnyPull": "AnyPush",
}


class StaleApplicationError(Exception):
    """The site no longer matches the rule's input pattern."""


@dataclass(frozen=True)
class RuleApplication:
    rule: str
    site: Path
    bindings: tuple[tuple[str, Any], ...] = ()

    def binding(self, name: str) -> Any:
        for k, v in self.bindings:
            if k == name:
                return v
        raise KeyError(name)

    def to_json(self, before: Optional[DiffNode] = None, after: Optional[DiffNode] = None) -> dict:
        out: dict = {"rule": self.rule, "site_path": list(self.site)}
        out.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in self.bindings})
        if before is not None:
            out["before_digest"] = before.digest
        if after is not None:
            out["after_digest"] = after.digest
        return out


# ---------------------------------------------------------------------------
# Alignment of child sequences (for Any2All)
# ---------------------------------------------------------------------------


def _align_key(node: DiffNode) -> tuple:
    # ALL nodes align by root label, ignoring leaf values.  A leaf-domain
    # ANY aligns like the leaf it stands for, so partially factored trees
    # keep aligning (their domains merge).  Other choice nodes only align
    # with an identical node.
    leafish = _leafish_label(node)
    if leafish is not None:
        return (ALL, leafish)
    if node.kind == ALL:
        return (ALL, node.stamp.label)
    if node.kind == ABSENT:
        return (ABSENT,)
    return (node.kind, node.digest)


def _lcs_align(slot_keys: list[tuple], elems: list[DiffNode]) -> list[tuple[Optional[int], Optional[int]]]:
    """Align existing slots against a new element sequence.

    Returns (slot_index, elem_index) pairs in merged order; None marks an
    unmatched side.  Ties in the LCS are broken leftmost.
    """
    keys = [_align_key(e) for e in elems]
    n, m = len(slot_keys), len(keys)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if slot_keys[i] == keys[j]:
                dp[i][j] = dp[i + 1][j + 1] + 1
            else:
                dp[i][j] = max(dp[i + 1][j], dp[i][j + 1])
    out: list[tuple[Optional[int], Optional[int]]] = []
    i = j = 0
    while i < n and j < m:
        if slot_keys[i] == keys[j] and dp[i][j] == dp[i + 1][j + 1] + 1:
            out.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            out.append((i, None))
            i += 1
        else:
            out.append((None, j))
            j += 1
    for k in range(i, n):
        out.append((k, None))
    for k in range(j, m):
        out.append((None, k))
    return out


def align_sequences(sequences: list[tuple[DiffNode, ...]]) -> list[list[Optional[DiffNode]]]:
    """Progressively align child sequences into slots.

    Each slot holds one entry per input sequence; None stands for the
    empty subtree at that position.
    """
    slots: list[list[Optional[DiffNode]]] = [[e] for e in sequences[0]]
    for seq_idx in range(1, len(sequences)):
        elems = list(sequences[seq_idx])
        slot_keys = [
            _align_key(next(me for me in slot if me is not None)) for slot in slots
        ]
        merged: list[list[Optional[DiffNode]]] = []
        for si, ej in _lcs_align(slot_keys, elems):
            if si is not None and ej is not None:
                merged.append(slots[si] + [elems[ej]])
            elif si is not None:
                merged.append(slots[si] + [None])
            else:
                merged.append([None] * seq_idx + [elems[ej]])
        slots = merged
    return slots


# ---------------------------------------------------------------------------
# Isomorphism up to leaf values (for Multi)
# ---------------------------------------------------------------------------


def _leafish_label(node: DiffNode) -> Optional[str]:
    """Label of a leaf-valued position: a leaf ALL, or an ANY over
    same-labeled leaf ALLs (an already-merged leaf domain)."""
    if node.kind == ALL and node.stamp.label in LEAF_LABELS:
        return node.stamp.label
    if node.kind == ANY and all(c.kind == ALL and c.stamp.label in LEAF_LABELS for c in node.children):
        labels = {c.stamp.label for c in node.children}
        if len(labels) == 1:
            return labels.pop()
    return None


def _iso(a: DiffNode, b: DiffNode) -> bool:
    la, lb = _leafish_label(a), _leafish_label(b)
    if la is not None or lb is not None:
        return la == lb
    if a.kind != b.kind:
        return False
    if a.kind == ALL:
        return (
            a.stamp.label == b.stamp.label
            and len(a.children) == len(b.children)
            and all(_iso(x, y) for x, y in zip(a.children, b.children))
        )
    if a.kind == OPT:
        return _iso(a.children[0], b.children[0])
    if a.kind == ANY:
        return a.digest == b.digest
    return False  # MULTI and ABSENT never join a run


def _leaf_options(node: DiffNode) -> list[DiffNode]:
    if node.kind == ANY:
        return list(node.children)
    return [node]


def _merge_iso(a: DiffNode, b: DiffNode) -> DiffNode:
    if _leafish_label(a) is not None:
        opts = _leaf_options(a) + _leaf_options(b)
        merged = make_any(opts)
        return merged.children[0] if len(merged.children) == 1 else merged
    if a.kind == ALL:
        kids = tuple(_merge_iso(x, y) for x, y in zip(a.children, b.children))
        return DiffNode(ALL, a.payload, kids)
    if a.kind == OPT:
        return DiffNode(OPT, (), (_merge_iso(a.children[0], b.children[0]),))
    return a  # identical ANY


# ---------------------------------------------------------------------------
# Per-rule pattern matching
# ---------------------------------------------------------------------------


def _any2all_result(node: DiffNode) -> Optional[DiffNode]:
    """The factored ALL for an Any2All site, or None when not applicable.

    Applicable when every child is an ALL with the same stamp and the
    aligned slots cannot instantiate to a child count outside the stamp
    label's grammar arity (an aligned gap under AND is a legal optional
    predicate; under BETWEEN it would leave the grammar, so the rule
    refuses the site).
    """
    if node.kind != ANY:
        return None
    first = node.children[0]
    if first.kind != ALL:
        return None
    stamp = first.stamp
    if not all(c.kind == ALL and c.stamp == stamp for c in node.children):
        return None
    if stamp.label in LEAF_LABELS:
        return DiffNode(ALL, (stamp,))
    slots = align_sequences([c.children for c in node.children])
    slot_nodes: list[DiffNode] = []
    min_count = 0
    max_count = 0
    for slot in slots:
        members = [m for m in slot if m is not None]
        has_absent = len(members) < len(slot)
        options: list[DiffNode] = []
        if all(_leafish_label(m) is not None for m in members):
            for m in members:  # merge leaf domains instead of nesting ANYs
                options.extend(_leaf_options(m))
        else:
            options = members
        distinct: list[DiffNode] = []
        seen: set[str] = set()
        for m in options:
            if m.digest not in seen:
                seen.add(m.digest)
                distinct.append(m)
        if not has_absent and len(distinct) == 1:
            slot_nodes.append(distinct[0])
        else:
            slot_nodes.append(make_any(distinct + ([ABSENT_NODE] if has_absent else [])))
        slot_min, slot_max = _contribution(slot_nodes[-1])
        min_count += slot_min
        max_count = None if max_count is None or slot_max is None else max_count + slot_max
    lo, hi = ARITY.get(stamp.label, (1, None))
    if min_count < lo:
        return None
    if hi is not None and (max_count is None or max_count > hi):
        return None
    return DiffNode(ALL, (stamp,), tuple(slot_nodes))


def _contribution(node: DiffNode) -> tuple[int, Optional[int]]:
    """Bounds on how many AST nodes this child can contribute to its
    parent's child list (None means unbounded)."""
    if node.kind == ABSENT:
        return 0, 0
    if node.kind == MULTI:
        return 0, None
    if node.kind == OPT:
        return 0, _contribution(node.children[0])[1]
    if node.kind == ANY:
        lo = min(_contribution(c)[0] for c in node.children)
        his = [_contribution(c)[1] for c in node.children]
        hi = None if any(h is None for h in his) else max(his)
        return lo, hi
    if node.is_leaf_all:
        return 1, 1
    lo = 0 if all(_contribution(c)[0] == 0 for c in node.children) else 1
    return lo, 1


def _all2any_slots(node: DiffNode) -> list[int]:
    if node.kind != ALL or node.stamp.label in LEAF_LABELS:
        return []
    sibling_labels = [
        c.stamp.label for c in node.children if c.kind == ALL
    ]
    out: list[int] = []
    for j, child in enumerate(node.children):
        if child.kind != ANY or len(child.children) < 2:
            continue
        members = [m for m in child.children if m.kind != ABSENT]
        if not members or any(m.kind != ALL for m in members):
            continue
        labels = {m.stamp.label for m in members}
        if len(labels) != 1:
            continue
        label = labels.pop()
        if sibling_labels.count(label) > 0:
            continue
        if len(members) < len(child.children) and len(node.children) < 2:
            continue  # dropping the only child would break arity
        out.append(j)
    return out


def _apply_all2any(node: DiffNode, j: int) -> DiffNode:
    slot = node.children[j]
    variants: list[DiffNode] = []
    for m in slot.children:
        if m.kind == ABSENT:
            kids = node.children[:j] + node.children[j + 1 :]
        else:
            kids = node.children[:j] + (m,) + node.children[j + 1 :]
        variants.append(DiffNode(ALL, node.payload, kids))
    return make_any(variants)


def _any2opt_present_index(node: DiffNode) -> Optional[int]:
    if node.kind != ANY or len(node.children) != 2:
        return None
    kinds = [c.kind for c in node.children]
    if kinds.count(ABSENT) != 1:
        return None
    return 0 if kinds[1] == ABSENT else 1


def _anypush_groups(node: DiffNode) -> list[tuple[int, ...]]:
    if node.kind != ANY:
        return []
    groups: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    non_absent = tuple(i for i, c in enumerate(node.children) if c.kind != ABSENT)
    if len(non_absent) >= 2 and len(non_absent) < len(node.children):
        groups.append(non_absent)
        seen.add(non_absent)
    label_order: list[str] = []
    by_label: dict[str, list[int]] = {}
    for i, c in enumerate(node.children):
        if c.kind == ALL:
            label = c.stamp.label
            if label not in by_label:
                by_label[label] = []
                label_order.append(label)
            by_label[label].append(i)
    for label in label_order:
        idxs = tuple(by_label[label])
        if 2 <= len(idxs) < len(node.children) and idxs not in seen:
            groups.append(idxs)
            seen.add(idxs)
    return groups


def _apply_anypush(node: DiffNode, group: tuple[int, ...]) -> DiffNode:
    inner = make_any([node.children[i] for i in group])
    rest = [c for i, c in enumerate(node.children) if i not in group]
    return make_any([inner] + rest)


def _multi_runs(node: DiffNode) -> list[tuple[int, int]]:
    if node.kind != ALL or node.stamp.label in LEAF_LABELS:
        return []
    lo, hi = ARITY.get(node.stamp.label, (1, 1))
    if hi is not None:
        return []  # fixed-arity construct: repetition would leave the grammar
    runs: list[tuple[int, int]] = []
    kids = node.children
    i = 0
    while i < len(kids):
        if kids[i].kind in (MULTI, ABSENT):
            i += 1
            continue
        j = i
        while (
            j + 1 < len(kids)
            and kids[j + 1].kind not in (MULTI, ABSENT)
            and _iso(kids[j], kids[j + 1])
        ):
            j += 1
        if j > i:
            runs.append((i, j - i + 1))
        i = j + 1
    return runs


def _apply_multi(node: DiffNode, start: int, length: int) -> DiffNode:
    run = node.children[start : start + length]
    template = reduce(_merge_iso, run)
    multi = DiffNode(MULTI, (), (template,))
    kids = node.children[:start] + (multi,) + node.children[start + length :]
    return DiffNode(ALL, node.payload, kids)


# ---------------------------------------------------------------------------
# Enumeration and application
# ---------------------------------------------------------------------------


def enumerate_applications(tree: DiffNode) -> list[RuleApplication]:
    """All applicable (rule, site) pairs, pre-order and rule-name-ordered."""
    apps: list[RuleApplication] = []

    def visit(node: DiffNode, path: Path):
        kind = node.kind
        if kind == ALL:
            local: list[RuleApplication] = [
                RuleApplication("All2Any", path, (("slot", j),))
                for j in _all2any_slots(node)
            ]
            for start, length in _multi_runs(node):
                local.append(
                    RuleApplication("Multi", path, (("start", start), ("length", length)))
                )
            if local:
                if len(local) > 1:
                    local.sort(key=lambda a: (a.rule, a.bindings))
                apps.extend(local)
        elif kind == ANY:
            local = []
            if _any2all_result(node) is not None:
                local.append(RuleApplication("Any2All", path))
            present = _any2opt_present_index(node)
            if present is not None:
                local.append(RuleApplication("Any2Opt", path, (("present_index", present),)))
            for i, c in enumerate(node.children):
                if c.kind == ANY:
                    local.append(RuleApplication("AnyPull", path, (("nested_index", i),)))
            for group in _anypush_groups(node):
                local.append(RuleApplication("AnyPush", path, (("group", group),)))
            if local:
                if len(local) > 1:
                    local.sort(key=lambda a: (a.rule, a.bindings))
                apps.extend(local)
        elif kind == OPT:
            apps.append(RuleApplication("Opt2Any", path))
        elif kind == ABSENT:
            return
        for i, c in enumerate(node.children):
            visit(c, path + (i,))

    visit(tree, ())
    return apps


def apply(tree: DiffNode, app: RuleApplication) -> DiffNode:
    """Apply one rule application, re-matching the pattern at the site."""
    try:
        node = tree.at(app.site)
    except IndexError:
        raise StaleApplicationError(f"site {list(app.site)} no longer exists")
    rule = app.rule
    if rule == "Any2All":
        new = _any2all_result(node)
        if new is None:
            raise StaleApplicationError("Any2All pattern no longer matches")
    elif rule == "All2Any":
        j = app.binding("slot")
        if j not in _all2any_slots(node):
            raise StaleApplicationError("All2Any pattern no longer matches")
        new = _apply_all2any(node, j)
    elif rule == "Any2Opt":
        present = _any2opt_present_index(node)
        if present is None or present != app.binding("present_index"):
            raise StaleApplicationError("Any2Opt pattern no longer matches")
        new = DiffNode(OPT, (), (node.children[present],))
    elif rule == "Opt2Any":
        if node.kind != OPT:
            raise StaleApplicationError("Opt2Any pattern no longer matches")
        new = make_any([node.children[0], ABSENT_NODE])
    elif rule == "AnyPull":
        i = app.binding("nested_index")
        if node.kind != ANY or i >= len(node.children) or node.children[i].kind != ANY:
            raise StaleApplicationError("AnyPull pattern no longer matches")
        spliced = list(node.children[:i]) + list(node.children[i].children) + list(
            node.children[i + 1 :]
        )
        new = make_any(spliced)
    elif rule == "AnyPush":
        group = app.binding("group")
        if group not in _anypush_groups(node):
            raise StaleApplicationError("AnyPush pattern no longer matches")
        new = _apply_anypush(node, group)
    elif rule == "Multi":
        start, length = app.binding("start"), app.binding("length")
        if (start, length) not in _multi_runs(node):
            raise StaleApplicationError("Multi pattern no longer matches")
        new = _apply_multi(node, start, length)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return tree.replace_at(app.site, new)


def successors(tree: DiffNode) -> Iterator[tuple[RuleApplication, DiffNode]]:
    for app in enumerate_applications(tree):
        yield app, apply(tree, app)


def check_preserves_log(tree_before: DiffNode, tree_after: DiffNode, log: QueryLog) -> bool:
    """True iff every log query expressible before stays expressible after."""
    for q in log:
        if expressible(tree_before, q) is not None and expressible(tree_after, q) is None:
            return False
    return True
