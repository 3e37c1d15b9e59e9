"""Interface cost: per-widget appropriateness plus sequential usefulness.

The total cost of a widget tree W against an ordered query log Q is

    sum over consecutive pairs of U(q_i, q_i+1, W)  +  sum over widgets of M(w)

M scores how well a widget kind suits its bound domain (table-driven;
the shipped table encodes orderings like "radio buttons suit a small
number of options and are ill-suited for many", with magnitudes kept in
a config file).  U charges the interaction cost of every widget whose
selection must change to get from one query to the next, plus one edge
cost per edge of the minimal subtree connecting those widgets inside the
widget tree.  A widget tree that does not fit the screen is invalid and
costs infinity; nothing else is infinite.
"""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import json
import math
from importlib import resources
from typing import Any, Iterator, Optional

from . import difftree as dt
from .difftree import ANY, MULTI, OPT, ChoiceAssignment, DiffNode, Path
from .sqlast import Ast, QueryLog, to_sql
from .widgets import (
    ChoiceSlot,
    Decisions,
    Domain,
    InterfaceSpec,
    WidgetNode,
    WidgetPlan,
    interaction_extent,
    plan_widgets,
)

INVALID = math.inf

ENUMERATED_KINDS = frozenset({"dropdown", "radio_buttons", "buttons", "checkboxes"})


class CostConfigError(Exception):
    pass


class MissingTableEntryError(CostConfigError):
    pass


class InexpressibleQueryError(Exception):
    def __init__(self, q: Ast):
        super().__init__(f"query not expressible by the widget tree: {to_sql(q)}")
        self.query = q


def card_bucket(n: int) -> str:
    if n <= 3:
        return "le3"
    if n <= 7:
        return "4_7"
    if n <= 15:
        return "8_15"
    return "gt15"


def length_bucket(n: int) -> str:
    if n <= 6:
        return "short"
    if n <= 12:
        return "mid"
    return "long"


@dataclass(frozen=True)
class CostModel:
    m_table: dict
    interact_cost: dict
    interact_length_bonus: dict
    interact_size_bonus: dict
    interact_scan_per_option: dict
    edge_cost: float
    lambda_u: float
    screen: tuple[int, int]
    witness_cap: int
    reward_floor: float
    match_budget: int

    @staticmethod
    def from_dict(cfg: dict) -> "CostModel":
        try:
            model = CostModel(
                m_table=cfg["m_table"],
                interact_cost=cfg["interact_cost"],
                interact_length_bonus=cfg["interact_length_bonus"],
                interact_size_bonus=cfg["interact_size_bonus"],
                interact_scan_per_option=cfg.get(
                    "interact_scan_per_option",
                    {"short": 0.0, "mid": 0.0, "long": 0.0},
                ),
                edge_cost=float(cfg["edge_cost"]),
                lambda_u=float(cfg["lambda_u"]),
                screen=tuple(cfg["screen"]),
                witness_cap=int(cfg.get("witness_cap", 24)),
                reward_floor=float(cfg.get("reward_floor", -1e6)),
                match_budget=int(cfg.get("match_budget", 50000)),
            )
        except KeyError as e:
            raise CostConfigError(f"cost config missing key {e}") from None
        for table in (model.m_table, model.interact_cost):
            _check_non_negative(table)
        return model

    def with_screen(self, screen: tuple[int, int]) -> "CostModel":
        d = self.__dict__.copy()
        d["screen"] = screen
        return CostModel(**d)

    def m_score(self, kind: str, domain: Domain) -> float:
        entry = self.m_table.get(kind)
        if entry is None:
            raise MissingTableEntryError(f"no m_table entry for kind {kind!r}")
        base = entry.get("base", {})
        if domain.value_type in base:
            score = base[domain.value_type]
        elif "*" in base:
            score = base["*"]
        else:
            raise MissingTableEntryError(
                f"m_table[{kind}] has no base score for {domain.value_type!r}"
            )
        score += entry.get("cardinality", {}).get(card_bucket(domain.cardinality), 0.0)
        score += entry.get("token_length", {}).get(length_bucket(domain.max_token_len), 0.0)
        return score

    def interaction_score(self, kind: str, size_class: str, domain: Domain) -> float:
        if kind not in self.interact_cost:
            raise MissingTableEntryError(f"no interact_cost entry for kind {kind!r}")
        score = (
            self.interact_cost[kind]
            + self.interact_length_bonus.get(length_bucket(domain.max_token_len), 0.0)
            + self.interact_size_bonus.get(size_class, 0.0)
        )
        if kind in ENUMERATED_KINDS:
            # Picking from an enumerated list means scanning it: charge per
            # option, scaled by how long the option labels are.
            score += (
                self.interact_scan_per_option.get(length_bucket(domain.max_token_len), 0.0)
                * domain.cardinality
            )
        return score


def _check_non_negative(table: Any, path: str = ""):
    if isinstance(table, dict):
        for k, v in table.items():
            _check_non_negative(v, f"{path}.{k}")
    elif isinstance(table, (int, float)):
        if table < 0:
            raise CostConfigError(f"negative score at {path}")


def load_cost_model(path: Optional[str] = None) -> CostModel:
    """Load a cost config file, or the packaged defaults."""
    if path is None:
        text = resources.files("queryboard.data").joinpath("default_cost.json").read_text()
    else:
        with open(path) as f:
            text = f.read()
    return CostModel.from_dict(json.loads(text))


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    m_terms: tuple[tuple[str, float], ...]
    u_terms: tuple[float, ...]
    valid: bool

    def to_json(self) -> dict:
        return {
            "total": "INVALID" if not self.valid else self.total,
            "valid": self.valid,
            "m_terms": [{"widget": lbl, "score": s} for lbl, s in self.m_terms],
            "u_terms": list(self.u_terms),
        }


# ---------------------------------------------------------------------------
# The evaluation skeleton: cost of any decision set over one DiffTree
# ---------------------------------------------------------------------------


class _SkWidget:
    __slots__ = ("slot", "children", "node_id")

    def __init__(self, slot: ChoiceSlot, children: list):
        self.slot = slot
        self.children = children
        self.node_id = -1


class _SkGroup:
    __slots__ = ("path", "children", "node_id")

    def __init__(self, path: Path, children: list):
        self.path = path
        self.children = children
        self.node_id = -1


def _build_skeleton(plan: WidgetPlan):
    """Widget-tree topology, which is independent of kind/size/orientation."""
    slot_by_path = {s.path: s for s in plan.choice_slots}

    def visit(node: DiffNode, path: Path):
        if node.kind == dt.ABSENT or (node.kind == dt.ALL and node.is_leaf_all):
            return None
        if node.kind == dt.ALL:
            parts = [w for i, c in enumerate(node.children) if (w := visit(c, path + (i,)))]
            if not parts:
                return None
            return parts[0] if len(parts) == 1 else _SkGroup(path, parts)
        slot = slot_by_path[path]
        if node.kind == MULTI:
            inner = visit(node.children[0], path + (0,))
            return _SkWidget(slot, [inner] if inner else [])
        own = _SkWidget(slot, [])
        if node.kind == ANY:
            nested = [w for i, c in enumerate(node.children) if (w := visit(c, path + (i,)))]
        else:
            inner = visit(node.children[0], path + (0,))
            nested = [inner] if inner else []
        if not nested:
            return own
        return _SkGroup(path, [own] + nested)

    return visit(plan.tree, ())


def _normalize_selection(v) -> Any:
    if isinstance(v, tuple):
        return tuple(
            tuple(sorted((k, _normalize_selection(x)) for k, x in copy.items()))
            for copy in v
        )
    return v


class CostEvaluator:
    """Scores widget assignments for one (tree, log, model) triple.

    Witness enumeration and the per-pair changed-widget analysis only
    depend on the tree, so they are computed once and reused for every
    assignment; this is also what makes single-widget mutations cheap to
    re-score (see `IncrementalCost`).
    """

    def __init__(self, tree: DiffNode, log: QueryLog, model: CostModel,
                 plan: Optional[WidgetPlan] = None):
        self.tree = tree
        self.log = log
        self.model = model
        self.plan = plan or plan_widgets(tree)
        self._slots = {s.path: s for s in self.plan.choice_slots}
        self._metric_cache: dict = {}
        self._multi_prefix_cache: dict = {}
        self.skeleton = _build_skeleton(self.plan)
        self._index_skeleton()
        self._witnesses: list[list[ChoiceAssignment]] = []
        for q in log:
            ws = list(
                dt.witnesses(tree, q, limit=model.witness_cap, max_steps=model.match_budget)
            )
            if not ws:
                raise InexpressibleQueryError(q)
            self._witnesses.append(ws)
        self.pair_combos = [
            self._combos(i) for i in range(len(self.log.queries) - 1)
        ]

    # -- static analysis ----------------------------------------------------

    def _index_skeleton(self):
        self._parents: list[int] = []
        self._widget_node_ids: dict[Path, int] = {}

        def number(node, parent: int):
            if node is None:
                return
            node.node_id = len(self._parents)
            self._parents.append(parent)
            if isinstance(node, _SkWidget):
                self._widget_node_ids[node.slot.path] = node.node_id
            for c in node.children:
                number(c, node.node_id)

        number(self.skeleton, -1)

    def _multi_prefix(self, path: Path) -> Optional[Path]:
        hit = self._multi_prefix_cache.get(path, "")
        if hit == "":
            node = self.tree
            hit = None
            for depth, i in enumerate(path):
                if node.kind == MULTI:
                    hit = path[:depth]
                    break
                node = node.children[i]
            self._multi_prefix_cache[path] = hit
        return hit

    def _changed(self, wa: ChoiceAssignment, wb: ChoiceAssignment) -> frozenset[Path]:
        changed: set[Path] = set()
        for slot in self.plan.choice_slots:
            p = slot.path
            if self._multi_prefix(p) is not None:
                continue  # handled through its enclosing MULTI below
            va, vb = wa.get(p), wb.get(p)
            if va is None or vb is None:
                continue
            if slot.node.kind == MULTI:
                assert isinstance(va, tuple) and isinstance(vb, tuple)
                if len(va) != len(vb):
                    changed.add(p)
                for ca, cb in zip(va, vb):
                    for rel in set(ca) | set(cb):
                        xa, xb = ca.get(rel), cb.get(rel)
                        if xa is None or xb is None:
                            continue
                        if _normalize_selection(xa) != _normalize_selection(xb):
                            changed.add(p + (0,) + rel)
            elif _normalize_selection(va) != _normalize_selection(vb):
                changed.add(p)
        return frozenset(changed)

    def _steiner_edges(self, bindings: frozenset[Path]) -> int:
        ids = [self._widget_node_ids[p] for p in bindings if p in self._widget_node_ids]
        if len(ids) <= 1:
            return 0
        marked = [0] * len(self._parents)
        for i in ids:
            marked[i] = 1
        # children appear after parents, so one reverse sweep accumulates
        # marked-descendant counts; an edge joins the minimal connecting
        # subtree iff it separates marked nodes from marked nodes.
        counts = marked[:]
        for i in range(len(self._parents) - 1, 0, -1):
            counts[self._parents[i]] += counts[i]
        total = len(ids)
        return sum(1 for i in range(1, len(self._parents)) if 0 < counts[i] < total)

    def _combos(self, pair_index: int) -> list[tuple[frozenset[Path], int]]:
        out: dict[frozenset[Path], int] = {}
        for wa in self._witnesses[pair_index]:
            for wb in self._witnesses[pair_index + 1]:
                d = self._changed(wa, wb)
                if d not in out:
                    out[d] = self._steiner_edges(d)
        return sorted(out.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))

    # -- scoring ------------------------------------------------------------

    def _slot(self, path: Path) -> ChoiceSlot:
        return self._slots[path]

    def metric(self, path: Path, cand: tuple[str, str]) -> tuple[float, float, tuple[int, int]]:
        """(M score, interaction score, extent) of one candidate for one slot."""
        key = (path, cand)
        hit = self._metric_cache.get(key)
        if hit is None:
            slot = self._slots[path]
            kind, size = cand
            ext = (12, 2) if kind == "adder" else interaction_extent(
                kind, size, slot.domain, slot.label
            )
            hit = (
                self.model.m_score(kind, slot.domain),
                self.model.interaction_score(kind, size, slot.domain),
                ext,
            )
            self._metric_cache[key] = hit
        return hit

    def m_terms(self, decisions: Decisions) -> list[tuple[str, float]]:
        return [
            (slot.label, self.metric(slot.path, decisions[("widget", slot.path)])[0])
            for slot in self.plan.choice_slots
        ]

    def u_term(self, pair_index: int, decisions: Decisions) -> float:
        best = INVALID
        for bindings, edges in self.pair_combos[pair_index]:
            cost = edges * self.model.edge_cost
            for p in bindings:
                cost += self.metric(p, decisions[("widget", p)])[1]
            best = min(best, cost)
        return 0.0 if math.isinf(best) else best

    def extent(self, decisions: Decisions) -> tuple[int, int]:
        def ext(node) -> tuple[int, int]:
            if isinstance(node, _SkWidget):
                slot = node.slot
                if slot.node.kind == MULTI:
                    kids = [ext(c) for c in node.children]
                    kw = max((x for x, _ in kids), default=12)
                    kh = sum(y for _, y in kids)
                    return max(kw, 12), kh + 1
                return self.metric(slot.path, decisions[("widget", slot.path)])[2]
            kids = [ext(c) for c in node.children]
            gaps = len(kids) - 1
            if decisions.get(("orient", node.path), "vertical") == "horizontal":
                return sum(x for x, _ in kids) + 2 * gaps, max(y for _, y in kids)
            return max(x for x, _ in kids), sum(y for _, y in kids) + gaps

        if self.skeleton is None:
            return (0, 0)
        return ext(self.skeleton)

    def valid(self, decisions: Decisions) -> bool:
        w, h = self.extent(decisions)
        return w <= self.model.screen[0] and h <= self.model.screen[1]

    def breakdown(self, decisions: Decisions) -> CostBreakdown:
        m = self.m_terms(decisions)
        u = tuple(self.u_term(i, decisions) for i in range(len(self.log.queries) - 1))
        valid = self.valid(decisions)
        total = sum(s for _, s in m) + self.model.lambda_u * sum(u) if valid else INVALID
        return CostBreakdown(total, tuple(m), u, valid)

    def total(self, decisions: Decisions) -> float:
        if not self.valid(decisions):
            return INVALID
        m = 0.0
        for s in self.plan.choice_slots:
            m += self.metric(s.path, decisions[("widget", s.path)])[0]
        u = sum(self.u_term(i, decisions) for i in range(len(self.log.queries) - 1))
        return m + self.model.lambda_u * u


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def appropriateness(w: WidgetNode, model: CostModel) -> float:
    """M(w): how well the widget kind suits its bound domain."""
    if not w.is_interaction and w.kind != "adder":
        raise ValueError(f"{w.kind} is a layout widget; M applies to interaction widgets")
    assert w.domain is not None
    return model.m_score(w.kind, w.domain)


def usefulness(q_a: Ast, q_b: Ast, spec: InterfaceSpec, model: CostModel) -> float:
    """U(q_a, q_b, W): minimum interaction effort to get from q_a to q_b."""
    log = QueryLog((q_a, q_b))
    ev = CostEvaluator(spec.tree, log, model, spec.plan)
    return ev.u_term(0, spec.decisions)


def total_cost(spec: InterfaceSpec, log: QueryLog, model: CostModel) -> CostBreakdown:
    ev = CostEvaluator(spec.tree, log, model, spec.plan)
    return ev.breakdown(spec.decisions)


class IncrementalCost:
    """Maintains a cost breakdown under single-widget (kind, size) changes.

    Witnesses, changed-widget sets, and Steiner edge counts are reused;
    only the mutated widget's M term, the affected U terms, and the layout
    extent are recomputed.  `mutate` returns the same breakdown a full
    re-evaluation would.
    """

    def __init__(self, evaluator: CostEvaluator, decisions: Decisions):
        self.ev = evaluator
        self.decisions = dict(decisions)
        self._m = {s.path: evaluator.model.m_score(self.decisions[("widget", s.path)][0], s.domain)
                   for s in evaluator.plan.choice_slots}
        self._u = [evaluator.u_term(i, self.decisions)
                   for i in range(len(evaluator.log.queries) - 1)]

    def mutate(self, path: Path, choice: tuple[str, str]) -> CostBreakdown:
        self.decisions[("widget", path)] = choice
        slot = self.ev._slot(path)
        self._m[path] = self.ev.model.m_score(choice[0], slot.domain)
        for i, combos in enumerate(self.ev.pair_combos):
            if any(path in bindings for bindings, _ in combos):
                self._u[i] = self.ev.u_term(i, self.decisions)
        return self.breakdown()

    def breakdown(self) -> CostBreakdown:
        valid = self.ev.valid(self.decisions)
        m_terms = tuple(
            (s.label, self._m[s.path]) for s in self.ev.plan.choice_slots
        )
        total = (
            sum(self._m.values()) + self.ev.model.lambda_u * sum(self._u)
            if valid
            else INVALID
        )
        return CostBreakdown(total, m_terms, tuple(self._u), valid)
