"""Monte Carlo tree search over DiffTree rewrites.

Each search state is a DiffTree; neighbors come from the rewrite rules.
One iteration selects the frontier state with the highest UCT score,
expands its neighbors, runs one random rule-walk from each new neighbor,
scores the walk's final state by sampling k random widget assignments
(reward is the negated minimum cost), and adds the reward to every state
along the path.  States reached through different rule orders share
statistics through a canonical-hash keyed table.

The wall-clock budget is only checked between iterations, so a run is
reproducible by iteration count; pass `iterations` to pin it exactly.
After the budget, the best-reward state seen anywhere (including walk
endpoints) is kept; its widget tree comes from exhaustive enumeration
when the assignment space is small enough, otherwise from the sampled
assignments refined by a deterministic coordinate descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import json
import math
import random
import time
from typing import Any, Iterator, Optional

from . import difftree as dt
from .cost import (
    INVALID,
    CostBreakdown,
    CostEvaluator,
    CostModel,
    InexpressibleQueryError,
)
from .difftree import DiffNode, canonical_hash, initial_difftree
from .rules import RuleApplication, apply, enumerate_applications
from .sqlast import Ast, QueryLog
from .widgets import (
    Decisions,
    InterfaceSpec,
    SpaceTooLargeError,
    WidgetPlan,
    enumerate_decisions,
    make_spec,
    plan_widgets,
    random_decisions,
)


@dataclass
class SearchConfig:
    c: float = 1.4
    k: int = 10
    max_walk_steps: int = 200
    budget: float = 60.0
    seed: int = 0
    exhaustive_bound: int = 10**6
    iterations: Optional[int] = None  # overrides budget when set
    reward_floor: float = -1e6
    descent_rounds: int = 4

    def __post_init__(self):
        if self.c < 0 or self.k < 1 or self.max_walk_steps < 1 or self.budget <= 0:
            raise ValueError("invalid search configuration")


@dataclass
class SearchNode:
    digest: str
    tree: DiffNode
    w: float = 0.0  # cumulative reward through this state
    n: int = 0  # visit count
    terminated: int = 0  # rollouts whose tree-path ended here
    children: dict[RuleApplication, str] = field(default_factory=dict)
    edge_visits: dict[RuleApplication, int] = field(default_factory=dict)
    expanded: bool = False


def uct(node: SearchNode, parent_visits: int, c: float) -> float:
    """Raw UCT score w/n + c*sqrt(ln(N)/n); unvisited states rank first."""
    if node.n == 0:
        return math.inf
    return node.w / node.n + c * math.sqrt(math.log(parent_visits) / node.n)


def _sub_seed(seed: int, digest: str) -> int:
    h = hashlib.sha256(f"{seed}:{digest}".encode()).hexdigest()
    return int(h[:16], 16)


def evaluate_reward(
    tree: DiffNode, log: QueryLog, model: CostModel, k: int, seed: int,
    floor: float = -1e6,
) -> float:
    """Negated minimum cost over k random widget assignments."""
    cost = sample_assignment_cost(tree, log, model, k, seed)
    return floor if math.isinf(cost) else -cost


def sample_assignment_cost(
    tree: DiffNode, log: QueryLog, model: CostModel, k: int, seed: int,
    evaluator: Optional[CostEvaluator] = None,
) -> float:
    """Approximate the state's lowest-cost widget tree: the best of k random
    assignments plus two deterministic candidates (the compact baseline and
    the per-widget appropriateness argmin), which keeps the estimate from
    wildly undervaluing states whose good assignments are rare draws."""
    try:
        ev = evaluator or CostEvaluator(tree, log, model)
    except InexpressibleQueryError:
        return INVALID
    rng = random.Random(seed)
    best = min(
        ev.total(_compact_decisions(ev)),
        ev.total(_best_m_decisions(ev)),
    )
    for _ in range(k):
        decisions = random_decisions(ev.plan, rng)
        best = min(best, ev.total(decisions))
    return best


# ---------------------------------------------------------------------------
# Final widget selection for the chosen DiffTree
# ---------------------------------------------------------------------------


def _compact_decisions(ev: CostEvaluator) -> Decisions:
    """Smallest-footprint deterministic baseline: the kind that minimizes
    area at small size, everything stacked vertically."""
    d: Decisions = {}
    for slot in ev.plan.choice_slots:
        best = None
        for cand in slot.candidates:
            if cand[1] != "small":
                continue
            ext = ev.metric(slot.path, cand)[2]
            key = (ext[0] * max(ext[1], 1), ext[0], cand)
            if best is None or key < best[0]:
                best = (key, cand)
        assert best is not None
        d[("widget", slot.path)] = best[1]
    for p in ev.plan.orient_paths:
        d[("orient", p)] = "vertical"
    return d


def _best_m_decisions(ev: CostEvaluator) -> Decisions:
    d: Decisions = {}
    for slot in ev.plan.choice_slots:
        scored = sorted(
            slot.candidates,
            key=lambda ks: (ev.metric(slot.path, ks)[0], ev.metric(slot.path, ks)[1], ks),
        )
        d[("widget", slot.path)] = scored[0]
    for p in ev.plan.orient_paths:
        d[("orient", p)] = "vertical"
    return d


def coordinate_descent(
    ev: CostEvaluator, start: Decisions, rounds: int = 4
) -> tuple[Decisions, float]:
    """Deterministic local search: sweep every decision, keep strict wins."""
    decisions = dict(start)
    best = ev.total(decisions)
    for _ in range(rounds):
        improved = False
        for slot in ev.plan.choice_slots:
            key = ("widget", slot.path)
            for cand in slot.candidates:
                if cand == decisions[key]:
                    continue
                old = decisions[key]
                decisions[key] = cand
                total = ev.total(decisions)
                if total < best:
                    best = total
                    improved = True
                else:
                    decisions[key] = old
        for p in ev.plan.orient_paths:
            key = ("orient", p)
            for cand in ("horizontal", "vertical"):
                if cand == decisions.get(key):
                    continue
                old = decisions[key]
                decisions[key] = cand
                total = ev.total(decisions)
                if total < best:
                    best = total
                    improved = True
                else:
                    decisions[key] = old
        if not improved:
            break
    return decisions, best


class _BudgetExceeded(Exception):
    pass


class _ExactAssigner:
    """Exact minimum-cost widget assignment by branch and bound.

    Enumerates the full assignment space but prunes branches whose lower
    bound (separable M terms, optimistic U combos, and a component-wise
    minimal layout extent, which is monotone in every widget's extent)
    cannot beat the incumbent.  Visits at most `node_budget` partial
    assignments before giving up.
    """

    def __init__(self, ev: CostEvaluator, node_budget: int):
        from .cost import _SkWidget

        self._SkWidget = _SkWidget
        self.ev = ev
        self.node_budget = node_budget
        self.visited = 0
        self.orients = list(ev.plan.orient_paths)
        self.metrics: dict = {}
        raw: dict = {}
        for slot in ev.plan.choice_slots:
            rows = []
            for cand in slot.candidates:
                m, inter, ext = ev.metric(slot.path, cand)
                rows.append((cand, m, inter, ext))
            rows.sort(key=lambda r: (r[1], r[2], r[0]))
            raw[slot.path] = rows
        # When even the fattest assignment fits the screen, extents cannot
        # constrain anything, so candidates dominated on (M, interaction)
        # alone can be dropped; otherwise dominance must respect extent.
        self.min_ext = {}
        fat = {p: (max(r[3][0] for r in rows), max(r[3][1] for r in rows))
               for p, rows in raw.items()}
        fat_fits = self._fits(self._extent_bound(fat, {}, pessimistic=True))
        for p, rows in raw.items():
            kept: list = []
            for row in rows:
                dominated = False
                for other in kept:
                    if (
                        other[1] <= row[1]
                        and other[2] <= row[2]
                        and (fat_fits or (other[3][0] <= row[3][0] and other[3][1] <= row[3][1]))
                    ):
                        dominated = True
                        break
                if not dominated:
                    kept.append(row)
            self.metrics[p] = kept
        self.min_m = {p: min(r[1] for r in rows) for p, rows in self.metrics.items()}
        self.min_interact = {p: min(r[2] for r in rows) for p, rows in self.metrics.items()}
        self.min_ext = {
            p: (min(r[3][0] for r in rows), min(r[3][1] for r in rows))
            for p, rows in self.metrics.items()
        }
        # Most cost-spread slots first makes the lower bound bite early.
        self.slots = sorted(
            ev.plan.choice_slots,
            key=lambda s: -(max(r[1] for r in self.metrics[s.path]) - self.min_m[s.path]),
        )
        self.best_cost = INVALID
        self.best: Optional[Decisions] = None

    def _u_bound(self, chosen_interact: dict) -> float:
        total = 0.0
        for combos in self.ev.pair_combos:
            best = INVALID
            for bindings, edges in combos:
                c = edges * self.ev.model.edge_cost
                for p in bindings:
                    c += chosen_interact.get(p, self.min_interact[p])
                best = min(best, c)
            total += 0.0 if math.isinf(best) else best
        return total

    def _fits(self, extent: tuple[int, int]) -> bool:
        return extent[0] <= self.ev.model.screen[0] and extent[1] <= self.ev.model.screen[1]

    def _extent_bound(
        self, chosen_ext: dict, chosen_orient: dict, pessimistic: bool = False
    ) -> tuple[int, int]:
        def ext(node) -> tuple[int, int]:
            if isinstance(node, self._SkWidget):
                p = node.slot.path
                base = chosen_ext.get(p, self.min_ext.get(p, (0, 0)))
                if node.slot.node.kind == MULTI_KIND:
                    kids = [ext(c) for c in node.children]
                    kw = max((x for x, _ in kids), default=12)
                    kh = sum(y for _, y in kids)
                    return max(kw, 12), kh + 1
                return base
            kids = [ext(c) for c in node.children]
            gaps = len(kids) - 1
            vert = (max(x for x, _ in kids), sum(y for _, y in kids) + gaps)
            horiz = (sum(x for x, _ in kids) + 2 * gaps, max(y for _, y in kids))
            o = chosen_orient.get(node.path)
            if o == "vertical":
                return vert
            if o == "horizontal":
                return horiz
            if pessimistic:
                return (max(vert[0], horiz[0]), max(vert[1], horiz[1]))
            return (min(vert[0], horiz[0]), min(vert[1], horiz[1]))

        if self.ev.skeleton is None:
            return (0, 0)
        return ext(self.ev.skeleton)

    def solve(self) -> tuple[Optional[Decisions], float]:
        decisions: Decisions = {}
        chosen_interact: dict = {}
        chosen_ext: dict = {}
        chosen_orient: dict = {}
        m_rest = sum(self.min_m.values())
        screen = self.ev.model.screen

        def dfs(i: int, m_acc: float, m_rest: float):
            self.visited += 1
            if self.visited > self.node_budget:
                raise _BudgetExceeded
            lb_ext = self._extent_bound(chosen_ext, chosen_orient)
            if lb_ext[0] > screen[0] or lb_ext[1] > screen[1]:
                return
            lb = m_acc + m_rest + self.ev.model.lambda_u * self._u_bound(chosen_interact)
            if lb >= self.best_cost:
                return
            if i < len(self.slots):
                slot = self.slots[i]
                for cand, m, inter, ext in self.metrics[slot.path]:
                    decisions[("widget", slot.path)] = cand
                    chosen_interact[slot.path] = inter
                    chosen_ext[slot.path] = ext
                    dfs(i + 1, m_acc + m, m_rest - self.min_m[slot.path])
                    del chosen_interact[slot.path]
                    del chosen_ext[slot.path]
                del decisions[("widget", slot.path)]
                return
            j = i - len(self.slots)
            if j < len(self.orients):
                p = self.orients[j]
                for o in ("horizontal", "vertical"):
                    decisions[("orient", p)] = o
                    chosen_orient[p] = o
                    dfs(i + 1, m_acc, m_rest)
                    del chosen_orient[p]
                del decisions[("orient", p)]
                return
            total = m_acc + self.ev.model.lambda_u * self._u_bound(chosen_interact)
            ext = self._extent_bound(chosen_ext, chosen_orient)
            if ext[0] > screen[0] or ext[1] > screen[1]:
                return
            if total < self.best_cost:
                self.best_cost = total
                self.best = dict(decisions)

        dfs(0, 0.0, m_rest)
        return self.best, self.best_cost


MULTI_KIND = "MULTI"


def best_assignment(
    tree: DiffNode,
    log: QueryLog,
    model: CostModel,
    cfg: SearchConfig,
    evaluator: Optional[CostEvaluator] = None,
) -> tuple[Decisions, float]:
    """Lowest-cost widget assignment for one DiffTree.

    Within the exhaustive budget the space is enumerated exactly (with
    provably-safe pruning); above it, seeded samples plus deterministic
    baselines are refined by coordinate descent.
    """
    ev = evaluator or CostEvaluator(tree, log, model)
    plan = ev.plan
    # Deterministic incumbents: a compact baseline and the appropriateness
    # argmin.
    best: Optional[Decisions] = None
    best_cost = INVALID
    for cand in (_compact_decisions(ev), _best_m_decisions(ev)):
        total = ev.total(cand)
        if total < best_cost:
            best_cost = total
            best = cand
    # Exact enumeration with pruning: guaranteed to finish inside the
    # exhaustive bound; above it, still attempted with a smaller node cap
    # since pruning usually collapses the space anyway.
    in_bound = plan.space_size() <= cfg.exhaustive_bound
    node_cap = max(cfg.exhaustive_bound, 1) if in_bound else 100_000
    assigner = _ExactAssigner(ev, node_cap)
    assigner.best_cost = best_cost
    assigner.best = best
    try:
        exact_best, exact_cost = assigner.solve()
        if exact_best is not None:
            return exact_best, exact_cost
    except _BudgetExceeded:
        pass
    # The enumeration budget ran out: polish incumbents and seeded samples
    # with deterministic coordinate descent instead.
    rng = random.Random(_sub_seed(cfg.seed, tree.digest))
    candidates = [_compact_decisions(ev), _best_m_decisions(ev)]
    candidates += [random_decisions(plan, rng) for _ in range(max(cfg.k, 16))]
    for cand in candidates:
        refined, total = coordinate_descent(ev, cand, cfg.descent_rounds)
        if total < best_cost:
            best_cost = total
            best = refined
    if best is None:  # every assignment overflows the screen
        best = _compact_decisions(ev)
        best_cost = ev.total(best)
    return best, best_cost


def assignment_cost_below(
    tree: DiffNode,
    log: QueryLog,
    model: CostModel,
    bound: float,
    node_cap: int = 2_000_000,
) -> Optional[float]:
    """Exact check used by brute-force oracles: the state's minimum
    assignment cost if it is strictly below `bound`, else None.

    Seeding the search with `bound` as the incumbent makes states that
    cannot compete prune immediately, so sweeping a whole reachable state
    space against a candidate optimum stays fast.
    """
    try:
        ev = CostEvaluator(tree, log, model)
    except InexpressibleQueryError:
        return None
    assigner = _ExactAssigner(ev, node_cap)
    assigner.best_cost = bound
    found, cost = assigner.solve()
    return cost if found is not None else None


# ---------------------------------------------------------------------------
# The search engine
# ---------------------------------------------------------------------------


@dataclass
class SearchResult:
    tree: DiffNode
    spec: InterfaceSpec
    breakdown: CostBreakdown
    trace: list[dict]
    iterations: int
    wall_time: float
    best_cost: float
    root_digest: str
    nodes: dict[str, SearchNode]


class _Engine:
    def __init__(self, log: QueryLog, model: CostModel, cfg: SearchConfig):
        self.log = log
        self.model = model
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.nodes: dict[str, SearchNode] = {}
        self._succ_cache: dict[str, list[tuple[RuleApplication, DiffNode]]] = {}
        self._apps_cache: dict[str, list[RuleApplication]] = {}
        self._reward_cache: dict[str, float] = {}
        self._evaluators: dict[str, CostEvaluator] = {}
        self.best_cost = INVALID
        self.best_tree: Optional[DiffNode] = None
        self.trace: list[dict] = []
        self.total_rollouts = 0

        root_tree = initial_difftree(log)
        self.root = self._node(root_tree)

    def _node(self, tree: DiffNode) -> SearchNode:
        d = tree.digest
        if d not in self.nodes:
            self.nodes[d] = SearchNode(d, tree)
        return self.nodes[d]

    def _successors(self, node: SearchNode) -> list[tuple[RuleApplication, DiffNode]]:
        if node.digest not in self._succ_cache:
            succs = [(app, apply(node.tree, app)) for app in self._apps(node.tree)]
            self._succ_cache[node.digest] = succs
        return self._succ_cache[node.digest]

    def _apps(self, tree: DiffNode) -> list[RuleApplication]:
        apps = self._apps_cache.get(tree.digest)
        if apps is None:
            apps = enumerate_applications(tree)
            self._apps_cache[tree.digest] = apps
        return apps

    def _evaluator(self, tree: DiffNode) -> CostEvaluator:
        d = tree.digest
        if d not in self._evaluators:
            self._evaluators[d] = CostEvaluator(tree, self.log, self.model)
        return self._evaluators[d]

    def _reward(self, tree: DiffNode) -> float:
        d = tree.digest
        if d not in self._reward_cache:
            try:
                ev = self._evaluator(tree)
                cost = sample_assignment_cost(
                    tree, self.log, self.model, self.cfg.k,
                    _sub_seed(self.cfg.seed, d), evaluator=ev,
                )
            except InexpressibleQueryError:
                cost = INVALID
            if cost < self.best_cost:
                self.best_cost = cost
                self.best_tree = tree
            self._reward_cache[d] = (
                self.cfg.reward_floor if math.isinf(cost) else -cost
            )
        return self._reward_cache[d]

    def _norm(self, node: SearchNode) -> float:
        """Min-max normalized exploitation term (raw rewards are unbounded
        negated costs, which would swamp the exploration term)."""
        rewards = [x for x in self._reward_cache.values()]
        if not rewards or node.n == 0:
            return 0.5
        lo, hi = min(rewards), max(rewards)
        if hi <= lo:
            return 0.5
        q = node.w / node.n
        return (q - lo) / (hi - lo)

    def _select(self) -> tuple[list[SearchNode], list[tuple[SearchNode, RuleApplication]]]:
        path = [self.root]
        edges: list[tuple[SearchNode, RuleApplication]] = []
        visited = {self.root.digest}
        cur = self.root
        while cur.expanded and cur.children:
            best_child: Optional[tuple[float, str, RuleApplication]] = None
            for app, d in cur.children.items():
                if d in visited:
                    continue
                child = self.nodes[d]
                if child.n == 0:
                    score = math.inf
                else:
                    score = self._norm(child) + self.cfg.c * math.sqrt(
                        math.log(max(cur.n, 1)) / child.n
                    )
                key = (-score, d)
                if best_child is None or key < (-best_child[0], best_child[1]):
                    best_child = (score, d, app)
            if best_child is None:
                break  # every child would revisit the current path
            edges.append((cur, best_child[2]))
            cur = self.nodes[best_child[1]]
            path.append(cur)
            visited.add(cur.digest)
        return path, edges

    def _random_walk(self, tree: DiffNode) -> tuple[int, DiffNode]:
        target = self.rng.randint(1, self.cfg.max_walk_steps)
        cur = tree
        steps = 0
        while steps < target:
            apps = self._apps(cur)
            if not apps:
                break
            cur = apply(cur, self.rng.choice(apps))
            steps += 1
        return steps, cur

    def _backprop(
        self,
        path: list[SearchNode],
        edges: list[tuple[SearchNode, RuleApplication]],
        reward: float,
    ):
        for node in path:
            node.n += 1
            node.w += reward
        for parent, app in edges:
            parent.edge_visits[app] = parent.edge_visits.get(app, 0) + 1
        path[-1].terminated += 1
        self.total_rollouts += 1

    def _record(self, iteration: int, selected: str, rule: Optional[str],
                walk_len: int, reward: float):
        self.trace.append(
            {
                "iter": iteration,
                "selected_digest": selected,
                "applied_rule": rule,
                "rollout_len": walk_len,
                "reward": reward,
                "best_cost": None if math.isinf(self.best_cost) else self.best_cost,
            }
        )

    def iterate(self, iteration: int):
        path, edges = self._select()
        leaf = path[-1]
        on_path = {node.digest for node in path}
        if not leaf.expanded:
            leaf.expanded = True
            succs = self._successors(leaf)
            if not succs:
                r = self._reward(leaf.tree)
                self._backprop(path, edges, r)
                self._record(iteration, leaf.digest, None, 0, r)
                return
            for app, succ_tree in succs:
                child = self._node(succ_tree)
                leaf.children[app] = child.digest
                walk_len, final_tree = self._random_walk(succ_tree)
                r = self._reward(final_tree)
                self._reward(succ_tree)  # neighbors are evaluated states too
                if child.digest in on_path:
                    # A rule cycled back to an ancestor state; credit the
                    # rollout to the path without re-counting that state.
                    self._backprop(path, edges, r)
                else:
                    self._backprop(path + [child], edges + [(leaf, app)], r)
                self._record(iteration, leaf.digest, app.rule, walk_len, r)
        else:
            # Terminal state or a fully cycle-blocked frontier: keep the
            # iteration productive with a fresh walk from the leaf itself.
            walk_len, final_tree = self._random_walk(leaf.tree)
            r = self._reward(final_tree)
            self._backprop(path, edges, r)
            self._record(iteration, leaf.digest, None, walk_len, r)


def run_search(log: QueryLog, model: CostModel, cfg: SearchConfig) -> SearchResult:
    """Search for the lowest-cost interface expressing the whole log."""
    start = time.monotonic()
    engine = _Engine(log, model, cfg)
    iteration = 0
    while True:
        if cfg.iterations is not None:
            if iteration >= cfg.iterations:
                break
        elif time.monotonic() - start >= cfg.budget:
            break
        engine.iterate(iteration)
        iteration += 1

    best_tree = engine.best_tree if engine.best_tree is not None else engine.root.tree
    evaluator = engine._evaluator(best_tree)
    decisions, final_cost = best_assignment(best_tree, log, model, cfg, evaluator)
    breakdown = evaluator.breakdown(decisions)
    spec = make_spec(best_tree, decisions, model.screen, log.queries[0])
    return SearchResult(
        tree=best_tree,
        spec=spec,
        breakdown=breakdown,
        trace=engine.trace,
        iterations=iteration,
        wall_time=time.monotonic() - start,
        best_cost=final_cost,
        root_digest=engine.root.digest,
        nodes=engine.nodes,
    )


def trace_to_jsonl(trace: list[dict]) -> str:
    return "\n".join(json.dumps(rec, sort_keys=True) for rec in trace) + "\n"
