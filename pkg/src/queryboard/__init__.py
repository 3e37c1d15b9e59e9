"""queryboard: generate interactive analysis interfaces from SQL query logs.

Pipeline: parse the log into ASTs, factor shared structure and variation
into a DiffTree, search over DiffTree rewrites with MCTS, and emit the
lowest-cost widget tree that expresses every input query on the target
screen.
"""

from .sqlast import Ast, QueryLog, ast_equal, parse, parse_log, to_sql
from .difftree import (
    DiffNode,
    canonical_hash,
    expressible,
    initial_difftree,
    instantiate,
    lift,
)
from .rules import RuleApplication, apply, check_preserves_log, enumerate_applications
from .widgets import (
    InterfaceSpec,
    WidgetNode,
    apply_widget,
    candidate_widgets,
    layout_extent,
    make_spec,
    plan_widgets,
)
from .cost import CostBreakdown, CostModel, appropriateness, load_cost_model, total_cost, usefulness
from .search import SearchConfig, SearchResult, evaluate_reward, run_search, uct

__version__ = "0.1.0"

__all__ = [
    "Ast",
    "QueryLog",
    "ast_equal",
    "parse",
    "parse_log",
    "to_sql",
    "DiffNode",
    "canonical_hash",
    "expressible",
    "initial_difftree",
    "instantiate",
    "lift",
    "RuleApplication",
    "apply",
    "check_preserves_log",
    "enumerate_applications",
    "InterfaceSpec",
    "WidgetNode",
    "apply_widget",
    "candidate_widgets",
    "layout_extent",
    "make_spec",
    "plan_widgets",
    "CostBreakdown",
    "CostModel",
    "appropriateness",
    "load_cost_model",
    "total_cost",
    "usefulness",
    "SearchConfig",
    "SearchResult",
    "evaluate_reward",
    "run_search",
    "uct",
]
