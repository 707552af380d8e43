"""Unfairness discovery over multi-task tabular data.

Two tools: a statistical one (tercile discretization + per-task risk
difference, aggregated into an 80%-rule parity ratio) and a structural one
(enumeration of causal paths in a user-supplied DAG, with edges classified
as unfair / partially-unfair / fair relative to a protected node and a
target node). The DAG is an input artifact, never learned here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np

LEVELS = ("low", "median", "high")


class EmptyCellError(ValueError):
    """A conditional sub-population needed by the risk difference is empty."""

    def __init__(self, task, variable, level):
        self.task = task
        self.variable = variable
        self.level = level
        super().__init__(
            f"task {task!r}: no records with {variable} = {level!r}"
        )


class CycleError(ValueError):
    pass


@dataclass(frozen=True)
class DiscoveryConfig:
    """Thresholds of the parity-ratio procedure."""

    epsilon: float = 0.05
    rule_threshold: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if not 0.0 < self.rule_threshold <= 1.0:
            raise ValueError(
                f"rule_threshold must be in (0, 1], got {self.rule_threshold}"
            )


# ---------------------------------------------------------------------------
# discretization


def discretize_terciles(values) -> list[str]:
    """Equal-frequency three-level discretization (low / median / high).

    Records are rank-binned into thirds using a stable sort, and records
    sharing a value always share a level (a tie group takes the level of
    its first-ranked member, so ties can spill bin sizes). A constant
    column therefore maps entirely to "low"; this is warned about.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot discretize an empty column")
    m = values.size
    order = np.argsort(values, kind="stable")
    t1 = -(-m // 3)  # ceil(m / 3)
    t2 = -(-2 * m // 3)
    rank_level = np.empty(m, dtype=int)
    rank_level[:t1] = 0
    rank_level[t1:t2] = 1
    rank_level[t2:] = 2

    levels = np.empty(m, dtype=int)
    sorted_vals = values[order]
    start = 0
    for i in range(1, m + 1):
        if i == m or sorted_vals[i] != sorted_vals[start]:
            levels[order[start:i]] = rank_level[start]
            start = i
    if sorted_vals[0] == sorted_vals[-1]:
        warnings.warn("constant column discretized to all 'low'", stacklevel=2)
    return [LEVELS[k] for k in levels]


@dataclass
class CategoricalTable:
    """Per-task three-level categorical view of target and protected columns.

    ``columns`` maps variable names to per-record level arrays; ``task_ids``
    is the parallel task assignment. ``target`` names the Y column.
    """

    task_ids: np.ndarray
    columns: dict[str, np.ndarray]
    target: str = "y"

    def __post_init__(self):
        self.task_ids = np.asarray(self.task_ids)
        for name, col in self.columns.items():
            col = np.asarray(col, dtype=object)
            if col.shape != self.task_ids.shape:
                raise ValueError(f"column {name!r} length mismatch")
            bad = set(col) - set(LEVELS)
            if bad:
                raise ValueError(f"column {name!r} has non-tercile levels {bad}")
            self.columns[name] = col
        if self.target not in self.columns:
            raise ValueError(f"target column {self.target!r} missing")
        if self.task_ids.size == 0:
            raise ValueError("table is empty")

    @classmethod
    def from_numeric(cls, task_ids, numeric_columns: dict, target: str = "y"):
        """Discretize numeric columns into terciles (globally per column)."""
        cols = {
            name: np.asarray(discretize_terciles(vals), dtype=object)
            for name, vals in numeric_columns.items()
        }
        return cls(np.asarray(task_ids), cols, target)

    def tasks(self) -> list:
        seen = dict.fromkeys(self.task_ids.tolist())
        return list(seen)

    def protected_variables(self) -> list[str]:
        return [name for name in self.columns if name != self.target]


def risk_difference(
    table: CategoricalTable,
    task,
    y_level: str,
    s_var: str,
    s_level_1: str,
    s_level_2: str,
) -> float:
    """|P(Y = y_level | s_level_1, task) - P(Y = y_level | s_level_2, task)|.

    Conditional probabilities are empirical frequencies within the task.
    Raises :class:`EmptyCellError` when a conditioning sub-population has
    no records.
    """
    in_task = table.task_ids == task
    if not in_task.any():
        raise ValueError(f"unknown task {task!r}")
    y = table.columns[table.target][in_task]
    s = table.columns[s_var][in_task]
    probs = []
    for level in (s_level_1, s_level_2):
        cell = s == level
        if not cell.any():
            raise EmptyCellError(task, s_var, level)
        probs.append(float((y[cell] == y_level).mean()))
    return abs(probs[0] - probs[1])


@dataclass
class ParityResult:
    """Outcome of the risk-difference parity scan for one protected variable."""

    protected_variable: str
    ratio: float
    flagged: bool
    comparisons_total: int
    comparisons_skipped: int


def parity_ratio(
    table: CategoricalTable, s_var: str, config: DiscoveryConfig | None = None
) -> ParityResult:
    """Share of (task, y-level, s-level-pair) comparisons with a small shift.

    Scans every task, every Y level and every unordered pair of distinct
    levels of ``s_var``; a comparison counts toward the numerator when its
    risk difference is at most ``epsilon``. Comparisons touching an empty
    conditional cell are skipped (excluded from both counts) and reported.
    A ratio below ``rule_threshold`` flags the variable as unfair.
    """
    config = config or DiscoveryConfig()
    if s_var not in table.columns or s_var == table.target:
        raise ValueError(f"unknown protected variable {s_var!r}")
    n = m = skipped = 0
    for task in table.tasks():
        for y_level in LEVELS:
            for l1, l2 in combinations(LEVELS, 2):
                try:
                    dp = risk_difference(table, task, y_level, s_var, l1, l2)
                except EmptyCellError:
                    skipped += 1
                    continue
                m += 1
                if dp <= config.epsilon:
                    n += 1
    if m == 0:
        raise ValueError(f"no valid comparisons for {s_var!r} (all cells empty)")
    ratio = n / m
    return ParityResult(s_var, ratio, ratio < config.rule_threshold, m, skipped)


def discovery_report(
    table: CategoricalTable, config: DiscoveryConfig | None = None
) -> list[ParityResult]:
    """Parity ratio for every protected variable in the table."""
    return [parity_ratio(table, s, config) for s in table.protected_variables()]


# ---------------------------------------------------------------------------
# causal graph


EDGE_LABELS = ("fair", "unfair", "partially-unfair", "unlabeled")


class CausalGraph:
    """A DAG of named variables with fairness-labeled directed edges."""

    def __init__(self, edges, nodes=(), labels: dict | None = None):
        self._children: dict[str, list[str]] = {}
        self.edges: list[tuple[str, str]] = []
        for node in nodes:
            self._children.setdefault(str(node), [])
        for u, v in edges:
            u, v = str(u), str(v)
            self._children.setdefault(u, [])
            self._children.setdefault(v, [])
            if (u, v) in self.edges:
                continue
            self.edges.append((u, v))
            self._children[u].append(v)
        for kids in self._children.values():
            kids.sort()
        self.labels = {edge: "unlabeled" for edge in self.edges}
        for edge, label in (labels or {}).items():
            edge = (str(edge[0]), str(edge[1]))
            if edge not in self.labels:
                raise ValueError(f"label for unknown edge {edge}")
            if label not in EDGE_LABELS:
                raise ValueError(f"unknown edge label {label!r}")
            self.labels[edge] = label
        cycle = self._find_cycle()
        if cycle:
            raise CycleError(f"graph contains a cycle: {' -> '.join(cycle)}")

    @property
    def nodes(self) -> list[str]:
        return sorted(self._children)

    def children(self, node: str) -> list[str]:
        return self._children[node]

    def __contains__(self, node) -> bool:
        return str(node) in self._children

    def _find_cycle(self) -> list[str] | None:
        WHITE, GREY, BLACK = 0, 1, 2
        color = dict.fromkeys(self._children, WHITE)
        trail: list[str] = []

        def visit(node):
            color[node] = GREY
            trail.append(node)
            for child in self._children[node]:
                if color[child] == GREY:
                    return trail[trail.index(child) :] + [child]
                if color[child] == WHITE:
                    found = visit(child)
                    if found:
                        return found
            trail.pop()
            color[node] = BLACK
            return None

        for node in sorted(self._children):
            if color[node] == WHITE:
                found = visit(node)
                if found:
                    return found
        return None

    @classmethod
    def from_file(cls, path) -> "CausalGraph":
        """Parse a plain-text edge list: one ``source -> target`` per line,
        ``#`` comments. Cycles are rejected with the offending line number."""
        edges, nodes = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "->" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'source -> target'")
                u, _, v = line.partition("->")
                u, v = u.strip(), v.strip()
                if not u or not v:
                    raise ValueError(f"{path}:{lineno}: malformed edge {line!r}")
                edges.append((u, v))
                try:
                    cls(edges, nodes)
                except CycleError as err:
                    raise CycleError(f"{path}:{lineno}: {err}") from None
        return cls(edges, nodes)


def causal_paths(graph: CausalGraph, source, target) -> list[list[str]]:
    """All simple directed paths from ``source`` to ``target``.

    Paths are returned in lexicographic order of their node sequences.
    """
    source, target = str(source), str(target)
    for node in (source, target):
        if node not in graph:
            raise ValueError(f"unknown node {node!r}")
    paths: list[list[str]] = []
    path = [source]
    on_path = {source}

    def walk(node):
        if node == target:
            paths.append(list(path))
            return
        for child in graph.children(node):
            if child in on_path:
                continue
            path.append(child)
            on_path.add(child)
            walk(child)
            path.pop()
            on_path.discard(child)

    walk(source)
    return paths


def classify_edges(graph: CausalGraph, protected, target) -> CausalGraph:
    """Label each edge by its role in the protected-to-target causal paths.

    Edges leaving the protected node that lie on some causal path to the
    target are unfair; other edges on such paths are partially-unfair;
    everything else is fair.
    """
    protected, target = str(protected), str(target)
    path_edges = set()
    for path in causal_paths(graph, protected, target):
        path_edges.update(zip(path, path[1:]))
    labels = {}
    for u, v in graph.edges:
        if (u, v) in path_edges:
            labels[(u, v)] = "unfair" if u == protected else "partially-unfair"
        else:
            labels[(u, v)] = "fair"
    return CausalGraph(graph.edges, graph.nodes, labels)
