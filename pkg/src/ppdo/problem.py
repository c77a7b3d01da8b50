"""Communication graph, incidence matrix and local objectives.

Agent ids are 1-based. Edges are stored as ``(i, j)`` with ``i < j`` in
lexicographic order; that order fixes the block-row order of the incidence
matrix and of every per-edge array (multipliers, penalties) in the package.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ProblemError(ValueError):
    pass


class Graph:
    """Undirected connected graph over agents ``1..agent_count``."""

    def __init__(self, agent_count: int, edges, dimension: int = 1, *, require_connected=True):
        if agent_count < 1:
            raise ProblemError("need at least one agent")
        if dimension < 1:
            raise ProblemError("dimension must be positive")
        normalized = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ProblemError(f"self-loop at agent {a}")
            for v in (a, b):
                if not 1 <= v <= agent_count:
                    raise ProblemError(f"agent id {v} outside [1, {agent_count}]")
            e = (min(a, b), max(a, b))
            if e in normalized:
                raise ProblemError(f"duplicate edge {e}")
            normalized.add(e)
        self.agent_count = agent_count
        self.dimension = dimension
        self.edges: list[tuple[int, int]] = sorted(normalized)
        self._neighbors: dict[int, list[int]] = {i: [] for i in range(1, agent_count + 1)}
        for i, j in self.edges:
            self._neighbors[i].append(j)
            self._neighbors[j].append(i)
        for nb in self._neighbors.values():
            nb.sort()
        self._edge_index = {e: m for m, e in enumerate(self.edges)}
        if require_connected and not self.is_connected():
            raise ProblemError("communication graph is not connected")

    @property
    def agents(self) -> range:
        return range(1, self.agent_count + 1)

    def neighbors(self, i: int) -> list[int]:
        """Neighbors of ``i``, excluding ``i`` itself."""
        return self._neighbors[i]

    def edge_index(self, i: int, j: int) -> int:
        return self._edge_index[(min(i, j), max(i, j))]

    def is_connected(self) -> bool:
        seen = {1}
        queue = deque([1])
        while queue:
            v = queue.popleft()
            for w in self._neighbors[v]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        return len(seen) == self.agent_count

    def max_degree(self) -> int:
        return max((len(v) for v in self._neighbors.values()), default=0)

    def __repr__(self):
        return f"Graph(N={self.agent_count}, D={self.dimension}, edges={self.edges})"


def build_incidence(g: Graph) -> np.ndarray:
    """Edge-node incidence matrix, Kronecker-expanded by ``I_D``.

    Block row ``m`` for edge ``(i, j)`` holds ``+I_D`` at agent ``i`` and
    ``-I_D`` at agent ``j``.
    """
    if not g.is_connected():
        raise ProblemError("incidence matrix requested for a disconnected graph")
    a = np.zeros((len(g.edges), g.agent_count))
    for m, (i, j) in enumerate(g.edges):
        a[m, i - 1] = 1.0
        a[m, j - 1] = -1.0
    return np.kron(a, np.eye(g.dimension))


class LocalObjective:
    """One agent's private convex, differentiable objective.

    Subclasses provide ``value`` and ``gradient``. Overriding
    ``solve_stationarity`` with a closed form skips the iterative inner
    solver in the x-update.
    """

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def solve_stationarity(self, coef: float, rhs: np.ndarray):
        """Solve ``grad f(x) + coef * x = rhs``; ``None`` when no closed form exists."""
        return None


class FunctionObjective(LocalObjective):
    """Wrap plain callables as a local objective."""

    def __init__(self, value: Callable, gradient: Callable):
        self._value = value
        self._gradient = gradient

    def value(self, x):
        return float(self._value(np.asarray(x, dtype=float)))

    def gradient(self, x):
        return np.asarray(self._gradient(np.asarray(x, dtype=float)), dtype=float)


class QuadraticLocal(LocalObjective):
    """``f(x) = (1/p) * ||h x - theta||^2``."""

    def __init__(self, h: float, p: float, theta):
        if p <= 0:
            raise ProblemError(f"p must be positive, got {p}")
        self.h = float(h)
        self.p = float(p)
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))

    @property
    def curvature(self) -> float:
        # grad f(x) = curvature * x - offset
        return 2.0 * self.h**2 / self.p

    @property
    def offset(self) -> np.ndarray:
        return 2.0 * self.h / self.p * self.theta

    def value(self, x):
        r = self.h * np.asarray(x, dtype=float) - self.theta
        return float(r @ r) / self.p

    def gradient(self, x):
        return 2.0 * self.h / self.p * (self.h * np.asarray(x, dtype=float) - self.theta)

    def solve_stationarity(self, coef, rhs):
        return (np.asarray(rhs, dtype=float) + self.offset) / (self.curvature + coef)


@dataclass
class QuadraticObjective:
    """Per-agent quadratic parameters: ``h[i]``, ``p[i]`` and ``theta[i]``."""

    h: np.ndarray
    p: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        self.p = np.asarray(self.p, dtype=float).reshape(-1)
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        n = len(self.h)
        if self.p.shape != (n,) or self.theta.shape[0] != n:
            raise ProblemError("h, p and theta must describe the same number of agents")
        if np.any(self.p <= 0):
            raise ProblemError("every p_i must be positive")

    @property
    def agent_count(self) -> int:
        return len(self.h)

    @property
    def dimension(self) -> int:
        return self.theta.shape[1]

    def local(self, i: int) -> QuadraticLocal:
        return QuadraticLocal(self.h[i - 1], self.p[i - 1], self.theta[i - 1])

    def locals(self) -> list[QuadraticLocal]:
        return [self.local(i) for i in range(1, self.agent_count + 1)]


def analytic_optimum(obj: QuadraticObjective) -> np.ndarray:
    """Closed-form minimizer of the summed quadratic objective."""
    w = 2.0 * obj.h / obj.p
    denom = float(np.sum(w * obj.h))
    if not np.any(obj.h != 0) or denom <= 0:
        raise ProblemError("degenerate objective: all h_i are zero")
    return (w @ obj.theta) / denom


def gradient(obj: QuadraticObjective, i: int, x) -> np.ndarray:
    return obj.local(i).gradient(x)


def finite_difference_gradient(f: Callable, x, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        g[k] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def check_gradient(local: LocalObjective, points: Sequence, rtol: float = 1e-6) -> bool:
    """Admission check: analytic gradient agrees with central differences."""
    for x in points:
        x = np.asarray(x, dtype=float)
        analytic = local.gradient(x)
        numeric = finite_difference_gradient(local.value, x)
        scale = max(1.0, float(np.linalg.norm(analytic)))
        if np.linalg.norm(analytic - numeric) > rtol * scale:
            return False
    return True


@dataclass
class Problem:
    graph: Graph
    objectives: list
    x0: np.ndarray = None
    quadratic: QuadraticObjective = None
    name: str = ""
    notes: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, d = self.graph.agent_count, self.graph.dimension
        if len(self.objectives) != n:
            raise ProblemError(f"expected {n} local objectives, got {len(self.objectives)}")
        if self.x0 is None:
            self.x0 = np.zeros((n, d))
        self.x0 = np.asarray(self.x0, dtype=float).reshape(n, d)

    @classmethod
    def from_quadratic(cls, graph: Graph, obj: QuadraticObjective, x0=None, **kw) -> "Problem":
        if obj.agent_count != graph.agent_count or obj.dimension != graph.dimension:
            raise ProblemError("objective shape does not match the graph")
        return cls(graph, obj.locals(), x0, quadratic=obj, **kw)

    def local(self, i: int) -> LocalObjective:
        return self.objectives[i - 1]

    def optimum(self) -> np.ndarray:
        if self.quadratic is None:
            raise ProblemError("no closed-form optimum for non-quadratic problems")
        return analytic_optimum(self.quadratic)

    def total_value(self, x: np.ndarray) -> float:
        """``f(x) = sum_i f_i(x_i)`` for a stacked ``(N, D)`` state."""
        x = np.asarray(x, dtype=float).reshape(self.graph.agent_count, self.graph.dimension)
        return float(sum(f.value(xi) for f, xi in zip(self.objectives, x)))

    def total_gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.graph.agent_count, self.graph.dimension)
        return np.stack([f.gradient(xi) for f, xi in zip(self.objectives, x)])


def problem_from_dict(doc: dict, name: str = "") -> Problem:
    """Build a problem from the JSON config layout.

    Keys: ``agents``, ``edges``, ``dimension``, ``objective`` (``{"type":
    "quadratic", "h", "p", "theta"}``) and optionally ``x0``.
    """
    missing = [k for k in ("agents", "edges", "dimension", "objective") if k not in doc]
    if missing:
        raise ProblemError(f"problem document missing keys: {missing}")
    graph = Graph(doc["agents"], doc["edges"], doc["dimension"])
    objective = doc["objective"]
    if objective.get("type") != "quadratic":
        raise ProblemError(f"unsupported objective type {objective.get('type')!r}")
    obj = QuadraticObjective(objective["h"], objective["p"], objective["theta"])
    return Problem.from_quadratic(graph, obj, doc.get("x0"), name=name or doc.get("name", ""),
                                  notes=doc.get("notes", ""), meta=dict(doc.get("run", {})))


def load_problem(path) -> Problem:
    path = Path(path)
    return problem_from_dict(json.loads(path.read_text()), name=path.stem)
