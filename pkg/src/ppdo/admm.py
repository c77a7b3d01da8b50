"""Jacobian ADMM with time-varying, privately factored penalties.

Each edge penalty is a product ``rho_ij = b_{i->j} * b_{j->i}`` of two
per-agent factors. Every factor is redrawn each round from
``[b_prev, b_cap]``, so penalties are nondecreasing and bounded by
``b_bar**2``. The proximal weight ``gamma_i`` is drawn once from
``[N * b_bar**2, gamma_cap]``. Those two rules keep both convergence
conditions satisfied (see :func:`check_condition_A` and
:func:`check_condition_B`).

Round ``t`` of the plaintext algorithm:

1. agents exchange ``x^t`` and their penalty proposals; the edge penalty is
   the smaller proposal;
2. ``lambda_ij^t = lambda_ij^{t-1} + rho_ij^t (x_i^t - x_j^t)``, starting
   from ``lambda_ij^0 = rho_ij^0 (x_i^0 - x_j^0)``;
3. every agent solves its reduced stationarity equation in parallel;
4. every agent redraws its penalty factors.
"""
from __future__ import annotations

import csv
import io
import logging
import random
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .problem import Graph, LocalObjective, Problem, QuadraticLocal, build_incidence, check_gradient

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ProtocolOrderError(RuntimeError):
    pass


class SubproblemError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


def agent_rng(seed: int, agent: int, purpose: str) -> random.Random:
    """Independent, reproducible stream per (seed, agent, purpose)."""
    return random.Random(f"ppdo:{seed}:{agent}:{purpose}")


@dataclass
class AgentState:
    agent: int
    x: np.ndarray
    gamma: float
    b_out: dict = field(default_factory=dict)
    b_cap: dict = field(default_factory=dict)
    lambda_edge: dict = field(default_factory=dict)

    @property
    def lambda_agg(self) -> np.ndarray:
        # derived on demand so it can never drift from the per-edge map
        total = np.zeros_like(self.x)
        for lam in self.lambda_edge.values():
            total = total + lam
        return total


@dataclass
class PenaltySchedule:
    rho: dict
    rho_self: dict
    b_bar: float
    gamma_cap: dict = field(default_factory=dict)

    def get(self, i: int, j: int) -> float:
        return self.rho[(min(i, j), max(i, j))]

    def vector(self, graph: Graph) -> np.ndarray:
        return np.array([self.rho[e] for e in graph.edges], dtype=float)


@dataclass
class RunConfig:
    max_iterations: int = 500
    stop_tolerance: float = 1e-9
    stop_window: int = 5
    seed: int = 0
    b_bar: float = 0.65
    gamma: float | None = None
    gamma_cap: float | None = None
    divergence_bound: float = 1e12
    waive_conditions: bool = False
    inner_iterations: int = 200
    inner_tolerance: float = 1e-10
    # encrypted mode only
    key_bits: int = 256
    n_max: int = 10**6
    word_bits: int = 64
    strict_key_announce: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.stop_tolerance <= 0:
            raise ConfigError("stop_tolerance must be positive")
        if self.stop_window < 1:
            raise ConfigError("stop_window must be >= 1")
        if self.b_bar <= 0:
            raise ConfigError("b_bar must be positive")


@dataclass
class Trace:
    """Per-iteration record of a run.

    ``x[t]`` is the stacked state ``x^t`` (``x[0]`` the initial state);
    ``lam[t]`` and ``rho[t]`` are the per-edge multipliers and penalties of
    round ``t``. ``exchanged[(i, j)][t]`` is ``rho_ij^t (x_j^t - x_i^t)`` as
    agent ``i`` obtained it.
    """

    mode: str
    edges: list
    gamma: np.ndarray
    x: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    b: dict = field(default_factory=dict)
    exchanged: dict = field(default_factory=dict)
    residual: list = field(default_factory=list)
    objective_gap: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    stop_reason: str = ""
    condition_a_ok: bool = True
    meta: dict = field(default_factory=dict)
    # wire frames as (sender, receiver, bytes); encrypted mode only
    capture: list = field(default_factory=list, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.x) - 1

    @property
    def final_x(self) -> np.ndarray:
        return self.x[-1]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "agent", "dim", "x", "residual", "objective_gap"])
        for t, xt in enumerate(self.x):
            gap = self.objective_gap[t] if self.objective_gap else ""
            for i, row in enumerate(xt, start=1):
                for d, v in enumerate(row):
                    w.writerow([t, i, d, repr(float(v)), repr(self.residual[t]),
                                repr(gap) if gap != "" else ""])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())


# --------------------------------------------------------------------------
# schedules


def gamma_select(agent: int, N: int, b_bar: float, gamma_cap: float, rng) -> float:
    lo = N * b_bar**2
    if gamma_cap < lo:
        raise ConfigError(f"agent {agent}: gamma cap {gamma_cap} below N*b_bar^2 = {lo}")
    return rng.uniform(lo, gamma_cap)


def _positive_uniform(rng, hi: float) -> float:
    while True:
        v = rng.uniform(0.0, hi)
        if 0.0 < v < hi or (v == hi and hi > 0):
            return v


def init_agents(problem: Problem, cfg: RunConfig, rngs: dict) -> list[AgentState]:
    """Initial states, caps ``b_cap`` in ``(0, b_bar)`` and factors in ``(0, b_cap]``."""
    g = problem.graph
    N = g.agent_count
    agents = []
    for i in g.agents:
        rng = rngs[i]
        if cfg.gamma is not None:
            gamma = float(cfg.gamma)
        else:
            cap = cfg.gamma_cap if cfg.gamma_cap is not None else 2 * N * cfg.b_bar**2
            gamma = gamma_select(i, N, cfg.b_bar, cap, rng)
        if gamma <= 0:
            raise ConfigError(f"agent {i}: gamma must be positive")
        b_cap, b_out = {}, {}
        for j in g.neighbors(i):
            cap_ij = _positive_uniform(rng, cfg.b_bar)
            while cap_ij >= cfg.b_bar:
                cap_ij = _positive_uniform(rng, cfg.b_bar)
            b_cap[j] = cap_ij
            b_out[j] = _positive_uniform(rng, cap_ij)
        agents.append(AgentState(i, problem.x0[i - 1].copy(), gamma, b_out, b_cap))
    return agents


def update_factors(state: AgentState, rng) -> None:
    """Redraw each ``b_{i->j}`` uniformly from ``[b_{i->j}, b_cap_{i->j}]``."""
    for j in sorted(state.b_out):
        lo, hi = state.b_out[j], state.b_cap[j]
        state.b_out[j] = min(hi, rng.uniform(lo, hi))


def reconcile(proposals: dict, graph: Graph, b_bar: float) -> PenaltySchedule:
    """Edge penalty = min of the two endpoint proposals; ``rho_ii = 1 - sum_j rho_ij``.

    ``proposals[(i, j)]`` is agent ``i``'s proposed ``rho_ij``.
    """
    rho = {}
    for i, j in graph.edges:
        try:
            rho[(i, j)] = min(proposals[(i, j)], proposals[(j, i)])
        except KeyError as exc:
            raise ProtocolOrderError(f"missing penalty proposal for edge {(i, j)}") from exc
    rho_self = {i: 1.0 - sum(rho[(min(i, j), max(i, j))] for j in graph.neighbors(i))
                for i in graph.agents}
    return PenaltySchedule(rho, rho_self, b_bar)


def compose_schedule(agents: list[AgentState], graph: Graph, b_bar: float) -> PenaltySchedule:
    # in plaintext mode both factors are exchanged, so both proposals equal the product
    by_id = {a.agent: a for a in agents}
    proposals = {}
    for i, j in graph.edges:
        prod = by_id[i].b_out[j] * by_id[j].b_out[i]
        proposals[(i, j)] = proposals[(j, i)] = prod
    sched = reconcile(proposals, graph, b_bar)
    sched.gamma_cap = {a.agent: a.gamma for a in agents}
    return sched


def penalty_update(agents: list[AgentState], graph: Graph, rngs: dict, b_bar: float) -> PenaltySchedule:
    for a in agents:
        update_factors(a, rngs[a.agent])
    return compose_schedule(agents, graph, b_bar)


# --------------------------------------------------------------------------
# per-agent updates


def lambda_update(state: AgentState, neighbor_x: dict, sched: PenaltySchedule, t: int) -> AgentState:
    new = {}
    for j in state.b_out:
        if j not in neighbor_x:
            raise ProtocolOrderError(f"agent {state.agent}: no state from neighbor {j} in round {t}")
        step = sched.get(state.agent, j) * (state.x - np.asarray(neighbor_x[j], dtype=float))
        if t == 0:
            new[j] = step
        else:
            new[j] = state.lambda_edge[j] + step
    return replace(state, lambda_edge=new)


def lambda_update_from_terms(state: AgentState, weighted: dict, t: int) -> AgentState:
    """Same update when only ``rho_ij (x_j - x_i)`` is known (encrypted mode)."""
    new = {}
    for j in state.b_out:
        if j not in weighted:
            raise ProtocolOrderError(f"agent {state.agent}: no reply from neighbor {j} in round {t}")
        new[j] = -weighted[j] if t == 0 else state.lambda_edge[j] - weighted[j]
    return replace(state, lambda_edge=new)


def bb_solve(local: LocalObjective, coef: float, rhs: np.ndarray, x0: np.ndarray,
             max_iter: int = 200, tol: float = 1e-10) -> np.ndarray:
    """Barzilai-Borwein gradient descent on ``f(x) + coef/2 |x|^2 - rhs.x``."""

    def grad(x):
        return local.gradient(x) + coef * x - rhs

    x = np.asarray(x0, dtype=float).copy()
    g = grad(x)
    step = 1.0 / coef
    for _ in range(max_iter):
        if np.linalg.norm(g) <= tol:
            return x
        x_new = x - step * g
        g_new = grad(x_new)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else 1.0 / coef
        x, g = x_new, g_new
    if np.linalg.norm(g) <= tol:
        return x
    raise SubproblemError(f"inner solver stalled, residual {np.linalg.norm(g):.3e}")


def solve_reduced(local: LocalObjective, x_i: np.ndarray, lambda_agg: np.ndarray,
                  weighted_sum: np.ndarray, gamma: float, *, max_iter=200, tol=1e-10) -> np.ndarray:
    """Solve ``grad f(x) + (1+g) x + lam - W - (1+g) x_i = 0``.

    ``W = sum_j rho_ij (x_j - x_i)``. ``rho_ii`` never appears: it is folded
    into the ``(1 + gamma)`` coefficient.
    """
    coef = 1.0 + gamma
    rhs = -lambda_agg + weighted_sum + coef * x_i
    closed = local.solve_stationarity(coef, rhs)
    if closed is not None:
        return np.asarray(closed, dtype=float)
    return bb_solve(local, coef, rhs, x_i, max_iter, tol)


def x_update(state: AgentState, neighbor_x: dict, sched: PenaltySchedule,
             local: LocalObjective, t: int, **solver) -> np.ndarray:
    w = np.zeros_like(state.x)
    for j in state.b_out:
        if j not in neighbor_x:
            raise ProtocolOrderError(f"agent {state.agent}: no state from neighbor {j} in round {t}")
        w = w + sched.get(state.agent, j) * (np.asarray(neighbor_x[j]) - state.x)
    return solve_reduced(local, state.x, state.lambda_agg, w, state.gamma, **solver)


# --------------------------------------------------------------------------
# convergence conditions


def check_condition_A(rho_sequence, rho_bar) -> tuple[bool, int | None]:
    """Check ``0 < rho^0 <= rho^k <= rho^{k+1} <= rho_bar`` entrywise.

    Entries may be per-edge vectors or diagonal matrices. Returns the
    verdict and the index of the first offending element.
    """
    prev = None
    for k, r in enumerate(rho_sequence):
        r = np.asarray(r, dtype=float)
        if r.ndim == 2:
            r = np.diag(r)
        if k == 0 and np.any(r <= 0):
            return False, 0
        if np.any(r > rho_bar):
            return False, k
        if prev is not None and np.any(r < prev):
            return False, k
        prev = r
    return True, None


def check_condition_B(q_p, graph: Graph, rho_bar) -> tuple[bool, float]:
    """Is ``Q_P + I - A^T rho_bar A`` positive definite?

    ``q_p`` may be a scalar gamma, one gamma per agent, or the full
    ``ND x ND`` matrix. ``rho_bar`` may be a scalar or one value per edge.
    """
    N, D = graph.agent_count, graph.dimension
    q = np.asarray(q_p, dtype=float)
    if q.ndim == 0:
        q = np.full(N, float(q))
    if q.ndim == 1:
        q = np.kron(np.diag(q), np.eye(D))
    rb = np.broadcast_to(np.asarray(rho_bar, dtype=float), (len(graph.edges),))
    if graph.edges:
        A = build_incidence(graph)
        penalty = A.T @ np.diag(np.repeat(rb, D)) @ A
    else:
        penalty = np.zeros((N * D, N * D))
    m = q + np.eye(N * D) - penalty
    smallest = float(np.linalg.eigvalsh((m + m.T) / 2).min())
    return smallest > 0, smallest


# --------------------------------------------------------------------------
# runners


def _validate_conditions(graph: Graph, agents, cfg: RunConfig) -> None:
    if cfg.waive_conditions:
        return
    ok, ev = check_condition_B([a.gamma for a in agents], graph, cfg.b_bar**2)
    if not ok:
        raise ConfigError(f"Condition B fails: smallest eigenvalue {ev:.4g}")


def admit_objectives(problem: Problem, rtol: float = 1e-6) -> None:
    """Reject custom objectives whose gradient disagrees with finite differences."""
    for i in problem.graph.agents:
        local = problem.local(i)
        if isinstance(local, QuadraticLocal):
            continue
        x0 = problem.x0[i - 1]
        points = [x0, x0 + 1.0, x0 - 0.5 * np.arange(1, len(x0) + 1)]
        if not check_gradient(local, points, rtol):
            raise ConfigError(f"agent {i}: objective gradient fails the finite-difference check")


def new_trace(mode: str, problem: Problem, agents) -> Trace:
    g = problem.graph
    tr = Trace(mode, list(g.edges), np.array([a.gamma for a in agents]))
    for i in g.agents:
        for j in g.neighbors(i):
            tr.b[(i, j)] = []
            tr.exchanged[(i, j)] = []
    return tr


class _Recorder:
    """Shared bookkeeping for the plaintext and encrypted runners."""

    def __init__(self, problem: Problem, cfg: RunConfig, trace: Trace):
        self.problem = problem
        self.cfg = cfg
        self.trace = trace
        g = problem.graph
        self.A = build_incidence(g) if g.edges else np.zeros((0, g.agent_count * g.dimension))
        try:
            xs = problem.optimum()
            self.f_star = problem.total_value(np.tile(xs, (g.agent_count, 1)))
        except Exception:
            self.f_star = None
        self.stable = 0
        self.record_state(problem.x0)

    def record_state(self, x: np.ndarray) -> None:
        tr = self.trace
        tr.x.append(np.array(x, dtype=float))
        tr.residual.append(float(np.linalg.norm(self.A @ x.reshape(-1))))
        if self.f_star is not None:
            tr.objective_gap.append(self.problem.total_value(x) - self.f_star)

    def record_round(self, agents, rho: np.ndarray) -> None:
        g = self.problem.graph
        by_id = {a.agent: a for a in agents}
        lam = np.array([by_id[i].lambda_edge[j] for i, j in g.edges]).reshape(len(g.edges), g.dimension)
        self.trace.lam.append(lam)
        self.trace.rho.append(np.asarray(rho, dtype=float))
        for a in agents:
            for j, b in a.b_out.items():
                self.trace.b[(a.agent, j)].append(b)

    def finish_round(self, old_x: np.ndarray, new_x: np.ndarray, started: float) -> bool:
        """Record ``x^{t+1}``; returns True when the stop rule fires."""
        cfg = self.cfg
        worst = float(np.max(np.abs(new_x))) if new_x.size else 0.0
        if not np.isfinite(worst) or worst > cfg.divergence_bound:
            self.trace.stop_reason = "diverged"
            raise DivergenceError(
                f"state magnitude {worst:.3e} exceeds bound {cfg.divergence_bound:.1e} "
                f"at iteration {self.trace.iterations}")
        self.record_state(new_x)
        self.trace.timing.append(time.perf_counter() - started)
        step = float(np.max(np.abs(new_x - old_x))) if new_x.size else 0.0
        self.stable = self.stable + 1 if step < cfg.stop_tolerance else 0
        if self.stable >= cfg.stop_window:
            self.trace.stop_reason = "tolerance"
            return True
        return False


def run_plaintext(problem: Problem, cfg: RunConfig) -> Trace:
    """Run the plaintext algorithm in lockstep simulation."""
    g = problem.graph
    rngs = {i: agent_rng(cfg.seed, i, "schedule") for i in g.agents}
    admit_objectives(problem)
    agents = init_agents(problem, cfg, rngs)
    _validate_conditions(g, agents, cfg)
    sched = compose_schedule(agents, g, cfg.b_bar)
    trace = new_trace("plaintext", problem, agents)
    rec = _Recorder(problem, cfg, trace)
    rho_bar = cfg.b_bar**2
    solver = dict(max_iter=cfg.inner_iterations, tol=cfg.inner_tolerance)

    for t in range(cfg.max_iterations):
        started = time.perf_counter()
        # step 1: x^t and rho^t are exchanged; this snapshot is all anyone reads
        snapshot = {a.agent: a.x.copy() for a in agents}
        views = {i: {j: snapshot[j] for j in g.neighbors(i)} for i in g.agents}
        # step 2
        agents = [lambda_update(a, views[a.agent], sched, t) for a in agents]
        rho_t = sched.vector(g)
        rec.record_round(agents, rho_t)
        for a in agents:
            for j in g.neighbors(a.agent):
                trace.exchanged[(a.agent, j)].append(sched.get(a.agent, j) * (snapshot[j] - snapshot[a.agent]))
        # step 3: Jacobian update, every agent reads the same snapshot
        new_x = {a.agent: x_update(a, views[a.agent], sched, problem.local(a.agent), t, **solver)
                 for a in agents}
        for a in agents:
            a.x = new_x[a.agent]
        # step 4
        sched = penalty_update(agents, g, rngs, cfg.b_bar)
        ok, _ = check_condition_A([rho_t, sched.vector(g)], rho_bar)
        if not ok:
            trace.condition_a_ok = False
            log.warning("penalty schedule violated Condition A at iteration %d", t)
        old = np.stack([snapshot[i] for i in g.agents])
        if rec.finish_round(old, np.stack([a.x for a in agents]), started):
            break
    else:
        trace.stop_reason = "max_iterations"
    return trace


# --------------------------------------------------------------------------
# diagnostics


class RateDiagnostic(NamedTuple):
    slope: float
    gaps: np.ndarray
    iterations: np.ndarray
    fitted: np.ndarray


def _stacked_optimum(problem: Problem) -> np.ndarray:
    xs = problem.optimum()
    return np.tile(xs, (problem.graph.agent_count, 1))


def saddle_multiplier(problem: Problem) -> np.ndarray:
    """A multiplier ``lam*`` with ``A^T lam* = -grad f(x*)`` (least-norm choice)."""
    A = build_incidence(problem.graph)
    grad = problem.total_gradient(_stacked_optimum(problem)).reshape(-1)
    lam, *_ = np.linalg.lstsq(A.T, -grad, rcond=None)
    return lam


def convergence_rate_diagnostic(trace: Trace, problem: Problem, lam_star=None,
                                fit_from: float = 0.5) -> RateDiagnostic:
    """Ergodic gap ``f(xbar) + lam*^T A xbar - f(x*)`` and its log-log slope.

    ``xbar^{t+1}`` averages ``x^1..x^{t+1}``. ``lam*`` defaults to the final
    multipliers of the run. Nonpositive gaps (round-off once the average has
    converged) are left out of the fit.
    """
    A = build_incidence(problem.graph)
    xs = np.array(trace.x[1:]).reshape(len(trace.x) - 1, -1)
    counts = np.arange(1, len(xs) + 1)[:, None]
    xbar = np.cumsum(xs, axis=0) / counts
    lam = np.asarray(trace.lam[-1] if lam_star is None else lam_star).reshape(-1)
    x_star = _stacked_optimum(problem)
    f_star = problem.total_value(x_star)
    n, d = problem.graph.agent_count, problem.graph.dimension
    gaps = np.array([problem.total_value(xb.reshape(n, d)) + lam @ (A @ xb) - f_star for xb in xbar])
    t = np.arange(len(gaps))
    fitted = (t >= int(fit_from * len(gaps))) & (gaps > 0) & (t > 0)
    if fitted.sum() < 2:
        return RateDiagnostic(float("nan"), gaps, t, fitted)
    slope = np.polyfit(np.log(t[fitted] + 1), np.log(gaps[fitted]), 1)[0]
    return RateDiagnostic(float(slope), gaps, t, fitted)


def descent_inequality_margins(trace: Trace, problem: Problem, lam_star=None,
                               x_star=None) -> np.ndarray:
    """Slack of the per-iteration descent inequality, one value per ``k``.

    With ``Qbar = Q_P + I`` the inequality reads::

        |lam^{k+1}-lam*|^2_{(rho^{k+1})^-1} + |x^{k+1}-x*|^2_Qbar
          <= |lam^k-lam*|^2_{(rho^k)^-1} + |x^k-x*|^2_Qbar
             - |A x^{k+1}|^2_{rho^k} - |x^{k+1}-x^k|^2_{Qbar - A^T rho^k A}
             + |A x^{k+1}|^2_{rho^{k+1}} - |A x^k|^2_{rho^k}

    Returned values are right side minus left side; they are nonnegative
    whenever the saddle point is exact and Condition A holds.
    """
    g = problem.graph
    D = g.dimension
    A = build_incidence(g)
    lam_star = saddle_multiplier(problem) if lam_star is None else np.asarray(lam_star).reshape(-1)
    x_star = _stacked_optimum(problem).reshape(-1) if x_star is None else np.asarray(x_star).reshape(-1)
    qbar = np.repeat(trace.gamma, D) + 1.0

    def wn(v, w):
        return float(np.sum(w * v * v))

    out = []
    for k in range(len(trace.lam) - 1):
        x0 = trace.x[k].reshape(-1)
        x1 = trace.x[k + 1].reshape(-1)
        r0 = np.repeat(trace.rho[k], D)
        r1 = np.repeat(trace.rho[k + 1], D)
        l0 = trace.lam[k].reshape(-1) - lam_star
        l1 = trace.lam[k + 1].reshape(-1) - lam_star
        ax0, ax1 = A @ x0, A @ x1
        dx = x1 - x0
        lhs = wn(l1, 1 / r1) + wn(x1 - x_star, qbar)
        rhs = (wn(l0, 1 / r0) + wn(x0 - x_star, qbar)
               - (wn(ax1, r0) + wn(dx, qbar) - wn(A @ dx, r0))
               + wn(ax1, r1) - wn(ax0, r0))
        out.append(rhs - lhs)
    return np.array(out)


def error_metric_d(solutions, optimum) -> float:
    """Mean squared distance of every agent's final state from ``optimum``."""
    sols = [np.asarray(s, dtype=float) for s in solutions]
    if not sols:
        raise ValueError("need at least one run")
    opt = np.asarray(optimum, dtype=float)
    total = sum(float(np.sum((s - opt) ** 2)) for s in sols)
    return total / (sols[0].shape[0] * len(sols))
