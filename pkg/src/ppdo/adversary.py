"""What an honest-but-curious neighbor or an eavesdropper can infer.

An adversary ``i`` sees, for its neighbor ``j``, only
``y^k = b_{i->j}^k b_{j->i}^k (x_j^k - x_i^k)``. The counting functions
report how underdetermined the resulting equation systems are; the trial
study samples the hidden ``b_{j->i}`` and ``gamma_j`` the way ``j`` does and
back-solves for ``j``'s states and gradients, showing that many different
hidden trajectories explain the same observations.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .admm import Trace, bb_solve
from .codec import CodecConfig, encode_real
from .problem import FunctionObjective, LocalObjective, Problem
from .transport import ENCRYPTED_STATE, WEIGHTED_DIFF_REPLY, FrameError, decode_frame, deserialize


class DofCount(NamedTuple):
    equations: int
    unknowns: int

    @property
    def gap(self) -> int:
        return self.unknowns - self.equations


class GradientDofCount(tuple):
    """``(equations, unknowns)`` plus whether ``grad f_j(x*)`` is identifiable."""

    def __new__(cls, equations: int, unknowns: int, optimum_gradient_identifiable: bool):
        self = super().__new__(cls, (equations, unknowns))
        self.optimum_gradient_identifiable = optimum_gradient_identifiable
        return self

    @property
    def equations(self) -> int:
        return self[0]

    @property
    def unknowns(self) -> int:
        return self[1]

    @property
    def gap(self) -> int:
        return self[1] - self[0]


def count_state_dof(K: int, D: int) -> DofCount:
    """Observations ``y^0..y^K`` against unknown ``x_j^k`` and ``b_{j->i}^k``."""
    if K < 0 or D < 1:
        raise ValueError("need K >= 0 and D >= 1")
    return DofCount((K + 1) * D, (K + 1) * D + K + 1)


def count_gradient_dof(K: int, D: int, has_other_neighbor: bool) -> GradientDofCount:
    """``K`` replayed x-updates of ``j`` against their unknowns.

    Unknown in every case: ``grad f_j(x_j^k)`` for ``k = 1..K``, ``gamma_j``
    and ``x_j^k`` for ``k = 0..K``. When ``j`` has another neighbor, its
    multiplier and neighbor sum for ``k = 0..K-1`` are unknown as well.
    Otherwise both follow from the adversary's own records, and at
    convergence ``grad f_j(x*) = -lambda_j*`` is identifiable.
    """
    if K < 1 or D < 1:
        raise ValueError("need K >= 1 and D >= 1")
    base = K * D + (K + 1) * D + 1
    if has_other_neighbor:
        return GradientDofCount(K * D, base + K * D, False)
    return GradientDofCount(K * D, base, True)


# --------------------------------------------------------------------------
# trial study


@dataclass
class AdversaryView:
    """Everything agent ``adversary`` legitimately holds about edge (adversary, target).

    ``y[k]`` is ``rho^k (x_target^k - x_adversary^k)`` for rounds
    ``k = 0..K-1``; ``x_own`` has ``K + 1`` rows (``x^0..x^K``);
    ``lam_own[k]`` is the adversary's ``lambda_{adversary,target}^k``.
    """

    adversary: int
    target: int
    agent_count: int
    b_bar: float
    y: np.ndarray
    x_own: np.ndarray
    b_own: np.ndarray
    gamma_own: float
    lam_own: np.ndarray
    own_objective: LocalObjective = field(repr=False)
    target_has_other_neighbor: bool = False

    @property
    def rounds(self) -> int:
        return len(self.y)

    @classmethod
    def from_trace(cls, trace: Trace, problem: Problem, adversary: int, target: int,
                   b_bar: float) -> "AdversaryView":
        g = problem.graph
        if target not in g.neighbors(adversary):
            raise ValueError(f"agents {adversary} and {target} are not neighbors")
        e = g.edge_index(adversary, target)
        sign = 1.0 if adversary < target else -1.0
        rounds = len(trace.lam)
        return cls(
            adversary=adversary,
            target=target,
            agent_count=g.agent_count,
            b_bar=b_bar,
            y=np.array(trace.exchanged[(adversary, target)][:rounds], dtype=float).reshape(rounds, -1),
            x_own=np.array([x[adversary - 1] for x in trace.x[:rounds + 1]], dtype=float),
            b_own=np.array(trace.b[(adversary, target)][:rounds], dtype=float),
            gamma_own=float(trace.gamma[adversary - 1]),
            lam_own=np.array([sign * lam[e] for lam in trace.lam], dtype=float),
            own_objective=problem.local(adversary),
            target_has_other_neighbor=len(g.neighbors(target)) > 1,
        )


@dataclass
class EstimationTrial:
    """One consistent guess of the target's hidden quantities.

    ``x_hat[k]`` explains ``y[k]`` for ``k = 0..K-1``; ``grad_hat[k]`` is the
    implied ``grad f_j(x_hat[k + 1])``. The fitted gradient model is
    ``slope * x + intercept`` per dimension.
    """

    b_hat: np.ndarray
    gamma_hat: float
    x_hat: np.ndarray
    grad_hat: np.ndarray
    slope: np.ndarray
    intercept: np.ndarray
    minimizer: np.ndarray


@dataclass
class StudyResult:
    trials: list
    summary: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "iteration", "x_hat", "grad_hat"])

        def fmt(v):
            return ";".join(repr(float(c)) for c in v)

        for n, tr in enumerate(self.trials):
            for k, xk in enumerate(tr.x_hat):
                grad = fmt(tr.grad_hat[k - 1]) if 1 <= k <= len(tr.grad_hat) else ""
                w.writerow([n, k, fmt(xk), grad])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True)


def sample_factor_sequences(rng: np.random.Generator, trials: int, rounds: int, b_bar: float) -> np.ndarray:
    """Nondecreasing factor sequences drawn by the public rule, shape ``(trials, rounds)``."""
    caps = rng.uniform(0.0, b_bar, trials)
    out = np.empty((trials, rounds))
    b = rng.uniform(0.0, 1.0, trials) * caps
    for k in range(rounds):
        if k:
            b = rng.uniform(b, caps)
        out[:, k] = b
    return out


def _stationary_point(own: LocalObjective, slope: np.ndarray, intercept: np.ndarray, x0) -> np.ndarray:
    # minimizer of f_hat_j + f_i: slope*x + intercept + grad f_i(x) = 0
    closed = own.solve_stationarity(slope, -intercept)
    if closed is not None:
        return np.asarray(closed, dtype=float)
    # fold the per-dimension slope into the objective and solve with unit coefficient
    shifted = FunctionObjective(lambda x: own.value(x) + 0.5 * float(np.sum((slope - 1.0) * x * x)),
                                lambda x: own.gradient(x) + (slope - 1.0) * x)
    return bb_solve(shifted, 1.0, -intercept, np.asarray(x0, dtype=float), 10_000, 1e-12)


def _fit_gradient(x: np.ndarray, grad: np.ndarray, anchor_x: np.ndarray, anchor_grad: np.ndarray):
    """Per-dimension linear fit of ``grad`` on ``x`` passing through the anchor."""
    dx = x - anchor_x
    dg = grad - anchor_grad
    den = np.sum(dx * dx, axis=0)
    slope = np.where(den > 0, np.sum(dx * dg, axis=0) / np.where(den > 0, den, 1.0), 0.0)
    return slope, anchor_grad - slope * anchor_x


def solve_trial(view: AdversaryView, b_hat: np.ndarray, gamma_hat: float) -> EstimationTrial:
    """Back-solve the state and gradient systems for one guess of ``b_{j->i}`` and ``gamma_j``."""
    K = view.rounds
    rho_hat = (view.b_own[:K] * b_hat[:K])[:, None]
    offset = view.y / rho_hat
    x_hat = view.x_own[:K] + offset
    coef = 1.0 + gamma_hat
    # the target's replayed x-update; with a single neighbor its multiplier is
    # -lam_own and its neighbor sum is -y
    grad_hat = -coef * x_hat[1:] + view.lam_own[:K - 1] - view.y[:K - 1] + coef * x_hat[:-1]
    # at convergence grad f_j(x*) = -lambda_j* = lam_own*
    anchor_x = view.x_own[K]
    anchor_grad = view.lam_own[K - 1]
    slope, intercept = _fit_gradient(x_hat[1:], grad_hat, anchor_x, anchor_grad)
    minimizer = _stationary_point(view.own_objective, slope, intercept, anchor_x)
    return EstimationTrial(np.asarray(b_hat, dtype=float), float(gamma_hat), x_hat, grad_hat,
                           slope, intercept, minimizer)


def trial_residual(view: AdversaryView, trial: EstimationTrial) -> float:
    """Largest violation of the observation equations the trial was solved from."""
    K = view.rounds
    pred = (view.b_own[:K] * trial.b_hat[:K])[:, None] * (trial.x_hat - view.x_own[:K])
    return float(np.max(np.abs(pred - view.y))) if K else 0.0


def run_estimation_trials(view: AdversaryView, trials: int = 2000, rng=None,
                          optimum=None, max_resamples: int = 100) -> StudyResult:
    """Sample ``trials`` hidden-parameter guesses and back-solve each one.

    ``gamma_hat`` is uniform on ``[N b_bar^2, 2 N b_bar^2]``; each factor
    sequence follows the public redraw rule. ``optimum`` (the consensus
    optimum, if known to the caller) is only used for reporting.
    """
    if view.target_has_other_neighbor:
        raise ValueError("the trial study replays a target whose only neighbor is the adversary")
    if view.rounds < 2:
        raise ValueError("need at least two observed rounds")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    K, N = view.rounds, view.agent_count
    lo = N * view.b_bar**2
    out = []
    b_all = sample_factor_sequences(rng, trials, K, view.b_bar)
    gammas = rng.uniform(lo, 2 * lo, trials)
    for n in range(trials):
        b_hat = b_all[n]
        for _ in range(max_resamples):
            if np.all(b_hat > 0):
                break
            b_hat = sample_factor_sequences(rng, 1, K, view.b_bar)[0]
        else:
            raise RuntimeError(f"trial {n}: could not draw a nonzero factor sequence")
        out.append(solve_trial(view, b_hat, gammas[n]))
    return StudyResult(out, summarize(view, out, optimum))


def _curvature(own: LocalObjective) -> float:
    return float(getattr(own, "curvature", 0.0))


def summarize(view: AdversaryView, trials: list, optimum=None) -> dict:
    offsets = np.stack([t.x_hat - view.x_own[:view.rounds] for t in trials])
    # spread of x_hat equals the spread of the offset from the adversary's own state
    spread = np.max(np.max(offsets, axis=0) - np.min(offsets, axis=0), axis=1)
    observed_equal = np.all(view.y == 0, axis=1)
    slopes = np.array([t.slope for t in trials])
    intercepts = np.array([t.intercept for t in trials])
    minimizers = np.array([t.minimizer for t in trials])
    summary = {
        "trials": len(trials),
        "rounds": view.rounds,
        "x_hat_spread": spread.tolist(),
        "observed_equal_rounds": np.flatnonzero(observed_equal).tolist(),
        "slope_range": [slopes.min(axis=0).tolist(), slopes.max(axis=0).tolist()],
        "intercept_range": [intercepts.min(axis=0).tolist(), intercepts.max(axis=0).tolist()],
        "minimizer_range": [minimizers.min(axis=0).tolist(), minimizers.max(axis=0).tolist()],
        # fits whose sum with the adversary's own objective is not strictly convex
        "nonconvex_fits": int(np.sum(np.any(slopes + _curvature(view.own_objective) <= 0, axis=1))),
        "max_trial_residual": max(trial_residual(view, t) for t in trials),
    }
    if optimum is not None:
        summary["optimum"] = np.atleast_1d(np.asarray(optimum, dtype=float)).tolist()
        summary["max_minimizer_error"] = float(np.max(np.abs(minimizers - optimum)))
    return summary


# --------------------------------------------------------------------------
# eavesdropper


def byte_entropy(data: bytes) -> float:
    """Empirical Shannon entropy in bits per byte."""
    if not data:
        return 0.0
    counts = Counter(data)
    total = len(data)
    return -sum(c / total * math.log2(c / total) for c in counts.values())


def state_patterns(true_states, codec: CodecConfig) -> set[bytes]:
    """Byte patterns of every encoded true state value and its negation."""
    width = codec.word_bits // 8
    pats = set()
    for x in true_states:
        for v in np.asarray(x, dtype=float).reshape(-1):
            for s in (encode_real(codec, v), encode_real(codec, -v)):
                if s:
                    pats.add(s.to_bytes(width, "big"))
    return pats


def eavesdropper_capture(frames, true_states, codec: CodecConfig | None = None) -> dict:
    """Statistics an observer of every link could compute.

    ``frames`` holds raw frames or ``(sender, receiver, frame)`` tuples.
    Zero slots are skipped in the leak search because runs of zero bytes
    occur in every frame header.
    """
    codec = codec or CodecConfig()
    raw = [f[2] if isinstance(f, tuple) else f for f in frames]
    ciphertexts = []
    malformed = 0
    for data in raw:
        try:
            frame = decode_frame(data)
            if frame.msg_type in (ENCRYPTED_STATE, WEIGHTED_DIFF_REPLY):
                ciphertexts.extend(deserialize(data).ciphertexts)
        except FrameError:
            malformed += 1
    width = max((c.bit_length() + 7) // 8 for c in ciphertexts) if ciphertexts else 0
    blob = b"".join(c.to_bytes(width, "big") for c in ciphertexts)
    counts = Counter(ciphertexts)
    patterns = state_patterns(true_states, codec)
    leaks = sorted(p.hex() for p in patterns if any(p in data for data in raw))
    return {
        "frames": len(raw),
        "malformed_frames": malformed,
        "ciphertexts": len(ciphertexts),
        "ciphertext_bytes": len(blob),
        "repeated_ciphertexts": sum(c - 1 for c in counts.values() if c > 1),
        "byte_entropy": byte_entropy(blob),
        "patterns_searched": len(patterns),
        "leaked_patterns": leaks,
    }
