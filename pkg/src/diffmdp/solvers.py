"""Dynamic-programming solvers for a finite SampledMdp.

Costs are minimized.  Ties in the argmin go to the lowest action index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidDiscountError, NonConvergenceError
from .mdp import SampledMdp
from .sde import RandomSource

MAX_ITER = 10**6


@dataclass
class ValueSolution:
    kind: str  # "discounted" | "ergodic"
    values: np.ndarray
    h: float
    beta: float
    residual: float
    iterations: int
    gain: Optional[float] = None  # cost per unit time (ergodic only)
    anchor: Optional[int] = None

    def __post_init__(self):
        if self.kind == "discounted" and self.gain is not None:
            raise ValueError("discounted solutions carry no gain")
        if self.kind == "ergodic" and self.values[self.anchor] != 0.0:
            raise ValueError("ergodic bias must vanish at the anchor")

    def to_record(self, policy: np.ndarray) -> dict:
        return {
            "kind": self.kind, "h": self.h, "beta": self.beta, "gain": self.gain,
            "anchor": self.anchor, "residual": self.residual, "iterations": self.iterations,
            "values": self.values.tolist(), "policy": np.asarray(policy).tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> tuple:
        sol = cls(kind=rec["kind"], values=np.asarray(rec["values"], dtype=float), h=rec["h"],
                  beta=rec["beta"], residual=rec["residual"], iterations=rec["iterations"],
                  gain=rec["gain"], anchor=rec["anchor"])
        return sol, np.asarray(rec["policy"], dtype=int)


def save_solution(path, solution: ValueSolution, policy) -> None:
    with open(path, "w") as fh:
        json.dump(solution.to_record(policy), fh, indent=1)
        fh.write("\n")


def load_solution(path) -> tuple:
    with open(path) as fh:
        return ValueSolution.from_record(json.load(fh))


def q_values(mdp: SampledMdp, V: np.ndarray, discount: float) -> np.ndarray:
    return mdp.stage_cost + discount * mdp.kernel.expectation(V)


def bellman(mdp: SampledMdp, V: np.ndarray) -> np.ndarray:
    """(T V)(i) = min_a [c_h(i, a) + beta sum_j P_a(i, j) V(j)]."""
    return q_values(mdp, V, mdp.beta).min(axis=1)


def relative_bellman(mdp: SampledMdp, W: np.ndarray, anchor: int = 0) -> np.ndarray:
    """Undiscounted update shifted so that the anchor entry is zero."""
    TW = q_values(mdp, W, 1.0).min(axis=1)
    return TW - TW[anchor]


def _check_discount(beta: float):
    if not 0.0 < beta < 1.0:
        raise InvalidDiscountError(f"discount factor must lie in (0, 1), got {beta}")


def value_iteration(mdp: SampledMdp, tol: float, max_iter: int = MAX_ITER) -> tuple:
    """Iterate V <- T V from zero until ||V_{n+1} - V_n|| <= tol (1 - beta) / (2 beta).

    The returned values are then within tol of the fixed point (sup norm).
    """
    beta = mdp.beta
    _check_discount(beta)
    threshold = tol * (1.0 - beta) / (2.0 * beta)
    V = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        V_new = bellman(mdp, V)
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta <= threshold:
            break
    else:
        raise NonConvergenceError("value iteration did not converge", delta, max_iter)
    policy = np.argmin(q_values(mdp, V, beta), axis=1)
    return ValueSolution("discounted", V, mdp.h, beta, delta, it), policy


def policy_evaluation(mdp: SampledMdp, policy, tol: float, max_iter: int = MAX_ITER) -> np.ndarray:
    beta = mdp.beta
    _check_discount(beta)
    policy = np.asarray(policy)
    P = mdp.kernel.policy_matrix(policy)
    c = mdp.stage_cost[np.arange(mdp.n_states), policy]
    threshold = tol * (1.0 - beta) / (2.0 * beta)
    V = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        V_new = c + beta * (P @ V)
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta <= threshold:
            return V
    raise NonConvergenceError("policy evaluation did not converge", delta, max_iter)


def relative_value_iteration(mdp: SampledMdp, tol: float, anchor: int = 0,
                             max_iter: int = MAX_ITER) -> tuple:
    """Average-cost relative value iteration.

    Stops when the span of successive differences is <= tol.  The per-step
    gain g is converted to cost per unit time as rho = g / h.
    """
    W = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        TW = q_values(mdp, W, 1.0).min(axis=1)
        diff = TW - W
        span = float(diff.max() - diff.min())
        W = TW - TW[anchor]
        if span <= tol:
            break
    else:
        raise NonConvergenceError(
            "relative value iteration span did not contract; the truncated chain may be reducible",
            span, max_iter)
    g = 0.5 * float(diff.max() + diff.min())
    policy = np.argmin(q_values(mdp, W, 1.0), axis=1)
    sol = ValueSolution("ergodic", W, mdp.h, mdp.beta, span, it, gain=g / mdp.h, anchor=anchor)
    return sol, policy


@dataclass
class QLearningResult:
    q: np.ndarray
    policy: np.ndarray
    bellman_residual: float
    steps: int


def q_learning(mdp: SampledMdp, episodes: int, episode_length: int, rng: RandomSource,
               step_size: Optional[Callable[[int], float]] = None,
               exploration: Optional[Callable[[int], float]] = None) -> QLearningResult:
    """Tabular Q-learning driven by next states sampled from the kernel rows.

    ``step_size(n)`` receives the visit count of the updated pair and
    ``exploration(k)`` the episode index.  Defaults: n^-0.7 and a constant
    0.2 epsilon-greedy rate.
    """
    _check_discount(mdp.beta)
    step_size = step_size or (lambda n: 1.0 / n ** 0.7)
    exploration = exploration or (lambda k: 0.2)
    gen = rng.generator()
    n, m = mdp.n_states, mdp.n_actions
    cum_rows = []
    for mat in mdp.kernel.matrices:
        rows = []
        for i in range(n):
            r = mat.getrow(i)
            rows.append((r.indices, np.cumsum(r.data)))
        cum_rows.append(rows)
    Q = np.zeros((n, m))
    visits = np.zeros((n, m), dtype=np.int64)
    steps = 0
    for k in range(episodes):
        s = int(gen.integers(n))
        eps = exploration(k)
        for _ in range(episode_length):
            a = int(gen.integers(m)) if gen.random() < eps else int(np.argmin(Q[s]))
            cols, cum = cum_rows[a][s]
            j = min(int(np.searchsorted(cum, gen.random() * cum[-1], side="right")), len(cols) - 1)
            s_next = int(cols[j])
            visits[s, a] += 1
            target = mdp.stage_cost[s, a] + mdp.beta * Q[s_next].min()
            Q[s, a] += step_size(visits[s, a]) * (target - Q[s, a])
            s = s_next
            steps += 1
    exact = q_values(mdp, Q.min(axis=1), mdp.beta)
    return QLearningResult(Q, np.argmin(Q, axis=1), float(np.max(np.abs(Q - exact))), steps)
