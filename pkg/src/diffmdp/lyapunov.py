"""Foster-Lyapunov drift checks, stationary distributions, invariant measures
and bounded-Lipschitz distances between them."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NonConvergenceError, SimulationDiverged
from .mdp import (Grid, TransitionKernel, build_grid, default_counts, estimate_policy_kernel_mc,
                  estimate_policy_kernel_quadrature_1d)
from .sde import DiffusionModel, RandomSource, SmoothFunction, _as_box, apply_generator, batch_normals, em_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LyapunovCertificate:
    V: SmoothFunction
    C0: float
    C1: float
    K: np.ndarray

    def __post_init__(self):
        if self.C0 <= 0 or self.C1 <= 0:
            raise ConfigError("certificate constants C0, C1 must be positive")
        object.__setattr__(self, "K", _as_box(self.K, "K"))

    def in_K(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.K[:, 0]) & (x <= self.K[:, 1]), axis=-1)


def certificate_problems(cert: LyapunovCertificate, grid: Grid) -> list[str]:
    """Invariant checks on the truncated domain.

    Inf-compactness is proxied by: V >= 0 everywhere and V strictly larger on
    the box boundary than at its minimum.
    """
    v = cert.V.value(grid.nodes)
    problems = []
    if np.min(v) < 0:
        problems.append("V takes negative values")
    if np.min(v[grid.boundary_mask()]) <= np.min(v):
        problems.append("V does not attain its minimum strictly inside the box (not inf-compact)")
    return problems


@dataclass
class DriftReport:
    check: str
    passed: bool
    worst_violation: float
    location: dict
    constants: dict
    flags: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {"check": self.check, "pass": self.passed, "worst_violation": self.worst_violation,
                "location": self.location, "constants": self.constants, "flags": self.flags}


def _continuous_excess(model: DiffusionModel, cert: LyapunovCertificate, nodes, actions) -> tuple:
    """L_a V(x) - (C0 1_K(x) - C1 V(x)) as an (n_nodes, n_actions) array."""
    nodes = np.asarray(nodes, dtype=float)
    acts = np.asarray(actions, dtype=float).reshape(len(actions), -1)
    xs = np.repeat(nodes[:, None, :], len(acts), axis=1)
    aa = np.broadcast_to(acts[None], (len(nodes),) + acts.shape)
    LV = apply_generator(model, cert.V, xs, aa)
    rhs = cert.C0 * cert.in_K(nodes) - cert.C1 * cert.V.value(nodes)
    return LV - rhs[:, None], nodes, acts


def check_continuous_drift(model: DiffusionModel, cert: LyapunovCertificate, nodes, actions,
                           slack: float = 1e-9, grid: Optional[Grid] = None) -> DriftReport:
    """Check  L_a V(x) <= C0 1_K(x) - C1 V(x)  for every test node and action."""
    viol, nodes, acts = _continuous_excess(model, cert, nodes, actions)
    i, a = np.unravel_index(int(np.argmax(viol)), viol.shape)
    worst = float(viol[i, a])
    flags = certificate_problems(cert, grid) if grid is not None else []
    return DriftReport(
        check="continuous_drift",
        passed=worst <= slack,
        worst_violation=worst,
        location={"node": nodes[i].tolist(), "action": acts[a].tolist(),
                  "violating_nodes": int(np.sum(np.any(viol > slack, axis=1)))},
        constants={"C0": cert.C0, "C1": cert.C1, "K": cert.K.tolist()},
        flags=flags,
    )


def violation_region(model: DiffusionModel, cert: LyapunovCertificate, nodes, actions,
                     slack: float = 1e-9) -> np.ndarray:
    """Boolean mask of nodes where some action violates the continuous drift inequality."""
    viol, _, _ = _continuous_excess(model, cert, nodes, actions)
    return np.any(viol > slack, axis=1)


def check_discrete_drift(kernel: TransitionKernel, cert: LyapunovCertificate,
                         h: Optional[float] = None, eps: Optional[float] = None,
                         grid: Optional[Grid] = None) -> DriftReport:
    """Check  E[V(X_1) | x, a] <= (1 - eps) V(x) + C0_hat 1_{K_hat}(x)  on the grid.

    eps defaults to 1 - exp(-C1 h).  C0_hat is the smallest constant that
    works and K_hat the smallest sublevel set {V <= level} covering every
    node where the contraction alone fails.  Passes iff K_hat stays off the
    box boundary.
    """
    h = kernel.h if h is None else h
    grid = kernel.grid if grid is None else grid
    if grid is None:
        raise ConfigError("discrete drift check needs the kernel's grid")
    if eps is None:
        eps = 1.0 - math.exp(-cert.C1 * h)
    v = cert.V.value(grid.nodes)
    PV = kernel.expectation(v).max(axis=1)
    excess = PV - (1.0 - eps) * v
    tol = 1e-12 * max(1.0, float(np.max(np.abs(v))))
    violators = excess > tol
    c0_hat = float(max(np.max(excess), 0.0))
    level = float(np.max(v[violators])) if violators.any() else -math.inf
    in_khat = v <= level
    boundary = grid.boundary_mask()
    passed = not np.any(in_khat & boundary)
    denom = 1.0 - eps - math.exp(-cert.C1 * h)
    formula_level = c0_hat / denom if denom > 0 else math.inf
    i = int(np.argmax(excess))
    khat_nodes = grid.nodes[in_khat]
    return DriftReport(
        check="discrete_drift",
        passed=bool(passed),
        worst_violation=float(excess[i]),
        location={"node": grid.nodes[i].tolist(),
                  "khat_bounds": ([khat_nodes.min(axis=0).tolist(), khat_nodes.max(axis=0).tolist()]
                                  if len(khat_nodes) else None)},
        constants={"h": h, "eps": eps, "C0_hat": c0_hat, "level": level,
                   "level_formula": formula_level,
                   "C0_hat_continuous": cert.C0 * (1.0 - math.exp(-cert.C1 * h)) / cert.C1},
        flags=[] if passed else ["K_hat reaches the box boundary"],
    )


def drift_inequality_holds(kernel: TransitionKernel, cert: LyapunovCertificate, eps: float,
                           c0_hat: float, level: float, grid: Optional[Grid] = None) -> bool:
    grid = kernel.grid if grid is None else grid
    v = cert.V.value(grid.nodes)
    PV = kernel.expectation(v).max(axis=1)
    rhs = (1.0 - eps) * v + c0_hat * (v <= level)
    return bool(np.all(PV <= rhs + 1e-12 * max(1.0, float(np.max(np.abs(v))))))


@dataclass
class EmpiricalMeasure:
    support: np.ndarray
    weights: np.ndarray
    box: np.ndarray
    provenance: str  # "chain-stationary" | "diffusion-longrun"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=float).reshape(len(self.weights), -1)
        self.weights = np.asarray(self.weights, dtype=float)
        self.box = _as_box(self.box, "box")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError("measure weights must be a probability vector")

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, f(self.support)))

    def mean(self) -> np.ndarray:
        return self.weights @ self.support

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{k}" for k in range(self.support.shape[1])] + ["weight"])
            for x, p in zip(self.support, self.weights):
                w.writerow([repr(float(v)) for v in x] + [repr(float(p))])


def _power_iterate(P, mu: np.ndarray, tol: float, max_iter: int) -> tuple:
    PT = P.T.tocsr()
    for it in range(1, max_iter + 1):
        nxt = PT @ mu
        nxt /= nxt.sum()
        diff = float(np.abs(nxt - mu).sum())
        mu = nxt
        if diff <= tol:
            return mu, it, diff
    raise NonConvergenceError(
        "stationary distribution did not converge; the policy chain may be reducible or periodic",
        diff, max_iter)


def stationary_distribution(kernel: TransitionKernel, policy, tol: float = 1e-12,
                            max_iter: int = 10**6, grid: Optional[Grid] = None) -> EmpiricalMeasure:
    """Power iteration from the uniform distribution on the policy-induced chain.

    A second run from a point mass checks uniqueness; disagreement is
    recorded in ``info["unique"]`` and logged as a warning.
    """
    grid = kernel.grid if grid is None else grid
    P = kernel.policy_matrix(policy)
    n = kernel.n_states
    mu, it, diff = _power_iterate(P, np.full(n, 1.0 / n), tol, max_iter)
    start = np.zeros(n)
    start[0] = 1.0
    mu2, _, _ = _power_iterate(P, start, tol, max_iter)
    unique = float(np.abs(mu - mu2).sum()) <= max(100 * tol, 1e-8)
    if not unique:
        log.warning("stationary distribution depends on the initial law (chain not unichain)")
    support = grid.nodes if grid is not None else np.arange(n, dtype=float)[:, None]
    box = grid.box if grid is not None else [[0.0, float(n - 1)]]
    return EmpiricalMeasure(support, mu / mu.sum(), box, "chain-stationary",
                            {"iterations": it, "residual": diff, "unique": unique})


def empirical_invariant_measure(model: DiffusionModel, policy: Callable, T: float, burn_in: float,
                                dt: float, rng: RandomSource, spacing: float, box=None,
                                replicas: int = 1, chunk: int = 2048) -> EmpiricalMeasure:
    """Long-run empirical law of the diffusion under a state-feedback policy.

    The sampled time T is split evenly across ``replicas`` independent
    trajectories (stream r for replica r), each discarding ``burn_in`` first.
    States are recorded every ``spacing`` time units.
    """
    box = model.state_box if box is None else _as_box(box, "box")
    every = max(1, round(spacing / dt))
    per = T / replicas
    n_burn = int(round(burn_in / dt))
    n_steps = n_burn + int(round(per / dt))
    gens = [rng.stream(r).generator() for r in range(replicas)]
    x = np.zeros((replicas, model.dim))
    samples = []
    done = 0
    while done < n_steps:
        k = min(chunk, n_steps - done)
        z = batch_normals(gens, k, model.dim)
        for j in range(k):
            x = em_step(model, x, policy(x), dt, z[j])
            step = done + j + 1
            if step > n_burn and (step - n_burn) % every == 0:
                samples.append(x.copy())
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged(done + k)
        done += k
    pts = np.concatenate(samples, axis=0)
    return EmpiricalMeasure(pts, np.full(len(pts), 1.0 / len(pts)), box, "diffusion-longrun",
                            {"T": T, "replicas": replicas, "dt": dt})


def bl_dictionary(box, size: int = 64) -> list:
    """Deterministic test functions with ||f||_BL = sup|f| + Lip(f) <= 1.

    Scaled coordinate maps, then products of logistic sigmoids at lattice
    offsets with widths proportional to the box size.
    """
    box = _as_box(box, "box")
    d = box.shape[0]
    lo, hi = box[:, 0], box[:, 1]
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    funcs = []
    for k in range(d):
        funcs.append(lambda x, k=k: (x[..., k] - center[k]) / (half[k] + 1.0))
    scale = float(np.max(hi - lo)) / 8.0
    widths = [0.25 * scale, 0.5 * scale, 1.0 * scale]
    signs = list(np.array(np.meshgrid(*[[1.0, -1.0]] * d, indexing="ij")).reshape(d, -1).T)
    remaining = size - len(funcs)
    per_axis = max(2, int(math.ceil((remaining / (len(widths) * len(signs))) ** (1.0 / d))))
    axes = [lo[k] + (np.arange(per_axis) + 0.5) * (hi[k] - lo[k]) / per_axis for k in range(d)]
    offsets = np.array(np.meshgrid(*axes, indexing="ij")).reshape(d, -1).T
    for o in offsets:
        for w in widths:
            for s in signs:
                if len(funcs) >= size:
                    return funcs
                norm = 1.0 + d / (4.0 * w)
                funcs.append(lambda x, o=o, w=w, s=s, norm=norm:
                             np.prod(1.0 / (1.0 + np.exp(-s * (x - o) / w)), axis=-1) / norm)
    return funcs


def bl_distance(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure, dictionary: Optional[list] = None) -> float:
    """max over the dictionary of |int f dmu1 - int f dmu2|.

    A lower bound on the bounded-Lipschitz metric.
    """
    if mu1.box.shape != mu2.box.shape or not np.allclose(mu1.box, mu2.box):
        raise ConfigError("measures live on different boxes")
    funcs = bl_dictionary(mu1.box) if dictionary is None else dictionary
    return max(abs(mu1.integrate(f) - mu2.integrate(f)) for f in funcs)


INVARIANT_COLUMNS = ["h", "grid_n", "bl_distance", "mean_chain", "mean_diffusion", "master_seed"]


@dataclass
class InvariantRow:
    h: float
    grid_n: int
    bl_distance: float
    mean_chain: float
    mean_diffusion: float
    master_seed: int


def invariant_measure_convergence(model: DiffusionModel, policy: Callable, h_list, mu_v: EmpiricalMeasure,
                                  rng: RandomSource, estimator: str = "quadrature", samples: int = 20000,
                                  substeps: int = 4, grid_counts=None, workers: int = 1,
                                  measures: Optional[dict] = None) -> list:
    """BL distance between the chain's stationary law under ``policy`` and mu_v, per h.

    The chain kernel holds the action policy(x_i) in row i.  Pass a dict as
    ``measures`` to collect the stationary laws keyed by h.
    """
    rows = []
    for h in h_list:
        h = float(h)
        grid = build_grid(mu_v.box, grid_counts or default_counts(model, mu_v.box, h))
        if estimator == "quadrature":
            kernel = estimate_policy_kernel_quadrature_1d(model, grid, policy, h)
        elif estimator == "mc":
            kernel = estimate_policy_kernel_mc(model, grid, policy, h, substeps, samples,
                                               rng.derive("policy_kernel", h), workers=workers)
        else:
            raise ConfigError(f"unknown estimator {estimator!r}")
        mu_h = stationary_distribution(kernel, np.zeros(grid.size, dtype=int))
        if measures is not None:
            measures[h] = mu_h
        rows.append(InvariantRow(h, grid.size, bl_distance(mu_h, mu_v), float(mu_h.mean()[0]),
                                 float(mu_v.mean()[0]), rng.master_seed))
    return rows


def write_invariant_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INVARIANT_COLUMNS)
        for r in rows:
            w.writerow([repr(getattr(r, c)) for c in INVARIANT_COLUMNS])
