"""Roll discrete-model policies out on the diffusion and measure the gaps
between the sampled chain and the continuous-time model."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, SimulationDiverged
from .mdp import (ActionNet, Grid, SampledMdp, assemble_mdp, build_action_net, build_grid,
                  default_counts, deposit, estimate_kernel_mc, estimate_kernel_quadrature_1d)
from .sde import DiffusionModel, RandomSource, batch_normals, em_step, steps_per_period
from .solvers import relative_value_iteration, value_iteration

log = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "h", "grid_n", "actions_m", "samples", "J_star_x0", "rho_h", "rollout_disc_mean",
    "rollout_disc_se", "rollout_erg_mean", "rollout_erg_se", "gap_vs_ref", "coupling_Z",
    "runtime_s", "master_seed",
]


@dataclass
class RolloutEstimate:
    mean: float
    std_error: float
    replications: int
    horizon: float
    truncation_bound: float = 0.0
    flags: list = field(default_factory=list)


def grid_feedback(grid: Grid, actions: ActionNet, policy) -> Callable[[np.ndarray], np.ndarray]:
    """Extend a grid policy to the whole space by nearest-node lookup."""
    table = actions.actions[np.asarray(policy)]

    def feedback(x):
        return table[grid.nearest_index(x)]

    return feedback


def interpolate_values(grid: Grid, values: np.ndarray, x) -> float:
    """Multilinear interpolation of nodal values at a single point."""
    w = deposit(np.asarray(x, dtype=float)[None, :], grid)
    return float(w @ values)


def _simulate_cost(model: DiffusionModel, feedback, x0, h: float, dt: float, n_steps: int,
                   gens: Sequence[np.random.Generator], weight: Callable[[int], float],
                   chunk: int = 1024) -> np.ndarray:
    """Sum over dt-steps of weight(j) * c(X_j, a_j) for each replication.

    Actions are sampled from ``feedback`` at multiples of h and held.
    """
    hold = steps_per_period(h, dt)
    R = len(gens)
    x = np.repeat(np.asarray(x0, dtype=float).reshape(1, model.dim), R, axis=0)
    acc = np.zeros(R)
    a = None
    done = 0
    while done < n_steps:
        k = min(chunk, n_steps - done)
        z = batch_normals(gens, k, model.dim)
        for i in range(k):
            j = done + i
            if j % hold == 0:
                a = feedback(x)
            wj = weight(j)
            if wj:
                acc += wj * model.running_cost(x, a)
            x = em_step(model, x, a, dt, z[i])
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged(done + k)
        done += k
    return acc


def _run_blocks(fn, replications: int, rng: RandomSource, workers: int) -> list:
    """Run ``fn(generators)`` over contiguous blocks of replications.

    Replication r always draws from stream r, and blocks are returned in
    order, so results do not depend on ``workers``.
    """
    block = max(1, math.ceil(replications / max(workers, 1)))
    starts = list(range(0, replications, block))

    def run(s):
        return fn([rng.stream(r).generator() for r in range(s, min(s + block, replications))])

    if workers <= 1:
        return [run(s) for s in starts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, starts))


def _replicate(fn, replications: int, rng: RandomSource, workers: int) -> np.ndarray:
    return np.concatenate(_run_blocks(fn, replications, rng, workers))


def discounted_horizon(bound_c: float, alpha: float, tol: float) -> float:
    """Horizon whose truncation error bound_c e^{-alpha T} / alpha is tol / 2."""
    return max(0.0, math.log(2.0 * bound_c / (alpha * tol)) / alpha)


def _mean_se(vals: np.ndarray) -> tuple:
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
    return float(np.mean(vals)), se


def rollout_discounted(model: DiffusionModel, feedback, x0, alpha: float, h: float, dt: float,
                       replications: int, rng: RandomSource, horizon: Optional[float] = None,
                       tol: float = 1e-3, workers: int = 1) -> RolloutEstimate:
    """Monte Carlo discounted cost of a sampled-and-held policy on the diffusion.

    The state is frozen over each dt step but the discount factor is
    integrated exactly, so a unit cost reproduces (1 - e^{-alpha T}) / alpha.
    """
    if horizon is None:
        horizon = discounted_horizon(model.bound_c, alpha, tol)
        horizon = math.ceil(horizon / h - 1e-9) * h
    n_steps = int(round(horizon / dt))
    horizon = n_steps * dt
    factor = (1.0 - math.exp(-alpha * dt)) / alpha

    def fn(gens):
        return _simulate_cost(model, feedback, x0, h, dt, n_steps, gens,
                              lambda j: math.exp(-alpha * j * dt) * factor)

    vals = _replicate(fn, replications, rng, workers)
    mean, se = _mean_se(vals)
    trunc = model.bound_c * math.exp(-alpha * horizon) / alpha
    flags = ["truncation exceeds tol/2"] if trunc > tol / 2 * (1 + 1e-9) else []
    return RolloutEstimate(mean, se, replications, horizon, trunc, flags)


def rollout_ergodic(model: DiffusionModel, feedback, x0, T: float, burn_in: float, h: float,
                    dt: float, replications: int, rng: RandomSource,
                    workers: int = 1) -> RolloutEstimate:
    """Time average of the running cost over [burn_in, T], averaged over replications."""
    if not 0 <= burn_in < T:
        raise ConfigError("need 0 <= burn_in < T")
    n_steps = int(round(T / dt))
    n_burn = int(round(burn_in / dt))
    span = (n_steps - n_burn) * dt

    def fn(gens):
        return _simulate_cost(model, feedback, x0, h, dt, n_steps, gens,
                              lambda j: dt / span if j >= n_burn else 0.0)

    vals = _replicate(fn, replications, rng, workers)
    mean, se = _mean_se(vals)
    return RolloutEstimate(mean, se, replications, T)


@dataclass
class GapReport:
    max_gap: float
    mean_gap: float
    bound: float
    passed: bool
    n_paths: int
    horizon: float


def interpolation_gap_check(mdp: SampledMdp, policy, x0_index: int, bound_c: float, n_paths: int,
                            rng: RandomSource, horizon: Optional[float] = None) -> GapReport:
    """Pathwise |sum_k beta^k c_h(X_k, a_k) - int e^{-alpha s} c(X^h(s), a(s)) ds|.

    Chain paths are sampled from the kernel rows and interpolated as step
    functions, so the integral over [kh, (k+1)h) is exact.  Both sides are
    truncated at the same horizon.
    """
    h, alpha, beta = mdp.h, mdp.alpha, mdp.beta
    if horizon is None:
        horizon = discounted_horizon(bound_c, alpha, 1e-8)
    K = int(math.ceil(horizon / h))
    policy = np.asarray(policy)
    P = mdp.kernel.policy_matrix(policy).toarray()
    cum = np.cumsum(P, axis=1)
    cost = mdp.stage_cost[np.arange(mdp.n_states), policy] / h
    gen = rng.generator()
    s = np.full(n_paths, int(x0_index))
    disc = np.zeros(n_paths)
    integ = np.zeros(n_paths)
    per_step = (1.0 - beta) / alpha
    for k in range(K):
        ck = cost[s]
        disc += beta ** k * ck * h
        integ += ck * math.exp(-alpha * k * h) * per_step
        u = gen.random(n_paths) * cum[s, -1]
        s = np.minimum((cum[s] <= u[:, None]).sum(axis=1), mdp.n_states - 1)
    gaps = np.abs(disc - integ)
    bound = bound_c * h
    return GapReport(float(gaps.max()), float(gaps.mean()), bound, bool(np.all(gaps <= bound)),
                     n_paths, K * h)


@dataclass
class CouplingResult:
    h: list
    Z: list
    slope: float
    horizon: float
    dt: float
    replications: int


def coupling_experiment(model: DiffusionModel, policy: Callable, h_list: Sequence[float], horizon: float,
                        dt: float, replications: int, rng: RandomSource, x0=None,
                        workers: int = 1, chunk: int = 512) -> CouplingResult:
    """Synchronous coupling of the diffusion and the sampled chain.

    For every h, X follows the feedback ``policy`` evaluated every dt and X^h
    holds policy(X^h_n) on [nh, (n+1)h); both use the same Gaussian
    increments.  Z(h) = max_{n <= N} E|X_{nh} - X^h_n|^2 with N h = horizon.
    """
    h_list = [float(h) for h in h_list]
    holds = [steps_per_period(h, dt) for h in h_list]
    n_steps = int(round(horizon / dt))
    for h, k in zip(h_list, holds):
        if n_steps % k:
            raise ConfigError(f"horizon {horizon} is not a multiple of h={h}")
    x0 = np.zeros(model.dim) if x0 is None else np.asarray(x0, dtype=float)

    def fn(gens):
        R = len(gens)
        X = np.repeat(x0[None, :], R, axis=0)
        Ys = [X.copy() for _ in h_list]
        acts = [None] * len(h_list)
        # sq[h][n] holds |X_{nh} - X^h_n|^2 per replication
        sq = [np.zeros((n_steps // k + 1, R)) for k in holds]
        done = 0
        while done < n_steps:
            m = min(chunk, n_steps - done)
            z = batch_normals(gens, m, model.dim)
            for i in range(m):
                j = done + i
                for q, k in enumerate(holds):
                    if j % k == 0:
                        acts[q] = policy(Ys[q])
                X_next = em_step(model, X, policy(X), dt, z[i])
                for q, k in enumerate(holds):
                    Ys[q] = em_step(model, Ys[q], acts[q], dt, z[i])
                    if (j + 1) % k == 0:
                        sq[q][(j + 1) // k] = np.sum((X_next - Ys[q]) ** 2, axis=-1)
                X = X_next
            if not np.all(np.isfinite(X)):
                raise SimulationDiverged(done + m)
            done += m
        return [s.T for s in sq]

    blocks = _run_blocks(fn, replications, rng, workers)
    Z = []
    for q in range(len(h_list)):
        per_rep = np.concatenate([b[q] for b in blocks], axis=0)  # (R, N+1)
        Z.append(float(np.max(per_rep.mean(axis=0))))
    slope = math.nan
    positive = [(h, z) for h, z in zip(h_list, Z) if z > 0]
    if len(positive) >= 2:
        slope = float(np.polyfit(np.log([p[0] for p in positive]), np.log([p[1] for p in positive]), 1)[0])
    return CouplingResult(h_list, Z, slope, horizon, dt, replications)


@dataclass
class SweepSettings:
    box: list
    action_counts: tuple
    estimator: str = "mc"  # "mc" | "quadrature"
    samples: int = 20000
    substeps: int = 4
    grid_counts: Optional[tuple] = None  # default: spacing rule per h
    vi_tol: float = 1e-8
    rvi_tol: float = 1e-10
    anchor_x: Optional[list] = None
    dt_ratio: int = 16
    disc_replications: int = 2000
    disc_tol: float = 1e-3
    erg_T: float = 100.0
    erg_burn_in: float = 5.0
    erg_replications: int = 200
    coupling_policy: Optional[Callable] = None
    coupling_horizon: float = 2.0
    coupling_replications: int = 10000
    timings: bool = False
    workers: int = 1


@dataclass
class SweepRow:
    h: float
    grid_n: int
    actions_m: int
    samples: int
    J_star_x0: float
    rho_h: float
    rollout_disc_mean: float
    rollout_disc_se: float
    rollout_erg_mean: float
    rollout_erg_se: float
    gap_vs_ref: float
    coupling_Z: float
    runtime_s: Optional[float]
    master_seed: int
    disc_truncation: float = 0.0
    rho_gap_vs_ref: float = 0.0
    vi_residual: float = 0.0
    rvi_residual: float = 0.0


def value_convergence_sweep(model: DiffusionModel, alpha: float, x0, h_list: Sequence[float],
                            settings: SweepSettings, rng: RandomSource,
                            kernels: Optional[dict] = None) -> list:
    """Kernel -> VI/RVI -> rollouts for each h; gaps are relative to the finest h.

    Pass a dict as ``kernels`` to keep the estimated kernels, keyed by h.
    """
    h_list = [float(h) for h in h_list]
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ConfigError("h_list must be strictly decreasing")
    x0 = np.asarray(x0, dtype=float).reshape(model.dim)
    dt = h_list[-1] / settings.dt_ratio
    actions = build_action_net(model.control_box, settings.action_counts)
    rows = []
    for h in h_list:
        t0 = time.perf_counter()
        counts = settings.grid_counts or default_counts(model, settings.box, h)
        grid = build_grid(settings.box, counts)
        if settings.estimator == "mc":
            kernel = estimate_kernel_mc(model, grid, actions, h, settings.substeps, settings.samples,
                                        rng.derive("kernel", h), workers=settings.workers)
        elif settings.estimator == "quadrature":
            kernel = estimate_kernel_quadrature_1d(model, grid, actions, h)
        else:
            raise ConfigError(f"unknown estimator {settings.estimator!r}")
        if kernels is not None:
            kernels[h] = kernel
        mdp = assemble_mdp(model, grid, actions, kernel, alpha)
        anchor = int(grid.nearest_index(x0 if settings.anchor_x is None else settings.anchor_x))
        vi, vi_policy = value_iteration(mdp, settings.vi_tol)
        rvi, rvi_policy = relative_value_iteration(mdp, settings.rvi_tol, anchor=anchor)
        J = interpolate_values(grid, vi.values, x0)
        disc = rollout_discounted(model, grid_feedback(grid, actions, vi_policy), x0, alpha, h, dt,
                                  settings.disc_replications, rng.derive("rollout_disc", h),
                                  tol=settings.disc_tol, workers=settings.workers)
        erg = rollout_ergodic(model, grid_feedback(grid, actions, rvi_policy), x0, settings.erg_T,
                              settings.erg_burn_in, h, dt, settings.erg_replications,
                              rng.derive("rollout_erg", h), workers=settings.workers)
        z = math.nan
        if settings.coupling_policy is not None:
            z = coupling_experiment(model, settings.coupling_policy, [h], settings.coupling_horizon, dt,
                                    settings.coupling_replications, rng.derive("coupling"), x0=x0,
                                    workers=settings.workers).Z[0]
        runtime = time.perf_counter() - t0
        log.info("sweep h=%g: J=%.6f rho=%.6f", h, J, rvi.gain)
        rows.append(SweepRow(
            h=h, grid_n=grid.size, actions_m=len(actions),
            samples=settings.samples if settings.estimator == "mc" else 0,
            J_star_x0=J, rho_h=rvi.gain, rollout_disc_mean=disc.mean, rollout_disc_se=disc.std_error,
            rollout_erg_mean=erg.mean, rollout_erg_se=erg.std_error, gap_vs_ref=math.nan,
            coupling_Z=z, runtime_s=runtime if settings.timings else None,
            master_seed=rng.master_seed, disc_truncation=disc.truncation_bound,
            vi_residual=vi.residual, rvi_residual=rvi.residual,
        ))
    ref = rows[-1]
    for r in rows:
        r.gap_vs_ref = abs(r.J_star_x0 - ref.J_star_x0)
        r.rho_gap_vs_ref = abs(r.rho_h - ref.rho_h)
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in SWEEP_COLUMNS])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


COUPLING_COLUMNS = ["h", "N", "Z", "master_seed"]


def write_coupling_csv(result: CouplingResult, master_seed: int, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COUPLING_COLUMNS)
        for h, z in zip(result.h, result.Z):
            w.writerow([repr(h), int(round(result.horizon / h)), repr(z), master_seed])
