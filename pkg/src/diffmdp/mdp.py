"""Finite sampled-time MDP: state grid, action net, h-step kernel, stage cost.

The h-step transition of the diffusion (action frozen over the period) is
estimated per (node, action) and its endpoint mass is spread onto the grid
with multilinear (cloud-in-cell) weights, which keeps the conditional mean
of an unclipped endpoint exact.
"""
from __future__ import annotations

import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy import special

from .errors import AssemblyError, ConfigError, SimulationDiverged, UnsupportedError
from .sde import DiffusionModel, RandomSource, _as_box, em_step

log = logging.getLogger(__name__)

GH_ORDER = 21
_MAGIC = b"DIFFMDP-KERNEL v1\n"


@dataclass(frozen=True)
class Grid:
    box: np.ndarray
    counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "box", _as_box(self.box, "box"))
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(counts) != self.box.shape[0]:
            raise ConfigError("one count per box dimension required")
        if min(counts) < 2:
            raise ConfigError("grid counts must be >= 2")
        if np.any(self.box[:, 1] <= self.box[:, 0]):
            raise ConfigError("grid box must have positive width")
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        return (self.box[:, 1] - self.box[:, 0]) / (np.asarray(self.counts) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.box, self.counts)]

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def coords(self, index) -> np.ndarray:
        multi = np.unravel_index(np.asarray(index), self.counts)
        return self.box[:, 0] + np.stack(multi, axis=-1) * self.spacing

    def index_of(self, multi) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(multi).T), self.counts)

    def nearest_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.rint((x - self.box[:, 0]) / self.spacing).astype(np.int64)
        t = np.clip(t, 0, np.asarray(self.counts) - 1)
        return np.ravel_multi_index(tuple(np.moveaxis(t, -1, 0)), self.counts)

    def boundary_mask(self) -> np.ndarray:
        multi = np.stack(np.unravel_index(np.arange(self.size), self.counts), axis=-1)
        return np.any((multi == 0) | (multi == np.asarray(self.counts) - 1), axis=-1)

    def to_dict(self) -> dict:
        return {"box": self.box.tolist(), "counts": list(self.counts)}


def build_grid(box, counts) -> Grid:
    return Grid(box, counts)


def default_counts(model: DiffusionModel, box, h: float) -> tuple:
    """Counts giving spacing close to min(sigma) * sqrt(h) / 2 on every axis."""
    box = _as_box(box, "box")
    delta = math.sqrt(2.0 * model.nondegeneracy_floor) * math.sqrt(h) / 2.0
    return tuple(max(2, int(round((hi - lo) / delta)) + 1) for lo, hi in box)


@dataclass(frozen=True)
class ActionNet:
    actions: np.ndarray
    eps_act: float

    def __post_init__(self):
        acts = np.asarray(self.actions, dtype=float)
        if acts.ndim == 1:
            acts = acts[:, None]
        if len(np.unique(acts, axis=0)) != len(acts):
            raise ConfigError("actions in the net must be distinct")
        object.__setattr__(self, "actions", acts)

    def __len__(self) -> int:
        return len(self.actions)

    def to_dict(self) -> dict:
        return {"actions": self.actions.tolist(), "eps_act": self.eps_act}


def build_action_net(control_box, per_axis_counts) -> ActionNet:
    box = _as_box(control_box, "control_box")
    counts = [int(c) for c in np.atleast_1d(per_axis_counts)]
    if len(counts) != box.shape[0] or min(counts) < 1:
        raise ConfigError("need one count >= 1 per control axis")
    axes, steps = [], []
    for (lo, hi), n in zip(box, counts):
        if n == 1:
            axes.append(np.array([0.5 * (lo + hi)]))
            steps.append(0.0)
        else:
            axes.append(np.linspace(lo, hi, n))
            steps.append((hi - lo) / (n - 1))
    acts = np.array(list(itertools.product(*axes)), dtype=float)
    return ActionNet(acts, 0.5 * float(np.sqrt(np.sum(np.square(steps)))))


def deposit(points: np.ndarray, grid: Grid, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Cloud-in-cell deposition of weighted points; returns a dense mass vector.

    Points are clipped to the grid box first.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, grid.dim)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
    lo, hi = grid.box[:, 0], grid.box[:, 1]
    t = (np.clip(pts, lo, hi) - lo) / grid.spacing
    counts = np.asarray(grid.counts)
    i0 = np.clip(np.floor(t).astype(np.int64), 0, counts - 2)
    theta = t - i0
    mass = np.zeros(grid.size)
    for corner in itertools.product((0, 1), repeat=grid.dim):
        c = np.asarray(corner)
        cw = np.prod(np.where(c == 1, theta, 1.0 - theta), axis=-1)
        idx = np.ravel_multi_index(tuple((i0 + c).T), grid.counts)
        mass += np.bincount(idx, weights=w * cw, minlength=grid.size)
    return mass


@dataclass
class TransitionKernel:
    h: float
    matrices: list
    grid: Optional[Grid] = None
    actions: Optional[ActionNet] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrices = [sp.csr_matrix(m, dtype=float) for m in self.matrices]
        n = self.matrices[0].shape[0]
        for m in self.matrices:
            if m.shape != (n, n):
                raise AssemblyError("kernel matrices must be square and equally sized")
            if m.nnz and m.data.min() < 0:
                raise AssemblyError("kernel has negative entries")

    @property
    def n_states(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.matrices)

    @classmethod
    def from_dense(cls, P, h: float, **kw) -> "TransitionKernel":
        """Kernel from a dense array P[a, i, j]."""
        return cls(h=float(h), matrices=[np.asarray(p, dtype=float) for p in P], **kw)

    def dense(self) -> np.ndarray:
        return np.stack([m.toarray() for m in self.matrices])

    def policy_matrix(self, policy) -> sp.csr_matrix:
        """Row-stochastic matrix P^pi with row i taken from action policy[i]."""
        policy = np.asarray(policy)
        if policy.shape != (self.n_states,) or policy.min() < 0 or policy.max() >= self.n_actions:
            raise AssemblyError("policy must give a valid action index for every state")
        out = sp.csr_matrix((self.n_states, self.n_states))
        for a, m in enumerate(self.matrices):
            out = out + sp.diags((policy == a).astype(float)) @ m
        return out.tocsr()

    def expectation(self, f: np.ndarray) -> np.ndarray:
        """E[f(X_1) | X_0 = i, a] as an (n_states, n_actions) array."""
        return np.stack([m @ f for m in self.matrices], axis=-1)


def _normalize_row(mass: np.ndarray) -> tuple:
    total = mass.sum()
    cols = np.flatnonzero(mass)
    return cols, mass[cols] / total, total


def _assemble(rows: list, n: int, m: int) -> list:
    mats = []
    for a in range(m):
        indptr = [0]
        cols, vals = [], []
        for i in range(n):
            c, v = rows[i * m + a]
            cols.append(c)
            vals.append(v)
            indptr.append(indptr[-1] + len(c))
        mats.append(sp.csr_matrix((np.concatenate(vals), np.concatenate(cols), np.asarray(indptr)),
                                  shape=(n, n)))
    return mats


def _mc_row(model: DiffusionModel, grid: Grid, node: np.ndarray, action: np.ndarray, h: float,
            substeps: int, samples: int, gen: np.random.Generator, context: str) -> tuple:
    dt = h / substeps
    x = np.repeat(node[None, :], samples, axis=0)
    act = np.broadcast_to(action, (samples, len(action)))
    for s in range(substeps):
        x = em_step(model, x, act, dt, gen.standard_normal((samples, grid.dim)))
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged(s, context)
    return _normalize_row(deposit(x, grid) / samples)


def _finish_mc(rows, grid, n, m, h, samples, substeps, rng, actions) -> TransitionKernel:
    deviation = max(abs(total - 1.0) for _, _, total in rows)
    log.info("kernel row-sum audit: max |row - 1| = %.3e before renormalization", deviation)
    meta = {"estimator": "mc", "samples": samples, "substeps": substeps,
            "seed": rng.master_seed, "stream_base": rng.stream_id,
            "max_row_deviation": float(deviation)}
    return TransitionKernel(h=float(h), matrices=_assemble([r[:2] for r in rows], n, m),
                            grid=grid, actions=actions, meta=meta)


def estimate_kernel_mc(model: DiffusionModel, grid: Grid, actions: ActionNet, h: float,
                       substeps: int, samples: int, rng: RandomSource,
                       workers: int = 1) -> TransitionKernel:
    """Monte Carlo estimate of the h-step kernel.

    Row (i, a) uses noise stream ``i * len(actions) + a``, so the result does
    not depend on ``workers``.
    """
    if substeps < 1 or samples < 1:
        raise ConfigError("substeps and samples must be >= 1")
    nodes = grid.nodes
    n, m = grid.size, len(actions)

    def task(k):
        i, a = divmod(k, m)
        return _mc_row(model, grid, nodes[i], actions.actions[a], h, substeps, samples,
                       rng.stream(k).generator(), f"node {i}, action {a}")

    rows = _run_tasks(task, n * m, workers)
    return _finish_mc(rows, grid, n, m, h, samples, substeps, rng, actions)


def estimate_policy_kernel_mc(model: DiffusionModel, grid: Grid, feedback, h: float,
                              substeps: int, samples: int, rng: RandomSource,
                              workers: int = 1) -> TransitionKernel:
    """Single-action kernel whose row i holds the action feedback(x_i) over the period.

    Used for policies that are not on the action net (e.g. Lipschitz feedback maps).
    """
    if substeps < 1 or samples < 1:
        raise ConfigError("substeps and samples must be >= 1")
    nodes = grid.nodes
    acts = np.asarray(feedback(nodes), dtype=float).reshape(grid.size, -1)

    def task(i):
        return _mc_row(model, grid, nodes[i], acts[i], h, substeps, samples,
                       rng.stream(i).generator(), f"node {i}")

    rows = _run_tasks(task, grid.size, workers)
    return _finish_mc(rows, grid, grid.size, 1, h, samples, substeps, rng, None)


def _gaussian_deposit_exact(mean: float, std: float, nodes: np.ndarray) -> np.ndarray:
    """Cloud-in-cell mass of a clipped N(mean, std^2) endpoint, in closed form.

    Each hat function is a second difference of ramps (y - c)^+, whose
    Gaussian expectation is (mean - c) Phi(z) + std phi(z) with z = (mean - c) / std.
    """
    delta = nodes[1] - nodes[0]

    def ramp(c):
        z = (mean - c) / std
        return (mean - c) * special.ndtr(z) + std * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)

    ext = np.concatenate([[nodes[0] - delta], nodes, [nodes[-1] + delta]])
    r = ramp(ext)
    mass = (r[:-2] - 2.0 * r[1:-1] + r[2:]) / delta
    mass[0] = 1.0 - (r[1] - r[2]) / delta
    mass[-1] = (r[-3] - r[-2]) / delta
    return np.clip(mass, 0.0, None)


def _quadrature_row(model: DiffusionModel, grid: Grid, x0: float, action: np.ndarray,
                    h: float, rule: str) -> tuple:
    x = np.array([[x0]])
    act = np.asarray(action, dtype=float)[None, :]
    mean = x0 + model.drift(x, act)[0, 0] * h
    std = model.sigma(x)[0, 0, 0] * math.sqrt(h)
    if rule == "exact":
        mass = _gaussian_deposit_exact(mean, std, grid.nodes[:, 0])
    else:
        xi, wq = np.polynomial.hermite_e.hermegauss(GH_ORDER)
        mass = deposit((mean + std * xi)[:, None], grid, wq / math.sqrt(2.0 * math.pi))
    return _normalize_row(mass)


def _check_quadrature(model: DiffusionModel, rule: str):
    if model.dim != 1:
        raise UnsupportedError("quadrature kernel is only available for dim = 1")
    if rule not in ("exact", "gauss_hermite"):
        raise ConfigError(f"unknown quadrature rule {rule!r}")


def _quadrature_kernel(rows, grid, n, m, h, rule, actions) -> TransitionKernel:
    deviation = max(abs(total - 1.0) for _, _, total in rows)
    meta = {"estimator": "quadrature", "rule": rule, "substeps": 1,
            "max_row_deviation": float(deviation)}
    if rule == "gauss_hermite":
        meta["order"] = GH_ORDER
    return TransitionKernel(h=float(h), matrices=_assemble([r[:2] for r in rows], n, m),
                            grid=grid, actions=actions, meta=meta)


def estimate_kernel_quadrature_1d(model: DiffusionModel, grid: Grid, actions: ActionNet,
                                  h: float, rule: str = "exact") -> TransitionKernel:
    """Deterministic kernel from one Euler step over h (an exactly Gaussian transition).

    ``rule="exact"`` integrates the deposition weights against the Gaussian
    in closed form; ``rule="gauss_hermite"`` uses a 21-node Gauss-Hermite
    rule, which under-resolves the kinks of the deposition weights when the
    grid spacing is comparable to the one-step standard deviation.
    """
    _check_quadrature(model, rule)
    nodes = grid.nodes[:, 0]
    rows = [_quadrature_row(model, grid, nodes[i], actions.actions[a], h, rule)
            for i in range(grid.size) for a in range(len(actions))]
    return _quadrature_kernel(rows, grid, grid.size, len(actions), h, rule, actions)


def estimate_policy_kernel_quadrature_1d(model: DiffusionModel, grid: Grid, feedback,
                                         h: float, rule: str = "exact") -> TransitionKernel:
    """Single-action quadrature kernel with action feedback(x_i) in row i."""
    _check_quadrature(model, rule)
    acts = np.asarray(feedback(grid.nodes), dtype=float).reshape(grid.size, -1)
    nodes = grid.nodes[:, 0]
    rows = [_quadrature_row(model, grid, nodes[i], acts[i], h, rule) for i in range(grid.size)]
    return _quadrature_kernel(rows, grid, grid.size, 1, h, rule, None)


def _run_tasks(fn, n_tasks: int, workers: int) -> list:
    if workers <= 1:
        return [fn(k) for k in range(n_tasks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_tasks)))


def row_standard_errors(kernel: TransitionKernel, a: int, i: int) -> tuple:
    """(columns, probabilities, binomial standard errors) of one MC row."""
    samples = kernel.meta.get("samples")
    if not samples:
        raise ConfigError("standard errors need a Monte Carlo kernel")
    row = kernel.matrices[a].getrow(i)
    p = row.data
    return row.indices, p, np.sqrt(p * (1.0 - p) / samples)


@dataclass
class SampledMdp:
    kernel: TransitionKernel
    stage_cost: np.ndarray
    h: float
    alpha: float
    beta: float
    grid: Optional[Grid] = None
    actions: Optional[ActionNet] = None

    @property
    def n_states(self) -> int:
        return self.kernel.n_states

    @property
    def n_actions(self) -> int:
        return self.kernel.n_actions

    @classmethod
    def from_arrays(cls, P, stage_cost, h: float, alpha: float) -> "SampledMdp":
        """Tabular MDP from P[a, i, j] and stage costs c_h[i, a] (grid-free fixtures)."""
        kernel = TransitionKernel.from_dense(P, h)
        cost = np.asarray(stage_cost, dtype=float)
        if cost.shape != (kernel.n_states, kernel.n_actions):
            raise AssemblyError(f"stage_cost shape {cost.shape} does not match kernel")
        return cls(kernel, cost, float(h), float(alpha), math.exp(-alpha * h))


def assemble_mdp(model: DiffusionModel, grid: Grid, actions: ActionNet,
                 kernel: TransitionKernel, alpha: float, h: Optional[float] = None) -> SampledMdp:
    if h is not None and abs(h - kernel.h) > 1e-12:
        raise AssemblyError(f"kernel was built for h={kernel.h}, requested {h}")
    if kernel.n_states != grid.size or kernel.n_actions != len(actions):
        raise AssemblyError("kernel shape does not match grid and action net")
    nodes = grid.nodes
    cost = np.empty((grid.size, len(actions)))
    for a, act in enumerate(actions.actions):
        cost[:, a] = model.running_cost(nodes, np.broadcast_to(act, (grid.size, len(act))))
    cost *= kernel.h
    return SampledMdp(kernel, cost, kernel.h, float(alpha), math.exp(-alpha * kernel.h), grid, actions)


def save_kernel(kernel: TransitionKernel, path) -> None:
    """Binary exchange file: magic line, JSON header line, then per action
    little-endian CSR arrays (int64 indptr, int64 columns, float64 probabilities)."""
    header = {
        "d": kernel.grid.dim if kernel.grid is not None else None,
        "h": kernel.h,
        "n_states": kernel.n_states,
        "n_actions": kernel.n_actions,
        "grid": kernel.grid.to_dict() if kernel.grid is not None else None,
        "actions": kernel.actions.to_dict() if kernel.actions is not None else None,
        "meta": kernel.meta,
        "nnz": [int(m.nnz) for m in kernel.matrices],
    }
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for m in kernel.matrices:
        m = m.sorted_indices()
        buf.write(m.indptr.astype("<i8").tobytes())
        buf.write(m.indices.astype("<i8").tobytes())
        buf.write(m.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_kernel(path) -> TransitionKernel:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ConfigError(f"{path} is not a kernel file")
        header = json.loads(fh.readline())
        n = header["n_states"]
        mats = []
        for nnz in header["nnz"]:
            indptr = np.frombuffer(fh.read(8 * (n + 1)), dtype="<i8")
            indices = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
            data = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
            mats.append(sp.csr_matrix((data, indices, indptr), shape=(n, n)))
    grid = Grid(**header["grid"]) if header["grid"] else None
    actions = ActionNet(**header["actions"]) if header["actions"] else None
    return TransitionKernel(h=header["h"], matrices=mats, grid=grid, actions=actions,
                            meta=header["meta"])
