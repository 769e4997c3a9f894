"""Controlled diffusion model, seeded noise streams and Euler-Maruyama paths.

All model callables are vectorized over leading axes:

    drift(x, a)        x: (..., d), a: (..., N)  ->  (..., d)
    sigma(x)           x: (..., d)               ->  (..., d, d)
    running_cost(x, a)                           ->  (...)
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, InvalidDistributionError, OutOfRangeError, SimulationDiverged

_MASK64 = (1 << 64) - 1


def _as_box(box, name: str) -> np.ndarray:
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1 and arr.shape == (2,):
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} has non-finite bounds")
    if np.any(arr[:, 1] < arr[:, 0]):
        raise ConfigError(f"{name} has upper < lower bound")
    return arr


@dataclass(frozen=True)
class SmoothFunction:
    """Scalar C^2 function with analytic gradient and Hessian (all vectorized)."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiffusionModel:
    dim: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    running_cost: Callable[[np.ndarray, np.ndarray], np.ndarray]
    control_box: np.ndarray
    bound_b: float
    bound_sigma: float
    bound_c: float
    lipschitz_b: float
    lipschitz_sigma: float
    lipschitz_c: float
    nondegeneracy_floor: float
    state_box: Optional[np.ndarray] = None
    name: str = "custom"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("dim must be a positive integer")
        object.__setattr__(self, "control_box", _as_box(self.control_box, "control_box"))
        if self.state_box is not None:
            sb = _as_box(self.state_box, "state_box")
            if sb.shape[0] != self.dim:
                raise ConfigError("state_box must have one row per state dimension")
            object.__setattr__(self, "state_box", sb)
        if self.nondegeneracy_floor <= 0:
            raise ConfigError("nondegeneracy_floor must be positive")

    @property
    def action_dim(self) -> int:
        return self.control_box.shape[0]

    def diffusion_matrix(self, x: np.ndarray) -> np.ndarray:
        """a(x) = sigma sigma^T / 2."""
        s = self.sigma(x)
        return 0.5 * s @ np.swapaxes(s, -1, -2)


def check_model(model: DiffusionModel, n_samples: int = 2000, seed: int = 0,
                box: Optional[np.ndarray] = None) -> list[str]:
    """Sampled checks of the declared bounds, Lipschitz constants and ellipticity.

    Returns a list of human-readable problems (empty when every check passes).
    Samples are drawn uniformly from ``box`` (default: the model's state box).
    """
    box = model.state_box if box is None else _as_box(box, "box")
    if box is None:
        raise ConfigError("check_model needs a state box")
    gen = np.random.default_rng(seed)
    lo, hi = box[:, 0], box[:, 1]
    clo, chi = model.control_box[:, 0], model.control_box[:, 1]
    x = lo + (hi - lo) * gen.random((n_samples, model.dim))
    y = lo + (hi - lo) * gen.random((n_samples, model.dim))
    a = clo + (chi - clo) * gen.random((n_samples, model.action_dim))
    u = clo + (chi - clo) * gen.random((n_samples, model.action_dim))

    problems = []
    tol = 1e-12
    bx = model.drift(x, a)
    sx = model.sigma(x)
    cx = model.running_cost(x, a)
    if np.max(np.linalg.norm(bx, axis=-1)) > model.bound_b + tol:
        problems.append("drift exceeds bound_b")
    if np.max(np.linalg.norm(sx, axis=(-2, -1))) > model.bound_sigma + tol:
        problems.append("sigma exceeds bound_sigma")
    if np.min(cx) < -tol or np.max(cx) > model.bound_c + tol:
        problems.append("running cost outside [0, bound_c]")
    eig = np.linalg.eigvalsh(model.diffusion_matrix(x))
    if np.min(eig) < model.nondegeneracy_floor - tol:
        problems.append("diffusion matrix below nondegeneracy_floor")

    dist2 = np.sum((x - y) ** 2, axis=-1) + np.sum((a - u) ** 2, axis=-1)
    lhs = np.sum((bx - model.drift(y, u)) ** 2, axis=-1)
    if np.any(lhs > model.lipschitz_b ** 2 * dist2 + tol):
        problems.append("drift violates lipschitz_b")
    dx2 = np.sum((x - y) ** 2, axis=-1)
    ls = np.sum((sx - model.sigma(y)) ** 2, axis=(-2, -1))
    if np.any(ls > model.lipschitz_sigma ** 2 * dx2 + tol):
        problems.append("sigma violates lipschitz_sigma")
    lc = np.abs(cx - model.running_cost(y, a))
    if np.any(lc > model.lipschitz_c * np.sqrt(dx2) + tol):
        problems.append("running cost violates lipschitz_c")
    return problems


@dataclass(frozen=True)
class RandomSource:
    """Counter-based Gaussian stream keyed by (master_seed, stream_id).

    Backed by Philox: the key fixes the whole sequence, so streams are
    reproducible and mutually independent without any shared state.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.master_seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, stream_id: int) -> "RandomSource":
        return RandomSource(self.master_seed, stream_id)

    def derive(self, *labels) -> "RandomSource":
        """Independent namespace for a sub-experiment, e.g. ``rng.derive("kernel", 0.05)``."""
        digest = hashlib.blake2b(
            repr((self.master_seed, self.stream_id) + tuple(labels)).encode(), digest_size=8
        ).digest()
        return RandomSource(int.from_bytes(digest, "little"), 0)


@dataclass
class Path:
    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.times) or len(self.actions) != len(self.times) - 1:
            raise ValueError("inconsistent path lengths")


def eval_relaxed_drift(model: DiffusionModel, x, actions, weights) -> np.ndarray:
    """Drift under a finitely supported relaxed control: sum_i w_i b(x, a_i)."""
    w = np.asarray(weights, dtype=float)
    acts = np.asarray(actions, dtype=float).reshape(len(w), -1)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise InvalidDistributionError(f"weights must be a probability vector (sum={w.sum()!r})")
    lo, hi = model.control_box[:, 0], model.control_box[:, 1]
    if np.any(acts < lo - 1e-12) or np.any(acts > hi + 1e-12):
        raise InvalidDistributionError("actions must lie in the control box")
    x = np.asarray(x, dtype=float)
    xs = np.broadcast_to(x, (len(w),) + x.shape)
    return np.tensordot(w, model.drift(xs, acts), axes=1)


def apply_generator(model: DiffusionModel, f: SmoothFunction, x, a) -> np.ndarray:
    """trace(a(x) Hess f(x)) + b(x, a) . grad f(x)."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    diff = model.diffusion_matrix(x)
    second = np.einsum("...ij,...ji->...", diff, f.hess(x))
    first = np.einsum("...i,...i->...", model.drift(x, a), f.grad(x))
    return second + first


def em_step(model: DiffusionModel, x: np.ndarray, a: np.ndarray, dt: float, z: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step for a batch of states."""
    noise = np.einsum("...ij,...j->...i", model.sigma(x), z)
    return x + model.drift(x, a) * dt + noise * math.sqrt(dt)


def steps_per_period(h: float, dt: float) -> int:
    k = round(h / dt)
    if k < 1 or abs(k * dt - h) > 1e-9 * max(h, 1.0):
        raise ConfigError(f"dt={dt} must divide h={h}")
    return k


Control = Union[np.ndarray, Sequence, Callable[[np.ndarray], np.ndarray]]


def simulate_path(model: DiffusionModel, control: Control, x0, horizon: float, dt: float,
                  rng: RandomSource, h: Optional[float] = None) -> Path:
    """Euler-Maruyama path on [0, horizon].

    ``control`` is either an action sequence held constant on consecutive
    periods of length ``h``, or a feedback map ``x -> a``.  A feedback map is
    re-evaluated every ``dt`` unless ``h`` is given, in which case it is
    sampled at multiples of ``h`` and held in between.
    """
    if dt <= 0 or horizon < 0:
        raise ConfigError("dt must be positive and horizon nonnegative")
    n_full = int(math.floor(horizon / dt + 1e-9))
    steps = [dt] * n_full
    rem = horizon - n_full * dt
    if rem > 1e-12 * max(horizon, 1.0):
        steps.append(rem)

    feedback = callable(control)
    hold = None
    if h is not None:
        hold = steps_per_period(h, dt)
    elif not feedback:
        raise ConfigError("an action sequence needs its period h")
    if not feedback:
        seq = np.asarray(control, dtype=float).reshape(len(control), -1)

    z = rng.generator().standard_normal((len(steps), model.dim))
    x = np.asarray(x0, dtype=float).reshape(model.dim).copy()
    states = [x.copy()]
    actions = []
    times = [0.0]
    a = None
    for j, step in enumerate(steps):
        if hold is None:
            a = np.asarray(control(x), dtype=float).reshape(model.action_dim)
        elif j % hold == 0:
            k = j // hold
            if feedback:
                a = np.asarray(control(x), dtype=float).reshape(model.action_dim)
            else:
                if k >= len(seq):
                    raise OutOfRangeError(f"action sequence too short for step {j}")
                a = seq[k]
        x = em_step(model, x, a, step, z[j])
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged(j)
        states.append(x.copy())
        actions.append(a.copy())
        times.append(times[-1] + step)
    return Path(
        times=np.asarray(times),
        states=np.asarray(states),
        actions=np.asarray(actions).reshape(len(actions), model.action_dim),
    )


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant interpolation t -> values[floor(t / h)] (cadlag)."""

    values: np.ndarray
    h: float

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        idx = np.floor(t_arr / self.h + 1e-12).astype(int)
        if np.any(t_arr < 0) or np.any(idx >= len(self.values)):
            raise OutOfRangeError(f"t={t!r} outside [0, {len(self.values) * self.h})")
        return self.values[idx]


def interpolate_chain(states, h: float) -> StepFunction:
    if h <= 0:
        raise ConfigError("h must be positive")
    return StepFunction(np.asarray(states), float(h))


def batch_normals(gens: Sequence[np.random.Generator], n_steps: int, dim: int) -> np.ndarray:
    """Draw (n_steps, len(gens), dim) normals, one independent stream per column.

    Each generator is advanced sequentially, so drawing a long horizon in
    chunks yields the same numbers as a single draw.
    """
    out = np.empty((n_steps, len(gens), dim))
    for r, g in enumerate(gens):
        out[:, r, :] = g.standard_normal((n_steps, dim))
    return out
