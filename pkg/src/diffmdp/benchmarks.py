"""Registered benchmark models and their Lyapunov certificates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .lyapunov import LyapunovCertificate
from .sde import DiffusionModel, SmoothFunction

SIGMA = 0.5
BOX = [[-4.0, 4.0]]


def _tanh_drift(x, a):
    return -np.tanh(2.0 * x) + a


def _const_sigma(x):
    x = np.asarray(x)
    return np.full(x.shape[:-1] + (1, 1), SIGMA)


def _ou_cost(x, a):
    return (x[..., 0] ** 2 / (1.0 + x[..., 0] ** 2)) + 0.1 * a[..., 0] ** 2


def _unit_cost(x, a):
    return np.ones(np.asarray(x).shape[:-1])


# |2 dx + da|^2 <= 5 (dx^2 + da^2); sup of |d/dx x^2/(1+x^2)| is 3*sqrt(3)/8.
_COMMON = dict(
    dim=1, drift=_tanh_drift, sigma=_const_sigma, bound_sigma=SIGMA,
    lipschitz_b=math.sqrt(5.0), lipschitz_sigma=0.0, nondegeneracy_floor=0.5 * SIGMA ** 2,
    state_box=BOX,
)


def bounded_ou() -> DiffusionModel:
    return DiffusionModel(running_cost=_ou_cost, control_box=[[-0.5, 0.5]], bound_b=1.5,
                          bound_c=1.025, lipschitz_c=3.0 * math.sqrt(3.0) / 8.0,
                          name="bounded_ou", **_COMMON)


def const_cost() -> DiffusionModel:
    return DiffusionModel(running_cost=_unit_cost, control_box=[[-0.5, 0.5]], bound_b=1.5,
                          bound_c=1.0, lipschitz_c=0.0, name="const_cost", **_COMMON)


def uncontrolled_1d() -> DiffusionModel:
    return DiffusionModel(running_cost=_ou_cost, control_box=[[0.0, 0.0]], bound_b=1.0,
                          bound_c=1.0, lipschitz_c=3.0 * math.sqrt(3.0) / 8.0,
                          name="uncontrolled_1d", **_COMMON)


def cosh_function(scale: float = 0.5) -> SmoothFunction:
    return SmoothFunction(
        value=lambda x: np.cosh(scale * np.asarray(x)[..., 0]),
        grad=lambda x: scale * np.sinh(scale * np.asarray(x)[..., :1]),
        hess=lambda x: scale ** 2 * np.cosh(scale * np.asarray(x)[..., :1])[..., None],
    )


# Constants validated on the [-4, 4] grid x action net at registration time
# (see tests/test_benchmarks.py): worst-case ratio -LV/V outside K is ~0.159.
COSH_C0 = 0.25
COSH_C1 = 0.15


def cosh_certificate() -> LyapunovCertificate:
    return LyapunovCertificate(cosh_function(0.5), COSH_C0, COSH_C1, [[-2.0, 2.0]])


def lipschitz_policy(x) -> np.ndarray:
    """Fixed Lipschitz feedback used by the coupling and invariant-measure experiments."""
    x = np.asarray(x, dtype=float)
    return -0.5 * np.tanh(x[..., :1])


@dataclass(frozen=True)
class Benchmark:
    factory: Callable[[], DiffusionModel]
    action_counts: tuple
    certificate: Callable[[], LyapunovCertificate] = cosh_certificate


REGISTRY = {
    "bounded_ou": Benchmark(bounded_ou, (5,)),
    "const_cost": Benchmark(const_cost, (5,)),
    "uncontrolled_1d": Benchmark(uncontrolled_1d, (1,)),
}


def get_benchmark(name: str) -> Benchmark:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown benchmark model {name!r}; known: {sorted(REGISTRY)}") from None
