import math
from pathlib import Path

import numpy as np
import pytest

from diffmdp.sde import DiffusionModel

FIXTURES = Path(__file__).parent / "fixtures"


def make_model(drift=None, sigma=1.0, cost=None, control_box=((-1.0, 1.0),), dim=1,
               bound_b=10.0, floor=None, state_box=None):
    """Small constant-sigma models for oracle tests."""
    drift = drift or (lambda x, a: np.zeros(np.asarray(x).shape))
    cost = cost or (lambda x, a: np.zeros(np.asarray(x).shape[:-1]))
    s = float(sigma)

    def sig(x):
        x = np.asarray(x)
        return np.broadcast_to(s * np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    return DiffusionModel(
        dim=dim, drift=drift, sigma=sig, running_cost=cost, control_box=list(control_box),
        bound_b=bound_b, bound_sigma=s * math.sqrt(dim), bound_c=1.0, lipschitz_b=1.0,
        lipschitz_sigma=0.0, lipschitz_c=1.0,
        nondegeneracy_floor=floor if floor is not None else max(0.5 * s * s, 1e-12),
        state_box=state_box,
    )


@pytest.fixture
def fixtures_dir():
    return FIXTURES


# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = (passed, line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k][1])
