import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffmdp import benchmarks as B
from diffmdp.errors import ConfigError, InvalidDistributionError, OutOfRangeError, SimulationDiverged
from diffmdp.sde import (RandomSource, SmoothFunction, apply_generator, check_model, eval_relaxed_drift,
                         interpolate_chain, simulate_path)

from conftest import make_model


def identity_drift(x, a):
    return np.asarray(a, dtype=float) + 0.0 * np.asarray(x)


def poly(c2, c1, c0):
    return SmoothFunction(
        value=lambda x: c2 * x[..., 0] ** 2 + c1 * x[..., 0] + c0,
        grad=lambda x: (2 * c2 * x[..., :1] + c1),
        hess=lambda x: np.full(x.shape[:-1] + (1, 1), 2.0 * c2),
    )


# --- relaxed drift ---------------------------------------------------------

def test_relaxed_drift_single_atom():
    m = B.bounded_ou()
    x = np.array([0.7])
    got = eval_relaxed_drift(m, x, [[0.3]], [1.0])
    assert got == pytest.approx(m.drift(x, np.array([0.3])))


def test_relaxed_drift_symmetric_mixture():
    m = make_model(drift=identity_drift)
    assert eval_relaxed_drift(m, [0.4], [[-1.0], [1.0]], [0.5, 0.5]) == pytest.approx([0.0])


def test_relaxed_drift_hand_value():
    # -tanh(0) + 0.25 * (-0.5) + 0.75 * 0.5 = 0.25
    m = B.bounded_ou()
    assert eval_relaxed_drift(m, [0.0], [[-0.5], [0.5]], [0.25, 0.75]) == pytest.approx([0.25], abs=1e-15)


def test_relaxed_drift_rejects_unnormalized():
    m = B.bounded_ou()
    with pytest.raises(InvalidDistributionError):
        eval_relaxed_drift(m, [0.0], [[-0.5], [0.5]], [0.5, 0.5 + 1e-9])
    with pytest.raises(InvalidDistributionError):
        eval_relaxed_drift(m, [0.0], [[-0.5], [0.9]], [0.5, 0.5])


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5), st.floats(-4, 4))
def test_relaxed_drift_in_convex_hull(raw, x):
    m = B.bounded_ou()
    w = np.asarray(raw) / np.sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0:
        return
    acts = np.linspace(-0.5, 0.5, len(w))[:, None]
    vals = m.drift(np.full((len(w), 1), x), acts)
    got = eval_relaxed_drift(m, [x], acts, w)
    assert vals.min() - 1e-12 <= got[0] <= vals.max() + 1e-12


# --- generator -------------------------------------------------------------

def test_generator_diffusion_only():
    m = make_model(sigma=1.0)
    x = np.linspace(-3, 3, 7)[:, None]
    assert np.allclose(apply_generator(m, poly(1, 0, 0), x, np.zeros((7, 1))), 1.0)


def test_generator_drift_only():
    m = make_model(drift=identity_drift)
    assert apply_generator(m, poly(0, 1, 0), np.array([1.3]), np.array([0.3])) == pytest.approx(0.3)


def test_generator_matches_finite_differences():
    m = B.bounded_ou()
    V = B.cosh_function(0.5)
    x, a, eps = 2.0, 0.0, 1e-5
    f = lambda t: V.value(np.array([t]))
    fd1 = (f(x + eps) - f(x - eps)) / (2 * eps)
    fd2 = (f(x + eps) - 2 * f(x) + f(x - eps)) / eps ** 2
    fd = 0.5 * B.SIGMA ** 2 * fd2 + (-math.tanh(2 * x) + a) * fd1
    got = apply_generator(m, V, np.array([x]), np.array([a]))
    assert got == pytest.approx(fd, rel=1e-6)


@settings(max_examples=50)
@given(st.floats(-4, 4), st.floats(-0.5, 0.5), st.floats(-2, 2), st.floats(-2, 2))
def test_generator_is_linear(x, a, p, q):
    m = B.bounded_ou()
    f, g = poly(p, q, 1.0), B.cosh_function(0.5)
    fg = SmoothFunction(lambda y: f.value(y) + g.value(y), lambda y: f.grad(y) + g.grad(y),
                        lambda y: f.hess(y) + g.hess(y))
    X, A = np.array([x]), np.array([a])
    lhs = apply_generator(m, fg, X, A)
    rhs = apply_generator(m, f, X, A) + apply_generator(m, g, X, A)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


# --- simulation ------------------------------------------------------------

def test_degenerate_path_is_constant():
    m = make_model(sigma=0.0, floor=1e-12)
    p = simulate_path(m, lambda x: np.zeros(1), [1.5], 1.0, 0.1, RandomSource(0))
    assert np.all(p.states == 1.5)


def test_unit_drift_reaches_one():
    m = make_model(drift=lambda x, a: np.ones(np.asarray(x).shape), sigma=0.0, floor=1e-12)
    p = simulate_path(m, lambda x: np.zeros(1), [0.0], 1.0, 0.1, RandomSource(0))
    assert p.states[-1, 0] == pytest.approx(1.0, abs=1e-12)
    assert len(p.times) == 11 and len(p.actions) == 10


def test_brownian_terminal_variance():
    # Many paths at once through the batched EM kernel used by rollouts.
    from diffmdp.sde import batch_normals, em_step
    m = make_model(sigma=1.0)
    gens = [RandomSource(3, r).generator() for r in range(100)]
    x = np.zeros((100, 1))
    finals = []
    for _ in range(1000):
        z = batch_normals(gens, 10, 1)
        y = x.copy()
        for k in range(10):
            y = em_step(m, y, np.zeros((100, 1)), 0.1, z[k])
        finals.append(y[:, 0])
    finals = np.concatenate(finals)
    assert finals.size == 100_000
    assert np.var(finals) == pytest.approx(1.0, abs=0.02)
    assert abs(finals.mean()) < 3 * math.sqrt(1.0 / finals.size)


def test_piecewise_constant_actions_are_held():
    m = make_model(drift=identity_drift, sigma=0.0, floor=1e-12)
    p = simulate_path(m, [[1.0], [-1.0]], [0.0], 0.5, 0.125, RandomSource(0), h=0.25)
    assert p.actions[:, 0].tolist() == [1.0, 1.0, -1.0, -1.0]
    assert p.states[-1, 0] == pytest.approx(0.0, abs=1e-15)


def test_action_sequence_must_match_dt():
    m = make_model()
    with pytest.raises(ConfigError):
        simulate_path(m, [[0.0]], [0.0], 0.3, 0.07, RandomSource(0), h=0.3)


def test_final_partial_step():
    m = make_model(sigma=0.0, floor=1e-12)
    p = simulate_path(m, lambda x: np.zeros(1), [0.0], 0.25, 0.1, RandomSource(0))
    steps = np.diff(p.times)
    assert steps[:-1] == pytest.approx([0.1, 0.1]) and steps[-1] == pytest.approx(0.05)


def test_same_stream_same_path_bitwise():
    m = B.bounded_ou()
    a = simulate_path(m, B.lipschitz_policy, [0.5], 2.0, 0.01, RandomSource(9, 4))
    b = simulate_path(m, B.lipschitz_policy, [0.5], 2.0, 0.01, RandomSource(9, 4))
    c = simulate_path(m, B.lipschitz_policy, [0.5], 2.0, 0.01, RandomSource(9, 5))
    assert a.states.tobytes() == b.states.tobytes()
    assert not np.array_equal(a.states, c.states)


def test_streams_look_independent():
    z1 = RandomSource(1, 0).generator().standard_normal(20000)
    z2 = RandomSource(1, 1).generator().standard_normal(20000)
    assert abs(np.corrcoef(z1, z2)[0, 1]) < 4 / math.sqrt(20000)


def test_derive_namespaces_differ():
    r = RandomSource(5)
    assert r.derive("kernel", 0.1) == r.derive("kernel", 0.1)
    assert r.derive("kernel", 0.1) != r.derive("kernel", 0.05)


def test_divergence_reports_step():
    m = make_model(drift=lambda x, a: np.asarray(x) ** 3 * 1e3, sigma=0.0, floor=1e-12)
    with pytest.raises(SimulationDiverged) as info, np.errstate(over="ignore", invalid="ignore"):
        simulate_path(m, lambda x: np.zeros(1), [10.0], 1.0, 0.1, RandomSource(0))
    assert info.value.step >= 0


def test_zero_drift_mean_unbiased():
    m = make_model(sigma=0.7)
    finals = [simulate_path(m, lambda x: np.zeros(1), [0.2], 1.0, 0.1, RandomSource(2, r)).states[-1, 0]
              for r in range(2000)]
    se = np.std(finals) / math.sqrt(len(finals))
    assert abs(np.mean(finals) - 0.2) < 3 * se


# --- interpolation ---------------------------------------------------------

def test_interpolation_examples():
    assert interpolate_chain(["s0"], 0.5)(0.3) == "s0"
    f = interpolate_chain([0.0, 1.0], 0.5)
    assert f(0.5) == 1.0 and f(0.4999) == 0.0
    assert interpolate_chain([0, 1, 2], 0.5)(0.749) == 1


def test_interpolation_out_of_range():
    f = interpolate_chain([0, 1, 2], 0.5)
    with pytest.raises(OutOfRangeError):
        f(1.5)
    with pytest.raises(OutOfRangeError):
        f(-0.1)


# --- model checks ----------------------------------------------------------

@pytest.mark.parametrize("factory", [B.bounded_ou, B.const_cost, B.uncontrolled_1d])
def test_benchmarks_satisfy_declared_bounds(factory):
    assert check_model(factory(), n_samples=5000, seed=1) == []


def test_check_model_catches_understated_bound():
    import dataclasses
    m = dataclasses.replace(B.bounded_ou(), bound_b=0.5, lipschitz_c=0.1)
    problems = check_model(m, n_samples=2000)
    assert "drift exceeds bound_b" in problems
    assert "running cost violates lipschitz_c" in problems
