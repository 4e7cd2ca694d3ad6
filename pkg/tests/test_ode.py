import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otformer import tensor as T
from otformer.blocks import init_stack, stack_forward
from otformer.gradcheck import check_gradients
from otformer.ode import (
    IntegrationBlowup,
    IntegratorConfig,
    Scheme,
    integrate,
    single_step_equivalence_input,
)
from otformer.tensor import Tensor

A_LIN = np.array([[-0.5, 1.3], [-1.1, -0.2]])
X0_LIN = np.array([[1.0], [0.5]])


def constant_field(C):
    return lambda X: T.broadcast_to(Tensor(C), X.shape)


def linear_field(A):
    At = Tensor(A)
    return lambda X: At @ X


def euler_power(A, x0, steps):
    # N Euler steps of a linear field, evaluated as (I + A/N)^N
    return np.linalg.matrix_power(np.eye(len(A)) + A / steps, steps) @ x0


def expm_taylor(A, terms=60):
    out = np.eye(len(A))
    term = np.eye(len(A))
    for i in range(1, terms):
        term = term @ A / i
        out = out + term
    return out


@pytest.fixture(scope="module")
def reference():
    # Euler at 1e6 steps, Richardson-extrapolated against 2e6 to cancel its O(h) error
    ref = 2 * euler_power(A_LIN, X0_LIN, 2_000_000) - euler_power(A_LIN, X0_LIN, 1_000_000)
    np.testing.assert_allclose(ref, expm_taylor(A_LIN) @ X0_LIN, atol=1e-10)
    return ref


def observed_orders(scheme, ref, grid=(4, 8, 16, 32)):
    errs = []
    for N in grid:
        traj = integrate(Tensor(X0_LIN), linear_field(A_LIN), IntegratorConfig(scheme, N, 1.0))
        errs.append(np.linalg.norm(traj.final.data - ref))
    return [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]


def test_euler_order(reference):
    orders = observed_orders(Scheme.EULER, reference)
    assert min(orders) >= 0.9, orders


def test_rk4_order(reference):
    orders = observed_orders(Scheme.RK4, reference)
    assert min(orders) >= 3.7, orders


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("N", [1, 3, 8, 20])
def test_constant_field_is_exact(scheme, N):
    rng = np.random.default_rng(N)
    X0, C = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    traj = integrate(Tensor(X0), constant_field(C), IntegratorConfig(scheme, N, 1.0))
    np.testing.assert_allclose(traj.final.data, X0 + C, atol=1e-12, rtol=0)
    assert abs(traj.transport_cost_raw.item() - np.sum(C**2)) < 1e-10


def test_zero_field_costs_nothing():
    X0 = np.random.default_rng(0).normal(size=(3, 4))
    traj = integrate(Tensor(X0), constant_field(np.zeros((3, 4))), IntegratorConfig(Scheme.RK4, 5))
    np.testing.assert_array_equal(traj.final.data, X0)
    assert traj.transport_cost_raw.item() == 0.0


def test_horizon_scales_constant_field():
    C = np.ones((2, 2))
    traj = integrate(Tensor(np.zeros((2, 2))), constant_field(C), IntegratorConfig(Scheme.EULER, 4, 2.5))
    np.testing.assert_allclose(traj.final.data, 2.5 * C, atol=1e-14)
    assert abs(traj.transport_cost_raw.item() - 2.5 * 4) < 1e-12


def test_record_states_and_sample_counts():
    f = linear_field(A_LIN)
    X0 = Tensor(X0_LIN)
    full = integrate(X0, f, IntegratorConfig(Scheme.EULER, 5), record_states=True)
    short = integrate(X0, f, IntegratorConfig(Scheme.EULER, 5))
    assert len(full.states) == 6 and len(full.velocity_sq) == 5
    assert len(short.states) == 2 and full.states[0] is X0
    np.testing.assert_array_equal(full.final.data, short.final.data)
    rk = integrate(X0, f, IntegratorConfig(Scheme.RK4, 5), record_states=True)
    assert len(rk.states) == 6 and len(rk.velocity_sq) == 20


def test_euler_cost_is_left_endpoint_sum():
    f = linear_field(A_LIN)
    cfg = IntegratorConfig(Scheme.EULER, 4)
    traj = integrate(Tensor(X0_LIN), f, cfg, record_states=True)
    manual = sum(cfg.h * np.sum((A_LIN @ s.data) ** 2) for s in traj.states[:-1])
    assert abs(traj.transport_cost_raw.item() - manual) < 1e-14


def test_single_step_config_is_residual_update():
    cfg = single_step_equivalence_input()
    assert (cfg.scheme, cfg.steps, cfg.horizon) == (Scheme.EULER, 1, 1.0)
    rng = np.random.default_rng(3)
    stack = init_stack(rng, 4, 3, 1, 2, precision="f64")
    X0 = Tensor(rng.normal(size=(2, 4, 5)))
    traj = integrate(X0, stack, cfg)
    v = stack_forward(X0, stack)
    np.testing.assert_array_equal(traj.final.data, (X0 + v).data)
    np.testing.assert_array_equal(traj.transport_cost_raw.data, np.sum(v.data**2, axis=(-2, -1)))


def test_batched_cost_is_per_sample():
    rng = np.random.default_rng(4)
    stack = init_stack(rng, 4, 3, 1, 1, precision="f64")
    X0 = rng.normal(size=(3, 4, 5))
    cfg = IntegratorConfig(Scheme.RK4, 3)
    batched = integrate(Tensor(X0), stack, cfg).transport_cost_raw.data
    assert batched.shape == (3,)
    for b in range(3):
        single = integrate(Tensor(X0[b]), stack, cfg).transport_cost_raw.item()
        assert abs(batched[b] - single) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(Scheme)), st.integers(1, 4))
def test_cost_nonnegative_and_zero_only_for_zero_field(seed, scheme, N):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2)) * rng.integers(0, 2)
    X0 = rng.normal(size=(2, 3))
    traj = integrate(Tensor(X0), linear_field(A), IntegratorConfig(scheme, N))
    cost = traj.transport_cost_raw.item()
    assert cost >= 0
    all_zero = all(v.item() == 0 for v in traj.velocity_sq)
    assert (cost == 0) == all_zero


@pytest.mark.parametrize("scheme", list(Scheme))
def test_cost_gradient_matches_finite_differences(scheme):
    rng = np.random.default_rng(5)
    stack = init_stack(rng, 3, 2, 2, 2, precision="f64")
    for p in stack.parameters():
        p.data += rng.normal(0, 0.2, p.data.shape)
    X0 = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    cfg = IntegratorConfig(scheme, 3)
    w = Tensor(rng.normal(size=(2, 3, 4)))

    def loss():
        traj = integrate(X0, stack, cfg)
        return T.tsum(traj.transport_cost_raw) + T.tsum(traj.final * w)

    res = check_gradients(loss, stack.parameters() + [X0])
    assert res.max_rel_err < 1e-4


def test_blowup_reports_step():
    calls = {"n": 0}

    def field(X):
        calls["n"] += 1
        scale = np.inf if calls["n"] == 3 else 1.0
        return T.scale(X, scale)

    with pytest.raises(IntegrationBlowup) as err:
        integrate(Tensor(np.ones((2, 2))), field, IntegratorConfig(Scheme.EULER, 5))
    assert err.value.step == 2


def test_non_finite_initial_state_rejected():
    with pytest.raises(IntegrationBlowup):
        integrate(Tensor(np.array([[np.nan]])), linear_field(np.eye(1)), IntegratorConfig())


@pytest.mark.parametrize("kwargs", [{"steps": 0}, {"steps": 2.5}, {"horizon": 0.0}, {"horizon": -1.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        IntegratorConfig(**kwargs)


def test_scheme_parses_from_string():
    assert IntegratorConfig("RK4", 4).scheme is Scheme.RK4
    assert IntegratorConfig(Scheme.EULER, 8).with_steps(2).h == 0.5
