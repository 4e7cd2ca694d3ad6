"""Fixed-step integration of ``dX/dt = f(X)`` with the transport cost alongside.

Gradients flow through every step (discretize-then-optimize). The transport
cost ``int_0^T ||f(X(t))||_F^2 dt`` is accumulated from the velocities the
scheme already evaluates, so it costs no extra field evaluations.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import tensor as T
from .blocks import BlockStack, stack_forward
from .tensor import Tensor


class Scheme(enum.Enum):
    EULER = "euler"
    RK4 = "rk4"


class IntegrationBlowup(FloatingPointError):
    """A non-finite value appeared during integration."""

    def __init__(self, step: int, where: str = "state", variant: str | None = None):
        self.step = step
        self.where = where
        self.variant = variant
        prefix = f"[{variant}] " if variant else ""
        super().__init__(f"{prefix}non-finite {where} at integration step {step}")


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: Scheme = Scheme.EULER
    steps: int = 20
    horizon: float = 1.0

    def __post_init__(self):
        if isinstance(self.scheme, str):
            object.__setattr__(self, "scheme", Scheme(self.scheme.lower()))
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    def with_steps(self, steps: int) -> "IntegratorConfig":
        return IntegratorConfig(self.scheme, steps, self.horizon)


def single_step_equivalence_input() -> IntegratorConfig:
    """One forward-Euler step over ``[0, 1]``: ``X(1) = X0 + f(X0)``."""
    return IntegratorConfig(Scheme.EULER, 1, 1.0)


@dataclass
class Trajectory:
    states: list[Tensor]
    velocity_sq: list[Tensor]
    transport_cost_raw: Tensor
    config: IntegratorConfig
    velocities: list[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.states[-1]

    def speeds(self) -> np.ndarray:
        """``||f||_F`` per velocity sample, shape ``(samples, *batch)``."""
        return np.sqrt(np.stack([v.data for v in self.velocity_sq]))


VelocityField = Union[BlockStack, Callable[[Tensor], Tensor]]


def _as_callable(f: VelocityField) -> Callable[[Tensor], Tensor]:
    if isinstance(f, BlockStack):
        return lambda X: stack_forward(X, f)
    return f


def _norm_sq(v: Tensor) -> Tensor:
    # per-sample ||.||_F^2 over the trailing (d, n) axes
    return T.frobenius_sq(v, axis=(-2, -1))


def _finite_or_raise(x: Tensor, step: int, where: str) -> None:
    if not np.isfinite(x.data).all():
        raise IntegrationBlowup(step, where)


def integrate(X0: Tensor, f: VelocityField, cfg: IntegratorConfig,
              record_states: bool = False, keep_velocities: bool = False) -> Trajectory:
    """Integrate from ``X0`` over ``[0, cfg.horizon]`` in ``cfg.steps`` uniform steps.

    Euler uses the left-endpoint rule for the cost; RK4 weights its four
    stage velocities ``(1, 2, 2, 1) / 6``. With ``record_states=False`` only
    ``X0`` and ``X(T)`` are kept in ``states``.
    """
    _finite_or_raise(X0, 0, "initial state")
    field_fn = _as_callable(f)
    h = cfg.h
    X = X0
    states = [X0]
    vsq: list[Tensor] = []
    vels: list[Tensor] = []
    cost = None

    for step in range(cfg.steps):
        if cfg.scheme is Scheme.EULER:
            v = field_fn(X)
            _finite_or_raise(v, step, "velocity")
            n2 = _norm_sq(v)
            vsq.append(n2)
            if keep_velocities:
                vels.append(v)
            inc = T.scale(n2, h)
            X = X + T.scale(v, h)
        else:
            k1 = field_fn(X)
            _finite_or_raise(k1, step, "velocity")
            k2 = field_fn(X + T.scale(k1, h / 2))
            _finite_or_raise(k2, step, "velocity")
            k3 = field_fn(X + T.scale(k2, h / 2))
            _finite_or_raise(k3, step, "velocity")
            k4 = field_fn(X + T.scale(k3, h))
            _finite_or_raise(k4, step, "velocity")
            ns = [_norm_sq(k) for k in (k1, k2, k3, k4)]
            vsq.extend(ns)
            if keep_velocities:
                vels.extend((k1, k2, k3, k4))
            inc = T.scale(ns[0] + T.scale(ns[1], 2.0) + T.scale(ns[2], 2.0) + ns[3], h / 6)
            X = X + T.scale(k1 + T.scale(k2, 2.0) + T.scale(k3, 2.0) + k4, h / 6)
        _finite_or_raise(inc, step, "transport cost")
        _finite_or_raise(X, step + 1, "state")
        cost = inc if cost is None else cost + inc
        if record_states:
            states.append(X)

    if not record_states:
        states.append(X)
    return Trajectory(states=states, velocity_sq=vsq, transport_cost_raw=cost, config=cfg,
                      velocities=vels)
