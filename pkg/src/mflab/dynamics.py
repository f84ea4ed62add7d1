"""Time integration of the particle flows.

Four flows over the shared pairwise force field F_i = -(1/N) grad_i H:

    gradient       dx_i/dt = F_i
    conservative   dx_i/dt = J F_i              (J antisymmetric)
    mixed          dx_i/dt = (alpha I + beta J) F_i
    newton         dx_i/dt = v_i,  dv_i/dt = F_i

plus an optional named forcing field added to the velocity law (first-order
flows) or the acceleration (newton).  Integrator: classical RK4; when
adaptive, a base step is bisected recursively until no particle moves more
than collision_fraction of its current nearest-neighbor distance, erroring
out below dt_floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .kernel import KernelSpec
from .particles import (
    ParticleSystem,
    nearest_neighbor_distances,
    pairwise_force,
)

FLOW_KINDS = ("gradient", "conservative", "mixed", "newton")


class StepSizeError(RuntimeError):
    """Adaptive bisection hit dt_floor."""


def default_J(d: int) -> np.ndarray:
    """Block-diagonal rotations by pi/2 on coordinate pairs; odd last axis fixed."""
    J = np.zeros((d, d))
    for k in range(0, d - 1, 2):
        J[k, k + 1] = -1.0
        J[k + 1, k] = 1.0
    return J


def _forcing_zero(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def make_forcing(name: str, **params) -> Callable[[np.ndarray], np.ndarray]:
    """Named forcing registry: zero | drift(vector) | confine(strength)."""
    if name == "zero":
        return _forcing_zero
    if name == "drift":
        v = np.asarray(params["vector"], dtype=float)

        def drift(x: np.ndarray) -> np.ndarray:
            return np.broadcast_to(v, x.shape).copy()

        return drift
    if name == "confine":
        lam = float(params["strength"])

        def confine(x: np.ndarray) -> np.ndarray:
            return -lam * x

        return confine
    raise ValueError(f"unknown forcing {name!r}")


@dataclass(frozen=True)
class FlowSpec:
    """Which flow to integrate, with its structure matrix and forcing."""

    kind: str
    J: np.ndarray | None = None
    mix_alpha: float = 1.0
    mix_beta: float = 0.0
    forcing: str | None = None
    forcing_params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise ValueError(f"flow kind must be one of {FLOW_KINDS}, got {self.kind!r}")
        if self.J is not None:
            J = np.asarray(self.J, dtype=float)
            if J.ndim != 2 or J.shape[0] != J.shape[1]:
                raise ValueError("J must be a square matrix")
            if np.max(np.abs(J + J.T)) > 1e-12:
                raise ValueError("J must be antisymmetric")
            object.__setattr__(self, "J", J)
        if self.kind == "mixed" and not self.mix_alpha > 0:
            raise ValueError("mixed flow requires mix_alpha > 0")
        if self.forcing is not None:
            make_forcing(self.forcing, **self.forcing_params)  # validate eagerly

    def structure_matrix(self, d: int) -> np.ndarray | None:
        """Left-multiplier applied to the force: None means identity."""
        if self.kind == "gradient":
            return None
        J = self.J if self.J is not None else default_J(d)
        if J.shape[0] != d:
            raise ValueError(f"J is {J.shape[0]}x{J.shape[0]}, flow dimension is {d}")
        if self.kind == "conservative":
            return J
        if self.kind == "mixed":
            return self.mix_alpha * np.eye(d) + self.mix_beta * J
        return None  # newton: force enters the acceleration untouched

    def forcing_field(self) -> Callable[[np.ndarray], np.ndarray]:
        if self.forcing is None:
            return _forcing_zero
        return make_forcing(self.forcing, **self.forcing_params)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    adaptive: bool = True
    dt_floor: float = 1e-9
    collision_fraction: float = 0.25

    def __post_init__(self):
        if not (self.dt > self.dt_floor > 0):
            raise ValueError("need dt > dt_floor > 0")
        if not (0 < self.collision_fraction < 1):
            raise ValueError("need 0 < collision_fraction < 1")


def _check_velocity_presence(sys: ParticleSystem, flow: FlowSpec) -> None:
    if (flow.kind == "newton") != sys.second_order:
        raise ValueError(
            "velocities must be present exactly for the newton flow "
            f"(kind={flow.kind!r}, second_order={sys.second_order})"
        )


def _rhs_first_order(X: np.ndarray, flow: FlowSpec, spec: KernelSpec,
                     forcing: Callable) -> np.ndarray:
    F = pairwise_force(ParticleSystem(X), spec)
    M = flow.structure_matrix(X.shape[1])
    if M is not None:
        F = F @ M.T
    return F + forcing(X)


def _rk4_first_order(X: np.ndarray, flow: FlowSpec, spec: KernelSpec, dt: float,
                     forcing: Callable) -> np.ndarray:
    k1 = _rhs_first_order(X, flow, spec, forcing)
    k2 = _rhs_first_order(X + 0.5 * dt * k1, flow, spec, forcing)
    k3 = _rhs_first_order(X + 0.5 * dt * k2, flow, spec, forcing)
    k4 = _rhs_first_order(X + dt * k3, flow, spec, forcing)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_newton(X: np.ndarray, V: np.ndarray, spec: KernelSpec, dt: float,
                forcing: Callable):
    def acc(Xc):
        return pairwise_force(ParticleSystem(Xc), spec) + forcing(Xc)

    a1 = acc(X)
    X2, V2 = X + 0.5 * dt * V, V + 0.5 * dt * a1
    a2 = acc(X2)
    X3, V3 = X + 0.5 * dt * V2, V + 0.5 * dt * a2
    a3 = acc(X3)
    X4, V4 = X + dt * V3, V + dt * a3
    a4 = acc(X4)
    Xn = X + (dt / 6.0) * (V + 2.0 * V2 + 2.0 * V3 + V4)
    Vn = V + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    return Xn, Vn


def _advance(sys: ParticleSystem, flow: FlowSpec, spec: KernelSpec, dt: float,
             cfg: IntegratorConfig, forcing: Callable, depth: int = 0) -> ParticleSystem:
    """One RK4 trial over dt, bisected while the movement constraint fails."""
    if sys.second_order:
        Xn, Vn = _rk4_newton(sys.positions, sys.velocities, spec, dt, forcing)
        out = ParticleSystem(Xn, Vn)
    else:
        out = ParticleSystem(_rk4_first_order(sys.positions, flow, spec, dt, forcing))
    if cfg.adaptive and sys.N > 1:
        moved = np.linalg.norm(out.positions - sys.positions, axis=1)
        limit = cfg.collision_fraction * nearest_neighbor_distances(sys)
        if np.any(moved > limit):
            if dt * 0.5 < cfg.dt_floor:
                raise StepSizeError(
                    f"movement constraint forces dt below dt_floor={cfg.dt_floor:g}"
                )
            half = _advance(sys, flow, spec, 0.5 * dt, cfg, forcing, depth + 1)
            return _advance(half, flow, spec, 0.5 * dt, cfg, forcing, depth + 1)
    return out


def step(sys: ParticleSystem, flow: FlowSpec, spec: KernelSpec,
         cfg: IntegratorConfig) -> ParticleSystem:
    """Advance exactly cfg.dt (internally bisected when adaptive)."""
    _check_velocity_presence(sys, flow)
    return _advance(sys, flow, spec, cfg.dt, cfg, flow.forcing_field())


def run(sys: ParticleSystem, flow: FlowSpec, spec: KernelSpec, cfg: IntegratorConfig,
        T: float, observers: Sequence[Callable[[float, ParticleSystem], None]] = (),
        record_every: int = 1) -> list[tuple[float, ParticleSystem]]:
    """Integrate to time T; snapshots at t=0, every record_every-th step, and T.

    Fixed base grid t_k = k dt with a shortened final step landing on T;
    observers are invoked at every recorded (t, state).  Errors during a step
    propagate with the failure time attached.
    """
    _check_velocity_presence(sys, flow)
    if T < 0:
        raise ValueError("T must be >= 0")
    forcing = flow.forcing_field()
    snaps: list[tuple[float, ParticleSystem]] = [(0.0, sys)]
    for fn in observers:
        fn(0.0, sys)
    if T == 0:
        return snaps
    n_steps = max(1, math.ceil(T / cfg.dt - 1e-12))
    state = sys
    for k in range(n_steps):
        t0, t1 = k * cfg.dt, min((k + 1) * cfg.dt, T)
        try:
            state = _advance(state, flow, spec, t1 - t0, cfg, forcing)
        except Exception as exc:
            exc.args = (f"t={t0:.6g}: {exc}",) + exc.args[1:]
            raise
        if (k + 1) % record_every == 0 or k == n_steps - 1:
            snaps.append((t1, state))
            for fn in observers:
                fn(t1, state)
    return snaps
