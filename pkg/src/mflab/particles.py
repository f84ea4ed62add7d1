"""N-particle state, exact O(N^2) pairwise forces/energies, minimal distances.

All pair sums use the ordered-pair convention: sum over i != j counts every
unordered pair twice.  Interaction energy is

    H(X) = sum_{i != j} g(x_i - x_j)

and the per-particle force field driving every first-order flow is

    F_i = -(1/N) grad_{x_i} H = -(2/N) sum_{j != i} grad g(x_i - x_j).

Everything here is pure and deterministic: plain numpy reductions in fixed
order, no approximation, no tree codes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelSpec


class CollisionError(RuntimeError):
    """Two particles closer than the collision guard allows."""

    def __init__(self, i: int, j: int, dist: float):
        self.pair = (i, j)
        self.dist = dist
        super().__init__(f"particles {i} and {j} at distance {dist:.3e} (collision guard)")


COLLISION_GUARD = 1e-12  # fraction of the configuration scale


@dataclass(frozen=True)
class ParticleSystem:
    """Immutable particle state.

    positions: (N, d) array. velocities: (N, d) array, present exactly for
    second-order (newton) flows, else None.
    """

    positions: np.ndarray
    velocities: np.ndarray | None = None

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2:
            raise ValueError(f"positions must be (N, d), got shape {pos.shape}")
        if not np.isfinite(pos).all():
            raise ValueError("non-finite coordinate in positions")
        pos = pos.copy()
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        if self.velocities is not None:
            vel = np.asarray(self.velocities, dtype=float)
            if vel.shape != pos.shape:
                raise ValueError(f"velocities shape {vel.shape} != positions shape {pos.shape}")
            if not np.isfinite(vel).all():
                raise ValueError("non-finite velocity")
            vel = vel.copy()
            vel.flags.writeable = False
            object.__setattr__(self, "velocities", vel)

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @property
    def second_order(self) -> bool:
        return self.velocities is not None

    def with_state(self, positions, velocities=None) -> "ParticleSystem":
        if velocities is None and self.velocities is not None:
            raise ValueError("second-order state requires velocities")
        return ParticleSystem(positions, velocities)


@dataclass(frozen=True)
class MinimalDistances:
    """Truncation radii r_i = min(nearest-neighbor distance / 4, N^(-1/d))."""

    r: np.ndarray = field(repr=False)

    @property
    def min(self) -> float:
        return float(np.min(self.r))


def _pair_displacements(sys: ParticleSystem):
    """(N,N,d) displacement tensor x_i - x_j and (N,N) squared distances."""
    X = sys.positions
    diff = X[:, None, :] - X[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    return diff, r2


def _configuration_scale(sys: ParticleSystem) -> float:
    return max(1.0, float(np.max(np.abs(sys.positions))) if sys.N else 1.0)


def _guard_collisions(sys: ParticleSystem, r2: np.ndarray) -> None:
    N = sys.N
    if N < 2:
        return
    guard = (COLLISION_GUARD * _configuration_scale(sys)) ** 2
    off = r2 + np.diag(np.full(N, np.inf))
    k = int(np.argmin(off))
    i, j = divmod(k, N)
    if off[i, j] < guard:
        raise CollisionError(i, j, float(np.sqrt(off[i, j])))


def interaction_energy(sys: ParticleSystem, spec: KernelSpec) -> float:
    """H(X) = sum over ordered pairs i != j of g(x_i - x_j)."""
    if sys.d != spec.d:
        raise ValueError(f"system dimension {sys.d} != kernel dimension {spec.d}")
    if sys.N < 2:
        return 0.0
    _, r2 = _pair_displacements(sys)
    _guard_collisions(sys, r2)
    iu = np.triu_indices(sys.N, k=1)
    r2u = r2[iu]
    vals = -0.5 * np.log(r2u) if spec.is_log else r2u ** (-spec.s / 2.0)
    return 2.0 * float(np.sum(vals))


def pairwise_force(sys: ParticleSystem, spec: KernelSpec) -> np.ndarray:
    """Row i: -(1/N) grad_{x_i} H = -(2/N) sum_{j != i} grad g(x_i - x_j)."""
    if sys.d != spec.d:
        raise ValueError(f"system dimension {sys.d} != kernel dimension {spec.d}")
    N = sys.N
    if N < 2:
        return np.zeros_like(sys.positions)
    diff, r2 = _pair_displacements(sys)
    _guard_collisions(sys, r2)
    np.fill_diagonal(r2, np.inf)
    if spec.is_log:
        w = 1.0 / r2
    else:
        w = spec.s * r2 ** (-(spec.s + 2.0) / 2.0)
    # grad g(x_i - x_j) = -w_ij (x_i - x_j); force row i = (2/N) sum_j w_ij diff_ij
    return (2.0 / N) * np.einsum("ij,ijk->ik", w, diff)


def nearest_neighbor_distances(sys: ParticleSystem) -> np.ndarray:
    if sys.N < 2:
        return np.full(sys.N, np.inf)
    _, r2 = _pair_displacements(sys)
    np.fill_diagonal(r2, np.inf)
    return np.sqrt(np.min(r2, axis=1))


def minimal_distances(sys: ParticleSystem) -> MinimalDistances:
    """r_i = min(nn_i / 4, N^(-1/d)); r_1 = 1 for N = 1.

    A coincident pair yields r_i = 0 with a degeneracy warning (truncated
    energies reject such states downstream).
    """
    N = sys.N
    cap = float(N) ** (-1.0 / sys.d)
    if N == 1:
        return MinimalDistances(np.array([1.0]))
    nn = nearest_neighbor_distances(sys)
    if np.any(nn == 0.0):
        warnings.warn("degenerate state: coincident particles give r_i = 0", RuntimeWarning)
    return MinimalDistances(np.minimum(0.25 * nn, cap))


def kinetic_energy(sys: ParticleSystem) -> float:
    """sum_i |v_i|^2 / 2 (raw, unnormalized)."""
    if sys.velocities is None:
        raise ValueError("kinetic energy needs velocities")
    return 0.5 * float(np.sum(sys.velocities**2))


def newton_energy(sys: ParticleSystem, spec: KernelSpec) -> float:
    """Conserved energy of the second-order flow, per particle:

        E = (1/(2N)) sum_i |v_i|^2 + (1/N^2) sum_{i != j} g(x_i - x_j).

    The interaction coefficient 1/N^2 is pinned by a finite-difference
    conservation check against the equations of motion (see tests).
    """
    if sys.velocities is None:
        raise ValueError("newton energy needs velocities")
    N = sys.N
    return float(np.sum(sys.velocities**2)) / (2.0 * N) + interaction_energy(sys, spec) / N**2


def particle_rng(N: int, seed: int) -> np.random.Generator:
    """Counter-based generator keyed by (N, seed): reproducible across
    thread counts and sweep orderings."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed) * np.uint64(0x9E3779B9) + np.uint64(N)))
