"""Discrete-time agent model: exact ZOH double integrator plus polygonal
inner approximations of the norm-ball velocity/acceleration limits.

State layout is [s_x, s_y, v_x, v_y]; input layout is [a_x, a_y].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATE_DIM = 4
INPUT_DIM = 2


@dataclass(frozen=True)
class DiscreteModel:
    """Exact zero-order-hold discretization of the planar double integrator."""

    A: np.ndarray  # 4x4
    B: np.ndarray  # 4x2
    Ts: float


@dataclass(frozen=True)
class PolygonalNormConstraint:
    """Inscribed regular K-gon replacing a Euclidean norm ball of given radius.

    Satisfying every half-plane implies the true norm constraint, so any
    point certified admissible here is admissible for the original ball.
    half_planes stores (unit normal n_k, offset b_k) meaning n_k . z <= b_k.
    """

    radius: float
    sides: int
    half_planes: tuple[tuple[np.ndarray, float], ...]

    def contains(self, z: np.ndarray, tol: float = 0.0) -> bool:
        z = np.asarray(z, dtype=float)
        return all(float(n @ z) <= b + tol for n, b in self.half_planes)

    def as_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (G, g) with G z <= g, one row per side."""
        G = np.stack([n for n, _ in self.half_planes])
        g = np.array([b for _, b in self.half_planes])
        return G, g


def discretize(Ts: float) -> DiscreteModel:
    """Build the exact ZOH model for sample time Ts.

    Position rows gain Ts*velocity + (Ts^2/2)*input; velocity rows gain
    Ts*input. Exact because the continuous-time state matrix is nilpotent.
    """
    if not Ts > 0:
        raise ValueError(f"sample time must be positive, got {Ts}")
    A = np.eye(STATE_DIM)
    A[0, 2] = Ts
    A[1, 3] = Ts
    B = np.zeros((STATE_DIM, INPUT_DIM))
    B[0, 0] = 0.5 * Ts * Ts
    B[1, 1] = 0.5 * Ts * Ts
    B[2, 0] = Ts
    B[3, 1] = Ts
    A.setflags(write=False)
    B.setflags(write=False)
    return DiscreteModel(A=A, B=B, Ts=Ts)


def step(model: DiscreteModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One discrete step x+ = A x + B u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return model.A @ x + model.B @ u


def make_polygon(radius: float, K: int) -> PolygonalNormConstraint:
    """Inscribed regular K-gon for the ball of given radius.

    Normals sit at angles 2*pi*(k+1/2)/K and every offset is
    radius*cos(pi/K), the apothem of the inscribed polygon.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if K < 3:
        raise ValueError(f"polygon needs at least 3 sides, got {K}")
    offset = radius * np.cos(np.pi / K)
    planes = []
    for k in range(K):
        ang = 2.0 * np.pi * (k + 0.5) / K
        n = np.array([np.cos(ang), np.sin(ang)])
        n.setflags(write=False)
        planes.append((n, float(offset)))
    return PolygonalNormConstraint(radius=radius, sides=K, half_planes=tuple(planes))
