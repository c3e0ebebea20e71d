"""Brute-force QP reference: enumerate every candidate active set, solve the
equality-constrained KKT system, and keep the best primal- and dual-feasible
point. Exponential in the number of inequalities — only for tiny problems."""

from __future__ import annotations

from itertools import combinations

import numpy as np


def brute_force_qp(P, q, A_eq=None, b_eq=None, A_in=None, b_in=None, tol=1e-8):
    """Returns (z, objective) or None when the feasible set is empty."""
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float).ravel()
    n = q.shape[0]
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    A_in = np.zeros((0, n)) if A_in is None else np.asarray(A_in, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).ravel()
    m_eq, m_in = b_eq.shape[0], b_in.shape[0]

    best = None
    for size in range(m_in + 1):
        for act in combinations(range(m_in), size):
            act = list(act)
            G = np.vstack([A_eq, A_in[act]])
            k = G.shape[0]
            K = np.block([[P, G.T], [G, np.zeros((k, k))]])
            rhs = np.concatenate([-q, b_eq, b_in[act]])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            if np.max(np.abs(K @ sol - rhs), initial=0.0) > 1e-7:
                continue  # inconsistent KKT system for this active set
            z = sol[:n]
            mu_act = sol[n + m_eq:]
            if m_eq and np.max(np.abs(A_eq @ z - b_eq)) > tol:
                continue
            if m_in and np.max(A_in @ z - b_in, initial=-np.inf) > tol:
                continue
            if mu_act.size and np.min(mu_act) < -tol:
                continue
            obj = float(0.5 * z @ P @ z + q @ z)
            if best is None or obj < best[1] - 1e-12:
                best = (z, obj)
    return best


def random_strictly_convex_qp(rng, max_vars: int = 4, max_ineq: int = 6):
    """Random small strictly convex QP; roughly a third are infeasible."""
    n = int(rng.integers(1, max_vars + 1))
    m_in = int(rng.integers(0, max_ineq + 1))
    m_eq = int(rng.integers(0, min(n, 2) + 1)) if rng.uniform() < 0.4 else 0
    M = rng.normal(size=(n, n))
    P = M.T @ M + (0.1 + rng.uniform()) * np.eye(n)
    q = rng.normal(scale=2.0, size=n)
    z0 = rng.normal(size=n)
    A_in = rng.normal(size=(m_in, n))
    # slack mostly positive so a fair share of problems are feasible
    b_in = A_in @ z0 + rng.uniform(-0.4, 1.6, size=m_in)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = A_eq @ z0 + rng.uniform(-0.2, 0.2, size=m_eq)
    return P, q, A_eq, b_eq, A_in, b_in
