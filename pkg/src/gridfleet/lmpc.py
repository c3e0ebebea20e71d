"""Data-driven receding-horizon controller.

Two finite-horizon QPs drive each agent. The main problem tracks the task
target over N steps and pins the terminal state inside the convex hull of
stored safe-set states, paying the stored cost-to-go as terminal cost via
barycentric weights. When a pedestrian blocks the crosswalk the controller
switches to a hold-back variant whose states stay on the near side of the
crossing and whose terminal constraint binds position only.

The circular keep-out (mode 1) is nonconvex, so each solve replaces it with
one supporting half-plane per step, anchored on a known-admissible candidate
trajectory. The candidate also certifies feasibility: shifting the previous
optimum one step and appending the weighted successor of its terminal hull
support is again feasible, which is what the step-to-step asserts check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .cloud import TrajectoryRecord, SafeSet, compute_costs_to_go, within_termination_box
from .dynamics import (
    INPUT_DIM,
    STATE_DIM,
    DiscreteModel,
    PolygonalNormConstraint,
    discretize,
    make_polygon,
    step,
)
from .geometry import BeforeRegion, Layout, TaskKey, admissible_position, before_obstacle_region
from .qp import QpProblem, QpSolution
from .qp import solve as qp_solve


# curvature added to the barycentric-weight block of every QP; see the
# objective assembly in _Skeleton for why this stays harmless
WEIGHT_TIE_BREAK = 1e-7

# bucket size for collapsing near-identical stored states into one terminal
# hull column; an order below the 10x-solver-tol candidate gate, so the
# representative swap never trips the feasibility check
_HULL_DEDUP_GRID = 1e-6

# iteration budget for warm-hinted solve attempts; generous against the
# typical few-hundred-iteration solve, but small enough that a poisoned
# hint fails fast and hands over to the cold backstop
_WARM_ITER_CAP = 6000


@lru_cache(maxsize=None)
def _polygon(radius: float, sides: int) -> PolygonalNormConstraint:
    return make_polygon(radius, sides)


@dataclass(frozen=True)
class LmpcConfig:
    """Controller parameters; defaults are the reference experiment's."""

    horizon: int = 4
    ts: float = 1.5
    q_weight: float = 0.01
    r_weight: float = 0.5
    v_max: float = 3.0
    a_max: float = 1.5
    polygon_sides: int = 16
    position_tol: float = 0.01
    velocity_tol: float = 0.001
    qp_tol: float = 1e-6
    # stored records the controller loads per task: the cheapest ones from
    # the key's safe set. The store itself keeps everything; this only
    # bounds the per-solve problem size, and the cheapest record always
    # stays in, which is what the cost-decrease argument needs.
    working_records: int = 8

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.working_records < 1:
            raise ValueError("working_records must be at least 1")
        for name in ("ts", "q_weight", "r_weight", "v_max", "a_max", "position_tol", "velocity_tol", "qp_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.polygon_sides < 3:
            raise ValueError("polygon needs at least 3 sides")

    @property
    def Q(self) -> np.ndarray:
        return self.q_weight * np.eye(STATE_DIM)

    @property
    def R(self) -> np.ndarray:
        return self.r_weight * np.eye(INPUT_DIM)

    def velocity_limit(self) -> PolygonalNormConstraint:
        return _polygon(self.v_max, self.polygon_sides)

    def input_limit(self) -> PolygonalNormConstraint:
        return _polygon(self.a_max, self.polygon_sides)

    def model(self) -> DiscreteModel:
        return discretize(self.ts)

    def detection_radius(self) -> float:
        """Worst-case distance covered over one horizon: N * Ts * v_max."""
        return self.horizon * self.ts * self.v_max


def stage_cost(x: np.ndarray, u: np.ndarray, target: np.ndarray, Q: np.ndarray, R: np.ndarray) -> float:
    e = np.asarray(x, dtype=float) - np.asarray(target, dtype=float)
    u = np.asarray(u, dtype=float)
    return float(e @ Q @ e + u @ R @ u)


def linearize_obstacle(
    anchors: np.ndarray, center: np.ndarray, radius: float, tol: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Supporting half-planes n_t . (s - c) >= radius, one per anchor point.

    Any unit normal gives a sound half-plane (it contains no circle
    interior); anchoring on an admissible candidate additionally makes the
    candidate satisfy its own cut. An anchor meaningfully inside the circle
    means the caller broke that invariant, so it is a hard error.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    diff = anchors - center
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist < radius - tol):
        bad = int(np.argmin(dist))
        raise ValueError(
            f"linearization anchor {anchors[bad]} lies inside the keep-out circle "
            f"(distance {dist[bad]:.6f} < {radius})"
        )
    normals = diff / dist[:, None]
    return normals, np.full(len(anchors), float(radius))


# --- decision-vector bookkeeping --------------------------------------------------


@dataclass(frozen=True)
class VarMap:
    """Layout of the stacked decision vector: inputs, then states, then
    (optionally) one barycentric weight per hull column."""

    horizon: int
    n_points: int = 0

    @property
    def n(self) -> int:
        T = self.horizon
        return INPUT_DIM * T + STATE_DIM * (T + 1) + self.n_points

    def u_slice(self, t: int) -> slice:
        return slice(INPUT_DIM * t, INPUT_DIM * (t + 1))

    def x_slice(self, t: int) -> slice:
        base = INPUT_DIM * self.horizon
        return slice(base + STATE_DIM * t, base + STATE_DIM * (t + 1))

    @property
    def w_slice(self) -> slice:
        base = INPUT_DIM * self.horizon + STATE_DIM * (self.horizon + 1)
        return slice(base, base + self.n_points)


@dataclass
class ProblemBundle:
    """A built QP plus everything needed to interpret its solution."""

    problem: QpProblem
    vmap: VarMap
    kind: str  # "main" | "before_obstacle"
    key: TaskKey
    target: np.ndarray
    x0: np.ndarray
    hull_states: np.ndarray  # (S, 4) for main, (S, 2) positions for BO
    hull_costs: np.ndarray | None
    hull_sources: list[int]  # snapshot point index of each column's representative
    column_of_point: dict[int, int]  # every snapshot point index -> its column
    # largest keep-out penetration among linearization anchors that had to be
    # projected onto the circle boundary (0.0 when none needed projecting);
    # the anchor's own cut row is violated by exactly this much
    anchor_slack: float = 0.0


@dataclass
class SolveOutcome:
    status: str
    states: np.ndarray  # (N+1, 4)
    inputs: np.ndarray  # (N, 2)
    weights: np.ndarray  # (S,)
    objective: float  # true value: stage costs + terminal cost-to-go term
    stage0: float  # h(x_0, u_0)
    qp: QpSolution


@dataclass
class Candidate:
    """Known-feasible trajectory guess: linearization anchor, warm start,
    and (for the main problem) a terminal-hull certificate.

    `seam_slack` is the exact dynamics defect of the appended final step.
    It is zero for candidates read off stored trajectories; after a shift
    it inherits the previous solve's weight-block inaccuracy (tiny negative
    weights get clipped, and the clipped mass times the stored-state scale
    shows up as a residual on the one seam row). The feasibility gate adds
    it to the solver tolerance so a known, quantified defect is not
    mistaken for a broken construction."""

    states: np.ndarray  # (N+1, 4)
    inputs: np.ndarray  # (N, 2)
    weights: dict[int, float] | None  # snapshot point index -> weight
    seam_slack: float = 0.0


def _dedup_rows(rows: np.ndarray, costs: np.ndarray | None, grid: float | None = None):
    """Collapse duplicate rows, keeping the lowest-cost copy as the column
    representative. Returns (matrix, costs, sources, column_of_point).

    With `grid` set, rows are bucketed on a rounded copy so that solver-level
    scatter (re-runs of a converged trajectory differing in the last digits)
    collapses to one column; the representative stays an exact stored row,
    never the rounded artifact.
    """
    col_of: dict[bytes, int] = {}
    kept_rows: list[np.ndarray] = []
    kept_costs: list[float] = []
    sources: list[int] = []
    column_of_point: dict[int, int] = {}
    for i, row in enumerate(rows):
        if grid is not None:
            b = (np.round(row / grid) * grid + 0.0).tobytes()  # +0.0 kills -0.0
        else:
            b = row.tobytes()
        c = col_of.get(b)
        if c is None:
            c = len(kept_rows)
            col_of[b] = c
            kept_rows.append(row)
            kept_costs.append(costs[i] if costs is not None else 0.0)
            sources.append(i)
        elif costs is not None and costs[i] < kept_costs[c]:
            kept_costs[c] = costs[i]
            sources[c] = i
        column_of_point[i] = c
    mat = np.stack(kept_rows)
    cvec = np.array(kept_costs) if costs is not None else None
    return mat, cvec, sources, column_of_point


class _Skeleton:
    """Static pieces of a horizon-N tracking QP for one (task, snapshot)
    pair: everything except the initial state and the per-solve obstacle
    cuts, which are appended at build time."""

    def __init__(
        self,
        key: TaskKey,
        snapshot: SafeSet,
        layout: Layout,
        cfg: LmpcConfig,
        kind: str,
        crosswalk_coord: float | None = None,
    ):
        if not snapshot.points:
            raise ValueError(f"safe set for {key} is empty")
        self.key = key
        self.layout = layout
        self.cfg = cfg
        self.kind = kind
        self.snapshot = snapshot
        self.target = layout.targets[key.q]
        self.circle = layout.circle_for(key)
        self.region: BeforeRegion | None = None
        if kind == "before_obstacle":
            self.region = before_obstacle_region(layout, key, crosswalk_coord)

        N = cfg.horizon
        all_states = snapshot.state_matrix()
        if kind == "main":
            hull, costs, sources, col_of = _dedup_rows(
                all_states, snapshot.cost_vector(), grid=_HULL_DEDUP_GRID
            )
            self.hull_dim = STATE_DIM
        else:
            hull, costs, sources, col_of = _dedup_rows(
                np.ascontiguousarray(all_states[:, :2]), None, grid=_HULL_DEDUP_GRID
            )
            self.hull_dim = 2
        self.hull = hull
        self.hull_costs = costs
        self.hull_sources = sources
        self.column_of_point = col_of
        S = hull.shape[0]
        self.vmap = VarMap(horizon=N, n_points=S)
        n = self.vmap.n
        model = cfg.model()

        # objective: sum of stage costs over t < N, plus stored cost-to-go
        # against the terminal weights (main problem only)
        p_diag = np.zeros(n)
        q_lin = np.zeros(n)
        for t in range(N):
            p_diag[self.vmap.u_slice(t)] = 2.0 * cfg.r_weight
            p_diag[self.vmap.x_slice(t)] = 2.0 * cfg.q_weight
            q_lin[self.vmap.x_slice(t)] = -2.0 * cfg.q_weight * self.target
        # strictly convex tie-break on the barycentric weights. Stored points
        # cluster as executions converge, leaving whole faces of optimizers;
        # this picks one deterministically so the solver and its active-set
        # polish stay well posed. ||w||^2 <= 1 on the simplex, so the optimal
        # value moves by at most WEIGHT_TIE_BREAK.
        p_diag[self.vmap.w_slice] = 2.0 * WEIGHT_TIE_BREAK
        if kind == "main":
            q_lin[self.vmap.w_slice] = costs
        self.P = sp.diags(p_diag, format="csc")
        self.q = q_lin

        # equalities: initial state, dynamics, terminal hull match, simplex
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        x_idx = lambda t: np.arange(self.vmap.x_slice(t).start, self.vmap.x_slice(t).stop)
        u_idx = lambda t: np.arange(self.vmap.u_slice(t).start, self.vmap.u_slice(t).stop)
        w_idx = np.arange(self.vmap.w_slice.start, self.vmap.w_slice.stop)

        def put(r0, c_idx, block):
            block = np.atleast_2d(block)
            rr, cc = np.meshgrid(np.arange(block.shape[0]) + r0, c_idx, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(block.ravel())

        r = 0
        put(r, x_idx(0), np.eye(STATE_DIM))
        r += STATE_DIM
        for t in range(N):
            put(r, x_idx(t + 1), np.eye(STATE_DIM))
            put(r, x_idx(t), -model.A)
            put(r, u_idx(t), -model.B)
            r += STATE_DIM
        self._terminal_row = r
        if kind == "main":
            put(r, x_idx(N), np.eye(STATE_DIM))
            put(r, w_idx, -hull.T)
            r += STATE_DIM
        else:
            put(r, x_idx(N)[:2], np.eye(2))
            put(r, w_idx, -hull.T)
            r += 2
        put(r, w_idx, np.ones((1, S)))
        r += 1
        self.m_eq = r
        self.A_eq = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, n)
        ).tocsc()
        self.b_eq_template = np.zeros(r)
        self.b_eq_template[-1] = 1.0

        # inequalities: corridor + velocity polygon on x_1..x_N, hold-back
        # plane while a pedestrian is handled, input polygon, w >= 0
        rows, cols, vals = [], [], []
        h: list[float] = []
        road, forward = layout.road_for(key.p, key.q)
        corridor = road.corridor_halfplanes()
        vel_G, vel_h = cfg.velocity_limit().as_matrix()
        in_G, in_h = cfg.input_limit().as_matrix()
        r = 0

        def put_in(c_idx, block, rhs):
            nonlocal r
            block = np.atleast_2d(block)
            rr, cc = np.meshgrid(np.arange(block.shape[0]) + r, c_idx, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(block.ravel())
            h.extend(np.atleast_1d(rhs).tolist())
            r += block.shape[0]

        for t in range(1, N + 1):
            cn = np.array([hp[0] for hp in corridor])
            co = np.array([hp[1] for hp in corridor])
            put_in(x_idx(t)[:2], cn, co)
            put_in(x_idx(t)[2:], vel_G, vel_h)
            if self.region is not None:
                rn = np.array([hp[0] for hp in self.region.half_planes])
                ro = np.array([hp[1] for hp in self.region.half_planes])
                put_in(x_idx(t)[:2], rn, ro)
        for t in range(N):
            put_in(u_idx(t), in_G, in_h)
        put_in(w_idx, -np.eye(S), np.zeros(S))
        self.m_in_static = r
        self.A_in_static = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, n)
        ).tocsc()
        self.h_static = np.array(h)
        self._x_pos_cols = np.stack([x_idx(t)[:2] for t in range(1, N + 1)])

    def build(self, x_k: np.ndarray, candidate_states: np.ndarray) -> ProblemBundle:
        x_k = np.asarray(x_k, dtype=float)
        b_eq = self.b_eq_template.copy()
        b_eq[:STATE_DIM] = x_k
        A_in, h_in = self.A_in_static, self.h_static
        anchor_slack = 0.0
        if self.circle is not None:
            N = self.cfg.horizon
            anchors = np.array(candidate_states[1 : N + 1, :2], dtype=float)
            offsets = anchors - self.circle.center
            dist = np.linalg.norm(offsets, axis=1)
            pen = self.circle.radius - dist
            if np.any(pen > 0.0):
                # Weight-averaged continuations can land a whisker inside the
                # keep-out circle (clipped negative weights, chord sag between
                # stored samples). Project those anchors onto the boundary —
                # the cut stays sound — and report the penetration so callers
                # can widen the candidate feasibility check by exactly that.
                if np.any(dist <= 1e-9):
                    raise ValueError("linearization anchor at the keep-out center")
                anchor_slack = float(pen.max())
                inside = pen > 0.0
                anchors[inside] = self.circle.center + offsets[inside] * (
                    self.circle.radius / dist[inside, None]
                )
            normals, radii = linearize_obstacle(
                anchors, self.circle.center, self.circle.radius
            )
            rows = np.repeat(np.arange(N), 2)
            cols = self._x_pos_cols.ravel()
            vals = (-normals).ravel()
            G_c = sp.coo_matrix((vals, (rows, cols)), shape=(N, self.vmap.n)).tocsc()
            h_c = -(radii + normals @ self.circle.center)
            A_in = sp.vstack([A_in, G_c], format="csc")
            h_in = np.concatenate([h_in, h_c])
        problem = QpProblem(self.P, self.q, self.A_eq, b_eq, A_in, h_in)
        return ProblemBundle(
            problem=problem,
            vmap=self.vmap,
            kind=self.kind,
            key=self.key,
            target=self.target,
            x0=x_k,
            hull_states=self.hull,
            hull_costs=self.hull_costs,
            hull_sources=self.hull_sources,
            column_of_point=self.column_of_point,
            anchor_slack=anchor_slack,
        )


class MainProblemBuilder(_Skeleton):
    """Tracking problem with full-state terminal hull constraint and stored
    cost-to-go as terminal cost."""

    def __init__(self, key, snapshot, layout, cfg):
        super().__init__(key, snapshot, layout, cfg, kind="main")


class BeforeObstacleBuilder(_Skeleton):
    """Hold-back problem: states pinned to the near side of the crosswalk,
    terminal constraint on position only, no terminal cost."""

    def __init__(self, key, snapshot, layout, cfg, crosswalk_coord=None):
        super().__init__(key, snapshot, layout, cfg, kind="before_obstacle", crosswalk_coord=crosswalk_coord)


def build_main_problem(x_k, key, snapshot, layout, cfg, candidate_states) -> ProblemBundle:
    return MainProblemBuilder(key, snapshot, layout, cfg).build(x_k, candidate_states)


def build_bo_problem(x_k, key, snapshot, layout, cfg, candidate_states, crosswalk_coord=None) -> ProblemBundle:
    return BeforeObstacleBuilder(key, snapshot, layout, cfg, crosswalk_coord).build(x_k, candidate_states)


def _warm_start_vector(bundle: ProblemBundle, candidate: Candidate) -> np.ndarray | None:
    if candidate.weights is None:
        return None
    z = np.zeros(bundle.vmap.n)
    N = bundle.vmap.horizon
    for t in range(N):
        z[bundle.vmap.u_slice(t)] = candidate.inputs[t]
    for t in range(N + 1):
        z[bundle.vmap.x_slice(t)] = candidate.states[t]
    w = z[bundle.vmap.w_slice]
    for point, weight in candidate.weights.items():
        w[bundle.column_of_point[point]] += weight
    return z


def solve_bundle(
    bundle: ProblemBundle,
    cfg: LmpcConfig,
    candidate: Candidate | None = None,
    warm: QpSolution | None = None,
) -> SolveOutcome:
    """Solve one built problem. `candidate` both seeds the primal iterate and
    certifies feasibility; `warm` (the previous step's solution on the same
    skeleton) additionally seeds the duals, which is where an operator-split
    solver spends most of its iterations."""
    z0 = _warm_start_vector(bundle, candidate) if candidate is not None else None
    duals = None
    if warm is not None and warm.duals_eq.shape[0] == bundle.problem.m_eq and warm.duals_in.shape[0] == bundle.problem.m_in:
        duals = (warm.duals_eq, warm.duals_in)
        if z0 is None:
            z0 = warm.z
    # Warm hints usually finish the solve in tens of iterations, but they can
    # also poison it: the candidate sits on a degenerate vertex of the weight
    # simplex, and from there (or from stale duals) the splitting solver has
    # been seen to stall for tens of thousands of iterations on a problem a
    # cold start finishes in a few hundred. So hinted attempts get a bounded
    # budget and any non-optimal verdict is retried from scratch; only the
    # cold solve's verdict is final.
    if z0 is not None or duals is not None:
        sol = qp_solve(bundle.problem, warm_start=z0, tol=cfg.qp_tol,
                       warm_duals=duals, max_iter=_WARM_ITER_CAP)
        if sol.status != "optimal":
            sol = qp_solve(bundle.problem, tol=cfg.qp_tol)
    else:
        sol = qp_solve(bundle.problem, tol=cfg.qp_tol)
    N = bundle.vmap.horizon
    states = np.stack([sol.z[bundle.vmap.x_slice(t)] for t in range(N + 1)])
    inputs = np.stack([sol.z[bundle.vmap.u_slice(t)] for t in range(N)])
    weights = sol.z[bundle.vmap.w_slice].copy()
    Q, R = cfg.Q, cfg.R
    objective = sum(stage_cost(states[t], inputs[t], bundle.target, Q, R) for t in range(N))
    if bundle.kind == "main":
        objective += float(weights @ bundle.hull_costs)
    return SolveOutcome(
        status=sol.status,
        states=states,
        inputs=inputs,
        weights=weights,
        objective=float(objective),
        stage0=stage_cost(states[0], inputs[0], bundle.target, Q, R),
        qp=sol,
    )


def build_candidate(outcome: SolveOutcome, bundle: ProblemBundle, snapshot: SafeSet) -> Candidate:
    """Feasible guess for the next step: drop the executed stage, then append
    the weight-averaged stored successor of the terminal hull support.

    Averaging with the terminal weights keeps all three certificates exact
    under linear dynamics: the appended state is again a convex combination
    of safe-set points, the appended input is a convex combination of
    admissible inputs, and the dynamics equality at the seam holds because
    step() is affine. (Continuing only the heaviest support point would
    break the seam whenever the terminal weights are split.)
    """
    w = np.clip(outcome.weights, 0.0, None)
    support = np.nonzero(w > 1e-12)[0]
    if support.size == 0:  # degenerate, but keep going: lean on the best column
        support = np.array([int(np.argmin(bundle.hull_costs))]) if bundle.hull_costs is not None else np.array([0])
        w = np.zeros_like(w)
        w[support] = 1.0
    scale = w[support].sum()
    x_app = np.zeros(STATE_DIM)
    u_app = np.zeros(INPUT_DIM)
    new_weights: dict[int, float] = {}
    for c in support:
        share = w[c] / scale
        nxt_state, u_at, nxt_idx = snapshot.successor_of(bundle.hull_sources[c])
        x_app += share * nxt_state
        u_app += share * u_at
        new_weights[nxt_idx] = new_weights.get(nxt_idx, 0.0) + share
    states = np.vstack([outcome.states[1:], x_app])
    inputs = np.vstack([outcome.inputs[1:], u_app])
    return Candidate(states=states, inputs=inputs, weights=new_weights)


def task_start_candidate(snapshot: SafeSet, cfg: LmpcConfig) -> Candidate:
    """First-solve candidate: the opening of the cheapest stored record,
    padded by parking at its final state when the record is short."""
    best = snapshot.best_record()
    N = cfg.horizon
    L = len(best)
    take = min(N + 1, L)
    states = [best.states[i] for i in range(take)]
    inputs = [best.inputs[i] for i in range(take - 1)]
    while len(states) < N + 1:
        states.append(best.states[-1])
        inputs.append(np.zeros(INPUT_DIM))
    last = min(N, L - 1)
    idx = snapshot.point_index((best.agent_id, best.iteration, best.start + last))
    return Candidate(states=np.stack(states), inputs=np.stack(inputs), weights={idx: 1.0})


def candidate_from_point(snapshot: SafeSet, cfg: LmpcConfig, point_idx: int) -> Candidate:
    """Candidate that rides the stored trajectory onward from one of its
    points — the restart used after a pedestrian interruption ends on a
    stored state. Parking at a record's final point continues as itself."""
    states = [snapshot.points[point_idx].state]
    inputs = []
    idx = point_idx
    for _ in range(cfg.horizon):
        nxt, u, idx = snapshot.successor_of(idx)
        inputs.append(u)
        states.append(nxt)
    return Candidate(states=np.stack(states), inputs=np.stack(inputs), weights={idx: 1.0})


def candidate_residual(bundle: ProblemBundle, candidate: Candidate) -> float:
    """Worst constraint violation of the candidate as a point of the QP."""
    z = _warm_start_vector(bundle, candidate)
    if z is None:
        raise ValueError("candidate carries no terminal-weight certificate")
    p = bundle.problem
    eq = float(np.max(np.abs(p.A_eq @ z - p.b_eq))) if p.m_eq else 0.0
    ineq = float(np.max(p.A_in @ z - p.b_in)) if p.m_in else 0.0
    return max(eq, ineq, 0.0)


# --- exact-arrival bridge ---------------------------------------------------------


def arrival_bridge(x: np.ndarray, target: np.ndarray, model: DiscreteModel) -> tuple[np.ndarray, np.ndarray]:
    """Two inputs that steer a state already inside the arrival box onto the
    exact target at rest (per axis: two equations, two unknowns)."""
    ts = model.Ts
    dp = target[:2] - x[:2]
    v = x[2:]
    u1 = (dp - 1.5 * ts * v) / (ts * ts)
    u2 = -v / ts - u1
    return u1, u2


def finalize_trajectory(
    states: list[np.ndarray] | np.ndarray,
    inputs: list[np.ndarray] | np.ndarray,
    target: np.ndarray,
    model: DiscreteModel,
    cfg: LmpcConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Close out a realized trajectory: append a two-step bridge landing
    exactly on the target, plus the trailing zero input.

    Ending every stored record on the literal target state is what makes
    repeat executions start from identical states, keeps the stored
    cost-to-go exactly zero at the end, and gives the terminal point an
    equilibrium continuation.
    """
    states = [np.asarray(s, dtype=float) for s in states]
    inputs = [np.asarray(u, dtype=float) for u in inputs]
    if len(inputs) != len(states) - 1:
        raise ValueError("need exactly one input per transition")
    x = states[-1]
    if not within_termination_box(x, target, cfg.position_tol, cfg.velocity_tol):
        raise ValueError(f"final state {x} is not inside the arrival box of {target}")
    u1, u2 = arrival_bridge(x, target, model)
    mid = step(model, x, u1)
    out_states = np.vstack(states + [mid, target])
    out_inputs = np.vstack(inputs + [u1, u2, np.zeros(INPUT_DIM)])
    return out_states, out_inputs


def make_record(
    agent_id: int,
    key: TaskKey,
    iteration: int,
    start: int,
    states: np.ndarray,
    inputs: np.ndarray,
    layout: Layout,
    cfg: LmpcConfig,
    pedestrian_affected: bool = False,
) -> TrajectoryRecord:
    target = layout.targets[key.q]
    costs = compute_costs_to_go(states, inputs, target, cfg.Q, cfg.R, cfg.position_tol, cfg.velocity_tol)
    return TrajectoryRecord(
        agent_id=agent_id,
        task=key,
        iteration=iteration,
        start=start,
        end=start + len(states) - 1,
        states=states,
        inputs=inputs,
        costs_to_go=costs,
        pedestrian_affected=pedestrian_affected,
    )


# --- seed trajectories ------------------------------------------------------------


def _gap_waypoint(layout: Layout, key: TaskKey) -> np.ndarray:
    """Center of the open lane beside the keep-out circle, in world
    coordinates, at the circle's position along the task direction."""
    circle = layout.circle_for(key)
    origin, direction, length, _ = layout.task_frame(key)
    lateral = np.array([-direction[1], direction[0]])
    along_c = float(direction @ (circle.center - origin))
    lat_c = float(lateral @ (circle.center - origin))
    road, _ = layout.road_for(key.p, key.q)
    hw = road.width / 2.0
    low_gap = (lat_c - circle.radius) - (-hw)
    high_gap = hw - (lat_c + circle.radius)
    if max(low_gap, high_gap) <= 0:
        raise ValueError(f"no open lane beside the circle for {key}")
    if low_gap >= high_gap:
        lat_w = (-hw + (lat_c - circle.radius)) / 2.0
    else:
        lat_w = ((lat_c + circle.radius) + hw) / 2.0
    return origin + direction * along_c + lateral * lat_w


def _bang_bang_segment(x: np.ndarray, goal_pos: np.ndarray, model: DiscreteModel, cruise: float = 0.85):
    """Rest-to-rest run from x (assumed ~at rest) to goal_pos: accelerate
    half the steps, brake the other half."""
    ts = model.Ts
    span = goal_pos - x[:2]
    length = float(np.linalg.norm(span))
    if length < 1e-12:
        return [x], []
    direction = span / length
    n = 2 * max(2, int(np.ceil(length / (2.0 * ts * cruise))))
    accel = 4.0 * length / (ts * ts * n * n)
    states, inputs = [x], []
    for k in range(n):
        u = direction * (accel if k < n // 2 else -accel)
        inputs.append(u)
        x = step(model, x, u)
        states.append(x)
    return states, inputs


def initial_trajectory(key: TaskKey, layout: Layout, cfg: LmpcConfig) -> TrajectoryRecord:
    """Deliberately slow seed run: straight down the road, or through the
    open lane beside the circle when the mode forbids the direct line. The
    result is validated state-by-state, so a geometry that admits no seed is
    rejected here, before any simulation starts."""
    model = cfg.model()
    origin = layout.targets[key.p]
    target = layout.targets[key.q]
    waypoints = [target[:2]]
    if layout.circle_for(key) is not None:
        waypoints = [_gap_waypoint(layout, key)[:2], target[:2]]
    states = [origin.copy()]
    inputs: list[np.ndarray] = []
    for goal in waypoints:
        seg_states, seg_inputs = _bang_bang_segment(states[-1], goal, model)
        states.extend(seg_states[1:])
        inputs.extend(seg_inputs)
    full_states, full_inputs = finalize_trajectory(states, inputs, target, model, cfg)
    vel = cfg.velocity_limit()
    acc = cfg.input_limit()
    for i, x in enumerate(full_states):
        if not admissible_position(layout, key, x[:2], tol=1e-9):
            raise ValueError(f"seed for {key}: state {i} at {x[:2]} is inadmissible")
        if not vel.contains(x[2:], tol=1e-9):
            raise ValueError(f"seed for {key}: velocity {x[2:]} at step {i} exceeds the limit")
    for i, u in enumerate(full_inputs):
        if not acc.contains(u, tol=1e-9):
            raise ValueError(f"seed for {key}: input {u} at step {i} exceeds the limit")
    return make_record(-1, key, 0, 0, full_states, full_inputs, layout, cfg)


# --- fixed-endpoint problems: baseline and safe-set reacquisition ------------------


def _fixed_endpoint_problem(
    x0: np.ndarray,
    x_goal: np.ndarray,
    T: int,
    key: TaskKey,
    layout: Layout,
    cfg: LmpcConfig,
    anchors: np.ndarray | None,
) -> tuple[QpProblem, VarMap]:
    """Horizon-T QP from x0 to exactly x_goal, minimizing summed stage cost
    toward the task target; obstacle cuts anchored on the given positions."""
    vmap = VarMap(horizon=T, n_points=0)
    n = vmap.n
    model = cfg.model()
    target = layout.targets[key.q]
    p_diag = np.zeros(n)
    q_lin = np.zeros(n)
    for t in range(T):
        p_diag[vmap.u_slice(t)] = 2.0 * cfg.r_weight
        p_diag[vmap.x_slice(t)] = 2.0 * cfg.q_weight
        q_lin[vmap.x_slice(t)] = -2.0 * cfg.q_weight * target
    P = sp.diags(p_diag, format="csc")

    A_eq = np.zeros((STATE_DIM * (T + 2), n))
    b_eq = np.zeros(A_eq.shape[0])
    x_cols = lambda t: np.arange(vmap.x_slice(t).start, vmap.x_slice(t).stop)
    u_cols = lambda t: np.arange(vmap.u_slice(t).start, vmap.u_slice(t).stop)
    r = 0
    A_eq[r : r + STATE_DIM, x_cols(0)] = np.eye(STATE_DIM)
    b_eq[r : r + STATE_DIM] = x0
    r += STATE_DIM
    for t in range(T):
        A_eq[r : r + STATE_DIM, x_cols(t + 1)] = np.eye(STATE_DIM)
        A_eq[r : r + STATE_DIM, x_cols(t)] = -model.A
        A_eq[r : r + STATE_DIM, u_cols(t)] = -model.B
        r += STATE_DIM
    A_eq[r : r + STATE_DIM, x_cols(T)] = np.eye(STATE_DIM)
    b_eq[r : r + STATE_DIM] = x_goal
    r += STATE_DIM

    road, _ = layout.road_for(key.p, key.q)
    corridor = road.corridor_halfplanes()
    vel_G, vel_h = cfg.velocity_limit().as_matrix()
    in_G, in_h = cfg.input_limit().as_matrix()
    circle = layout.circle_for(key)
    rows: list[np.ndarray] = []
    rhs: list[np.ndarray] = []
    for t in range(1, T):
        block = np.zeros((len(corridor) + vel_G.shape[0], n))
        block[: len(corridor), x_cols(t)[:2]] = np.array([hp[0] for hp in corridor])
        block[len(corridor) :, x_cols(t)[2:]] = vel_G
        rows.append(block)
        rhs.append(np.concatenate([[hp[1] for hp in corridor], vel_h]))
        if circle is not None:
            normals, radii = linearize_obstacle(anchors[t - 1 : t], circle.center, circle.radius)
            cut = np.zeros((1, n))
            cut[0, x_cols(t)[:2]] = -normals[0]
            rows.append(cut)
            rhs.append(-(radii + normals @ circle.center))
    for t in range(T):
        block = np.zeros((in_G.shape[0], n))
        block[:, u_cols(t)] = in_G
        rows.append(block)
        rhs.append(in_h)
    A_in = np.vstack(rows)
    b_in = np.concatenate(rhs)
    return QpProblem(P, q_lin, sp.csc_matrix(A_eq), b_eq, sp.csc_matrix(A_in), b_in), vmap


def _resample_positions(positions: np.ndarray, count: int) -> np.ndarray:
    """Pick `count` anchor positions spread along a stored path by index."""
    if count <= 0:
        return positions[:0]
    idx = np.round(np.linspace(0, len(positions) - 1, count)).astype(int)
    return positions[idx]


def baseline_optimal(
    key: TaskKey,
    layout: Layout,
    cfg: LmpcConfig,
    long_horizon: int = 30,
    anchor_states: np.ndarray | None = None,
    start: np.ndarray | None = None,
    return_info: bool = False,
):
    """Near-optimal reference cost: one long-horizon solve ending exactly on
    the target, with the circle cuts re-anchored on the previous solution
    until the cost settles (at most 10 rounds, tolerance 1e-6)."""
    x0 = layout.targets[key.p] if start is None else np.asarray(start, dtype=float)
    target = layout.targets[key.q]
    if anchor_states is None:
        anchor_states = initial_trajectory(key, layout, cfg).states
    anchors = _resample_positions(np.asarray(anchor_states)[:, :2], long_horizon - 1)
    model = cfg.model()
    Q, R = cfg.Q, cfg.R
    cost_prev = None
    info = {"iterations": 0, "converged": False}
    for _ in range(10):
        problem, vmap = _fixed_endpoint_problem(x0, target, long_horizon, key, layout, cfg, anchors)
        sol = qp_solve(problem, tol=cfg.qp_tol)
        info["iterations"] += 1
        if sol.status != "optimal":
            raise RuntimeError(f"baseline problem for {key} returned {sol.status}")
        states = np.stack([sol.z[vmap.x_slice(t)] for t in range(long_horizon + 1)])
        inputs = np.stack([sol.z[vmap.u_slice(t)] for t in range(long_horizon)])
        cost = sum(stage_cost(states[t], inputs[t], target, Q, R) for t in range(long_horizon))
        anchors = states[1:long_horizon, :2]
        if layout.circle_for(key) is None:
            info["converged"] = True
            cost_prev = cost
            break
        if cost_prev is not None and abs(cost - cost_prev) <= 1e-6:
            info["converged"] = True
            cost_prev = cost
            break
        cost_prev = cost
    if return_info:
        return float(cost_prev), info
    return float(cost_prev)


def position_in_stored_hull(snapshot: SafeSet, position: np.ndarray, tol: float = 1e-3) -> bool:
    """Is the position within `tol` of the convex hull of stored positions?
    Solved as a tiny LP over barycentric weights."""
    pts, _, _, _ = _dedup_rows(np.ascontiguousarray(snapshot.state_matrix()[:, :2]), None)
    S = pts.shape[0]
    # variables: S weights plus one slack bounding the infinity-norm miss
    c = np.zeros(S + 1)
    c[-1] = 1.0
    A_ub = np.zeros((4, S + 1))
    A_ub[:2, :S] = pts.T
    A_ub[2:, :S] = -pts.T
    A_ub[:, -1] = -1.0
    b_ub = np.concatenate([position, -np.asarray(position, dtype=float)])
    A_eq = np.zeros((1, S + 1))
    A_eq[0, :S] = 1.0
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=[(0, None)] * S + [(0, None)], method="highs")
    return bool(res.success and res.fun <= tol)


def reacquire_safe_set(
    x_k: np.ndarray,
    key: TaskKey,
    snapshot: SafeSet,
    layout: Layout,
    cfg: LmpcConfig,
    step_cap: int = 25,
    n_goals: int = 8,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Shortest admissible plan from x_k back onto a stored full state,
    found by growing the horizon one step at a time over the nearest stored
    goals. Returns (plan states, plan inputs, goal point index); the plan
    starts at x_k and its endpoint matches the goal to solver accuracy.

    A position outside the stored-position hull means the hold-back phase
    did not do its job, and is rejected rather than patched over.
    """
    x_k = np.asarray(x_k, dtype=float)
    if not position_in_stored_hull(snapshot, x_k[:2]):
        raise ValueError(f"position {x_k[:2]} is outside the stored-position hull for {key}")
    all_states = snapshot.state_matrix()
    uniq, _, sources, _ = _dedup_rows(all_states, snapshot.cost_vector())
    dist = np.linalg.norm(uniq - x_k, axis=1)
    order = np.argsort(dist, kind="stable")[:n_goals]
    if dist[order[0]] <= 1e-9:
        return x_k.reshape(1, STATE_DIM), np.zeros((0, INPUT_DIM)), sources[int(order[0])]
    model = cfg.model()
    circle = layout.circle_for(key)
    for T in range(1, step_cap + 1):
        for g in order:
            goal = uniq[g]
            anchors = None
            if circle is not None:
                anchors = x_k[:2] + (goal[:2] - x_k[:2]) * (np.arange(1, T)[:, None] / T)
                gap = np.linalg.norm(anchors - circle.center, axis=1) if T > 1 else np.array([np.inf])
                if np.any(gap < circle.radius):
                    continue  # straight-line anchors graze the circle; try another goal
            problem, vmap = _fixed_endpoint_problem(x_k, goal, T, key, layout, cfg, anchors)
            sol = qp_solve(problem, tol=cfg.qp_tol, max_iter=4000)
            if sol.status != "optimal":
                continue
            inputs = np.stack([sol.z[vmap.u_slice(t)] for t in range(T)])
            states = [x_k]
            ok = True
            for t in range(T):
                states.append(step(model, states[-1], inputs[t]))
                if not admissible_position(layout, key, states[-1][:2], tol=1e-6):
                    ok = False
                    break
            if not ok:
                continue
            return np.stack(states), inputs, sources[int(g)]
    raise RuntimeError(
        f"no admissible return plan within {step_cap} steps for {key} from {x_k}; "
        "the geometry breaks the reachability assumption"
    )
