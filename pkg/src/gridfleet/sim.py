"""Fleet simulation on a shared clock: task assignment, pedestrian events,
per-agent controllers, and experience exchange through a cloud store."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import (
    CloudStore,
    SafeSet,
    StoreContext,
    snapshot,
    transfer,
    upload,
    within_termination_box,
)
from .dynamics import step
from .geometry import GeometryConfig, Layout, TaskKey, build_layout
from .lmpc import (
    BeforeObstacleBuilder,
    Candidate,
    LmpcConfig,
    MainProblemBuilder,
    arrival_bridge,
    build_candidate,
    candidate_from_point,
    candidate_residual,
    baseline_optimal,
    finalize_trajectory,
    initial_trajectory,
    make_record,
    reacquire_safe_set,
    solve_bundle,
    task_start_candidate,
)

MODES = ("cloud_based", "isolated")


class SimulationError(RuntimeError):
    """Fatal runtime failure, carrying enough context to reproduce it."""


@dataclass(frozen=True)
class SimConfig:
    agents: int = 3
    task_budget: int = 390
    pedestrian_probability: float = 0.10
    dwell_steps: tuple[int, int] = (4, 8)  # pedestrian crossing duration range
    max_task_steps: int = 200
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    control: LmpcConfig = field(default_factory=LmpcConfig)

    def __post_init__(self):
        if self.agents < 1:
            raise ValueError("need at least one agent")
        if self.task_budget < 0:
            raise ValueError("task budget must be nonnegative")
        if not 0.0 <= self.pedestrian_probability <= 1.0:
            raise ValueError("pedestrian probability must lie in [0, 1]")
        lo, hi = self.dwell_steps
        if not (1 <= lo <= hi):
            raise ValueError("dwell range must satisfy 1 <= lo <= hi")
        if self.max_task_steps < 3:
            raise ValueError("max_task_steps must allow at least the arrival bridge")


@dataclass(frozen=True)
class PedestrianEvent:
    """Crossing activity window on a road's crosswalk, in clock steps."""

    start: int
    duration: int

    def active(self, k: int) -> bool:
        return self.start <= k < self.start + self.duration


# --- random draws -------------------------------------------------------------


def assign_task(rng: np.random.Generator, layout: Layout, node: int) -> TaskKey:
    """Next task from `node`: destination uniform over adjacent targets,
    mode uniform over the road's modes. Never assigns the current node."""
    neighbors = layout.neighbors(node)
    q = neighbors[int(rng.integers(len(neighbors)))]
    m = int(rng.integers(2))
    return TaskKey(node, q, m)


def spawn_pedestrian(
    rng: np.random.Generator,
    probability: float,
    dwell_steps: tuple[int, int],
    start: int,
) -> PedestrianEvent | None:
    """Maybe a crossing event starting with the task. Both draws happen
    unconditionally so the stream stays aligned across probability settings."""
    occurs = rng.random() < probability
    duration = int(rng.integers(dwell_steps[0], dwell_steps[1] + 1))
    return PedestrianEvent(start=start, duration=duration) if occurs else None


# --- detection ----------------------------------------------------------------


def crosswalk_distance(layout: Layout, key: TaskKey, position: np.ndarray) -> float:
    """Distance from a position to the road's crosswalk segment."""
    origin, d, _, cw = layout.task_frame(key)
    road, _ = layout.road_for(key.p, key.q)
    rel = np.asarray(position, dtype=float) - (origin + cw * d)
    ax = float(d @ rel)
    lat = abs(float(-d[1] * rel[0] + d[0] * rel[1]))
    return float(np.hypot(ax, max(0.0, lat - 0.5 * road.width)))


def detect(
    layout: Layout,
    key: TaskKey,
    event: PedestrianEvent | None,
    position: np.ndarray,
    k: int,
    radius: float,
) -> bool:
    """Is the crossing visible and still ahead? True while the event is
    active and the agent sits within `radius` of the crosswalk on the near
    side; once past the line the agent no longer yields."""
    if event is None or not event.active(k):
        return False
    _, _, _, cw = layout.task_frame(key)
    if layout.along_coordinate(key, position) >= cw:
        return False
    return crosswalk_distance(layout, key, position) <= radius


# --- metrics ------------------------------------------------------------------


def optimality_gap(cost: float, baseline: float, tol: float = 1e-6) -> tuple[float, bool]:
    """Relative excess of a realized cost over the long-horizon reference.

    Returns (gap, anomaly); a cost below the reference by more than `tol`
    is possible only through a solver artifact, so it gets flagged rather
    than silently reported as a negative gap.
    """
    if baseline <= 0:
        raise ValueError("reference cost must be positive")
    gap = (cost - baseline) / baseline
    return gap, cost < baseline - tol


@dataclass(frozen=True)
class TaskRow:
    """One completed task execution."""

    seq: int  # global acquisition index
    agent: int
    key: TaskKey
    repetition: int  # 1-based count of this key's executions on this store
    start_tick: int
    end_tick: int
    steps: int
    hold_steps: int
    pedestrian: bool
    cost: float
    baseline: float
    gap: float
    anomaly: bool
    uploaded: bool
    transfers: int


@dataclass(frozen=True)
class SolveRow:
    """One controller QP (or return-plan search) inside a task."""

    seq: int
    agent: int
    key: TaskKey
    tick: int
    kind: str  # "main" | "hold" | "reacquire"
    chain: int  # uninterrupted main-problem run within the task; -1 otherwise
    status: str
    iterations: int
    objective: float
    stage0: float
    candidate_residual: float


@dataclass(frozen=True)
class TaskTrace:
    """Executed states of one pedestrian-affected task, for the position
    trace plot and the hold-phase check."""

    seq: int
    agent: int
    key: TaskKey
    start_tick: int
    states: np.ndarray  # (steps+1, 4)
    detected: np.ndarray  # (steps,) bool, detection during each step


@dataclass
class SimResult:
    mode: str
    seed: int
    config: SimConfig
    layout: Layout
    baselines: dict[TaskKey, float]
    rows: list[TaskRow]
    solves: list[SolveRow]
    traces: dict[int, TaskTrace]
    stores: list[CloudStore]
    ticks: int

    def store_for(self, agent: int) -> CloudStore:
        return self.stores[0] if len(self.stores) == 1 else self.stores[agent]


# --- per-agent machinery --------------------------------------------------------


@dataclass
class _TaskRuntime:
    seq: int
    key: TaskKey
    snapshot: SafeSet
    builder: MainProblemBuilder
    candidate: Candidate
    target: np.ndarray
    event: PedestrianEvent | None
    start_tick: int
    states: list = field(default_factory=list)  # executed, including x0
    inputs: list = field(default_factory=list)
    detected: list = field(default_factory=list)  # one flag per executed step
    steps: int = 0
    hold_steps: int = 0
    phase: str = "main"  # main | hold | reacquire | bridge
    chain: int = 0
    pedestrian_affected: bool = False
    bo_builder: BeforeObstacleBuilder | None = None
    last_main: object = None  # previous main solution, reused to warm the duals
    last_hold: object = None
    hold_anchors: np.ndarray | None = None
    plan_inputs: np.ndarray | None = None
    plan_pos: int = 0
    goal_point: int | None = None
    pre_bridge: tuple | None = None  # (states, inputs) up to the arrival box
    bridge_queue: list = field(default_factory=list)
    complete: bool = False


@dataclass
class _Agent:
    id: int
    node: int
    x: np.ndarray
    rng: np.random.Generator
    tasks_done: int = 0
    next_iteration: int = 1  # record id; 0 belongs to the seed trajectories
    pending_key: TaskKey | None = None
    runtime: _TaskRuntime | None = None


def store_context(layout: Layout, cfg: LmpcConfig) -> StoreContext:
    """Validation context binding a store to this layout and controller."""
    return StoreContext(
        layout=layout,
        Q=cfg.Q,
        R=cfg.R,
        velocity_limit=cfg.velocity_limit(),
        input_limit=cfg.input_limit(),
        position_tol=cfg.position_tol,
        velocity_tol=cfg.velocity_tol,
    )


def seeded_store(layout: Layout, cfg: LmpcConfig) -> CloudStore:
    """Fresh store with one seed trajectory uploaded per task key."""
    store = CloudStore(store_context(layout, cfg))
    for key in layout.task_keys():
        upload(store, initial_trajectory(key, layout, cfg))
    return store


def compute_baselines(layout: Layout, cfg: LmpcConfig) -> dict[TaskKey, float]:
    return {key: baseline_optimal(key, layout, cfg) for key in layout.task_keys()}


def working_set(snap: SafeSet, limit: int) -> SafeSet:
    """Bounded controller view of a safe set: the seed plus the cheapest
    records (earliest on ties, original order preserved). The store keeps
    every record; this only caps how much of it one task's QPs carry, since
    transfers make the full set grow without bound while everything past
    the cheapest few records is dead weight in the terminal hull.

    The seed stays in no matter its cost: it is the one record guaranteed
    to detour around the keep-out circle at crawl speed, so it anchors the
    stored-position hull that hold-back and reacquisition lean on. Cheap
    learned records often thread the circle between samples and span no
    lateral width at all."""
    if len(snap.records) <= limit:
        return snap
    seeds = [i for i, r in enumerate(snap.records) if r.agent_id < 0]
    rest = sorted(
        (i for i in range(len(snap.records)) if snap.records[i].agent_id >= 0),
        key=lambda i: (snap.records[i].cost, i),
    )
    keep = sorted(set(seeds) | set(rest[: max(0, limit - len(seeds))]))
    reduced = SafeSet(key=snap.key)
    for i in keep:
        reduced.append_record(snap.records[i])
    return reduced


class Simulation:
    """Shared-clock coordinator.

    Each tick runs three phases: (A) idle agents acquire tasks in agent-id
    order, waiting while another agent is already executing the same key;
    (B) every active agent advances one step against its acquisition-time
    snapshot; (C) finished tasks post their results in agent-id order —
    metrics row, then upload and (cloud mode) transfer. Phase B touches
    only per-agent state, so its internal order is irrelevant; phases A
    and C are where agents couple, and both are id-ordered.
    """

    def __init__(
        self,
        config: SimConfig,
        seed: int,
        mode: str,
        baselines: dict[TaskKey, float] | None = None,
        initial_store: CloudStore | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.config = config
        self.seed = seed
        self.mode = mode
        self.control = config.control
        self.layout = build_layout(config.geometry)
        self.model = self.control.model()
        self.radius = self.control.detection_radius()
        if initial_store is not None:
            if mode != "cloud_based":
                raise ValueError("initial_store only applies to cloud_based runs")
            if initial_store.context.layout.fingerprint() != self.layout.fingerprint():
                raise ValueError("initial_store was built for a different layout")
            self.stores = [initial_store]
        else:
            n_stores = 1 if mode == "cloud_based" else config.agents
            self.stores = [seeded_store(self.layout, self.control) for _ in range(n_stores)]
        if config.task_budget > 0 and baselines is None:
            baselines = compute_baselines(self.layout, self.control)
        self.baselines = dict(baselines) if baselines else {}

        master = np.random.SeedSequence(seed)
        children = master.spawn(config.agents)
        n_nodes = len(self.layout.targets)
        self.agents = [
            _Agent(
                id=i,
                node=(i * n_nodes) // config.agents,
                x=self.layout.targets[(i * n_nodes) // config.agents].copy(),
                rng=np.random.default_rng(children[i]),
            )
            for i in range(config.agents)
        ]
        if initial_store is not None:
            # resuming on a prior run's store: (agent, iteration) identities
            # in the log are taken, so every agent restarts past them
            top = 0
            for rec in initial_store.log:
                top = max(top, rec.iteration)
            for a in self.agents:
                a.next_iteration = top + 1
        base, extra = divmod(config.task_budget, config.agents)
        self.quota = [base + (1 if i < extra else 0) for i in range(config.agents)]
        self.active_keys: set[TaskKey] = set()
        self.rows: list[TaskRow] = []
        self.solves: list[SolveRow] = []
        self.traces: dict[int, TaskTrace] = {}
        self.repetitions: dict[tuple[int, TaskKey], int] = {}
        self.tick = 0
        self.next_seq = 0

    def store_of(self, agent_id: int) -> CloudStore:
        return self.stores[0] if len(self.stores) == 1 else self.stores[agent_id]

    # --- tick phases ---

    def _acquire(self, a: _Agent) -> None:
        if a.pending_key is None:
            a.pending_key = assign_task(a.rng, self.layout, a.node)
        key = a.pending_key
        if key in self.active_keys:
            return  # wait; the held draw is used once the key frees up
        a.pending_key = None
        self.active_keys.add(key)
        event = spawn_pedestrian(
            a.rng, self.config.pedestrian_probability, self.config.dwell_steps, self.tick
        )
        snap = working_set(snapshot(self.store_of(a.id), key), self.control.working_records)
        a.runtime = _TaskRuntime(
            seq=self.next_seq,
            key=key,
            snapshot=snap,
            builder=MainProblemBuilder(key, snap, self.layout, self.control),
            candidate=task_start_candidate(snap, self.control),
            target=self.layout.targets[key.q],
            event=event,
            start_tick=self.tick,
            states=[a.x.copy()],
        )
        self.next_seq += 1

    def _fatal(self, a: _Agent, what: str) -> SimulationError:
        rt = a.runtime
        return SimulationError(
            f"{what} | mode={self.mode} seed={self.seed} tick={self.tick} "
            f"agent={a.id} task={rt.key} seq={rt.seq} phase={rt.phase} "
            f"step={rt.steps} x={a.x.tolist()}"
        )

    def _log(self, a: _Agent, kind: str, chain: int, status: str, iterations: int,
             objective: float, stage0: float, residual: float) -> None:
        rt = a.runtime
        self.solves.append(
            SolveRow(
                seq=rt.seq, agent=a.id, key=rt.key, tick=self.tick, kind=kind,
                chain=chain, status=status, iterations=iterations,
                objective=objective, stage0=stage0, candidate_residual=residual,
            )
        )

    def _execute(self, a: _Agent, u: np.ndarray, detected: bool) -> None:
        rt = a.runtime
        a.x = step(self.model, a.x, u)
        rt.states.append(a.x.copy())
        rt.inputs.append(np.asarray(u, dtype=float))
        rt.detected.append(detected)
        rt.steps += 1
        if rt.steps > self.config.max_task_steps:
            raise self._fatal(a, f"task exceeded {self.config.max_task_steps} steps")

    def _hold_step(self, a: _Agent) -> None:
        rt = a.runtime
        if rt.bo_builder is None:
            rt.bo_builder = BeforeObstacleBuilder(rt.key, rt.snapshot, self.layout, self.control)
        # The task candidate rides a stored trajectory past the crosswalk, so
        # its points are useless as obstacle-cut anchors here: cuts linearized
        # beyond the circle contradict the hold-back rows. Anchor the first
        # solve on "stay put" instead; later solves re-anchor on the previous
        # hold solution.
        if rt.hold_anchors is None:
            rt.hold_anchors = np.tile(a.x, (self.control.horizon + 1, 1))
        anchors = rt.hold_anchors
        bundle = rt.bo_builder.build(a.x, anchors)
        out = solve_bundle(bundle, self.control, warm=rt.last_hold)
        rt.last_hold = out.qp
        self._log(a, "hold", -1, out.status, out.qp.iterations, out.objective,
                  out.stage0, float("nan"))
        if out.status != "optimal":
            raise self._fatal(a, f"hold-back solve returned {out.status}")
        rt.hold_anchors = out.states
        rt.hold_steps += 1
        self._execute(a, out.inputs[0], detected=True)

    def _begin_reacquire(self, a: _Agent) -> None:
        """Plan back onto a stored state once the crossing has cleared."""
        rt = a.runtime
        try:
            _, plan_inputs, goal = reacquire_safe_set(
                a.x, rt.key, rt.snapshot, self.layout, self.control
            )
        except (ValueError, RuntimeError) as exc:
            raise self._fatal(a, f"reacquisition failed: {exc}") from exc
        self._log(a, "reacquire", -1, "optimal", len(plan_inputs),
                  float("nan"), float("nan"), float("nan"))
        rt.chain += 1
        if len(plan_inputs) == 0:
            rt.phase = "main"
            rt.candidate = candidate_from_point(rt.snapshot, self.control, goal)
            self._main_step(a)
            return
        rt.phase = "reacquire"
        rt.plan_inputs = plan_inputs
        rt.plan_pos = 0
        rt.goal_point = goal
        self._plan_step(a)

    def _plan_step(self, a: _Agent) -> None:
        rt = a.runtime
        u = rt.plan_inputs[rt.plan_pos]
        rt.plan_pos += 1
        self._execute(a, u, detected=False)
        if rt.plan_pos == len(rt.plan_inputs):
            rt.phase = "main"
            rt.candidate = candidate_from_point(rt.snapshot, self.control, rt.goal_point)

    def _main_step(self, a: _Agent) -> None:
        rt = a.runtime
        bundle = rt.builder.build(a.x, rt.candidate.states)
        residual = candidate_residual(bundle, rt.candidate)
        out = solve_bundle(bundle, self.control, rt.candidate, warm=rt.last_main)
        rt.last_main = out.qp
        self._log(a, "main", rt.chain, out.status, out.qp.iterations, out.objective,
                  out.stage0, residual)
        if residual > 10.0 * self.control.qp_tol:
            raise self._fatal(a, f"candidate violates the problem by {residual:.3e}")
        if out.status != "optimal":
            raise self._fatal(a, f"main solve returned {out.status}")
        self._execute(a, out.inputs[0], detected=False)
        if within_termination_box(a.x, rt.target, self.control.position_tol, self.control.velocity_tol):
            rt.pre_bridge = (list(rt.states), list(rt.inputs))
            u1, u2 = arrival_bridge(a.x, rt.target, self.model)
            rt.bridge_queue = [u1, u2]
            rt.phase = "bridge"
        else:
            rt.candidate = build_candidate(out, bundle, rt.snapshot)

    def _bridge_step(self, a: _Agent) -> None:
        rt = a.runtime
        u = rt.bridge_queue.pop(0)
        self._execute(a, u, detected=False)
        if not rt.bridge_queue:
            # the bridge algebra lands on the target up to roundoff; pin the
            # exact value so the record and the next task start coincide
            a.x = rt.target.copy()
            rt.states[-1] = rt.target.copy()
            rt.complete = True

    def step_agent(self, a: _Agent) -> None:
        """Advance one active agent by one clock step."""
        rt = a.runtime
        if rt.phase == "bridge":
            self._bridge_step(a)
            return
        if rt.phase == "reacquire":
            self._plan_step(a)
            return
        seen = detect(self.layout, rt.key, rt.event, a.x[:2], self.tick, self.radius)
        if rt.phase == "hold":
            if seen:
                self._hold_step(a)
            else:
                self._begin_reacquire(a)
            return
        if seen:
            rt.phase = "hold"
            rt.pedestrian_affected = True
            self._hold_step(a)
        else:
            self._main_step(a)

    def _finish(self, a: _Agent) -> None:
        rt = a.runtime
        states, inputs = rt.pre_bridge
        rec_states, rec_inputs = finalize_trajectory(
            states, inputs, rt.target, self.model, self.control
        )
        record = make_record(
            a.id, rt.key, a.next_iteration, rt.start_tick, rec_states, rec_inputs,
            self.layout, self.control, pedestrian_affected=rt.pedestrian_affected,
        )
        a.next_iteration += 1
        store_idx = 0 if self.mode == "cloud_based" else a.id
        rep = self.repetitions.get((store_idx, rt.key), 0) + 1
        self.repetitions[(store_idx, rt.key)] = rep
        baseline = self.baselines.get(rt.key, float("nan"))
        if np.isnan(baseline):
            gap, anomaly = float("nan"), False
        else:
            gap, anomaly = optimality_gap(record.cost, baseline)
        uploaded = False
        n_transfers = 0
        if not rt.pedestrian_affected:
            upload(self.store_of(a.id), record)
            uploaded = True
            if self.mode == "cloud_based":
                n_transfers = len(transfer(self.store_of(a.id), record))
        else:
            self.traces[rt.seq] = TaskTrace(
                seq=rt.seq, agent=a.id, key=rt.key, start_tick=rt.start_tick,
                states=np.stack(rt.states), detected=np.array(rt.detected, dtype=bool),
            )
        self.rows.append(
            TaskRow(
                seq=rt.seq, agent=a.id, key=rt.key, repetition=rep,
                start_tick=rt.start_tick, end_tick=self.tick, steps=rt.steps,
                hold_steps=rt.hold_steps, pedestrian=rt.pedestrian_affected,
                cost=record.cost, baseline=baseline, gap=gap, anomaly=anomaly,
                uploaded=uploaded, transfers=n_transfers,
            )
        )
        self.active_keys.discard(rt.key)
        a.node = rt.key.q
        a.x = self.layout.targets[rt.key.q].copy()
        a.tasks_done += 1
        a.runtime = None

    # --- main loop ---

    def run(self, step_order=None) -> SimResult:
        cap = 10 + (self.config.task_budget + 1) * (self.config.max_task_steps + 3)
        while True:
            for a in self.agents:  # phase A: acquisitions, id order
                if a.runtime is None and a.tasks_done < self.quota[a.id]:
                    self._acquire(a)
            if all(a.runtime is None for a in self.agents):
                break  # every quota exhausted; waiting agents always coexist
                # with an active holder, so an all-idle fleet is done
            order = list(range(len(self.agents)))
            if step_order is not None:
                order = step_order(self.tick, order)
            for i in order:  # phase B: independent per-agent steps
                if self.agents[i].runtime is not None:
                    self.step_agent(self.agents[i])
            for a in self.agents:  # phase C: results, id order
                if a.runtime is not None and a.runtime.complete:
                    self._finish(a)
            self.tick += 1
            if self.tick > cap:
                raise SimulationError(
                    f"clock exceeded {cap} ticks | mode={self.mode} seed={self.seed}"
                )
        return SimResult(
            mode=self.mode,
            seed=self.seed,
            config=self.config,
            layout=self.layout,
            baselines=self.baselines,
            rows=self.rows,
            solves=self.solves,
            traces=self.traces,
            stores=self.stores,
            ticks=self.tick,
        )


def run(
    config: SimConfig,
    seed: int,
    mode: str,
    baselines: dict[TaskKey, float] | None = None,
    step_order=None,
    initial_store: CloudStore | None = None,
) -> SimResult:
    """Simulate a fleet until the task budget is spent.

    `mode` selects the exchange topology: "cloud_based" shares one store and
    propagates uploads to parallel roads; "isolated" gives each agent a
    private store and no exchange. A zero budget returns seeded stores and
    empty metrics. `baselines` may carry precomputed per-key reference
    costs so twin runs don't recompute them. `initial_store` resumes a
    cloud_based run on a previously persisted store instead of fresh seeds.
    """
    sim = Simulation(config, seed, mode, baselines=baselines, initial_store=initial_store)
    return sim.run(step_order=step_order)
