"""Shared experience store.

Agents never talk to each other: completed-task trajectories are uploaded
here, and controllers pull immutable safe-set snapshots at task start. Each
(origin, destination, mode) key owns an append-only sample safe set of
(state, cost-to-go) points plus the records they came from. Trajectories on
a road that is an exact translate of another road are re-usable there, with
unchanged costs-to-go, because the stage cost only sees offsets from the
target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import PolygonalNormConstraint
from .geometry import Layout, TaskKey, admissible_position, parallel_directed_tasks

FORMAT_NAME = "gridfleet-cloud-v1"


class UploadRejected(ValueError):
    """Record failed validation; .code tells which rule fired."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass(eq=False)
class TrajectoryRecord:
    """One completed traversal: states, applied inputs, costs-to-go.

    states and inputs have equal length; the last input is zero (the agent
    is parked on the target). costs_to_go[i] is the stage-cost sum from
    state i to the end.
    """

    agent_id: int
    task: TaskKey
    iteration: int
    start: int
    end: int
    states: np.ndarray  # (L, 4)
    inputs: np.ndarray  # (L, 2)
    costs_to_go: np.ndarray  # (L,)
    pedestrian_affected: bool = False

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def cost(self) -> float:
        """Total cost of the traversal."""
        return float(self.costs_to_go[0])


def records_equal(a: TrajectoryRecord, b: TrajectoryRecord) -> bool:
    return (
        a.agent_id == b.agent_id
        and a.task == b.task
        and a.iteration == b.iteration
        and a.start == b.start
        and a.end == b.end
        and a.pedestrian_affected == b.pedestrian_affected
        and np.array_equal(a.states, b.states)
        and np.array_equal(a.inputs, b.inputs)
        and np.array_equal(a.costs_to_go, b.costs_to_go)
    )


@dataclass(frozen=True)
class SafeSetPoint:
    state: np.ndarray  # (4,)
    F: float
    source: tuple[int, int, int]  # (agent_id, iteration, step)


@dataclass
class SafeSet:
    """Ordered collection of safe-set points for one task key, plus the
    records they belong to so successors along stored trajectories can be
    looked up."""

    key: TaskKey
    points: list[SafeSetPoint] = field(default_factory=list)
    records: list[TrajectoryRecord] = field(default_factory=list)
    version: int = 0
    _by_id: dict[tuple[int, int], TrajectoryRecord] = field(default_factory=dict, repr=False)
    _point_pos: dict[tuple[int, int, int], int] = field(default_factory=dict, repr=False)

    def append_record(self, record: TrajectoryRecord) -> int:
        self.records.append(record)
        self._by_id[(record.agent_id, record.iteration)] = record
        for i in range(len(record)):
            src = (record.agent_id, record.iteration, record.start + i)
            self._point_pos[src] = len(self.points)
            self.points.append(
                SafeSetPoint(state=record.states[i], F=float(record.costs_to_go[i]), source=src)
            )
        self.version += 1
        return self.version

    def copy(self) -> "SafeSet":
        return SafeSet(
            key=self.key,
            points=list(self.points),
            records=list(self.records),
            version=self.version,
            _by_id=dict(self._by_id),
            _point_pos=dict(self._point_pos),
        )

    def state_matrix(self) -> np.ndarray:
        return np.stack([p.state for p in self.points])

    def cost_vector(self) -> np.ndarray:
        return np.array([p.F for p in self.points])

    def best_record(self) -> TrajectoryRecord:
        """Stored record with the lowest total cost (earliest on ties)."""
        best = self.records[0]
        for r in self.records[1:]:
            if r.cost < best.cost - 0.0:
                best = r
        return best

    def successor_of(self, point_idx: int) -> tuple[np.ndarray, np.ndarray, int]:
        """(next state, input applied at the point, next point index).

        For the final point of a record — the exact target at rest — the
        successor is the point itself under zero input.
        """
        pt = self.points[point_idx]
        agent, iteration, step = pt.source
        rec = self._by_id[(agent, iteration)]
        local = step - rec.start
        if local + 1 < len(rec):
            nxt = self._point_pos[(agent, iteration, step + 1)]
            return rec.states[local + 1], rec.inputs[local], nxt
        return pt.state, np.zeros(2), point_idx

    def point_index(self, source: tuple[int, int, int]) -> int:
        return self._point_pos[source]


@dataclass(frozen=True)
class StoreContext:
    """Validation context shared by every upload: geometry, cost weights,
    constraint polygons and the arrival tolerance box."""

    layout: Layout
    Q: np.ndarray  # (4, 4)
    R: np.ndarray  # (2, 2)
    velocity_limit: PolygonalNormConstraint
    input_limit: PolygonalNormConstraint
    position_tol: float = 0.01
    velocity_tol: float = 0.001
    admissibility_tol: float = 1e-6


@dataclass
class CloudStore:
    context: StoreContext
    sets: dict[TaskKey, SafeSet] = field(default_factory=dict)
    log: list[TrajectoryRecord] = field(default_factory=list)
    transfer_audit: list[tuple[TrajectoryRecord, TrajectoryRecord]] = field(default_factory=list)

    def __post_init__(self):
        for key in self.context.layout.task_keys():
            self.sets.setdefault(key, SafeSet(key=key))

    def version(self, key: TaskKey) -> int:
        return self.sets[key].version


def within_termination_box(
    state: np.ndarray, target: np.ndarray, position_tol: float = 0.01, velocity_tol: float = 0.001
) -> bool:
    d = np.abs(np.asarray(state, dtype=float) - np.asarray(target, dtype=float))
    return bool(np.max(d[:2]) <= position_tol and np.max(d[2:]) <= velocity_tol)


def _stage_cost(x: np.ndarray, u: np.ndarray, target: np.ndarray, Q, R) -> float:
    e = x - target
    return float(e @ Q @ e + u @ R @ u)


def compute_costs_to_go(
    states: np.ndarray,
    inputs: np.ndarray,
    target: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    position_tol: float = 0.01,
    velocity_tol: float = 0.001,
) -> np.ndarray:
    """Backward stage-cost accumulation along a completed trajectory.

    F[t] = h(x[t], u[t]) + F[t+1] with the final stage evaluated under zero
    input, so a trajectory parked exactly on the target ends with F = 0.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ValueError("empty trajectory")
    if not within_termination_box(states[-1], target, position_tol, velocity_tol):
        raise ValueError(
            f"trajectory does not end at the target: final state {states[-1]}, target {target}"
        )
    L = states.shape[0]
    F = np.zeros(L)
    F[L - 1] = _stage_cost(states[-1], np.zeros(2), target, Q, R)
    for t in range(L - 2, -1, -1):
        F[t] = _stage_cost(states[t], inputs[t], target, Q, R) + F[t + 1]
    return F


def _validate_record(ctx: StoreContext, record: TrajectoryRecord) -> None:
    if record.pedestrian_affected:
        raise UploadRejected(
            "pedestrian_data", "records altered by a moving obstacle are not shared"
        )
    L = len(record)
    if record.inputs.shape[0] != L or record.costs_to_go.shape[0] != L:
        raise UploadRejected(
            "length_mismatch",
            f"states({L}) / inputs({record.inputs.shape[0]}) / costs({record.costs_to_go.shape[0]})",
        )
    if record.end - record.start + 1 != L:
        raise UploadRejected(
            "length_mismatch", f"step range [{record.start},{record.end}] vs {L} states"
        )
    if np.max(np.abs(record.inputs[-1]), initial=0.0) > 1e-12:
        raise UploadRejected("length_mismatch", "last input must be zero at the target")
    target = ctx.layout.targets[record.task.q]
    if not within_termination_box(record.states[-1], target, ctx.position_tol, ctx.velocity_tol):
        raise UploadRejected(
            "not_at_target", f"final state {record.states[-1]} outside the arrival box"
        )
    F_ref = compute_costs_to_go(
        record.states, record.inputs, target, ctx.Q, ctx.R, ctx.position_tol, ctx.velocity_tol
    )
    if np.max(np.abs(F_ref - record.costs_to_go)) > 1e-9 * max(1.0, float(F_ref[0])):
        raise UploadRejected("bad_costs", "costs_to_go do not satisfy the backward recursion")
    if np.any(np.diff(record.costs_to_go) > 1e-12):
        raise UploadRejected("bad_costs", "costs_to_go must be non-increasing")
    tol = ctx.admissibility_tol
    for i, x in enumerate(record.states):
        if not admissible_position(ctx.layout, record.task, x[:2], tol=tol):
            raise UploadRejected(
                "inadmissible_state", f"state {i} position {x[:2]} violates {record.task}"
            )
        if not ctx.velocity_limit.contains(x[2:], tol=tol):
            raise UploadRejected(
                "inadmissible_state", f"state {i} velocity {x[2:]} outside the limit polygon"
            )
    for i, u in enumerate(record.inputs):
        if not ctx.input_limit.contains(u, tol=tol):
            raise UploadRejected(
                "inadmissible_state", f"input {i} = {u} outside the limit polygon"
            )


def upload(store: CloudStore, record: TrajectoryRecord) -> int:
    """Validate and append a record; returns the key's new version."""
    _validate_record(store.context, record)
    version = store.sets[record.task].append_record(record)
    store.log.append(record)
    return version


def snapshot(store: CloudStore, key: TaskKey) -> SafeSet:
    """Consistent copy of the key's safe set at its current version."""
    if key not in store.sets:
        raise KeyError(f"unknown task key {key}")
    return store.sets[key].copy()


def q_value(safe_set: SafeSet, state: np.ndarray, tol: float = 1e-9) -> float:
    """Minimum stored cost-to-go over points matching state within tol."""
    state = np.asarray(state, dtype=float)
    best = None
    for p in safe_set.points:
        if np.max(np.abs(p.state - state)) <= tol:
            if best is None or p.F < best:
                best = p.F
    if best is None:
        raise LookupError(f"state {state} not present in the safe set")
    return best


def transfer(
    store: CloudStore, record: TrajectoryRecord, layout: Layout | None = None
) -> list[TrajectoryRecord]:
    """Copy an uploaded record onto every parallel road where it stays
    admissible, for both modes there. Positions shift by the road offset;
    velocities, inputs and costs-to-go are unchanged."""
    layout = layout or store.context.layout
    derived: list[TrajectoryRecord] = []
    for r, n, lam in parallel_directed_tasks(layout, record.task):
        shifted = record.states.copy()
        shifted[:, 0] += lam[0]
        shifted[:, 1] += lam[1]
        road, _ = layout.road_for(r, n)
        for m in sorted(road.forbidden_by_mode):
            dest = TaskKey(r, n, m)
            ok = all(
                admissible_position(layout, dest, s[:2], tol=store.context.admissibility_tol)
                for s in shifted
            )
            if not ok:
                continue
            candidate = TrajectoryRecord(
                agent_id=record.agent_id,
                task=dest,
                iteration=record.iteration,
                start=record.start,
                end=record.end,
                states=shifted.copy(),
                inputs=record.inputs.copy(),
                costs_to_go=record.costs_to_go.copy(),
                pedestrian_affected=False,
            )
            try:
                upload(store, candidate)
            except UploadRejected:
                continue
            store.transfer_audit.append((record, candidate))
            derived.append(candidate)
    return derived


# --- persistence ----------------------------------------------------------------


def persist(store: CloudStore, path: str | Path) -> None:
    """Line-delimited text dump: one header line, then one record per line.

    Floats go through repr so a round-trip reproduces them bit-exactly.
    """
    path = Path(path)
    lines = [
        json.dumps(
            {
                "format": FORMAT_NAME,
                "layout": store.context.layout.fingerprint(),
                "records": len(store.log),
            }
        )
    ]
    for rec in store.log:
        lines.append(
            json.dumps(
                {
                    "k": [rec.task.p, rec.task.q, rec.task.m],
                    "a": rec.agent_id,
                    "j": rec.iteration,
                    "t": rec.start,
                    "T": rec.end,
                    "x": rec.states.tolist(),
                    "u": rec.inputs.tolist(),
                    "F": rec.costs_to_go.tolist(),
                }
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load(path: str | Path, context: StoreContext) -> CloudStore:
    """Rebuild a store by replaying a persisted log. Any malformed line
    aborts the load with its line number; no partial store is returned."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise ValueError(f"{path}: empty store file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:1: bad header: {e}") from None
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("layout") != context.layout.fingerprint():
        raise ValueError(
            f"{path}: layout fingerprint {header.get('layout')} does not match the "
            f"configured layout {context.layout.fingerprint()}"
        )
    expected = int(header.get("records", -1))
    if expected != len(lines) - 1:
        raise ValueError(
            f"{path}: header promises {expected} records but file has {len(lines) - 1}"
        )
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            rec = TrajectoryRecord(
                agent_id=int(d["a"]),
                task=TaskKey(*[int(v) for v in d["k"]]),
                iteration=int(d["j"]),
                start=int(d["t"]),
                end=int(d["T"]),
                states=np.array(d["x"], dtype=float).reshape(-1, 4),
                inputs=np.array(d["u"], dtype=float).reshape(-1, 2),
                costs_to_go=np.array(d["F"], dtype=float),
                pedestrian_affected=False,
            )
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}:{ln}: malformed record: {e}") from None
        records.append(rec)
    store = CloudStore(context=context)
    for ln, rec in enumerate(records, start=2):
        try:
            upload(store, rec)
        except UploadRejected as e:
            raise ValueError(f"{path}:{ln}: record fails validation: {e}") from None
    return store


def stores_equal(a: CloudStore, b: CloudStore) -> bool:
    if set(a.sets) != set(b.sets) or len(a.log) != len(b.log):
        return False
    if any(not records_equal(x, y) for x, y in zip(a.log, b.log)):
        return False
    for key in a.sets:
        sa, sb = a.sets[key], b.sets[key]
        if sa.version != sb.version or len(sa.points) != len(sb.points):
            return False
        for pa, pb in zip(sa.points, sb.points):
            if pa.source != pb.source or pa.F != pb.F or not np.array_equal(pa.state, pb.state):
                return False
    return True
