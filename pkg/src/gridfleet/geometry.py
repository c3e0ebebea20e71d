"""Grid world geometry: targets at intersections, road corridors, per-mode
forbidden circles, crosswalks, the before-crosswalk region used while a
moving obstacle is present, and parallel-road detection for trajectory
transfer between roads that are exact translates of each other.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GeometryConfig:
    rows: int = 3
    cols: int = 3
    spacing: float = 20.0
    road_width: float = 4.0
    # corridors extend slightly past the endpoint targets so states hovering
    # inside the arrival tolerance box never fall off the admissible region
    endpoint_margin: float = 0.05
    circle_radius: float = 1.5
    circle_axial_fraction: float = 0.4
    circle_lateral_offset: float = 1.0
    min_gap: float = 1.0
    crosswalk_fraction: float = 0.5
    crosswalk_margin: float = 1.0  # hold-back distance before the crosswalk


@dataclass(frozen=True)
class ForbiddenCircle:
    """Circular keep-out region: admissible positions satisfy ||s-c|| >= D."""

    center: np.ndarray  # 2-vector
    radius: float


@dataclass(frozen=True)
class TaskKey:
    """Directed traversal of a road under one obstacle mode."""

    p: int
    q: int
    m: int

    def __str__(self) -> str:
        return f"{self.p}->{self.q}/m{self.m}"


@dataclass(frozen=True)
class Road:
    origin_id: int
    dest_id: int
    origin_pos: np.ndarray
    dest_pos: np.ndarray
    width: float
    endpoint_margin: float
    crosswalk_coord: float  # arc length from origin_pos along the axis
    forbidden_by_mode: dict[int, ForbiddenCircle | None]

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.dest_pos - self.origin_pos))

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from origin target to destination target."""
        return (self.dest_pos - self.origin_pos) / self.length

    @property
    def lateral(self) -> np.ndarray:
        """Unit vector 90 degrees counterclockwise from direction."""
        d = self.direction
        return np.array([-d[1], d[0]])

    def corridor_halfplanes(self) -> list[tuple[np.ndarray, float]]:
        """Four half-planes (n, b) with n.s <= b describing the corridor."""
        d, n = self.direction, self.lateral
        center = 0.5 * (self.origin_pos + self.dest_pos)
        half_len = 0.5 * self.length + self.endpoint_margin
        half_wid = 0.5 * self.width
        return [
            (d, float(d @ center) + half_len),
            (-d, -float(d @ center) + half_len),
            (n, float(n @ center) + half_wid),
            (-n, -float(n @ center) + half_wid),
        ]

    def contains_position(self, s: np.ndarray, tol: float = 0.0) -> bool:
        return all(float(n @ s) <= b + tol for n, b in self.corridor_halfplanes())

    def crosswalk_segment(self) -> tuple[np.ndarray, np.ndarray, float]:
        """(center, lateral unit, half length) of the crosswalk line.

        The crosswalk is perpendicular to the road axis and spans the
        corridor width.
        """
        center = self.origin_pos + self.direction * self.crosswalk_coord
        return center, self.lateral, 0.5 * self.width


@dataclass
class Layout:
    targets: list[np.ndarray]  # full states, zero velocity
    roads: list[Road]
    grid_rows: int
    grid_cols: int
    road_width: float
    grid_spacing: float
    config: GeometryConfig
    _road_index: dict[frozenset, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._road_index:
            for i, r in enumerate(self.roads):
                self._road_index[frozenset((r.origin_id, r.dest_id))] = i

    def target_position(self, idx: int) -> np.ndarray:
        return self.targets[idx][:2]

    def neighbors(self, p: int) -> list[int]:
        out = []
        for r in self.roads:
            if r.origin_id == p:
                out.append(r.dest_id)
            elif r.dest_id == p:
                out.append(r.origin_id)
        return sorted(out)

    def road_for(self, p: int, q: int) -> tuple[Road, bool]:
        """Road connecting p and q plus whether the task runs it forward."""
        key = frozenset((p, q))
        if p == q or key not in self._road_index:
            raise KeyError(f"no road between targets {p} and {q}")
        road = self.roads[self._road_index[key]]
        return road, road.origin_id == p

    def task_keys(self) -> list[TaskKey]:
        keys = []
        for r in self.roads:
            for p, q in ((r.origin_id, r.dest_id), (r.dest_id, r.origin_id)):
                for m in sorted(r.forbidden_by_mode):
                    keys.append(TaskKey(p, q, m))
        return keys

    def task_frame(self, key: TaskKey) -> tuple[np.ndarray, np.ndarray, float, float]:
        """(origin position, travel direction, length, crosswalk arc length)
        in the task's own travel direction."""
        road, forward = self.road_for(key.p, key.q)
        if forward:
            return road.origin_pos, road.direction, road.length, road.crosswalk_coord
        return road.dest_pos, -road.direction, road.length, road.length - road.crosswalk_coord

    def along_coordinate(self, key: TaskKey, s: np.ndarray) -> float:
        """Arc-length coordinate of position s along the task direction."""
        origin, d, _, _ = self.task_frame(key)
        return float(d @ (np.asarray(s, dtype=float) - origin))

    def circle_for(self, key: TaskKey) -> ForbiddenCircle | None:
        road, _ = self.road_for(key.p, key.q)
        return road.forbidden_by_mode.get(key.m)

    def fingerprint(self) -> str:
        """Stable hash of everything that defines admissibility."""
        h = hashlib.sha256()
        cfg = self.config
        parts = [
            cfg.rows, cfg.cols, cfg.spacing, cfg.road_width, cfg.endpoint_margin,
            cfg.circle_radius, cfg.circle_axial_fraction, cfg.circle_lateral_offset,
            cfg.crosswalk_fraction, cfg.crosswalk_margin,
        ]
        h.update(repr(parts).encode())
        for r in self.roads:
            circ = r.forbidden_by_mode.get(1)
            h.update(repr((r.origin_id, r.dest_id, r.crosswalk_coord)).encode())
            if circ is not None:
                h.update(repr((circ.center.tolist(), circ.radius)).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class BeforeRegion:
    """Half-plane cut keeping positions before the crosswalk by a margin."""

    half_planes: tuple[tuple[np.ndarray, float], ...]
    along_limit: float  # admissible arc-length coordinates are <= this

    def contains(self, layout: Layout, key: TaskKey, s: np.ndarray, tol: float = 0.0) -> bool:
        return layout.along_coordinate(key, s) <= self.along_limit + tol


def build_layout(config: GeometryConfig) -> Layout:
    """Grid of rows x cols targets with one road per adjacent pair.

    Mode 0 leaves roads free; mode 1 places one forbidden circle per road,
    off the centerline so a lateral gap of at least min_gap remains.
    """
    c = config
    errors = []
    if c.rows < 2 or c.cols < 2:
        errors.append(f"grid must be at least 2x2, got {c.rows}x{c.cols}")
    if not c.road_width > 0:
        errors.append(f"road width must be positive, got {c.road_width}")
    if not c.spacing > c.road_width:
        errors.append(f"grid spacing {c.spacing} must exceed road width {c.road_width}")
    if not 0.0 < c.crosswalk_fraction < 1.0:
        errors.append("crosswalk fraction must lie strictly inside (0,1)")
    if not 0.0 < c.circle_axial_fraction < 1.0:
        errors.append("circle axial fraction must lie strictly inside (0,1)")
    if errors:
        raise ValueError("; ".join(errors))

    targets = []
    for r in range(c.rows):
        for col in range(c.cols):
            t = np.array([col * c.spacing, r * c.spacing, 0.0, 0.0])
            t.setflags(write=False)
            targets.append(t)

    def target_id(r: int, col: int) -> int:
        return r * c.cols + col

    pairs = []
    for r in range(c.rows):
        for col in range(c.cols):
            if col + 1 < c.cols:
                pairs.append((target_id(r, col), target_id(r, col + 1)))
            if r + 1 < c.rows:
                pairs.append((target_id(r, col), target_id(r + 1, col)))

    roads = []
    for p, q in pairs:
        ppos, qpos = targets[p][:2].copy(), targets[q][:2].copy()
        ppos.setflags(write=False)
        qpos.setflags(write=False)
        length = float(np.linalg.norm(qpos - ppos))
        d = (qpos - ppos) / length
        lat = np.array([-d[1], d[0]])
        center = ppos + d * (c.circle_axial_fraction * length) + lat * c.circle_lateral_offset
        center.setflags(write=False)
        circle = ForbiddenCircle(center=center, radius=c.circle_radius)
        _validate_circle(circle, ppos, qpos, lat, c, errors, road=(p, q))
        roads.append(
            Road(
                origin_id=p,
                dest_id=q,
                origin_pos=ppos,
                dest_pos=qpos,
                width=c.road_width,
                endpoint_margin=c.endpoint_margin,
                crosswalk_coord=c.crosswalk_fraction * length,
                forbidden_by_mode={0: None, 1: circle},
            )
        )
    if errors:
        raise ValueError("; ".join(errors))

    return Layout(
        targets=targets,
        roads=roads,
        grid_rows=c.rows,
        grid_cols=c.cols,
        road_width=c.road_width,
        grid_spacing=c.spacing,
        config=c,
    )


def _validate_circle(circle, ppos, qpos, lat, cfg, errors, road):
    """The keep-out circle must block part of the corridor width, leave a
    traversable gap of at least min_gap, and never cover a target."""
    half_w = 0.5 * cfg.road_width
    lat_c = cfg.circle_lateral_offset
    blocked_lo = max(-half_w, lat_c - circle.radius)
    blocked_hi = min(half_w, lat_c + circle.radius)
    if blocked_hi <= blocked_lo:
        errors.append(f"road {road}: circle does not intersect the corridor")
        return
    gap = (blocked_lo - (-half_w)) + (half_w - blocked_hi)
    if gap < cfg.min_gap:
        errors.append(
            f"road {road}: remaining gap {gap:.3f} m is below the minimum {cfg.min_gap} m"
        )
    for tpos in (ppos, qpos):
        if np.linalg.norm(tpos - circle.center) <= circle.radius:
            errors.append(f"road {road}: circle covers target at {tpos}")


def admissible_position(layout: Layout, key: TaskKey, s: np.ndarray, tol: float = 0.0) -> bool:
    """True iff s lies in the road corridor and outside the mode's circle."""
    s = np.asarray(s, dtype=float)
    road, _ = layout.road_for(key.p, key.q)
    if not road.contains_position(s, tol=tol):
        return False
    circle = road.forbidden_by_mode.get(key.m)
    if circle is not None and np.linalg.norm(s - circle.center) < circle.radius - tol:
        return False
    return True


def before_obstacle_region(
    layout: Layout, key: TaskKey, crosswalk_coord: float | None = None
) -> BeforeRegion:
    """Half-plane keeping the agent strictly before the crosswalk.

    The returned constraint is meant to be intersected with the mode-m
    admissible region by the QP builder. Points at or past
    crosswalk_coord - margin are outside.
    """
    origin, d, length, cw_task = layout.task_frame(key)
    if crosswalk_coord is not None:
        cw_task = float(crosswalk_coord)
    margin = layout.config.crosswalk_margin
    if margin >= cw_task:
        raise ValueError(
            f"crosswalk margin {margin} m reaches back past the task origin "
            f"(crosswalk at {cw_task} m): region would exclude the start"
        )
    limit = cw_task - margin
    plane = (d, float(d @ origin) + limit)
    return BeforeRegion(half_planes=(plane,), along_limit=limit)


def parallel_shift(road_a: Road, road_b: Road) -> np.ndarray | None:
    """Translation lambda mapping A's corridor onto B's, or None.

    Requires equal travel direction, length and width; the shift is the
    offset between origin targets.
    """
    if abs(road_a.length - road_b.length) > 1e-9:
        return None
    if abs(road_a.width - road_b.width) > 1e-9:
        return None
    if np.max(np.abs(road_a.direction - road_b.direction)) > 1e-12:
        return None
    return road_b.origin_pos - road_a.origin_pos


def parallel_directed_tasks(layout: Layout, key: TaskKey) -> list[tuple[int, int, np.ndarray]]:
    """All directed traversals (r, n) whose path is a nonzero translate of
    key's directed path, with the translation vector."""
    p_pos = layout.target_position(key.p)
    q_pos = layout.target_position(key.q)
    span = q_pos - p_pos
    out = []
    for road in layout.roads:
        for r, n in ((road.origin_id, road.dest_id), (road.dest_id, road.origin_id)):
            r_pos, n_pos = layout.target_position(r), layout.target_position(n)
            if np.max(np.abs((n_pos - r_pos) - span)) > 1e-9:
                continue
            lam = r_pos - p_pos
            if np.max(np.abs(lam)) <= 1e-12:
                continue  # the task itself
            out.append((r, n, lam))
    return out


def project_position(x: np.ndarray) -> np.ndarray:
    """Position components of a full state."""
    return np.asarray(x, dtype=float)[:2].copy()
