"""Scenes, scene generation, grid planning, and egocentric rasterization.

A scene is a 30 m x 30 m square holding disc obstacles, constant-velocity
pedestrians, and a start/goal pair.  Generation is deterministic from a seed
and rejection-samples layouts until its own grid planner confirms a path, so
every generated scene is feasible by construction.

Scene files are JSON lines, one scene per line.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

ROBOT_RADIUS = 0.3
GRID_CELL = 0.5
GRID_INFLATION = ROBOT_RADIUS + 0.45

TASKS = ("empty", "obstacle", "pedestrian", "both", "symmetric")


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class Disc:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.radius = float(self.radius)


@dataclass
class Pedestrian:
    position: np.ndarray
    velocity: np.ndarray
    radius: float = 0.3

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.radius = float(self.radius)

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass
class Scene:
    start: np.ndarray
    goal: np.ndarray
    obstacles: list = field(default_factory=list)
    pedestrians: list = field(default_factory=list)
    bounds: float = 30.0
    seed: int = 0
    task: str = "empty"

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)

    def validate(self):
        if float(np.linalg.norm(self.goal - self.start)) < 2.0:
            raise ValueError("start and goal closer than 2 m")
        for p in (self.start, self.goal):
            for disc in self.obstacles:
                if np.linalg.norm(p - disc.center) < disc.radius + ROBOT_RADIUS:
                    raise ValueError("start or goal collides with an obstacle")
        for disc in self.obstacles:
            if np.any(disc.center < 0) or np.any(disc.center > self.bounds):
                raise ValueError("obstacle outside bounds")
        for ped in self.pedestrians:
            if ped.speed > 1.5 + 1e-9:
                raise ValueError(f"pedestrian speed {ped.speed} exceeds 1.5 m/s")
        return self

    def to_dict(self) -> dict:
        return {
            "bounds": self.bounds,
            "goal": [float(v) for v in self.goal],
            "obstacles": [
                {"center": [float(v) for v in d.center], "radius": d.radius} for d in self.obstacles
            ],
            "pedestrians": [
                {
                    "position": [float(v) for v in p.position],
                    "radius": p.radius,
                    "velocity": [float(v) for v in p.velocity],
                }
                for p in self.pedestrians
            ],
            "seed": self.seed,
            "start": [float(v) for v in self.start],
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            start=d["start"],
            goal=d["goal"],
            obstacles=[Disc(o["center"], o["radius"]) for o in d["obstacles"]],
            pedestrians=[
                Pedestrian(p["position"], p["velocity"], p.get("radius", 0.3))
                for p in d["pedestrians"]
            ],
            bounds=float(d.get("bounds", 30.0)),
            seed=int(d.get("seed", 0)),
            task=d.get("task", "empty"),
        )


def save_scenes(path, scenes, meta: dict | None = None):
    """One JSON object per line; an optional leading meta line is tagged."""
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"__meta__": meta}, sort_keys=True) + "\n")
        for scene in scenes:
            fh.write(json.dumps(scene.to_dict(), sort_keys=True) + "\n")


def load_scenes(path, with_meta: bool = False):
    scenes = []
    meta = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "__meta__" in obj:
                meta = obj["__meta__"]
            else:
                scenes.append(Scene.from_dict(obj))
    if with_meta:
        return scenes, meta
    return scenes


# ---------------------------------------------------------------------------
# grid planner


class PlannerGrid:
    """Robot-radius-inflated occupancy grid with 8-connected A*."""

    def __init__(self, discs, bounds: float, cell: float = GRID_CELL, inflation: float = GRID_INFLATION):
        self.cell = cell
        self.bounds = bounds
        self.n = int(round(bounds / cell))
        xs = (np.arange(self.n) + 0.5) * cell
        cx, cy = np.meshgrid(xs, xs, indexing="ij")
        occ = np.zeros((self.n, self.n), dtype=bool)
        for disc in discs:
            r = disc.radius + inflation
            occ |= (cx - disc.center[0]) ** 2 + (cy - disc.center[1]) ** 2 <= r * r
        self.occupied = occ

    def index(self, p) -> tuple:
        i = int(np.clip(p[0] / self.cell, 0, self.n - 1))
        j = int(np.clip(p[1] / self.cell, 0, self.n - 1))
        return i, j

    def center(self, idx) -> np.ndarray:
        return np.array([(idx[0] + 0.5) * self.cell, (idx[1] + 0.5) * self.cell])

    def plan(self, start, goal):
        """A* path of cell centers from start cell to goal cell, or None."""
        s, g = self.index(start), self.index(goal)
        if self.occupied[s] or self.occupied[g]:
            return None
        sqrt2 = np.sqrt(2.0)

        def heuristic(a):
            dx, dy = abs(a[0] - g[0]), abs(a[1] - g[1])
            return (dx + dy) + (sqrt2 - 2.0) * min(dx, dy)

        open_heap = [(heuristic(s), 0.0, s)]
        g_cost = {s: 0.0}
        came = {}
        closed = set()
        while open_heap:
            _, cost, cur = heapq.heappop(open_heap)
            if cur == g:
                path = [cur]
                while cur in came:
                    cur = came[cur]
                    path.append(cur)
                path.reverse()
                return [self.center(c) for c in path]
            if cur in closed:
                continue
            closed.add(cur)
            ci, cj = cur
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ni, nj = ci + di, cj + dj
                    if not (0 <= ni < self.n and 0 <= nj < self.n):
                        continue
                    if self.occupied[ni, nj]:
                        continue
                    if di != 0 and dj != 0:
                        # no corner cutting between two blocked orthogonals
                        if self.occupied[ci + di, cj] or self.occupied[ci, cj + dj]:
                            continue
                        step_cost = sqrt2
                    else:
                        step_cost = 1.0
                    nxt = (ni, nj)
                    new_cost = cost + step_cost
                    if new_cost < g_cost.get(nxt, np.inf):
                        g_cost[nxt] = new_cost
                        came[nxt] = cur
                        heapq.heappush(open_heap, (new_cost + heuristic(nxt), new_cost, nxt))
        return None

    def has_path(self, start, goal) -> bool:
        return self.plan(start, goal) is not None


def _segment_clear(a, b, discs, margin: float) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    ab = b - a
    denom = float(ab @ ab)
    for disc in discs:
        if denom < 1e-12:
            d = np.linalg.norm(disc.center - a)
        else:
            t = np.clip((disc.center - a) @ ab / denom, 0.0, 1.0)
            d = np.linalg.norm(a + t * ab - disc.center)
        if d < disc.radius + ROBOT_RADIUS + margin:
            return False
    return True


def prune_path(points, discs, margin: float = 0.2):
    """Greedy line-of-sight shortcutting of a planned polyline."""
    if len(points) <= 2:
        return list(points)
    out = [points[0]]
    i = 0
    while i < len(points) - 1:
        j = len(points) - 1
        while j > i + 1 and not _segment_clear(points[i], points[j], discs, margin):
            j -= 1
        out.append(points[j])
        i = j
    return out


def walk_path(points, speed: float = 1.0, dt: float = 0.2):
    """Positions along a polyline at constant speed, sampled every dt."""
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    seg = np.array([np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:])])
    keep = seg > 1e-12
    if not np.any(keep):
        return [pts[0]]
    starts = [p for p, k in zip(pts[:-1], keep) if k]
    ends = [p for p, k in zip(pts[1:], keep) if k]
    seg = seg[keep]
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    n_steps = int(np.floor(total / (speed * dt)))
    out = []
    for k in range(n_steps + 1):
        s = min(k * speed * dt, total)
        idx = int(np.searchsorted(cum, s, side="right") - 1)
        idx = min(idx, len(seg) - 1)
        frac = (s - cum[idx]) / seg[idx]
        out.append(starts[idx] + frac * (ends[idx] - starts[idx]))
    if np.linalg.norm(out[-1] - pts[-1]) > 1e-9:
        out.append(pts[-1])
    return out


# ---------------------------------------------------------------------------
# egocentric rasterization

_CELL_CACHE = {}


def _cell_centers(size: int, window: float) -> np.ndarray:
    key = (size, window)
    if key not in _CELL_CACHE:
        cell = window / size
        fx = (np.arange(size) + 0.5) * cell  # forward, [0, window]
        fy = -window / 2.0 + (np.arange(size) + 0.5) * cell  # lateral
        gx, gy = np.meshgrid(fx, fy, indexing="ij")
        _CELL_CACHE[key] = np.stack([gx, gy], axis=-1)
    return _CELL_CACHE[key]


def render_raster(discs, robot_pos, heading: float, size: int = 32, window: float = 8.0) -> np.ndarray:
    """Binary occupancy over a forward window: x in [0, w], y in [-w/2, w/2].

    A cell is occupied iff its center lies inside any disc.  ``discs`` is a
    sequence of (center, radius) pairs covering obstacles and pedestrians.
    """
    local = _cell_centers(size, window)
    world = np.asarray(robot_pos) + local @ rotation(heading).T
    occ = np.zeros((size, size), dtype=np.float64)
    for center, radius in discs:
        d2 = (world[..., 0] - center[0]) ** 2 + (world[..., 1] - center[1]) ** 2
        occ[d2 <= radius * radius] = 1.0
    return occ


def goal_in_robot_frame(goal, robot_pos, heading: float) -> np.ndarray:
    return rotation(-heading) @ (np.asarray(goal) - np.asarray(robot_pos))


# ---------------------------------------------------------------------------
# scene generation


def _sample_endpoints(rng, bounds: float, min_dist: float = 10.0):
    margin = 2.0
    for _ in range(200):
        start = rng.uniform(margin, bounds - margin, size=2)
        goal = rng.uniform(margin, bounds - margin, size=2)
        if np.linalg.norm(goal - start) >= min_dist:
            return start, goal
    raise ValueError("infeasible scene parameters: endpoint sampling failed")


def _clear_of_endpoints(center, radius, start, goal, clearance: float = 0.5) -> bool:
    need = radius + ROBOT_RADIUS + clearance
    return (
        np.linalg.norm(center - start) >= need and np.linalg.norm(center - goal) >= need
    )


def generate_scene(task: str, seed: int, bounds: float = 30.0, max_attempts: int = 10000) -> Scene:
    """Deterministically sample a feasible scene for one task family."""
    if task not in TASKS:
        raise ValueError(f"unknown task '{task}' (choose from {TASKS})")
    rng = np.random.default_rng(seed)
    if task == "symmetric":
        return _generate_symmetric(rng, seed, bounds)

    attempts = 0
    while True:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError("infeasible scene parameters: rejection sampling exhausted")
        start, goal = _sample_endpoints(rng, bounds)
        obstacles = []
        if task in ("obstacle", "both"):
            n_obs = int(rng.integers(6, 13))
            ok = True
            for _ in range(n_obs):
                placed = False
                for _ in range(50):
                    radius = float(rng.uniform(0.3, 1.0))
                    center = rng.uniform(radius, bounds - radius, size=2)
                    if _clear_of_endpoints(center, radius, start, goal):
                        obstacles.append(Disc(center, radius))
                        placed = True
                        break
                if not placed:
                    ok = False
                    break
            if not ok:
                continue
            grid = PlannerGrid(obstacles, bounds)
            if not grid.has_path(start, goal):
                continue
        pedestrians = []
        if task in ("pedestrian", "both"):
            n_ped = int(rng.integers(2, 6))
            mid = 0.5 * (start + goal)
            for _ in range(n_ped):
                for _ in range(50):
                    pos = rng.uniform(1.0, bounds - 1.0, size=2)
                    if np.linalg.norm(pos - start) < 3.0:
                        continue
                    # crossing trajectory: aim near the route midpoint
                    target = mid + rng.normal(0.0, 2.0, size=2)
                    direction = target - pos
                    norm = np.linalg.norm(direction)
                    if norm < 1e-6:
                        continue
                    speed = float(rng.uniform(0.5, 1.5))
                    pedestrians.append(Pedestrian(pos, direction / norm * speed))
                    break
        return Scene(
            start=start,
            goal=goal,
            obstacles=obstacles,
            pedestrians=pedestrians,
            bounds=bounds,
            seed=seed,
            task=task,
        ).validate()


def _generate_symmetric(rng, seed: int, bounds: float) -> Scene:
    """Corridor with one disc centered on the start->goal line.

    Both passing sides are equally viable, which makes the left/right choice
    genuinely bimodal.
    """
    for _ in range(200):
        y = float(rng.uniform(8.0, bounds - 8.0))
        x0 = float(rng.uniform(3.0, 8.0))
        length = float(rng.uniform(10.0, 16.0))
        x1 = x0 + length
        if x1 > bounds - 3.0:
            continue
        radius = float(rng.uniform(1.2, 2.2))
        start = np.array([x0, y])
        goal = np.array([x1, y])
        center = np.array([0.5 * (x0 + x1), y])
        scene = Scene(
            start=start,
            goal=goal,
            obstacles=[Disc(center, radius)],
            pedestrians=[],
            bounds=bounds,
            seed=seed,
            task="symmetric",
        )
        grid = PlannerGrid(scene.obstacles, bounds)
        if grid.has_path(start, goal):
            return scene.validate()
    raise ValueError("infeasible scene parameters: symmetric layout failed")
