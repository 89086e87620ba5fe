"""Synthetic expert demonstrations with controllable passing side.

The expert plans an 8-connected grid path over robot-radius-inflated
obstacles, shortcuts it by line-of-sight pruning, and walks it at 1 m/s.
In scenes with a blocking obstacle the passing side can be forced: a virtual
wall of discs is laid on the opposite side of the obstacle before planning,
so "left" and "right" produce genuinely different homotopy classes and the
pooled dataset is multimodal.  Every demo is replayed through the simulator
and must reach the goal without a single collision.

Demo files are binary: magic "S2EDEMO1", version u32, then k/size/horizon/
count u32, then per record little-endian float32: rasters (k*size*size),
goal (2), future waypoints (horizon*2, robot frame, meters).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .sim import NavEnv, Observation, ObsConfig, RewardConfig
from .world import Disc, PlannerGrid, Scene, prune_path, rotation, walk_path

DEMO_MAGIC = b"S2EDEMO1"
DEMO_VERSION = 1

EXPERT_SPEED = 1.0  # m/s
MIN_ENDPOINT = 0.2  # drop records whose future endpoint is closer than this


@dataclass
class DemoRecord:
    rasters: np.ndarray  # (k, S, S)
    goal: np.ndarray  # (2,) robot frame
    traj: np.ndarray  # (T, 2) future relative waypoints, robot frame, meters


class InfeasibleSceneError(ValueError):
    pass


def _blocking_obstacle(scene: Scene):
    """The obstacle nearest the start->goal segment, if it intrudes on it."""
    a, b = scene.start, scene.goal
    ab = b - a
    denom = float(ab @ ab)
    best, best_d = None, np.inf
    for disc in scene.obstacles:
        t = np.clip((disc.center - a) @ ab / denom, 0.0, 1.0)
        d = float(np.linalg.norm(a + t * ab - disc.center))
        if d < disc.radius + 0.75 and d < best_d:
            best, best_d = disc, d
    return best


def _virtual_wall(scene: Scene, side: str):
    """Discs sealing one side of the blocking obstacle.

    Forcing a 'left' pass blocks the right side and vice versa.  Returns []
    when nothing blocks the straight route (styles then coincide).
    """
    disc = _blocking_obstacle(scene)
    if disc is None:
        return []
    u = scene.goal - scene.start
    u = u / np.linalg.norm(u)
    right = rotation(-np.pi / 2.0) @ u
    direction = right if side == "left" else -right
    wall = []
    for s in np.arange(0.5, 4.01, 0.5):
        center = disc.center + direction * (disc.radius + s)
        if np.all(center >= 0.0) and np.all(center <= scene.bounds):
            wall.append(Disc(center, 0.45))
    return wall


def plan_expert_path(scene: Scene, style: str = "auto", rng=None):
    """World-frame positions at 5 Hz along the expert route."""
    if style not in ("left", "right", "auto"):
        raise ValueError(f"unknown style '{style}'")
    if style == "auto":
        if rng is None:
            rng = np.random.default_rng(0)
        style = "left" if rng.random() < 0.5 else "right"

    def attempt(extra):
        grid = PlannerGrid(list(scene.obstacles) + list(extra), scene.bounds)
        cells = grid.plan(scene.start, scene.goal)
        if cells is None:
            return None
        points = [scene.start] + cells + [scene.goal]
        return prune_path(points, scene.obstacles, margin=0.2)

    path = attempt(_virtual_wall(scene, style))
    if path is None:
        path = attempt([])  # forced side infeasible; fall back
    if path is None:
        raise InfeasibleSceneError("infeasible: no grid path from start to goal")
    return walk_path(path, speed=EXPERT_SPEED, dt=0.2)


def expert_demos(
    scene: Scene,
    style: str = "auto",
    seed: int = 0,
    obs_cfg: ObsConfig | None = None,
    horizon: int = 5,
) -> list:
    """Replay the expert through the simulator, harvesting training records.

    Each record pairs the observation at time t with the next `horizon`
    positions expressed in the robot frame at time t.  Records with a nearly
    stationary future endpoint are dropped.  The replay must arrive without
    collisions, otherwise the scene (or planner) is at fault and we fail loud.
    """
    if scene.pedestrians:
        raise InfeasibleSceneError("demo generation requires pedestrian-free scenes")
    obs_cfg = obs_cfg or ObsConfig()
    positions = plan_expert_path(scene, style, np.random.default_rng(seed))

    env = NavEnv(scene, RewardConfig(max_steps=10000), obs_cfg)
    obs = env.reset()
    records = []
    for t in range(len(positions) - 1):
        state = env.state
        heading, pos = state.heading, state.position.copy()
        future = positions[t + 1 : t + 1 + horizon]
        while len(future) < horizon:
            future = future + [positions[-1]]
        rel = np.stack([rotation(-heading) @ (np.asarray(p) - pos) for p in future])
        if np.linalg.norm(rel[-1]) >= MIN_ENDPOINT:
            records.append(
                DemoRecord(rasters=obs.rasters.copy(), goal=obs.goal.copy(), traj=rel)
            )
        action = rotation(-heading) @ (positions[t + 1] - pos)
        obs, _, done, info = env.step(action)
        if info["collision"]:
            raise InfeasibleSceneError("expert replay collided; planner clearance violated")
        if done:
            break
    if env.state.done_reason != "arrived":
        raise InfeasibleSceneError(f"expert replay failed to arrive ({env.state.done_reason})")
    return records


# ---------------------------------------------------------------------------
# demo file I/O


def save_demos(path, records, meta: dict | None = None):
    """Header: magic, version, meta length + JSON, k/size/horizon/count."""
    if not records:
        raise ValueError("refusing to write an empty demo file")
    k, size = records[0].rasters.shape[0], records[0].rasters.shape[1]
    horizon = records[0].traj.shape[0]
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DEMO_MAGIC)
        fh.write(struct.pack("<II", DEMO_VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<IIII", k, size, horizon, len(records)))
        for rec in records:
            if rec.rasters.shape != (k, size, size) or rec.traj.shape != (horizon, 2):
                raise ValueError("inconsistent record shapes")
            fh.write(rec.rasters.astype("<f4").tobytes())
            fh.write(rec.goal.astype("<f4").tobytes())
            fh.write(rec.traj.astype("<f4").tobytes())


def load_demos(path, with_meta: bool = False):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != DEMO_MAGIC:
        raise ValueError("not a demo file (bad magic)")
    version, meta_len = struct.unpack("<II", data[8:16])
    if version != DEMO_VERSION:
        raise ValueError(f"unsupported demo file version {version}")
    off = 16
    meta = json.loads(data[off : off + meta_len].decode()) if meta_len else {}
    off += meta_len
    k, size, horizon, count = struct.unpack("<IIII", data[off : off + 16])
    off += 16
    rec_floats = k * size * size + 2 + horizon * 2
    need = off + count * rec_floats * 4
    if len(data) < need:
        raise ValueError("truncated demo file")
    flat = np.frombuffer(data[off:need], dtype="<f4").astype(np.float64)
    records = []
    for i in range(count):
        row = flat[i * rec_floats : (i + 1) * rec_floats]
        r = row[: k * size * size].reshape(k, size, size)
        g = row[k * size * size : k * size * size + 2]
        t = row[k * size * size + 2 :].reshape(horizon, 2)
        records.append(DemoRecord(rasters=r, goal=g, traj=t))
    if with_meta:
        return records, meta
    return records
