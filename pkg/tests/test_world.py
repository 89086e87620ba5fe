"""Scenes, planner grid, rasterization, serialization."""

import heapq

import numpy as np
import pytest

from anchornav.world import (
    GRID_CELL,
    ROBOT_RADIUS,
    TASKS,
    Disc,
    Pedestrian,
    PlannerGrid,
    Scene,
    generate_scene,
    goal_in_robot_frame,
    load_scenes,
    prune_path,
    render_raster,
    rotation,
    save_scenes,
    walk_path,
    _segment_clear,
)


# ---------------------------------------------------------------------------
# geometry helpers


def test_rotation_properties():
    for theta in (0.0, 0.7, -2.1, np.pi / 2):
        r = rotation(theta)
        assert np.allclose(r @ r.T, np.eye(2), atol=1e-12)
        assert np.isclose(np.linalg.det(r), 1.0)
    assert np.allclose(rotation(np.pi / 2) @ [1.0, 0.0], [0.0, 1.0], atol=1e-12)


def test_goal_in_robot_frame_oracle():
    goal = np.array([3.0, 4.0])
    pos = np.array([1.0, 1.0])
    h = 0.6
    expect = rotation(-h) @ (goal - pos)
    assert np.allclose(goal_in_robot_frame(goal, pos, h), expect, atol=1e-12)
    # goal dead ahead maps to (+d, 0)
    ahead = pos + 2.0 * np.array([np.cos(h), np.sin(h)])
    assert np.allclose(goal_in_robot_frame(ahead, pos, h), [2.0, 0.0], atol=1e-12)


# ---------------------------------------------------------------------------
# scene validation and serialization


def test_scene_validate_rejections():
    with pytest.raises(ValueError):
        Scene(start=[0.0, 0.0], goal=[1.0, 0.0]).validate()  # too close
    with pytest.raises(ValueError):
        Scene(start=[0.0, 0.0], goal=[5.0, 0.0], obstacles=[Disc([5.0, 0.0], 1.0)]).validate()
    with pytest.raises(ValueError):
        Scene(start=[0.0, 0.0], goal=[5.0, 0.0], obstacles=[Disc([40.0, 0.0], 1.0)]).validate()
    with pytest.raises(ValueError):
        Scene(
            start=[0.0, 0.0],
            goal=[5.0, 0.0],
            pedestrians=[Pedestrian([2.0, 2.0], [2.0, 0.0])],
        ).validate()


def test_scene_dict_roundtrip():
    scene = generate_scene("both", seed=7)
    back = Scene.from_dict(scene.to_dict())
    assert np.array_equal(back.start, scene.start)
    assert np.array_equal(back.goal, scene.goal)
    assert len(back.obstacles) == len(scene.obstacles)
    for a, b in zip(back.obstacles, scene.obstacles):
        assert np.array_equal(a.center, b.center) and a.radius == b.radius
    for a, b in zip(back.pedestrians, scene.pedestrians):
        assert np.array_equal(a.position, b.position)
        assert np.array_equal(a.velocity, b.velocity)
    assert back.task == "both" and back.seed == scene.seed


def test_scene_file_roundtrip(tmp_path):
    scenes = [generate_scene("obstacle", seed=s) for s in (1, 2, 3)]
    path = tmp_path / "scenes.jsonl"
    save_scenes(path, scenes, meta={"task": "obstacle", "note": 1})
    loaded, meta = load_scenes(path, with_meta=True)
    assert meta == {"task": "obstacle", "note": 1}
    assert len(loaded) == 3
    for a, b in zip(loaded, scenes):
        assert a.to_dict() == b.to_dict()
    # meta line is ignored by the plain loader
    assert len(load_scenes(path)) == 3


def test_scene_file_without_meta(tmp_path):
    path = tmp_path / "scenes.jsonl"
    save_scenes(path, [generate_scene("empty", seed=4)])
    loaded, meta = load_scenes(path, with_meta=True)
    assert meta is None and len(loaded) == 1


# ---------------------------------------------------------------------------
# scene generation


def test_generate_scene_deterministic():
    a = generate_scene("both", seed=123)
    b = generate_scene("both", seed=123)
    assert a.to_dict() == b.to_dict()


def test_generate_scene_task_contents():
    empty = generate_scene("empty", seed=0)
    assert not empty.obstacles and not empty.pedestrians
    obst = generate_scene("obstacle", seed=0)
    assert 6 <= len(obst.obstacles) <= 12 and not obst.pedestrians
    ped = generate_scene("pedestrian", seed=0)
    assert not ped.obstacles and 2 <= len(ped.pedestrians) <= 5
    both = generate_scene("both", seed=0)
    assert both.obstacles and both.pedestrians
    for task in TASKS:
        scene = generate_scene(task, seed=5)
        assert np.linalg.norm(scene.goal - scene.start) >= 10.0 or task == "symmetric"
        scene.validate()


def test_generate_scene_unknown_task():
    with pytest.raises(ValueError):
        generate_scene("maze", seed=0)


def test_obstacle_scene_has_planner_path():
    for seed in range(5):
        scene = generate_scene("obstacle", seed=seed)
        grid = PlannerGrid(scene.obstacles, scene.bounds)
        assert grid.has_path(scene.start, scene.goal)


def test_symmetric_scene_layout():
    for seed in range(5):
        scene = generate_scene("symmetric", seed=seed)
        assert len(scene.obstacles) == 1 and not scene.pedestrians
        disc = scene.obstacles[0]
        assert np.isclose(scene.start[1], scene.goal[1])  # horizontal corridor
        mid = 0.5 * (scene.start + scene.goal)
        assert np.allclose(disc.center, mid, atol=1e-9)  # blocker on the line


# ---------------------------------------------------------------------------
# planner


def dijkstra_cost(occ, s, g):
    """Reference shortest-path cost with the same 8-connected corner rule."""
    n = occ.shape[0]
    if occ[s] or occ[g]:
        return None
    dist = {s: 0.0}
    heap = [(0.0, s)]
    seen = set()
    while heap:
        d, cur = heapq.heappop(heap)
        if cur == g:
            return d
        if cur in seen:
            continue
        seen.add(cur)
        ci, cj = cur
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                ni, nj = ci + di, cj + dj
                if not (0 <= ni < n and 0 <= nj < n) or occ[ni, nj]:
                    continue
                if di != 0 and dj != 0:
                    if occ[ci + di, cj] or occ[ci, cj + dj]:
                        continue
                    w = np.sqrt(2.0)
                else:
                    w = 1.0
                nd = d + w
                if nd < dist.get((ni, nj), np.inf):
                    dist[(ni, nj)] = nd
                    heapq.heappush(heap, (nd, (ni, nj)))
    return None


def path_cost(grid, path):
    idx = [grid.index(p) for p in path]
    cost = 0.0
    for a, b in zip(idx[:-1], idx[1:]):
        di, dj = abs(a[0] - b[0]), abs(a[1] - b[1])
        assert max(di, dj) == 1  # single-cell moves only
        cost += np.sqrt(2.0) if di and dj else 1.0
    return cost


@pytest.mark.parametrize("seed", range(8))
def test_astar_matches_dijkstra(seed):
    rng = np.random.default_rng(seed)
    discs = [Disc(rng.uniform(1.0, 9.0, 2), rng.uniform(0.3, 0.9)) for _ in range(4)]
    grid = PlannerGrid(discs, bounds=10.0)
    start, goal = np.array([0.5, 0.5]), np.array([9.5, 9.5])
    path = grid.plan(start, goal)
    ref = dijkstra_cost(grid.occupied, grid.index(start), grid.index(goal))
    if path is None:
        assert ref is None
    else:
        assert np.isclose(path_cost(grid, path), ref, atol=1e-9)
        assert grid.index(path[0]) == grid.index(start)
        assert grid.index(path[-1]) == grid.index(goal)
        for p in path:
            assert not grid.occupied[grid.index(p)]


def test_astar_blocked_wall():
    # wall of discs across the middle leaves no route
    discs = [Disc([x, 5.0], 1.2) for x in np.linspace(0.0, 10.0, 6)]
    grid = PlannerGrid(discs, bounds=10.0)
    assert not grid.has_path([5.0, 1.0], [5.0, 9.0])


def test_astar_empty_grid_diagonal():
    grid = PlannerGrid([], bounds=5.0)
    path = grid.plan([0.25, 0.25], [4.75, 4.75])
    n = grid.n
    assert np.isclose(path_cost(grid, path), (n - 1) * np.sqrt(2.0))


def test_inflation_blocks_near_cells():
    disc = Disc([5.0, 5.0], 1.0)
    grid = PlannerGrid([disc], bounds=10.0)
    assert grid.occupied[grid.index([5.0, 5.0])]
    # cell centers within radius+inflation are occupied
    assert grid.occupied[grid.index([5.0, 6.4])]
    assert not grid.occupied[grid.index([5.0, 8.0])]


# ---------------------------------------------------------------------------
# pruning and walking


def test_prune_straight_line():
    pts = [np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([2.0, 0.0])]
    assert len(prune_path(pts, [])) == 2


def test_prune_keeps_clearance():
    scene = generate_scene("obstacle", seed=11)
    grid = PlannerGrid(scene.obstacles, scene.bounds)
    path = grid.plan(scene.start, scene.goal)
    pruned = prune_path(path, scene.obstacles)
    assert len(pruned) <= len(path)
    for a, b in zip(pruned[:-1], pruned[1:]):
        assert _segment_clear(a, b, scene.obstacles, margin=0.2)
    length = lambda pts: sum(np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:]))
    assert length(pruned) <= length(path) + 1e-9


def test_walk_path_spacing_and_endpoint():
    pts = [np.array([0.0, 0.0]), np.array([3.0, 0.0]), np.array([3.0, 4.0])]
    out = walk_path(pts, speed=1.0, dt=0.2)
    assert np.allclose(out[0], pts[0])
    assert np.allclose(out[-1], pts[-1], atol=1e-9)
    steps = np.array([np.linalg.norm(b - a) for a, b in zip(out[:-2], out[1:-1])])
    assert np.allclose(steps, 0.2, atol=1e-9)  # uniform until the final snap
    total = sum(np.linalg.norm(b - a) for a, b in zip(out[:-1], out[1:]))
    assert np.isclose(total, 7.0, atol=1e-9)


def test_walk_path_stationary():
    out = walk_path([np.zeros(2), np.zeros(2)])
    assert len(out) == 1


# ---------------------------------------------------------------------------
# rasterization


def test_raster_matches_independent_formula():
    rng = np.random.default_rng(3)
    discs = [(rng.uniform(0.0, 8.0, 2), rng.uniform(0.3, 1.5)) for _ in range(4)]
    pos = np.array([1.0, 2.0])
    heading = 0.8
    size, window = 32, 8.0
    got = render_raster(discs, pos, heading, size=size, window=window)
    cell = window / size
    expect = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            local = np.array([(i + 0.5) * cell, -window / 2 + (j + 0.5) * cell])
            world = pos + rotation(heading) @ local
            if any(np.linalg.norm(world - c) <= r for c, r in discs):
                expect[i, j] = 1.0
    assert np.array_equal(got, expect)


def test_raster_orientation():
    # disc dead ahead occupies the lateral middle, far rows
    ahead = render_raster([(np.array([4.0, 0.0]), 1.0)], np.zeros(2), 0.0)
    assert ahead.sum() > 0
    occupied_j = np.where(ahead.any(axis=0))[0]
    assert occupied_j.mean() == pytest.approx(15.5, abs=0.6)  # centered laterally
    # disc to the robot's left occupies only the high-j half
    left = render_raster([(np.array([2.0, 3.0]), 1.0)], np.zeros(2), 0.0)
    assert left.sum() > 0
    assert np.where(left.any(axis=0))[0].min() >= 16
    # behind the robot: invisible
    behind = render_raster([(np.array([-3.0, 0.0]), 1.0)], np.zeros(2), 0.0)
    assert behind.sum() == 0


def test_raster_rotation_equivariance():
    # rotating both the world and the heading leaves the egocentric view fixed
    a = render_raster([(np.array([3.0, 1.0]), 0.8)], np.zeros(2), 0.0)
    rot = rotation(np.pi / 3)
    b = render_raster([(rot @ np.array([3.0, 1.0]), 0.8)], np.zeros(2), np.pi / 3)
    assert np.allclose(a, b)


def test_raster_window_scaling():
    # same disc, doubled window: occupies about a quarter of the cells
    small = render_raster([(np.array([2.0, 0.0]), 1.0)], np.zeros(2), 0.0, window=8.0)
    big = render_raster([(np.array([2.0, 0.0]), 1.0)], np.zeros(2), 0.0, window=16.0)
    assert 2.5 <= small.sum() / big.sum() <= 5.5
