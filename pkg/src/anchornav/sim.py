"""Point-robot navigation environment at 5 Hz with parallel batches.

The robot is a 0.3 m disc driven by relative waypoints in its own frame.
Each step clips the commanded displacement, advances pedestrians with
boundary reflection, debounces collisions (one count per contact episode),
and pays the shaped reward: alignment with the goal direction, an effort
penalty on displacement, and one-shot terminal bonuses.

Two termination regimes exist: training ends an episode at the first
collision; evaluation tolerates collisions and ends at the third (matching
the "< 3 collisions" success rule) or at timeout/arrival.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import ROBOT_RADIUS, Scene, goal_in_robot_frame, render_raster, rotation


@dataclass
class RewardConfig:
    w_vel: float = 0.1
    w_dis: float = 0.01
    r_arrive: float = 10.0
    r_collision: float = -10.0
    arrive_radius: float = 0.5
    max_steps: int = 200
    dt: float = 0.2
    step_cap: float = 1.0  # max displacement per step, meters
    collision_terminates: bool = True  # training regime; False = eval regime
    max_collisions: int = 3  # eval regime: episode ends at the third

    def __post_init__(self):
        if not (self.r_arrive > 0.0 > self.r_collision):
            raise ValueError("need r_arrive > 0 > r_collision")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")


@dataclass
class ObsConfig:
    k: int = 5
    size: int = 32
    window: float = 8.0


@dataclass
class Observation:
    rasters: np.ndarray  # (k, size, size) in {0, 1}, oldest first
    goal: np.ndarray  # (2,) goal in robot frame, meters


@dataclass
class EnvState:
    position: np.ndarray
    heading: float
    step_index: int = 0
    collision_count: int = 0
    in_contact: bool = False
    ped_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ped_velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    done: bool = False
    done_reason: str = ""


class NavEnv:
    """Single environment over one scene."""

    def __init__(
        self,
        scene: Scene,
        reward_cfg: RewardConfig | None = None,
        obs_cfg: ObsConfig | None = None,
    ):
        self.scene = scene
        self.cfg = reward_cfg or RewardConfig()
        self.obs_cfg = obs_cfg or ObsConfig()
        self.state: EnvState | None = None
        self._history: list = []
        self.path_length = 0.0
        self.min_goal_distance = np.inf

    # ------------------------------------------------------------------

    def _all_discs(self):
        discs = [(d.center, d.radius) for d in self.scene.obstacles]
        st = self.state
        for i in range(st.ped_positions.shape[0]):
            discs.append((st.ped_positions[i], self._ped_radii[i]))
        return discs

    def _overlapping(self, pos) -> bool:
        for center, radius in self._all_discs():
            if np.linalg.norm(pos - center) < radius + ROBOT_RADIUS:
                return True
        return False

    def _render(self) -> np.ndarray:
        st = self.state
        return render_raster(
            self._all_discs(), st.position, st.heading, self.obs_cfg.size, self.obs_cfg.window
        )

    def _observation(self) -> Observation:
        st = self.state
        return Observation(
            rasters=np.stack(self._history, axis=0),
            goal=goal_in_robot_frame(self.scene.goal, st.position, st.heading),
        )

    def reset(self) -> Observation:
        scene = self.scene
        to_goal = scene.goal - scene.start
        heading = float(np.arctan2(to_goal[1], to_goal[0]))
        self.state = EnvState(
            position=scene.start.astype(np.float64).copy(),
            heading=heading,
            ped_positions=np.array([p.position for p in scene.pedestrians]).reshape(-1, 2),
            ped_velocities=np.array([p.velocity for p in scene.pedestrians]).reshape(-1, 2),
        )
        self._ped_radii = np.array([p.radius for p in scene.pedestrians])
        self.path_length = 0.0
        self.min_goal_distance = float(np.linalg.norm(to_goal))
        first = self._render()
        self._history = [first.copy() for _ in range(self.obs_cfg.k)]
        return self._observation()

    def step(self, action):
        """Advance one control step with a robot-frame relative waypoint."""
        st = self.state
        if st is None:
            raise RuntimeError("reset the environment before stepping")
        if st.done:
            raise RuntimeError("episode is done; reset before stepping")
        action = np.asarray(action, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        cfg = self.cfg

        disp = rotation(st.heading) @ action
        norm = float(np.linalg.norm(disp))
        if norm > cfg.step_cap:
            disp = disp * (cfg.step_cap / norm)
            norm = cfg.step_cap

        old_pos = st.position.copy()
        new_pos = np.clip(old_pos + disp, 0.0, self.scene.bounds)
        actual = new_pos - old_pos
        actual_norm = float(np.linalg.norm(actual))
        if actual_norm > 1e-9:
            st.heading = float(np.arctan2(actual[1], actual[0]))
        st.position = new_pos
        self.path_length += actual_norm

        # pedestrians advance with boundary reflection (speed preserved)
        if st.ped_positions.shape[0]:
            p = st.ped_positions + st.ped_velocities * cfg.dt
            for axis in (0, 1):
                low = self._ped_radii
                high = self.scene.bounds - self._ped_radii
                under = p[:, axis] < low
                over = p[:, axis] > high
                p[under, axis] = 2.0 * low[under] - p[under, axis]
                p[over, axis] = 2.0 * high[over] - p[over, axis]
                st.ped_velocities[under | over, axis] *= -1.0
            st.ped_positions = p

        overlapping = self._overlapping(st.position)
        new_collision = overlapping and not st.in_contact
        st.in_contact = overlapping
        if new_collision:
            st.collision_count += 1

        goal_vec = self.scene.goal - old_pos
        goal_dist_before = float(np.linalg.norm(goal_vec))
        if actual_norm > 1e-9 and goal_dist_before > 1e-9:
            r_vel = self.cfg.w_vel * float(actual @ goal_vec) / (actual_norm * goal_dist_before)
        else:
            r_vel = 0.0
        r_dis = -cfg.w_dis * actual_norm

        goal_dist = float(np.linalg.norm(self.scene.goal - st.position))
        self.min_goal_distance = min(self.min_goal_distance, goal_dist)
        arrived = goal_dist < cfg.arrive_radius

        reward = r_vel + r_dis
        if arrived:
            reward += cfg.r_arrive
        if new_collision and st.collision_count == 1:
            # terminal penalty is paid once per episode even when the eval
            # regime lets the episode continue
            reward += cfg.r_collision

        st.step_index += 1
        if arrived:
            st.done, st.done_reason = True, "arrived"
        elif overlapping and cfg.collision_terminates:
            st.done, st.done_reason = True, "collision"
        elif st.collision_count >= cfg.max_collisions and not cfg.collision_terminates:
            st.done, st.done_reason = True, "collision"
        elif st.step_index >= cfg.max_steps:
            st.done, st.done_reason = True, "timeout"

        self._history.pop(0)
        self._history.append(self._render())
        obs = self._observation()
        info = {
            "collision": new_collision,
            "collision_count": st.collision_count,
            "goal_distance": goal_dist,
        }
        return obs, float(reward), st.done, info

    # episode metrics used by the evaluator
    def episode_stats(self) -> dict:
        st = self.state
        d0 = float(np.linalg.norm(self.scene.goal - self.scene.start))
        return {
            "arrived": st.done_reason == "arrived",
            "collisions": st.collision_count,
            "steps": st.step_index,
            "final_distance": float(np.linalg.norm(self.scene.goal - st.position)),
            "initial_distance": d0,
            "min_distance": self.min_goal_distance,
            "path_length": self.path_length,
            "done_reason": st.done_reason,
        }


def stack_observations(observations) -> dict:
    return {
        "rasters": np.stack([o.rasters for o in observations], axis=0),
        "goals": np.stack([o.goal for o in observations], axis=0),
    }


class BatchEnv:
    """N independent environments with auto-reset.

    Each environment owns a seed stream (spawned from one root seed), so
    results for environment i do not depend on how many siblings run beside
    it.  On done, `info` carries the terminal observation and episode stats,
    and the returned observation comes from the freshly reset episode.
    """

    def __init__(
        self,
        scene_sampler,
        n_envs: int,
        reward_cfg: RewardConfig | None = None,
        obs_cfg: ObsConfig | None = None,
        seed: int = 0,
    ):
        if n_envs < 1:
            raise ValueError("need at least one environment")
        self.scene_sampler = scene_sampler
        self.n_envs = n_envs
        self.reward_cfg = reward_cfg or RewardConfig()
        self.obs_cfg = obs_cfg or ObsConfig()
        children = np.random.SeedSequence(seed).spawn(n_envs)
        self._seed_rngs = [np.random.default_rng(c) for c in children]
        self.envs = [None] * n_envs

    def _fresh_env(self, i: int) -> NavEnv:
        scene_seed = int(self._seed_rngs[i].integers(0, 2**63 - 1))
        scene = self.scene_sampler(scene_seed)
        return NavEnv(scene, self.reward_cfg, self.obs_cfg)

    def reset(self) -> dict:
        obs = []
        for i in range(self.n_envs):
            self.envs[i] = self._fresh_env(i)
            obs.append(self.envs[i].reset())
        return stack_observations(obs)

    def step(self, actions) -> tuple:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, 2):
            raise ValueError(f"expected actions ({self.n_envs}, 2), got {actions.shape}")
        observations, rewards, dones, infos = [], np.zeros(self.n_envs), np.zeros(self.n_envs, dtype=bool), []
        for i, env in enumerate(self.envs):
            obs, reward, done, info = env.step(actions[i])
            rewards[i] = reward
            dones[i] = done
            if done:
                info = dict(info)
                info["final_observation"] = obs
                info["episode"] = env.episode_stats()
                info["done_reason"] = env.state.done_reason
                self.envs[i] = self._fresh_env(i)
                obs = self.envs[i].reset()
            observations.append(obs)
            infos.append(info)
        return stack_observations(observations), rewards, dones, infos
