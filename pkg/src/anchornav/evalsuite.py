"""Closed-loop evaluation: task suites, adjudication, metrics, reports.

Episodes run under the tolerant collision regime (ending at the 3rd
collision, arrival, or timeout).  Success means finishing within 1 m of the
goal with fewer than 3 collisions.  Reports are emitted as structured text
(round-trippable), a per-task metric table, a per-episode CSV, and an
optional vector plot of success rate against training budget.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .mixture import min_ade
from .sim import NavEnv, ObsConfig, RewardConfig
from .world import PlannerGrid, Scene, generate_scene, prune_path

SUCCESS_DISTANCE = 1.0
SUCCESS_MAX_COLLISIONS = 3


# ---------------------------------------------------------------------------
# policies


class ModelPolicy:
    """Closed-loop adapter around a trained model."""

    def __init__(self, model, stochastic: bool = False, seed: int = 0):
        self.model = model
        self.stochastic = stochastic
        self.rng = np.random.default_rng(seed) if stochastic else None

    def act(self, rasters: np.ndarray, goals: np.ndarray) -> np.ndarray:
        out = self.model.act_batch(
            rasters, goals, rng=self.rng, deterministic=not self.stochastic
        )
        return out["action"]


class ZeroPolicy:
    """Never moves; the stationary lower bound."""

    def act(self, rasters, goals):
        return np.zeros((rasters.shape[0], 2))


class GoalSeekPolicy:
    """Heads straight for the goal; optimal when nothing is in the way."""

    def act(self, rasters, goals):
        return np.asarray(goals, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# suite definition and adjudication


@dataclass(frozen=True)
class SuiteSpec:
    task: str
    n_scenes: int = 50
    seed: int = 0
    episodes_per_scene: int = 1

    def __post_init__(self):
        if self.n_scenes < 1 or self.episodes_per_scene < 1:
            raise ValueError("suite needs at least one scene and one episode")

    def scene_seeds(self) -> list:
        rng = np.random.default_rng(self.seed)
        return [int(s) for s in rng.integers(0, 2**31 - 1, size=self.n_scenes)]


@dataclass
class EpisodeResult:
    task: str
    scene_seed: int
    episode_index: int
    success: bool
    final_distance: float
    initial_distance: float
    max_progress: float
    collisions: int
    path_length: float
    shortest_path: float
    done_reason: str
    steps: int


def adjudicate(final_distance: float, collisions: int) -> bool:
    return final_distance < SUCCESS_DISTANCE and collisions < SUCCESS_MAX_COLLISIONS


def metrics(results) -> dict:
    """SR / RC / CT / SPL over a non-empty result list."""
    if not results:
        raise ValueError("empty result set")
    succ = np.array([r.success for r in results], dtype=np.float64)
    rc = np.array(
        [np.clip(r.max_progress / r.initial_distance, 0.0, 1.0) for r in results]
    )
    ct = np.array([r.collisions for r in results], dtype=np.float64)
    spl = succ * np.array(
        [r.shortest_path / max(r.path_length, r.shortest_path) for r in results]
    )
    return {
        "SR": float(succ.mean()),
        "RC": float(rc.mean()),
        "CT": float(ct.mean()),
        "SPL": float(spl.mean()),
    }


def shortest_path_length(scene: Scene) -> float:
    """Static-obstacle geodesic via the planner grid, pruned."""
    direct = float(np.linalg.norm(scene.goal - scene.start))
    if not scene.obstacles:
        return direct
    grid = PlannerGrid(scene.obstacles, scene.bounds)
    path = grid.plan(scene.start, scene.goal)
    if path is None:
        return direct
    pts = prune_path([scene.start] + path + [scene.goal], scene.obstacles)
    length = float(sum(np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:])))
    return max(direct, length)


# ---------------------------------------------------------------------------
# suite execution


def eval_reward_config(max_steps: int = 200) -> RewardConfig:
    return RewardConfig(collision_terminates=False, max_steps=max_steps)


def _run_lockstep(policy, scenes, seeds, reward_cfg, obs_cfg, task, episode_index):
    envs = [NavEnv(s, reward_cfg, obs_cfg) for s in scenes]
    observations = [e.reset() for e in envs]
    alive = [i for i in range(len(envs))]
    while alive:
        rasters = np.stack([observations[i].rasters for i in alive])
        goals = np.stack([observations[i].goal for i in alive])
        actions = policy.act(rasters, goals)
        next_alive = []
        for row, i in enumerate(alive):
            obs, _, done, _ = envs[i].step(actions[row])
            observations[i] = obs
            if not done:
                next_alive.append(i)
        alive = next_alive
    results = []
    for i, env in enumerate(envs):
        st = env.episode_stats()
        shortest = shortest_path_length(env.scene)
        results.append(
            EpisodeResult(
                task=task,
                scene_seed=seeds[i],
                episode_index=episode_index,
                success=adjudicate(st["final_distance"], st["collisions"]),
                final_distance=st["final_distance"],
                initial_distance=st["initial_distance"],
                max_progress=st["initial_distance"] - st["min_distance"],
                collisions=st["collisions"],
                path_length=st["path_length"],
                shortest_path=shortest,
                done_reason=st["done_reason"],
                steps=st["steps"],
            )
        )
    return results


def run_suite(
    policy,
    spec: SuiteSpec,
    stochastic: bool = False,
    reward_cfg: RewardConfig | None = None,
    obs_cfg: ObsConfig | None = None,
    max_batch: int = 64,
):
    """Evaluate one task suite; returns (results, scene seeds)."""
    if isinstance(policy, ModelPolicy):
        policy.stochastic = stochastic
        if stochastic and policy.rng is None:
            policy.rng = np.random.default_rng(spec.seed)
    reward_cfg = reward_cfg or eval_reward_config()
    if reward_cfg.collision_terminates:
        raise ValueError("evaluation requires the tolerant collision regime")
    obs_cfg = obs_cfg or ObsConfig()
    seeds = spec.scene_seeds()
    scenes = [generate_scene(spec.task, seed=s) for s in seeds]
    results = []
    for ep in range(spec.episodes_per_scene):
        for lo in range(0, len(scenes), max_batch):
            chunk = scenes[lo : lo + max_batch]
            chunk_seeds = seeds[lo : lo + max_batch]
            results.extend(
                _run_lockstep(policy, chunk, chunk_seeds, reward_cfg, obs_cfg, spec.task, ep)
            )
    return results, seeds


# ---------------------------------------------------------------------------
# reports


@dataclass
class SuiteReport:
    label: str
    stochastic: bool
    config_digest: str
    seeds: dict  # task -> scene seed list
    results: list = field(default_factory=list)  # EpisodeResult
    min_ade: float | None = None

    def tasks(self) -> list:
        seen = []
        for r in self.results:
            if r.task not in seen:
                seen.append(r.task)
        return seen

    def per_task(self) -> dict:
        return {t: metrics([r for r in self.results if r.task == t]) for t in self.tasks()}

    def overall(self) -> dict:
        return metrics(self.results)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "stochastic": self.stochastic,
            "config_digest": self.config_digest,
            "seeds": {k: list(v) for k, v in self.seeds.items()},
            "min_ade": self.min_ade,
            "per_task": self.per_task(),
            "overall": self.overall(),
            "episodes": [asdict(r) for r in self.results],
        }

    @classmethod
    def from_dict(cls, d: dict):
        rep = cls(
            label=d["label"],
            stochastic=d["stochastic"],
            config_digest=d["config_digest"],
            seeds={k: [int(x) for x in v] for k, v in d["seeds"].items()},
            min_ade=d["min_ade"],
        )
        for e in d["episodes"]:
            rep.results.append(EpisodeResult(**e))
        return rep


def evaluate(
    policy,
    specs,
    label: str = "",
    stochastic: bool = False,
    config_digest: str = "",
    reward_cfg: RewardConfig | None = None,
    obs_cfg: ObsConfig | None = None,
) -> SuiteReport:
    """Run several task suites and assemble one report."""
    report = SuiteReport(
        label=label, stochastic=stochastic, config_digest=config_digest, seeds={}
    )
    for spec in specs:
        results, seeds = run_suite(
            policy, spec, stochastic=stochastic, reward_cfg=reward_cfg, obs_cfg=obs_cfg
        )
        report.seeds[spec.task] = seeds
        report.results.extend(results)
    return report


def minade_probe(model, records) -> float:
    """Mean minimum-ADE of the mixture means against demo trajectories (m)."""
    if not records:
        raise ValueError("empty record set")
    import anchornav.autodiff as ad

    rasters = np.stack([r.rasters for r in records])
    goals = np.stack([r.goal for r in records])
    with ad.no_grad():
        mix, _ = model.forward(rasters, goals)
    errs = [min_ade(mix.row(i), records[i].traj) for i in range(len(records))]
    return float(np.mean(errs))


def render_report_text(report: SuiteReport) -> str:
    """Per-task metric table, columns SR / RC / CT, plus an overall row."""
    lines = []
    lines.append(f"policy: {report.label or 'unnamed'}")
    lines.append(f"mode: {'stochastic' if report.stochastic else 'deterministic'}")
    lines.append(f"config digest: {report.config_digest or 'n/a'}")
    if report.min_ade is not None:
        lines.append(f"minADE (m): {report.min_ade:.4f}")
    lines.append("")
    header = f"{'task':<12} {'SR↑':>8} {'RC↑':>8} {'CT↓':>8} {'SPL':>8} {'eps':>6}"
    lines.append(header)
    lines.append("-" * len(header))
    per_task = report.per_task()
    for task in report.tasks():
        m = per_task[task]
        n = sum(1 for r in report.results if r.task == task)
        lines.append(
            f"{task:<12} {m['SR']:>8.3f} {m['RC']:>8.3f} {m['CT']:>8.3f} {m['SPL']:>8.3f} {n:>6d}"
        )
    if len(report.tasks()) > 1:
        m = report.overall()
        lines.append("-" * len(header))
        lines.append(
            f"{'overall':<12} {m['SR']:>8.3f} {m['RC']:>8.3f} {m['CT']:>8.3f} {m['SPL']:>8.3f} {len(report.results):>6d}"
        )
    return "\n".join(lines) + "\n"


def render_report_csv(report: SuiteReport) -> str:
    buf = io.StringIO()
    fields = [
        "task", "scene_seed", "episode_index", "success", "final_distance",
        "initial_distance", "max_progress", "collisions", "path_length",
        "shortest_path", "done_reason", "steps",
    ]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in report.results:
        writer.writerow(asdict(r))
    return buf.getvalue()


def render_budget_plot(curves: dict, path: str, title: str = "success rate vs training budget"):
    """SVG of SR against PPO env steps; singleton curves render as flat lines.

    curves maps a label to (steps list, SR list).
    """
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "anchornav"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        xmax = 1.0
        for steps, srs in curves.values():
            if steps:
                xmax = max(xmax, max(steps))
        for label, (steps, srs) in sorted(curves.items()):
            if len(steps) == 1:
                ax.hlines(srs[0], 0, xmax, linestyles="--", label=label)
            else:
                ax.plot(steps, srs, marker="o", label=label)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("SR")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        ax.legend(loc="lower right")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(report: SuiteReport, out_dir, curves: dict | None = None) -> dict:
    """Write report files into out_dir; returns {format: path}."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    jpath = os.path.join(out_dir, "report.json")
    with open(jpath, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    paths["structured"] = jpath
    tpath = os.path.join(out_dir, "report.txt")
    with open(tpath, "w") as f:
        f.write(render_report_text(report))
    paths["table"] = tpath
    cpath = os.path.join(out_dir, "report.csv")
    with open(cpath, "w") as f:
        f.write(render_report_csv(report))
    paths["csv"] = cpath
    if curves:
        spath = os.path.join(out_dir, "report.svg")
        render_budget_plot(curves, spath)
        paths["plot"] = spath
    return paths


def load_report(path) -> SuiteReport:
    with open(path) as f:
        return SuiteReport.from_dict(json.load(f))
