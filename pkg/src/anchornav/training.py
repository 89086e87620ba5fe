"""Training stages: behavior cloning, PPO through the residual adapter, SFT.

Behavior cloning assigns each demo to its closest anchor (by endpoint
direction) and minimizes trajectory NLL plus velocity regression with AdamW
under a cosine schedule.  Fine-tuning freezes the base network, attaches the
residual adapter, reinitializes the stddev head, fixes rho to zero, and runs
clipped-objective PPO with GAE over parallel simulator batches.  The SFT
baseline rolls out the cloned policy, keeps only collision-free episodes,
and re-runs behavior cloning on the survivors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .expert import DemoRecord
from .mixture import (
    assign_modes,
    batch_entropy_lower_bound,
    batch_log_density,
    nll_loss,
    reg_loss,
)
from .model import PolicyModel
from .optim import AdamW, AdaptiveKlSchedule, CosineSchedule, clip_grad_norm
from .sim import BatchEnv, NavEnv, ObsConfig, RewardConfig, rotation
from .world import Scene


# ---------------------------------------------------------------------------
# behavior cloning


@dataclass
class DemoArrays:
    rasters: np.ndarray  # (N, k, S, S)
    goals: np.ndarray  # (N, 2)
    normalized: np.ndarray  # (N, T, 2)
    v_gt: np.ndarray  # (N,)
    modes: np.ndarray  # (N,) assigned anchor indices

    def __len__(self):
        return self.rasters.shape[0]


def prepare_demos(records, anchors: np.ndarray) -> DemoArrays:
    if not records:
        raise ValueError("empty demo set")
    rasters = np.stack([r.rasters for r in records])
    goals = np.stack([r.goal for r in records])
    traj = np.stack([r.traj for r in records])
    v_gt = np.linalg.norm(traj[:, -1, :], axis=-1)
    if np.any(v_gt <= 1e-6):
        raise ValueError("stationary trajectory in demo set; filter upstream")
    normalized = traj / v_gt[:, None, None]
    modes = assign_modes(anchors, normalized)
    return DemoArrays(rasters, goals, normalized, v_gt, modes)


def bc_loss(model: PolicyModel, data: DemoArrays, idx: np.ndarray):
    """NLL + velocity regression on one minibatch; returns (loss, parts)."""
    batch, _ = model.forward(data.rasters[idx], data.goals[idx])
    nll = nll_loss(batch, data.normalized[idx], data.modes[idx])
    reg = reg_loss(batch, data.v_gt[idx], data.modes[idx])
    return nll + reg, float(nll.data), float(reg.data)


def pretrain(
    model: PolicyModel,
    records,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 2e-4,
    cosine_period: int = 20,
    seed: int = 0,
    log_hook=None,
) -> list:
    """Behavior-clone the model on demo records; returns per-epoch log."""
    if records and records[0].traj.shape[0] != model.config.horizon:
        raise ValueError(
            f"demo horizon {records[0].traj.shape[0]} does not match model horizon {model.config.horizon}"
        )
    data = prepare_demos(records, model.anchors)
    partition = model.pretrain_partition()
    model.apply_partition(partition)
    opt = AdamW(model.params, partition, lr=lr)
    sched = CosineSchedule(lr, period=cosine_period)
    rng = np.random.default_rng(seed)
    n = len(data)
    history = []
    for epoch in range(epochs):
        opt.lr = sched.lr_at(epoch)
        perm = rng.permutation(n)
        losses, nlls, regs = [], [], []
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            loss, nll_v, reg_v = bc_loss(model, data, idx)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            nlls.append(nll_v)
            regs.append(reg_v)
        rec = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "nll": float(np.mean(nlls)),
            "reg": float(np.mean(regs)),
            "lr": opt.lr,
        }
        history.append(rec)
        if log_hook:
            log_hook(rec)
    return history


# ---------------------------------------------------------------------------
# generalized advantage estimation


def gae(rewards, values, dones, gamma: float, lam: float, next_values=None):
    """Advantages and return targets, episode-aware.

    Time-major arrays (T, N).  ``next_values[t]`` is the bootstrap value of
    the successor state: 0 where the episode truly ended (arrival/collision),
    V(terminal observation) on timeout, V(s_{t+1}) otherwise.  Omitting it
    bootstraps terminals with 0 and is only correct when every row ends an
    episode.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if next_values is None:
        next_values = np.zeros_like(rewards)
    horizon = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(horizon - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        running = delta + gamma * lam * (1.0 - dones[t]) * running
        adv[t] = running
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    flat = adv.reshape(-1)
    if flat.size < 2:
        return adv - flat.mean()
    return (adv - flat.mean()) / (flat.std() + 1e-8)


# ---------------------------------------------------------------------------
# PPO


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    c_ent: float = 0.001
    c_val: float = 2.0
    horizon: int = 32
    minibatch: int = 256
    epochs: int = 4
    grad_clip: float = 1.5
    lr: float = 1e-5
    kl_threshold: float = 0.01
    n_envs: int = 16
    adaptive_lr: bool = True
    lr_min: float = 1e-7  # adaptive schedule clamp
    lr_max: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if not self.lr_min <= self.lr <= self.lr_max:
            raise ValueError("need lr_min <= lr <= lr_max")


@dataclass
class RolloutBatch:
    rasters: np.ndarray  # (B, k, S, S)
    goals: np.ndarray  # (B, 2)
    w: np.ndarray  # (B, 2) sampled normalized waypoints
    logp: np.ndarray  # (B,) behavior log-probs
    values: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,)

    def __len__(self):
        return self.rasters.shape[0]


def ppo_losses(model: PolicyModel, batch: RolloutBatch, idx, cfg: PpoConfig):
    """Clipped surrogate + entropy bonus + value loss on one minibatch.

    Returns (total loss Tensor, metrics dict).  The total is minimized, so
    the surrogate and entropy enter with negative sign.
    """
    mix, value = model.forward(batch.rasters[idx], batch.goals[idx])
    logp_new = batch_log_density(mix, ad.tensor(batch.w[idx]), t=0)
    ratio = ad.exp(logp_new - batch.logp[idx])
    adv = batch.advantages[idx]
    surr = ad.minimum(ratio * adv, ad.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv)
    policy_loss = -ad.tmean(surr)
    entropy = batch_entropy_lower_bound(mix)
    verr = value - batch.returns[idx]
    value_loss = ad.tmean(verr * verr)
    total = policy_loss - cfg.c_ent * entropy + cfg.c_val * value_loss
    metrics = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "approx_kl": float(np.mean(batch.logp[idx] - logp_new.data)),
        "clip_fraction": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip)),
    }
    return total, metrics


def ppo_update(model: PolicyModel, opt: AdamW, batch: RolloutBatch, cfg: PpoConfig, rng) -> dict:
    """Several epochs of minibatch updates over one rollout batch."""
    n = len(batch)
    agg = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            idx = perm[lo : lo + cfg.minibatch]
            if idx.size < 2:
                continue
            try:
                total, metrics = ppo_losses(model, batch, idx, cfg)
                opt.zero_grad()
                ad.backward(total)
            except ad.NonFiniteError as exc:
                raise RuntimeError(f"ppo update aborted on non-finite loss: {exc}") from exc
            clip_grad_norm(model.params, opt.partition.adaptable, cfg.grad_clip)
            opt.step()
            agg.append(metrics)
    keys = agg[0].keys()
    return {k: float(np.mean([m[k] for m in agg])) for k in keys}


def collect_rollout(model: PolicyModel, benv: BatchEnv, obs: dict, cfg: PpoConfig, rng):
    """Run the policy for cfg.horizon steps across all envs.

    Returns (RolloutBatch, next obs dict, episode stat dicts).  Timeout
    terminals bootstrap from the value of the terminal observation; true
    terminals bootstrap zero.
    """
    n = benv.n_envs
    horizon = cfg.horizon
    k, s = benv.obs_cfg.k, benv.obs_cfg.size
    rasters = np.zeros((horizon, n, k, s, s))
    goals = np.zeros((horizon, n, 2))
    ws = np.zeros((horizon, n, 2))
    logps = np.zeros((horizon, n))
    values = np.zeros((horizon, n))
    rewards = np.zeros((horizon, n))
    dones = np.zeros((horizon, n))
    timeout_boot = np.zeros((horizon, n))
    episodes = []

    for t in range(horizon):
        rasters[t] = obs["rasters"]
        goals[t] = obs["goals"]
        out = model.act_batch(obs["rasters"], obs["goals"], rng=rng)
        ws[t] = out["w"]
        logps[t] = out["logp"]
        values[t] = out["value"]
        obs, rew, done, infos = benv.step(out["action"])
        rewards[t] = rew
        dones[t] = done.astype(np.float64)
        for i, info in enumerate(infos):
            if done[i]:
                episodes.append(info["episode"])
                if info["done_reason"] == "timeout":
                    fin = info["final_observation"]
                    with ad.no_grad():
                        _, v_fin = model.forward(fin.rasters[None], fin.goal[None])
                    timeout_boot[t, i] = float(v_fin.data[0])

    with ad.no_grad():
        _, last_v = model.forward(obs["rasters"], obs["goals"])
    next_values = np.zeros((horizon, n))
    for t in range(horizon):
        nxt = values[t + 1] if t + 1 < horizon else last_v.data
        next_values[t] = np.where(dones[t] > 0, timeout_boot[t], nxt)

    adv, ret = gae(rewards, values, dones, cfg.gamma, cfg.lam, next_values)
    adv = normalize_advantages(adv)
    flat = lambda a: a.reshape((horizon * n,) + a.shape[2:])
    batch = RolloutBatch(
        rasters=flat(rasters),
        goals=flat(goals),
        w=flat(ws),
        logp=flat(logps),
        values=flat(values),
        advantages=flat(adv),
        returns=flat(ret),
    )
    return batch, obs, episodes, float(rewards.mean())


def configure_for_finetune(model: PolicyModel):
    """Attach the adapter, reset exploration, freeze the base."""
    if not model.has_ram:
        model.attach_ram()
    model.reinit_logstd()
    model.rho_fixed_zero = True
    partition = model.finetune_partition()
    model.apply_partition(partition)
    return partition


def finetune(
    model: PolicyModel,
    scene_sampler,
    cfg: PpoConfig,
    total_steps: int,
    seed: int = 0,
    reward_cfg: RewardConfig | None = None,
    obs_cfg: ObsConfig | None = None,
    snapshot_every: int = 0,
    snapshot_hook=None,
    log_hook=None,
) -> list:
    """PPO fine-tuning loop; returns the per-update metrics log."""
    partition = configure_for_finetune(model)
    opt = AdamW(model.params, partition, lr=cfg.lr)
    sched = (
        AdaptiveKlSchedule(cfg.lr, cfg.kl_threshold, min_lr=cfg.lr_min, max_lr=cfg.lr_max)
        if cfg.adaptive_lr
        else None
    )
    reward_cfg = reward_cfg or RewardConfig(collision_terminates=True)
    obs_cfg = obs_cfg or ObsConfig(
        k=model.config.context_k, size=model.config.raster_size
    )
    benv = BatchEnv(scene_sampler, cfg.n_envs, reward_cfg, obs_cfg, seed=seed)
    obs = benv.reset()
    rng = np.random.default_rng(seed + 1)

    steps_per_update = cfg.n_envs * cfg.horizon
    n_updates = max(1, total_steps // steps_per_update)
    history = []
    for update in range(n_updates):
        batch, obs, episodes, mean_reward = collect_rollout(model, benv, obs, cfg, rng)
        metrics = ppo_update(model, opt, batch, cfg, rng)
        if sched is not None:
            opt.lr = sched.update(metrics["approx_kl"])
        rec = {
            "update": update,
            "env_steps": (update + 1) * steps_per_update,
            "mean_reward": mean_reward,
            "episodes": len(episodes),
            "arrive_rate": float(np.mean([e["arrived"] for e in episodes])) if episodes else 0.0,
            "mean_collisions": float(np.mean([e["collisions"] for e in episodes])) if episodes else 0.0,
            "lr": opt.lr,
            **metrics,
        }
        history.append(rec)
        if log_hook:
            log_hook(rec)
        if snapshot_hook and snapshot_every and (update + 1) % snapshot_every == 0:
            snapshot_hook(rec["env_steps"], model)
    return history


# ---------------------------------------------------------------------------
# SFT baseline


def filter_clean_episodes(episodes) -> list:
    """Keep only episodes with zero collisions (the SFT data rule)."""
    return [ep for ep in episodes if ep["collisions"] == 0]


def rollout_episodes(
    model: PolicyModel,
    scene_sampler,
    n_episodes: int,
    seed: int = 0,
    reward_cfg: RewardConfig | None = None,
    obs_cfg: ObsConfig | None = None,
    deterministic: bool = False,
):
    """Play full episodes, recording observations and world positions."""
    reward_cfg = reward_cfg or RewardConfig(collision_terminates=True)
    obs_cfg = obs_cfg or ObsConfig(k=model.config.context_k, size=model.config.raster_size)
    seed_rng = np.random.default_rng(seed)
    act_rng = np.random.default_rng(seed + 1)
    episodes = []
    for _ in range(n_episodes):
        scene = scene_sampler(int(seed_rng.integers(0, 2**63 - 1)))
        env = NavEnv(scene, reward_cfg, obs_cfg)
        obs = env.reset()
        observations, positions, headings = [], [env.state.position.copy()], []
        done = False
        while not done:
            observations.append(obs)
            headings.append(env.state.heading)
            out = model.act_batch(
                obs.rasters[None], obs.goal[None], rng=act_rng, deterministic=deterministic
            )
            obs, _, done, info = env.step(out["action"][0])
            positions.append(env.state.position.copy())
        stats = env.episode_stats()
        episodes.append(
            {
                "observations": observations,
                "positions": positions,
                "headings": headings,
                "collisions": stats["collisions"],
                "arrived": stats["arrived"],
                "done_reason": stats["done_reason"],
            }
        )
    return episodes


def episodes_to_records(episodes, horizon: int, min_endpoint: float = 0.2) -> list:
    """Convert surviving rollouts to demo records (same layout as the expert)."""
    records = []
    for ep in episodes:
        positions = ep["positions"]
        for t, obs in enumerate(ep["observations"]):
            pos = positions[t]
            heading = ep["headings"][t]
            future = positions[t + 1 : t + 1 + horizon]
            if not future:
                continue
            while len(future) < horizon:
                future = future + [positions[-1]]
            rel = np.stack([rotation(-heading) @ (np.asarray(p) - pos) for p in future])
            if np.linalg.norm(rel[-1]) >= min_endpoint:
                records.append(DemoRecord(rasters=obs.rasters.copy(), goal=obs.goal.copy(), traj=rel))
    return records


def sft_baseline(
    model: PolicyModel,
    scene_sampler,
    n_episodes: int = 200,
    epochs: int = 10,
    lr: float = 1e-4,
    seed: int = 0,
    reward_cfg: RewardConfig | None = None,
    obs_cfg: ObsConfig | None = None,
    log_hook=None,
):
    """Rollout-filter-retrain; returns (history, n_clean, n_records)."""
    episodes = rollout_episodes(
        model, scene_sampler, n_episodes, seed=seed, reward_cfg=reward_cfg, obs_cfg=obs_cfg
    )
    clean = filter_clean_episodes(episodes)
    if not clean:
        raise RuntimeError("no clean episodes: every rollout collided")
    records = episodes_to_records(clean, model.config.horizon)
    if not records:
        raise RuntimeError("no clean episodes produced usable records")
    history = pretrain(model, records, epochs=epochs, lr=lr, seed=seed + 7, log_hook=log_hook)
    return history, len(clean), len(records)
