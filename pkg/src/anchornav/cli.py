"""Command-line entry point wiring the full workflow.

Subcommands: gen-scenes, gen-demos, pretrain, finetune, sft, eval,
gradcheck, version.  Configuration comes from built-in defaults, an
optional JSON config file, and command-line flags, in that order (flags
win).  Every run writes a manifest recording the command, the resolved
config digest, the seeds used, and the package version, so artifacts can
be regenerated byte-for-byte.

Environment overrides: ANCHORNAV_OUT sets the default output location;
ANCHORNAV_THREADS caps BLAS/OpenMP thread counts (read before numpy loads).
"""

import os

_threads = os.environ.get("ANCHORNAV_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, load_config
from .evalsuite import (
    GoalSeekPolicy,
    ModelPolicy,
    SuiteSpec,
    ZeroPolicy,
    emit_report,
    evaluate,
    minade_probe,
    metrics,
    run_suite,
)
from .expert import expert_demos, load_demos, save_demos
from .model import ModelConfig, PolicyModel
from .training import PpoConfig, finetune, pretrain, sft_baseline
from .world import TASKS, generate_scene, load_scenes, save_scenes

VERSION_STRING = f"anchornav-{__version__}"


def _default_out() -> str:
    return os.environ.get("ANCHORNAV_OUT", ".")


def _resolve(args, extra: dict | None = None) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return apply_overrides(cfg, overrides)


def _artifact_meta(cfg: RunConfig, stage: str, seeds, **extra) -> dict:
    meta = {
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "stage": stage,
        "seeds": seeds,
        "version": VERSION_STRING,
    }
    meta.update(extra)
    return meta


def _write_manifest(target_path, command: str, cfg: RunConfig, seeds):
    if os.path.isdir(target_path):
        mpath = os.path.join(target_path, "manifest.json")
    else:
        base, _ = os.path.splitext(target_path)
        mpath = base + ".manifest.json"
    manifest = {
        "command": command,
        "config_digest": cfg.digest(),
        "seeds": seeds,
        "version": VERSION_STRING,
    }
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return mpath


def _verify_meta(meta: dict, what: str):
    """Recompute the digest of an artifact's embedded config and compare."""
    if "config" not in meta or "config_digest" not in meta:
        raise RuntimeError(f"{what} carries no embedded config to verify")
    recomputed = RunConfig.from_dict(meta["config"]).digest()
    if recomputed != meta["config_digest"]:
        raise RuntimeError(
            f"digest mismatch in {what}: stored {meta['config_digest'][:12]}, recomputed {recomputed[:12]}"
        )


def _scene_sampler(tasks, bounds: float = 30.0):
    tasks = list(tasks)

    def sampler(seed: int):
        if len(tasks) == 1:
            task = tasks[0]
        else:
            task = tasks[int(np.random.default_rng(seed).integers(len(tasks)))]
        return generate_scene(task, seed=seed, bounds=bounds)

    return sampler


def _model_from_checkpoint(path, verify: bool = False) -> tuple:
    ckpt = load_checkpoint(path)
    if verify:
        _verify_meta(ckpt.meta, f"checkpoint {path}")
    mcfg_dict = ckpt.meta.get("config", {}).get("model")
    if mcfg_dict is None:
        raise RuntimeError(f"checkpoint {path} has no embedded model config")
    model = PolicyModel(ModelConfig(**mcfg_dict), seed=0)
    if any(name.startswith("ram.") for name in ckpt.params):
        model.attach_ram()
    missing = model.load_state_arrays(ckpt.params)
    if missing:
        raise RuntimeError(f"checkpoint {path} missing parameters: {missing[:3]}")
    model.rho_fixed_zero = bool(ckpt.meta.get("rho_fixed_zero", False))
    return model, ckpt


def _log_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args) -> int:
    cfg = _resolve(args)
    rng = np.random.default_rng(cfg.seed)
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=args.count)]
    scenes = [generate_scene(args.task, seed=s) for s in seeds]
    meta = _artifact_meta(cfg, "gen-scenes", seeds, task=args.task)
    save_scenes(args.out, scenes, meta=meta)
    _write_manifest(args.out, "gen-scenes", cfg, seeds)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_gen_demos(args) -> int:
    overrides = {}
    if args.horizon is not None:
        overrides["model.horizon"] = args.horizon
    cfg = _resolve(args, overrides)
    if args.scenes:
        scenes, scene_meta = load_scenes(args.scenes, with_meta=True)
        if args.verify and scene_meta:
            _verify_meta(scene_meta, f"scene file {args.scenes}")
        seeds = [s.seed for s in scenes]
    else:
        rng = np.random.default_rng(cfg.seed)
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=args.count)]
        scenes = [generate_scene(args.task, seed=s) for s in seeds]
    records = []
    skipped = 0
    for i, scene in enumerate(scenes):
        try:
            records.extend(
                expert_demos(
                    scene,
                    args.style,
                    seed=cfg.seed + i,
                    obs_cfg=cfg.obs_cfg(),
                    horizon=cfg.model.horizon,
                )
            )
        except (RuntimeError, ValueError):
            skipped += 1
    if not records:
        raise RuntimeError("no demonstrations produced (every scene failed)")
    meta = _artifact_meta(cfg, "gen-demos", seeds, style=args.style)
    save_demos(args.out, records, meta=meta)
    _write_manifest(args.out, "gen-demos", cfg, seeds)
    print(f"wrote {len(records)} records from {len(scenes) - skipped} scenes to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    overrides = {}
    for flag, path in (
        ("epochs", "pretrain.epochs"),
        ("batch_size", "pretrain.batch_size"),
        ("lr", "pretrain.lr"),
        ("anchors", "model.n_modes"),
    ):
        overrides[path] = getattr(args, flag)
    cfg = _resolve(args, overrides)
    records, demo_meta = load_demos(args.demos, with_meta=True)
    if args.verify and demo_meta:
        _verify_meta(demo_meta, f"demo file {args.demos}")
    os.makedirs(args.out, exist_ok=True)
    model = PolicyModel(cfg.model, seed=cfg.seed)
    history = pretrain(
        model,
        records,
        epochs=cfg.pretrain.epochs,
        batch_size=cfg.pretrain.batch_size,
        lr=cfg.pretrain.lr,
        cosine_period=cfg.pretrain.cosine_period,
        seed=cfg.seed,
        log_hook=lambda rec: print(
            f"epoch {rec['epoch']:3d} loss {rec['loss']:.4f} nll {rec['nll']:.4f} lr {rec['lr']:.2e}"
        ),
    )
    meta = _artifact_meta(cfg, "pretrain", {"seed": cfg.seed}, rho_fixed_zero=False)
    ckpt_path = os.path.join(args.out, "ckpt.bin")
    save_checkpoint(ckpt_path, model.params, model.pretrain_partition(), meta=meta)
    _log_jsonl(os.path.join(args.out, "log.jsonl"), history)
    _write_manifest(args.out, "pretrain", cfg, {"seed": cfg.seed})
    print(f"pretrained {cfg.pretrain.epochs} epochs on {len(records)} records -> {ckpt_path}")
    return 0


def cmd_finetune(args) -> int:
    overrides = {}
    for flag, path in (
        ("envs", "ppo.n_envs"),
        ("clip", "ppo.clip"),
        ("gamma", "ppo.gamma"),
        ("lam", "ppo.lam"),
        ("lr", "ppo.lr"),
        ("minibatch", "ppo.minibatch"),
        ("ppo_horizon", "ppo.horizon"),
    ):
        overrides[path] = getattr(args, flag)
    cfg = _resolve(args, overrides)
    model, ckpt = _model_from_checkpoint(args.ckpt, verify=args.verify)
    cfg.model = model.config  # the loaded weights define the architecture
    os.makedirs(args.out, exist_ok=True)
    tasks = args.tasks.split(",")
    sampler = _scene_sampler(tasks)
    curves = {"Full": ([], [])}

    def probe(env_steps: int, m: PolicyModel):
        spec = SuiteSpec(task=tasks[0], n_scenes=args.probe_scenes, seed=cfg.seed + 9999)
        results, _ = run_suite(ModelPolicy(m), spec, obs_cfg=cfg.obs_cfg())
        sr = metrics(results)["SR"]
        curves["Full"][0].append(env_steps)
        curves["Full"][1].append(sr)
        print(f"probe @ {env_steps} steps: SR {sr:.3f}")

    if args.probe_every:
        probe(0, model)
    history = finetune(
        model,
        sampler,
        cfg.ppo,
        total_steps=args.steps,
        seed=cfg.seed,
        reward_cfg=cfg.reward,
        obs_cfg=cfg.obs_cfg(),
        snapshot_every=args.probe_every,
        snapshot_hook=probe if args.probe_every else None,
        log_hook=lambda rec: print(
            f"update {rec['update']:3d} reward {rec['mean_reward']:.4f} "
            f"kl {rec['approx_kl']:.5f} clip {rec['clip_fraction']:.3f} lr {rec['lr']:.2e}"
        ),
    )
    meta = _artifact_meta(
        cfg, "finetune", {"seed": cfg.seed}, rho_fixed_zero=True,
        base_checkpoint=os.path.basename(args.ckpt),
    )
    ckpt_path = os.path.join(args.out, "ckpt.bin")
    save_checkpoint(ckpt_path, model.params, model.finetune_partition(), meta=meta)
    _log_jsonl(os.path.join(args.out, "log.jsonl"), history)
    if args.probe_every:
        with open(os.path.join(args.out, "curves.json"), "w") as f:
            json.dump(curves, f, sort_keys=True)
            f.write("\n")
    _write_manifest(args.out, "finetune", cfg, {"seed": cfg.seed})
    print(f"fine-tuned {args.steps} env steps -> {ckpt_path}")
    return 0


def cmd_sft(args) -> int:
    overrides = {}
    if args.epochs is not None:
        overrides["pretrain.epochs"] = args.epochs
    if args.lr is not None:
        overrides["pretrain.lr"] = args.lr
    cfg = _resolve(args, overrides)
    model, ckpt = _model_from_checkpoint(args.ckpt, verify=args.verify)
    cfg.model = model.config
    os.makedirs(args.out, exist_ok=True)
    sampler = _scene_sampler(args.tasks.split(","))
    history, n_clean, n_records = sft_baseline(
        model,
        sampler,
        n_episodes=args.episodes,
        epochs=cfg.pretrain.epochs,
        lr=cfg.pretrain.lr,
        seed=cfg.seed,
        reward_cfg=cfg.reward,
        obs_cfg=cfg.obs_cfg(),
        log_hook=lambda rec: print(f"epoch {rec['epoch']:3d} loss {rec['loss']:.4f}"),
    )
    meta = _artifact_meta(
        cfg, "sft", {"seed": cfg.seed}, rho_fixed_zero=model.rho_fixed_zero,
        base_checkpoint=os.path.basename(args.ckpt), clean_episodes=n_clean,
    )
    ckpt_path = os.path.join(args.out, "ckpt.bin")
    save_checkpoint(ckpt_path, model.params, model.pretrain_partition(), meta=meta)
    _log_jsonl(os.path.join(args.out, "log.jsonl"), history)
    _write_manifest(args.out, "sft", cfg, {"seed": cfg.seed})
    print(f"sft: {n_clean} clean episodes, {n_records} records -> {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    overrides = {
        "suite.n_scenes": args.scenes,
        "suite.episodes_per_scene": args.episodes_per_scene,
    }
    if args.tasks is not None:
        overrides["suite.tasks"] = args.tasks.split(",")
    cfg = _resolve(args, overrides)
    if args.policy == "zero":
        policy, label, digest = ZeroPolicy(), "zero", cfg.digest()
    elif args.policy == "oracle":
        policy, label, digest = GoalSeekPolicy(), "oracle", cfg.digest()
    else:
        if not args.ckpt:
            raise RuntimeError("eval needs --ckpt unless --policy zero|oracle is given")
        model, ckpt = _model_from_checkpoint(args.ckpt, verify=args.verify)
        cfg.model = model.config
        policy = ModelPolicy(model, stochastic=args.stochastic, seed=cfg.seed)
        label = args.label or ckpt.meta.get("stage", "model")
        digest = ckpt.config_digest or cfg.digest()
    specs = [
        SuiteSpec(
            task=t,
            n_scenes=cfg.suite.n_scenes,
            seed=cfg.seed + i,
            episodes_per_scene=cfg.suite.episodes_per_scene,
        )
        for i, t in enumerate(cfg.suite.tasks)
    ]
    report = evaluate(
        policy,
        specs,
        label=label,
        stochastic=args.stochastic,
        config_digest=digest,
        obs_cfg=cfg.obs_cfg(),
    )
    if args.minade:
        if args.policy != "model":
            raise RuntimeError("--minade needs a model checkpoint")
        probe_records = load_demos(args.minade)
        report.min_ade = minade_probe(model, probe_records)
    curves = None
    if args.curves:
        with open(args.curves) as f:
            curves = json.load(f)
    os.makedirs(args.out, exist_ok=True)
    paths = emit_report(report, args.out, curves=curves)
    _write_manifest(args.out, "eval", cfg, {t: report.seeds[t] for t in report.seeds})
    per_task = report.per_task()
    for task in report.tasks():
        m = per_task[task]
        print(f"{task}: SR {m['SR']:.3f} RC {m['RC']:.3f} CT {m['CT']:.3f} SPL {m['SPL']:.3f}")
    print(f"report files: {', '.join(sorted(paths.values()))}")
    return 0


def cmd_gradcheck(args) -> int:
    from .mixture import batch_entropy_lower_bound, nll_loss, reg_loss
    from .training import RolloutBatch, ppo_losses

    rng = np.random.default_rng(args.seed)
    mcfg = ModelConfig(token_dim=16, n_layers=1, n_heads=2, ff_dim=32, n_modes=3, horizon=3)
    model = PolicyModel(mcfg, seed=args.seed)
    model.attach_ram()
    # finite differences need healthy conditioning: larger weights than the
    # training init, a live adapter path, and dense rasters
    for name, p in model.params.items():
        if name.split(".")[-1].startswith("w") or name == "pos":
            if name.startswith("ram.") and ".z_" in name:
                p.data = rng.normal(0.0, 0.05, size=p.data.shape)
            else:
                p.data *= 10.0
    b = 4
    rasters = rng.random((b, mcfg.context_k, 32, 32))
    goals = rng.normal(size=(b, 2))
    traj = rng.normal(size=(b, mcfg.horizon, 2))
    traj /= np.linalg.norm(traj[:, -1, :], axis=-1)[:, None, None]
    modes = np.array([0, 1, 2, 0])
    v_gt = rng.uniform(0.5, 1.5, size=b)

    probes = sorted(
        name
        for name in model.params
        if name in {
            "heads.mu.w", "heads.sigma.b", "heads.score.w", "heads.vel.b",
            "enc.0.attn.wq", "dec.0.ff.w1", "ram.0.z_out.w", "ram.0.clone.attn.wq",
            "value.w2", "frame.out.w", "goal.w", "pos",
        }
    )
    tensors = [model.params[n] for n in probes]
    for t in tensors:
        t.requires_grad = True

    def bc_closure():
        mix, _ = model.forward(rasters, goals)
        return nll_loss(mix, traj, modes) + reg_loss(mix, v_gt, modes)

    out = model.act_batch(rasters, goals, rng=rng)
    batch = RolloutBatch(
        rasters=rasters, goals=goals, w=out["w"], logp=out["logp"] + 0.05,
        values=out["value"], advantages=rng.normal(size=b), returns=rng.normal(size=b),
    )
    pcfg = PpoConfig(minibatch=b)

    def ppo_closure():
        total, _ = ppo_losses(model, batch, np.arange(b), pcfg)
        return total

    def entropy_closure():
        mix, _ = model.forward(rasters, goals)
        return batch_entropy_lower_bound(mix)

    worst = 0.0
    for name, closure in (("bc", bc_closure), ("ppo", ppo_closure), ("entropy", entropy_closure)):
        err = ad.grad_check(closure, tensors, eps=1e-4)
        worst = max(worst, err)
        print(f"gradcheck {name}: max rel err {err:.3e} over {len(probes)} tensors")
    if worst > 1e-4:
        print(f"gradcheck FAILED: {worst:.3e} > 1e-4")
        return 1
    print("gradcheck passed")
    return 0


def cmd_version(_args) -> int:
    print(VERSION_STRING)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchornav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--verify", action="store_true", help="check embedded config digests")

    sp = sub.add_parser("gen-scenes", help="generate evaluation scenes")
    common(sp)
    sp.add_argument("--task", choices=TASKS, required=True)
    sp.add_argument("--count", type=int, default=50)
    sp.add_argument("--out", default=os.path.join(_default_out(), "scenes.txt"))
    sp.set_defaults(fn=cmd_gen_scenes)

    sp = sub.add_parser("gen-demos", help="generate expert demonstrations")
    common(sp)
    sp.add_argument("--task", choices=TASKS, default="obstacle")
    sp.add_argument("--count", type=int, default=50, help="scene count when --scenes absent")
    sp.add_argument("--scenes", help="existing scene file to demonstrate in")
    sp.add_argument("--style", choices=("auto", "left", "right"), default="auto")
    sp.add_argument("--horizon", type=int, default=None)
    sp.add_argument("--out", default=os.path.join(_default_out(), "demos.bin"))
    sp.set_defaults(fn=cmd_gen_demos)

    sp = sub.add_parser("pretrain", help="behavior-clone on demonstrations")
    common(sp)
    sp.add_argument("--demos", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--anchors", type=int, default=None, help="mixture mode count")
    sp.add_argument("--out", default=os.path.join(_default_out(), "pretrain"))
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="PPO through the residual adapter")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--steps", type=int, default=150000, help="environment step budget")
    sp.add_argument("--envs", type=int, default=None)
    sp.add_argument("--clip", type=float, default=None)
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--lam", type=float, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--minibatch", type=int, default=None)
    sp.add_argument("--ppo-horizon", dest="ppo_horizon", type=int, default=None)
    sp.add_argument("--tasks", default="obstacle")
    sp.add_argument("--probe-every", dest="probe_every", type=int, default=0,
                    help="evaluate SR every N updates for the budget curve")
    sp.add_argument("--probe-scenes", dest="probe_scenes", type=int, default=12)
    sp.add_argument("--out", default=os.path.join(_default_out(), "finetune"))
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("sft", help="rollout-filtered supervised fine-tune")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--episodes", type=int, default=200)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--tasks", default="obstacle")
    sp.add_argument("--out", default=os.path.join(_default_out(), "sft"))
    sp.set_defaults(fn=cmd_sft)

    sp = sub.add_parser("eval", help="run the closed-loop suites")
    common(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--policy", choices=("model", "zero", "oracle"), default="model")
    sp.add_argument("--tasks", default=None, help="comma list, default from config")
    sp.add_argument("--scenes", type=int, default=None)
    sp.add_argument("--episodes-per-scene", dest="episodes_per_scene", type=int, default=None)
    sp.add_argument("--stochastic", action="store_true")
    sp.add_argument("--label", default=None)
    sp.add_argument("--minade", help="demo file for the open-loop minADE probe")
    sp.add_argument("--curves", help="JSON budget curves to render into the report plot")
    sp.add_argument("--out", default=os.path.join(_default_out(), "eval"))
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("version", help="print the version string")
    sp.set_defaults(fn=cmd_version)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line, machine-parseable failure report
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
