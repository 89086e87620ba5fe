"""Anchor-query transformer policy with a residual-adapter fine-tuning path.

Observation frames and the goal become k+1 context tokens, refined by a
self-attention encoder.  Anchor direction embeddings query that context
through cross-attention decoder blocks and feed the mixture heads.  For
fine-tuning, each decoder block gains a residual adapter: a trainable clone
of the block bracketed by two zero-initialized linear maps, so the adapted
model starts out bitwise identical to the pretrained one while the base
stays frozen.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mixture import MixtureBatch, sample_anchors
from .optim import ParameterPartition

# frame encoder channel widths (patch stage 1, patch stage 2)
_C1 = 16
_C2 = 32


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 256
    context_k: int = 5
    horizon: int = 5
    n_modes: int = 8
    raster_size: int = 32

    def __post_init__(self):
        if self.token_dim % self.n_heads != 0:
            raise ValueError("token_dim must be divisible by n_heads")
        if self.context_k < 1 or self.horizon < 1 or self.n_modes < 1:
            raise ValueError("context_k, horizon, n_modes must all be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.raster_size % 8 != 0:
            raise ValueError("raster_size must be divisible by 8")

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(token_dim=768, n_layers=4, n_heads=8, ff_dim=3072)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def head_shapes(self) -> dict:
        m, t = self.n_modes, self.horizon
        return {
            "context": [self.context_k + 1, self.token_dim],
            "anchors": [m, self.token_dim],
            "trajectory": [[m, t, 2], [m, t, 2]],
            "score": [m, 1],
            "velocity": [m, 1],
        }


def _init_linear(rng, shape, scale=0.02):
    return rng.normal(0.0, scale, size=shape)


class PolicyModel:
    """Mixture policy network over a flat name->Tensor parameter store."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.anchors = sample_anchors(config.n_modes)
        self.has_ram = False
        self.rho_fixed_zero = False
        self.params: dict = {}
        self._build(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # construction

    def _add(self, name: str, array: np.ndarray, requires_grad=True):
        self.params[name] = ad.tensor(np.asarray(array, dtype=np.float64), requires_grad=requires_grad)

    def _build(self, rng):
        cfg = self.config
        d = cfg.token_dim
        n2 = (cfg.raster_size // 8) ** 2

        self._add("frame.p1.w", _init_linear(rng, (16, _C1)))
        self._add("frame.p1.b", np.zeros(_C1))
        self._add("frame.p2.w", _init_linear(rng, (4 * _C1, _C2)))
        self._add("frame.p2.b", np.zeros(_C2))
        self._add("frame.out.w", _init_linear(rng, (n2 * _C2, d)))
        self._add("frame.out.b", np.zeros(d))
        self._add("goal.w", _init_linear(rng, (2, d)))
        self._add("goal.b", np.zeros(d))
        self._add("anchor.w", _init_linear(rng, (2, d)))
        self._add("anchor.b", np.zeros(d))
        self._add("pos", _init_linear(rng, (cfg.context_k + 1, d)))

        for l in range(cfg.n_layers):
            self._add_block(rng, f"enc.{l}")
            self._add_block(rng, f"dec.{l}")

        t2 = cfg.horizon * 2
        self._add("heads.mu.w", _init_linear(rng, (d, t2)))
        self._add("heads.mu.b", np.zeros(t2))
        self._add("heads.sigma.w", _init_linear(rng, (d, t2)))
        self._add("heads.sigma.b", np.zeros(t2))
        self._add("heads.rho.w", np.zeros((d, 1)))
        self._add("heads.rho.b", np.zeros(1))
        self._add("heads.score.w", _init_linear(rng, (d, 1)))
        self._add("heads.score.b", np.zeros(1))
        self._add("heads.vel.w", _init_linear(rng, (d, 1)))
        self._add("heads.vel.b", np.zeros(1))

        self._add("value.w1", _init_linear(rng, (d, d)))
        self._add("value.b1", np.zeros(d))
        self._add("value.w2", _init_linear(rng, (d, 1)))
        self._add("value.b2", np.zeros(1))

    def _add_block(self, rng, prefix: str):
        d, ff = self.config.token_dim, self.config.ff_dim
        self._add(f"{prefix}.ln1.g", np.ones(d))
        self._add(f"{prefix}.ln1.b", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.attn.{name}", _init_linear(rng, (d, d)))
        for name in ("bq", "bk", "bv", "bo"):
            self._add(f"{prefix}.attn.{name}", np.zeros(d))
        self._add(f"{prefix}.ln2.g", np.ones(d))
        self._add(f"{prefix}.ln2.b", np.zeros(d))
        self._add(f"{prefix}.ff.w1", _init_linear(rng, (d, ff)))
        self._add(f"{prefix}.ff.b1", np.zeros(ff))
        self._add(f"{prefix}.ff.w2", _init_linear(rng, (ff, d)))
        self._add(f"{prefix}.ff.b2", np.zeros(d))

    def attach_ram(self):
        """Clone every decoder block and bracket it with zero linear maps.

        The clone starts as a copy of the (to-be-frozen) base block; z_in and
        z_out start exactly zero, so attaching changes no output.
        """
        if self.has_ram:
            raise RuntimeError("residual adapter already attached")
        d = self.config.token_dim
        for l in range(self.config.n_layers):
            base = f"dec.{l}."
            for name in [n for n in self.params if n.startswith(base)]:
                suffix = name[len(base):]
                self._add(f"ram.{l}.clone.{suffix}", self.params[name].data.copy())
            self._add(f"ram.{l}.z_in.w", np.zeros((d, d)))
            self._add(f"ram.{l}.z_in.b", np.zeros(d))
            self._add(f"ram.{l}.z_out.w", np.zeros((d, d)))
            self._add(f"ram.{l}.z_out.b", np.zeros(d))
        self.has_ram = True

    def reinit_logstd(self):
        """Zero the stddev output map so sigma restarts at softplus(0)."""
        self.params["heads.sigma.w"].data[...] = 0.0
        self.params["heads.sigma.b"].data[...] = 0.0

    # ------------------------------------------------------------------
    # partitions

    def pretrain_partition(self) -> ParameterPartition:
        adaptable = {n for n in self.params if not n.startswith("value.")}
        return ParameterPartition.split(self.params.keys(), adaptable)

    def finetune_partition(self) -> ParameterPartition:
        if not self.has_ram:
            raise RuntimeError("attach the residual adapter before fine-tuning")
        adaptable = {
            n
            for n in self.params
            if n.startswith("ram.") or n.startswith("value.") or n.startswith("heads.sigma.")
        }
        return ParameterPartition.split(self.params.keys(), adaptable)

    def apply_partition(self, partition: ParameterPartition):
        """Stop the tape at frozen parameters entirely."""
        partition.validate_covers(self.params.keys())
        for n, p in self.params.items():
            p.requires_grad = n in partition.adaptable
            p.grad = None

    # ------------------------------------------------------------------
    # forward pieces

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x, w: str, b: str) -> Tensor:
        return ad.matmul(x, self._p(w)) + self._p(b)

    def _ln(self, x, prefix: str) -> Tensor:
        return ad.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def _mha(self, prefix: str, xq: Tensor, xkv: Tensor) -> Tensor:
        d = self.config.token_dim
        h = self.config.n_heads
        dh = d // h
        q = self._linear(xq, f"{prefix}.wq", f"{prefix}.bq")
        k = self._linear(xkv, f"{prefix}.wk", f"{prefix}.bk")
        v = self._linear(xkv, f"{prefix}.wv", f"{prefix}.bv")
        b, lq, s = q.shape[0], q.shape[1], k.shape[1]
        q = ad.transpose(ad.reshape(q, (b, lq, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, s, h, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, s, h, dh)), (0, 2, 1, 3))
        o = ad.attention(q, k, v)
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, lq, d))
        return self._linear(o, f"{prefix}.wo", f"{prefix}.bo")

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        h = ad.gelu(self._linear(x, f"{prefix}.ff.w1", f"{prefix}.ff.b1"))
        return self._linear(h, f"{prefix}.ff.w2", f"{prefix}.ff.b2")

    def _encoder_layer(self, l: int, x: Tensor) -> Tensor:
        pre = f"enc.{l}"
        h = self._ln(x, f"{pre}.ln1")
        x = x + self._mha(f"{pre}.attn", h, h)
        x = x + self._ff(pre, self._ln(x, f"{pre}.ln2"))
        return x

    def _decoder_block(self, prefix: str, y: Tensor, ctx: Tensor) -> Tensor:
        y = y + self._mha(f"{prefix}.attn", self._ln(y, f"{prefix}.ln1"), ctx)
        y = y + self._ff(prefix, self._ln(y, f"{prefix}.ln2"))
        return y

    # ------------------------------------------------------------------
    # public forward API

    def tokenize(self, rasters: np.ndarray, goals: np.ndarray):
        """(B,k,H,W) rasters and (B,2) goals -> context (B,k+1,D), anchors (B,M,D)."""
        cfg = self.config
        rasters = np.asarray(rasters, dtype=np.float64)
        goals = np.asarray(goals, dtype=np.float64)
        if rasters.ndim != 4 or rasters.shape[1] != cfg.context_k:
            raise ValueError(f"expected rasters (B,{cfg.context_k},H,W), got {rasters.shape}")
        hh, ww = rasters.shape[2], rasters.shape[3]
        if hh != cfg.raster_size or ww != cfg.raster_size:
            raise ValueError(f"raster size {hh}x{ww} does not match config {cfg.raster_size}")
        b = rasters.shape[0]
        bk = b * cfg.context_k
        g1 = cfg.raster_size // 4

        # stage 1: 4x4 patches -> tokens (constant data, so numpy is fine here)
        p = rasters.reshape(bk, g1, 4, g1, 4).transpose(0, 1, 3, 2, 4).reshape(bk, g1 * g1, 16)
        t1 = ad.gelu(self._linear(ad.tensor(p), "frame.p1.w", "frame.p1.b"))
        # stage 2: merge 2x2 patch neighborhoods
        g2 = g1 // 2
        t1 = ad.reshape(t1, (bk, g2, 2, g2, 2, _C1))
        t1 = ad.transpose(t1, (0, 1, 3, 2, 4, 5))
        t1 = ad.reshape(t1, (bk, g2 * g2, 4 * _C1))
        t2 = ad.gelu(self._linear(t1, "frame.p2.w", "frame.p2.b"))
        flat = ad.reshape(t2, (bk, g2 * g2 * _C2))
        frame_tokens = ad.reshape(
            self._linear(flat, "frame.out.w", "frame.out.b"), (b, cfg.context_k, cfg.token_dim)
        )

        goal_tok = ad.reshape(self._linear(ad.tensor(goals), "goal.w", "goal.b"), (b, 1, cfg.token_dim))
        context = ad.concatenate([frame_tokens, goal_tok], axis=1)

        anchor_tok = self._linear(ad.tensor(self.anchors), "anchor.w", "anchor.b")  # (M, D)
        anchor_tok = ad.reshape(anchor_tok, (1, cfg.n_modes, cfg.token_dim))
        anchor_tok = anchor_tok + ad.tensor(np.zeros((b, 1, 1)))  # tile over batch
        return context, anchor_tok

    def encode_context(self, tokens: Tensor) -> Tensor:
        if tokens.shape[1] != self.config.context_k + 1:
            raise ValueError(f"expected {self.config.context_k + 1} context tokens, got {tokens.shape[1]}")
        x = tokens + self._p("pos")
        for l in range(self.config.n_layers):
            x = self._encoder_layer(l, x)
        return x

    def decode_anchors(self, f_p: Tensor, ctx: Tensor, ram: bool | None = None) -> Tensor:
        if ram is None:
            ram = self.has_ram
        if ram and not self.has_ram:
            raise RuntimeError("residual adapter requested but not attached")
        y = f_p
        for l in range(self.config.n_layers):
            y = self._decoder_block(f"dec.{l}", y, ctx)
            if ram:
                z = self._linear(y, f"ram.{l}.z_in.w", f"ram.{l}.z_in.b")
                c = self._decoder_block(f"ram.{l}.clone", z, ctx)
                y = y + self._linear(c, f"ram.{l}.z_out.w", f"ram.{l}.z_out.b")
        return y

    def mixture_heads(self, f_p: Tensor) -> MixtureBatch:
        cfg = self.config
        b = f_p.shape[0]
        m, t = cfg.n_modes, cfg.horizon
        mu = ad.reshape(self._linear(f_p, "heads.mu.w", "heads.mu.b"), (b, m, t, 2))
        sigma_raw = ad.reshape(self._linear(f_p, "heads.sigma.w", "heads.sigma.b"), (b, m, t, 2))
        sigma = ad.softplus(sigma_raw) + 1e-4
        if self.rho_fixed_zero:
            rho = ad.tensor(np.zeros((b, m)))
        else:
            rho = ad.tanh(ad.reshape(self._linear(f_p, "heads.rho.w", "heads.rho.b"), (b, m))) * 0.99
        logits = ad.reshape(self._linear(f_p, "heads.score.w", "heads.score.b"), (b, m))
        scores = ad.softmax(logits, axis=-1)
        log_scores = logits - ad.log_sum_exp(logits, axis=-1, keepdims=True)
        vel = ad.softplus(ad.reshape(self._linear(f_p, "heads.vel.w", "heads.vel.b"), (b, m))) + 1e-6
        return MixtureBatch(mu=mu, sigma=sigma, rho=rho, scores=scores, log_scores=log_scores, vel=vel)

    def value(self, ctx: Tensor) -> Tensor:
        pooled = ad.mean_pool(ctx, axis=1)  # (B, D)
        h = ad.gelu(self._linear(pooled, "value.w1", "value.b1"))
        out = self._linear(h, "value.w2", "value.b2")
        return ad.reshape(out, (out.shape[0],))

    def forward(self, rasters, goals, ram: bool | None = None):
        """Full pass: (MixtureBatch, value estimates (B,))."""
        context, anchor_tok = self.tokenize(rasters, goals)
        ctx = self.encode_context(context)
        f_p = self.decode_anchors(anchor_tok, ctx, ram=ram)
        return self.mixture_heads(f_p), self.value(ctx)

    # ------------------------------------------------------------------
    # rollout helpers

    def act_batch(self, rasters, goals, rng=None, deterministic=False, ram=None):
        """Sample (or argmax) actions for a batch of observations.

        Returns a dict of numpy arrays: mode, w (normalized waypoint), logp,
        value, vel (selected mode's scale), action (w * vel, meters).
        """
        from .mixture import batch_log_density

        with ad.no_grad():
            batch, value = self.forward(rasters, goals, ram=ram)
        b = batch.batch_size
        if deterministic:
            modes = np.argmax(batch.scores.data, axis=-1)
        else:
            cdf = np.cumsum(batch.scores.data, axis=-1)
            draws = rng.random(b)
            modes = np.minimum(
                np.array([np.searchsorted(cdf[i], draws[i], side="right") for i in range(b)]),
                batch.n_modes - 1,
            ).astype(np.int64)
        rows = np.arange(b)
        mu1 = batch.mu.data[rows, modes, 0]  # (B, 2)
        if deterministic:
            ws = mu1.copy()
        else:
            ws = mu1 + batch.sigma.data[rows, modes, 0] * rng.standard_normal((b, 2))
        vels = batch.vel.data[rows, modes].copy()
        with ad.no_grad():
            logps = batch_log_density(batch, ad.tensor(ws), t=0).data.copy()
        return {
            "mode": modes,
            "w": ws,
            "logp": logps,
            "value": value.data.copy(),
            "vel": vels,
            "action": ws * vels[:, None],
        }

    # ------------------------------------------------------------------
    # state I/O

    def state_arrays(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> list:
        """Copy matching parameters in; return names left at fresh values.

        A checkpoint saved before the adapter existed loads cleanly into an
        adapter-equipped model (the adapter keeps its fresh zero/clone state).
        Unknown names or shape mismatches are errors.
        """
        unexpected = sorted(set(arrays) - set(self.params))
        if unexpected:
            raise ValueError(f"checkpoint has unknown parameters: {unexpected[:3]}")
        missing = []
        for name, p in self.params.items():
            if name in arrays:
                arr = np.asarray(arrays[name], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {p.data.shape}")
                p.data = arr.copy()
            else:
                missing.append(name)
        return missing
