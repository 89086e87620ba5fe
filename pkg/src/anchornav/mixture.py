"""Anchor-conditioned Gaussian mixture over short-horizon trajectories.

A policy emits, per step, an M-mode mixture: each mode m carries a normalized
waypoint trajectory mu[m] (T x 2), per-waypoint stddevs sigma[m], one
correlation rho[m], a score q[m], and a velocity scale v[m] in meters.  The
executed action is the first horizon waypoint of a sampled mode, scaled by
that mode's velocity.

Two representations coexist: ``MixtureParams`` is a plain-numpy value used in
rollouts and evaluation, and ``MixtureBatch`` bundles batched autodiff
Tensors for training losses.  The math lives on the batched form; the value
form wraps itself in a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2PIE = float(np.log(2.0 * np.pi * np.e))


# ---------------------------------------------------------------------------
# anchors


def sample_anchors(count: int) -> np.ndarray:
    """Unit direction vectors uniformly spanning the forward half-plane.

    Angles are uniformly spaced over [-90, +90] degrees inclusive, measured
    from +x (robot forward).  count=1 gives the single forward direction.
    """
    if count < 1:
        raise ValueError("anchor count must be >= 1")
    if count == 1:
        angles = np.array([0.0])
    else:
        angles = np.linspace(-np.pi / 2.0, np.pi / 2.0, count)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


# ---------------------------------------------------------------------------
# value-level mixture


@dataclass
class MixtureParams:
    """One policy output: M modes over a T-step normalized trajectory."""

    mu: np.ndarray  # (M, T, 2) normalized displacements
    sigma: np.ndarray  # (M, T, 2) positive
    rho: np.ndarray  # (M,) in (-1, 1)
    scores: np.ndarray  # (M,) simplex
    vel: np.ndarray  # (M,) positive, meters

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.vel = np.asarray(self.vel, dtype=np.float64)

    @property
    def n_modes(self) -> int:
        return self.mu.shape[0]

    @property
    def horizon(self) -> int:
        return self.mu.shape[1]

    def validate(self):
        m, t = self.n_modes, self.horizon
        if self.mu.shape != (m, t, 2) or self.sigma.shape != (m, t, 2):
            raise ValueError(f"mu/sigma shapes disagree: {self.mu.shape} vs {self.sigma.shape}")
        if self.rho.shape != (m,) or self.scores.shape != (m,) or self.vel.shape != (m,):
            raise ValueError("per-mode vectors must have shape (M,)")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("non-finite mu")
        if not np.all(self.sigma > 0.0):
            raise ValueError("sigma must be positive")
        if not np.all(np.abs(self.rho) < 1.0):
            raise ValueError("rho must lie in (-1, 1)")
        if not np.all(self.vel > 0.0):
            raise ValueError("vel must be positive")
        if np.any(self.scores < 0.0) or np.any(self.scores > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        if abs(float(self.scores.sum()) - 1.0) > 1e-9:
            raise ValueError(f"scores sum to {self.scores.sum()}, not 1")
        return self


# ---------------------------------------------------------------------------
# tensor-level mixture (batched, differentiable)


@dataclass
class MixtureBatch:
    """Batched mixture heads as Tensors; log_scores kept for stable log-math."""

    mu: Tensor  # (B, M, T, 2)
    sigma: Tensor  # (B, M, T, 2)
    rho: Tensor  # (B, M)
    scores: Tensor  # (B, M)
    log_scores: Tensor  # (B, M)
    vel: Tensor  # (B, M)

    @classmethod
    def from_params(cls, params: MixtureParams) -> "MixtureBatch":
        def t(a):
            return ad.tensor(np.asarray(a)[None, ...])

        safe = np.maximum(params.scores, 1e-300)
        return cls(
            mu=t(params.mu),
            sigma=t(params.sigma),
            rho=t(params.rho),
            scores=t(params.scores),
            log_scores=t(np.log(safe)),
            vel=t(params.vel),
        )

    @property
    def batch_size(self) -> int:
        return self.mu.shape[0]

    @property
    def n_modes(self) -> int:
        return self.mu.shape[1]

    @property
    def horizon(self) -> int:
        return self.mu.shape[2]

    def row(self, i: int) -> MixtureParams:
        """Extract one batch element as a plain-numpy value."""
        return MixtureParams(
            mu=self.mu.data[i].copy(),
            sigma=self.sigma.data[i].copy(),
            rho=self.rho.data[i].copy(),
            scores=self.scores.data[i].copy(),
            vel=self.vel.data[i].copy(),
        )


def _component_log_density(mu_t: Tensor, sigma_t: Tensor, rho: Tensor, w) -> Tensor:
    """Per-mode bivariate normal log density with correlation.

    mu_t, sigma_t: (B, M, 2); rho: (B, M); w: (B, 2) -> (B, M).
    """
    w = ad._as_tensor(w)
    wb = ad.reshape(w, (w.shape[0], 1, 2))
    dx = (wb - mu_t) / sigma_t  # (B, M, 2) standardized
    dxx = ad.tslice(dx, (Ellipsis, 0))
    dyy = ad.tslice(dx, (Ellipsis, 1))
    one_m_r2 = 1.0 - rho * rho
    z = dxx * dxx - rho * (dxx * dyy) * 2.0 + dyy * dyy
    log_sx = ad.log(ad.tslice(sigma_t, (Ellipsis, 0)))
    log_sy = ad.log(ad.tslice(sigma_t, (Ellipsis, 1)))
    return (
        (-LOG_2PI - 0.0)
        - log_sx
        - log_sy
        - ad.log(one_m_r2) * 0.5
        - z / (one_m_r2 * 2.0)
    )


def batch_log_density(batch: MixtureBatch, w, t: int = 0) -> Tensor:
    """log sum_m q_m N(w; mu[m,t], sigma[m,t], rho[m]) per batch row.

    ``t`` is the 0-based horizon index; the executed waypoint is t=0.
    """
    if not 0 <= t < batch.horizon:
        raise ValueError(f"horizon index {t} out of range [0, {batch.horizon})")
    mu_t = ad.tslice(batch.mu, (slice(None), slice(None), t))
    sigma_t = ad.tslice(batch.sigma, (slice(None), slice(None), t))
    comp = _component_log_density(mu_t, sigma_t, batch.rho, w)
    return ad.log_sum_exp(batch.log_scores + comp, axis=-1)


def mixture_log_density(params: MixtureParams, w, t: int = 0) -> float:
    """Value-level mixture log density at one waypoint index."""
    params.validate()
    batch = MixtureBatch.from_params(params)
    w = np.asarray(w, dtype=np.float64).reshape(1, 2)
    with ad.no_grad():
        out = batch_log_density(batch, ad.tensor(w), t=t)
    return float(out.data[0])


# ---------------------------------------------------------------------------
# mode assignment and supervision losses


def assign_mode(anchors: np.ndarray, gt_traj: np.ndarray) -> int:
    """Index of the anchor most aligned (cosine) with the trajectory endpoint.

    Ties break to the lowest index (argmax keeps the first maximum).
    """
    gt_traj = np.asarray(gt_traj, dtype=np.float64)
    endpoint = gt_traj[-1]
    norm = float(np.linalg.norm(endpoint))
    if norm < 1e-9:
        raise ValueError("degenerate trajectory: zero-length endpoint")
    sims = anchors @ (endpoint / norm)
    return int(np.argmax(sims))


def assign_modes(anchors: np.ndarray, gt_batch: np.ndarray) -> np.ndarray:
    """Batched assign_mode over (B, T, 2) trajectories."""
    endpoints = np.asarray(gt_batch, dtype=np.float64)[:, -1, :]
    norms = np.linalg.norm(endpoints, axis=-1)
    if np.any(norms < 1e-9):
        raise ValueError("degenerate trajectory: zero-length endpoint")
    sims = (endpoints / norms[:, None]) @ anchors.T
    return np.argmax(sims, axis=-1).astype(np.int64)


def nll_loss(batch: MixtureBatch, gt_traj, modes) -> Tensor:
    """Trajectory NLL of the assigned mode plus the score cross-entropy term.

    gt_traj: (B, T, 2) normalized waypoints; modes: (B,) assigned indices.
    Returns the batch mean of  -sum_t log N_h(w_t) - log q_h.  Gradients
    touch only the selected mode's trajectory parameters and the scores.
    """
    modes = np.asarray(modes, dtype=np.int64)
    gt = ad._as_tensor(gt_traj)
    if np.any(batch.scores.data[np.arange(len(modes)), modes] <= 0.0):
        raise ValueError("assigned mode has zero score")
    mu_h = ad.gather_rows(batch.mu, modes)  # (B, T, 2)
    sigma_h = ad.gather_rows(batch.sigma, modes)
    rho_h = ad.gather_rows(batch.rho, modes)  # (B,)
    b, horizon = mu_h.shape[0], mu_h.shape[1]

    dx = (gt - mu_h) / sigma_h  # (B, T, 2)
    dxx = ad.tslice(dx, (Ellipsis, 0))
    dyy = ad.tslice(dx, (Ellipsis, 1))
    rho_bt = ad.reshape(rho_h, (b, 1))
    one_m_r2 = 1.0 - rho_bt * rho_bt
    z = dxx * dxx - rho_bt * (dxx * dyy) * 2.0 + dyy * dyy
    log_sx = ad.log(ad.tslice(sigma_h, (Ellipsis, 0)))
    log_sy = ad.log(ad.tslice(sigma_h, (Ellipsis, 1)))
    log_n = (
        (-LOG_2PI - 0.0)
        - log_sx
        - log_sy
        - ad.log(one_m_r2) * 0.5
        - z / (one_m_r2 * 2.0)
    )  # (B, T)
    traj_term = ad.tsum(log_n, axis=-1)  # (B,)
    score_term = ad.gather_rows(batch.log_scores, modes)  # (B,)
    return ad.tmean(-(traj_term + score_term))


def reg_loss(batch: MixtureBatch, v_gt, modes) -> Tensor:
    """Squared error on the assigned mode's velocity scale, batch mean."""
    modes = np.asarray(modes, dtype=np.int64)
    v_h = ad.gather_rows(batch.vel, modes)  # (B,)
    diff = v_h - ad._as_tensor(np.asarray(v_gt, dtype=np.float64))
    return ad.tmean(diff * diff)


# ---------------------------------------------------------------------------
# sampling, entropy, trajectory normalization


def sample_action(params: MixtureParams, rng: np.random.Generator):
    """Hierarchical sample: mode from the scores, waypoint from its first-step
    Gaussian (diagonal; the fine-tuning regime fixes rho to 0).

    Returns (mode, normalized waypoint, log-prob under the full mixture) so
    score gradients survive in downstream ratio computations.
    """
    params.validate()
    cdf = np.cumsum(params.scores)
    mode = int(np.searchsorted(cdf, rng.random(), side="right"))
    mode = min(mode, params.n_modes - 1)
    w = params.mu[mode, 0] + params.sigma[mode, 0] * rng.standard_normal(2)
    logp = mixture_log_density(params, w, t=0)
    return mode, w, logp


def deterministic_action(params: MixtureParams):
    """Highest-score mode's mean first waypoint and its velocity scale."""
    mode = int(np.argmax(params.scores))
    return mode, params.mu[mode, 0].copy(), float(params.vel[mode])


def entropy_lower_bound(params: MixtureParams) -> float:
    """Diagonal-Gaussian entropy bound at the executed waypoint.

    sum_m q_m * (1/2) ln((2 pi e)^2 sx^2 sy^2) + categorical entropy of q,
    with the 0 ln 0 := 0 convention.
    """
    params.validate()
    sx = params.sigma[:, 0, 0]
    sy = params.sigma[:, 0, 1]
    gauss = LOG_2PIE + np.log(sx) + np.log(sy)  # (M,)
    q = params.scores
    score_ent = -np.sum(np.where(q > 0.0, q * np.log(np.maximum(q, 1e-300)), 0.0))
    return float(np.sum(q * gauss) + score_ent)


def batch_entropy_lower_bound(batch: MixtureBatch) -> Tensor:
    """Differentiable entropy bound, batch mean (for the PPO bonus)."""
    sx = ad.tslice(batch.sigma, (slice(None), slice(None), 0, 0))  # (B, M)
    sy = ad.tslice(batch.sigma, (slice(None), slice(None), 0, 1))
    gauss = ad.log(sx) + ad.log(sy) + LOG_2PIE
    per_row = ad.tsum(batch.scores * (gauss - batch.log_scores), axis=-1)
    return ad.tmean(per_row)


def normalize_trajectory(raw: np.ndarray):
    """Split a metric trajectory into unit-endpoint shape and reach scale."""
    raw = np.asarray(raw, dtype=np.float64)
    v_gt = float(np.linalg.norm(raw[-1]))
    if v_gt <= 1e-6:
        raise ValueError("stationary trajectory: endpoint norm below threshold")
    return raw / v_gt, v_gt


def min_ade(params: MixtureParams, gt_meters: np.ndarray) -> float:
    """Minimum over modes of the mean waypoint error in meters."""
    gt = np.asarray(gt_meters, dtype=np.float64)
    pred = params.mu * params.vel[:, None, None]  # (M, T, 2) meters
    err = np.linalg.norm(pred - gt[None, :, :], axis=-1).mean(axis=-1)
    return float(err.min())
