"""Noise schedule, forward diffusion, training losses, classifier-free
guidance, and trajectory sampling.

Diffusion acts on the spatial segment of the trajectory embedding only; the
temporal segments ride along as clean conditioning context.  The physics term
of the training loss draws a small seeded budget of fully denoised samples,
re-noises them once, and differentiates the soft-decoded flow of the one-shot
reconstruction against the decay-model flow prediction, so gradient pressure
pushes the sampler's own output toward the predicted disaster flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .codec import decode_spatial
from .conditioning import PromptContext, build_prompt, null_condition, predict_noise
from .core import FlowMatrix, Trajectory
from .errors import ConfigError, InvalidInputError, NumericError
from .layers import Leaves
from .model import CityModel, noisy_embedding_node
from .rng import substream


@dataclass(frozen=True)
class NoiseSchedule:
    """DDPM constants: beta plus derived alpha and cumulative products."""

    T_diffusion: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to step t, with the t = 0 convention of 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(
    kind: str, T_diffusion: int, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    """Linear or squared-cosine noise schedule."""
    if T_diffusion < 1:
        raise ConfigError("T_diffusion must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError("need 0 < beta_min <= beta_max < 1")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T_diffusion)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T_diffusion + 1) / T_diffusion
        f = np.cos((steps + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        beta = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    return NoiseSchedule(T_diffusion, beta, alpha, np.cumprod(alpha))


@dataclass(frozen=True)
class LossWeights:
    w_diff: float = 1.0
    w_phy: float = 0.0

    def __post_init__(self):
        if self.w_diff < 0 or self.w_phy < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.w_diff == 0 and self.w_phy == 0:
            raise ConfigError("loss weights must not both be zero")


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 0.0
    p_drop: float = 0.1

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError("guidance.omega must be >= 0")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("guidance.p_drop must be in [0, 1)")


def forward_noise(e0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """e_t = sqrt(abar_t) e_0 + sqrt(1 - abar_t) eps on the spatial segment."""
    if t < 0 or t > schedule.T_diffusion:
        raise InvalidInputError(f"step {t} outside [0, {schedule.T_diffusion}]")
    if t == 0:
        return e0.copy()
    if eps.shape != e0.shape:
        raise InvalidInputError("noise draw must match the embedding shape")
    abar = schedule.alpha_bar_at(t)
    return np.sqrt(abar) * e0 + np.sqrt(1.0 - abar) * eps


def invert_noise(e_t: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Exact inversion of forward_noise given the true noise draw."""
    abar = schedule.alpha_bar_at(t)
    return (e_t - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


def denoise_step(
    e_t: np.ndarray,
    t: int,
    eps_tilde: np.ndarray,
    schedule: NoiseSchedule,
    z: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse step; deterministic at t = 1 (no stochastic term)."""
    if t < 1 or t > schedule.T_diffusion:
        raise InvalidInputError(f"step {t} outside [1, {schedule.T_diffusion}]")
    beta_t = schedule.beta[t - 1]
    alpha_t = schedule.alpha[t - 1]
    abar_t = schedule.alpha_bar[t - 1]
    mean = (e_t - (1.0 - alpha_t) / np.sqrt(1.0 - abar_t) * eps_tilde) / np.sqrt(alpha_t)
    if t == 1 or z is None:
        return mean
    abar_prev = schedule.alpha_bar[t - 2]
    sigma = np.sqrt((1.0 - abar_prev) / (1.0 - abar_t) * beta_t)
    return mean + sigma * z


def guided_noise(
    leaves: Leaves, model: CityModel, E_t, t: int, c, guidance: GuidanceConfig
) -> Node:
    """(1 + omega) * conditional - omega * unconditional noise prediction."""
    eps_c = predict_noise(leaves, model, ad.as_node(E_t), t, ad.as_node(c))
    if guidance.omega == 0.0:
        return eps_c
    n = eps_c.value.shape[0]
    eps_u = predict_noise(leaves, model, ad.as_node(E_t), t, null_condition(leaves, model, n))
    return ad.sub(ad.scale(eps_c, 1.0 + guidance.omega), ad.scale(eps_u, guidance.omega))


def temporal_segment_values(model: CityModel, slots: np.ndarray) -> np.ndarray:
    tables = model.tables()
    t_h = model.grid.slots_per_day
    sod = slots % t_h
    dow = (slots // t_h) % 7
    return np.concatenate([tables.P[dow], tables.Z[sod]], axis=1)


def diffusion_loss(
    leaves: Leaves,
    model: CityModel,
    batch: list[Trajectory],
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    prompt_ctx: PromptContext,
    rng: np.random.Generator,
    predict_fn: Callable | None = None,
) -> tuple[Node, list[float]]:
    """Mean squared noise-prediction error over a batch, with the condition
    replaced by the learned null row with probability p_drop per example."""
    if not batch:
        raise InvalidInputError("empty batch")
    predict = predict_fn or predict_noise
    width = model.codec_cfg.spatial_width
    terms = []
    values = []
    for idx, traj in enumerate(batch):
        t = int(rng.integers(1, schedule.T_diffusion + 1))
        e0 = model.emb.D[traj.locs].astype(model.dtype)
        eps = rng.standard_normal((len(traj), width)).astype(model.dtype)
        e_t = forward_noise(e0, t, eps, schedule)
        E_t = noisy_embedding_node(leaves, model, e_t, traj.slots)
        if rng.random() < guidance.p_drop:
            c = null_condition(leaves, model, len(traj))
        else:
            c, _ = build_prompt(leaves, model, e_t, traj.slots, prompt_ctx)
        eps_hat = predict(leaves, model, E_t, t, c)
        term = ad.mse(eps_hat, ad.constant(eps))
        if not np.isfinite(term.value):
            raise NumericError(f"non-finite diffusion loss for batch example {idx}")
        terms.append(term)
        values.append(float(term.value))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms)), values


@dataclass
class PhysicsContext:
    """Everything the physics-alignment term needs at training time.

    The target flow is the decay-model prediction on the same footing as the
    generated-flow estimate; out-of-home alignment (each sample's inferred
    home cell masked out) matches the generating law, under which only
    out-of-home visits are thinned by H.
    """

    prompt_ctx: PromptContext
    F_dis: FlowMatrix           # decay-model flow prediction (the target)
    n_reference: float          # users behind the normal flow, for scale
    sample_budget: int = 64
    every_steps: int = 10
    sharpness: float = 20.0     # soft-decode temperature
    prompt_every: int = 1
    out_of_home: bool = True
    grad_steps: int = 6         # recorded reverse-chain steps per sample


def _chain_coefficients(schedule: NoiseSchedule) -> np.ndarray:
    """Contribution of the noise prediction at step t to the final sample.

    The reverse recursion is linear in the predicted noise, so
    e_0 = (terms independent of the predictions) - sum_t coeff[t-1] * eps~_t
    with coeff[t-1] = (1 - alpha_t) / (sqrt(1 - abar_t) * sqrt(abar_t)).
    """
    return (1.0 - schedule.alpha) / (
        np.sqrt(1.0 - schedule.alpha_bar) * np.sqrt(schedule.alpha_bar)
    )


def sample_spatial_recorded(
    leaves: Leaves,
    model: CityModel,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    prompt_ctx: PromptContext,
    slots: np.ndarray,
    rng: np.random.Generator,
    prompt_every: int = 1,
    grad_steps: int = 6,
) -> Node:
    """Reverse-diffuse one trajectory and return its final spatial segment as
    a node whose value is the exact sample and whose gradient flows through a
    subsampled set of reverse steps.

    States entering each step are treated as constants (first-order), so the
    sample decomposes linearly over the per-step noise predictions; an
    importance-weighted subset of steps (heavier steps more likely) keeps the
    gradient unbiased at a fraction of the recording cost.
    """
    n = len(slots)
    width = model.codec_cfg.spatial_width
    temporal = temporal_segment_values(model, slots).astype(model.dtype)
    coeff = _chain_coefficients(schedule)
    probs = np.abs(coeff) / np.abs(coeff).sum()
    k = min(max(grad_steps, 1), schedule.T_diffusion)
    drawn = rng.choice(schedule.T_diffusion, size=k, replace=True, p=probs) + 1
    weight_of: dict[int, float] = {}
    for t in drawn.tolist():
        weight_of[t] = weight_of.get(t, 0.0) + (-coeff[t - 1]) / (k * probs[t - 1])

    e = rng.standard_normal((n, width)).astype(model.dtype)
    c_values = None
    grad_terms: list[Node] = []
    for t in range(schedule.T_diffusion, 0, -1):
        steps_done = schedule.T_diffusion - t
        if c_values is None or steps_done % max(prompt_every, 1) == 0:
            c_node, _ = build_prompt(Leaves(), model, e, slots, prompt_ctx)
            c_values = c_node.value
        E_t = np.concatenate([e, temporal], axis=1)
        if t in weight_of:
            step_leaves = leaves
            E_node = noisy_embedding_node(step_leaves, model, e, slots)
            c_rec, _ = build_prompt(step_leaves, model, e, slots, prompt_ctx)
            eps_node = guided_noise(step_leaves, model, E_node, t, c_rec, guidance)
            eps_tilde = eps_node.value
            # value 0, gradient = weight * d(eps~_t)/d(theta)
            grad_terms.append(
                ad.scale(ad.sub(eps_node, ad.constant(eps_node.value.copy())),
                         weight_of[t])
            )
        else:
            eps_tilde = guided_noise(
                Leaves(), model, ad.constant(E_t), t, ad.constant(c_values), guidance
            ).value
        z = rng.standard_normal(e.shape).astype(model.dtype) if t > 1 else None
        e = denoise_step(e, t, eps_tilde, schedule, z).astype(model.dtype)

    out = ad.constant(e)
    for term in grad_terms:
        out = ad.add(out, term)
    return out


def sampled_flow_node(
    leaves: Leaves,
    model: CityModel,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    physics: PhysicsContext,
    rng: np.random.Generator,
) -> Node:
    """Differentiable generated-flow estimate from the model's own samples.

    Each budget sample is drawn with the full reverse chain; its soft-decoded
    per-slot location probabilities (sharpness-tempered cosine softmax against
    the location embedding) sum into a per-user flow.  With out-of-home
    alignment the sample's inferred home cell is masked out, matching the
    decay law's domain of validity.
    """
    L, T = physics.F_dis.shape
    slots = np.arange(T, dtype=np.int64)
    night = model.grid.is_night(slots)
    flow = None
    for _ in range(physics.sample_budget):
        e0_node = sample_spatial_recorded(
            leaves, model, schedule, guidance, physics.prompt_ctx, slots, rng,
            prompt_every=physics.prompt_every, grad_steps=physics.grad_steps,
        )
        sims = ad.matmul(ad.normalize_rows(e0_node), ad.constant(model.emb.D.T.copy()))
        probs = ad.softmax_rows(ad.scale(sims, physics.sharpness))  # (T, L)
        member = ad.transpose(probs)                                # (L, T)
        if physics.out_of_home:
            decoded = decode_spatial(e0_node.value, model.emb).locations
            night_locs = decoded[night] if night.any() else decoded
            vals, counts = np.unique(night_locs, return_counts=True)
            home = int(vals[np.argmax(counts)])
            mask = np.ones((L, T), dtype=np.float64)
            mask[home, :] = 0.0
            member = ad.mul(member, ad.constant(mask))
        flow = member if flow is None else ad.add(flow, member)
    # per-user flow: comparable to the target after its own 1/n normalization
    return ad.scale(flow, 1.0 / physics.sample_budget)


@dataclass
class TrainContext:
    """Loss assembly state shared across optimizer steps (physics caching).

    `prompt_ctx` conditions the data (noise-prediction) term and must describe
    the scenario the batch trajectories were recorded under; when training on
    normal-scenario data with the physics term supplying disaster structure,
    pass its no-disaster variant here and keep the disaster context inside
    `physics`.
    """

    schedule: NoiseSchedule
    weights: LossWeights
    guidance: GuidanceConfig
    prompt_ctx: PromptContext
    physics: PhysicsContext | None = None
    predict_fn: Callable | None = None
    flow_node_fn: Callable | None = None
    last_parts: dict = dc_field(default_factory=dict)
    _cached_phy: float = 0.0
    _phy_seen: bool = False

    def compute(
        self,
        leaves: Leaves,
        model: CityModel,
        batch: list[Trajectory],
        rng: np.random.Generator,
        step: int = 0,
    ) -> Node:
        return total_loss(leaves, model, batch, self, rng, step)


def total_loss(
    leaves: Leaves,
    model: CityModel,
    batch: list[Trajectory],
    ctx: TrainContext,
    rng: np.random.Generator,
    step: int = 0,
) -> Node:
    """w_diff * L_diff + w_phy * L_phy.

    The physics term is recomputed (with gradients) every
    ``physics.every_steps`` optimizer steps and held as a constant in
    between; its latest value is always reported in ``ctx.last_parts``.
    """
    weights = ctx.weights
    if weights.w_phy > 0 and ctx.physics is None:
        raise ConfigError("w_phy > 0 requires a physics context")
    diff_node, _ = diffusion_loss(
        leaves, model, batch, ctx.schedule, ctx.guidance, ctx.prompt_ctx, rng,
        predict_fn=ctx.predict_fn,
    )
    total = ad.scale(diff_node, weights.w_diff)
    phy_value = 0.0
    if weights.w_phy > 0:
        every = ctx.physics.every_steps
        if not ctx._phy_seen or step % max(every, 1) == 0:
            if ctx.flow_node_fn is not None:
                flow = ctx.flow_node_fn(leaves, model, rng)
            else:
                flow = sampled_flow_node(
                    leaves, model, ctx.schedule, ctx.guidance, ctx.physics, rng
                )
            # both sides in per-user units so the weight is population-independent
            target = ctx.physics.F_dis.counts / ctx.physics.n_reference
            phy_node = ad.mse(flow, ad.constant(target))
            ctx._cached_phy = float(phy_node.value)
            ctx._phy_seen = True
            total = ad.add(total, ad.scale(phy_node, weights.w_phy))
            phy_value = ctx._cached_phy
        else:
            phy_value = ctx._cached_phy
            total = ad.add(total, ad.constant(np.asarray(weights.w_phy * phy_value)))
    if not np.isfinite(total.value):
        raise NumericError("non-finite total loss")
    ctx.last_parts = {
        "loss_diff": float(diff_node.value),
        "loss_phy": phy_value,
        "loss_total": float(total.value),
    }
    return total


def sample_spatial(
    model: CityModel,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    prompt_ctx: PromptContext,
    slots: np.ndarray,
    rng: np.random.Generator,
    prompt_every: int = 1,
) -> np.ndarray:
    """Reverse-diffuse one trajectory's spatial segment from pure noise."""
    n = len(slots)
    width = model.codec_cfg.spatial_width
    temporal = temporal_segment_values(model, slots).astype(model.dtype)
    e = rng.standard_normal((n, width)).astype(model.dtype)
    c_values = None
    for t in range(schedule.T_diffusion, 0, -1):
        steps_done = schedule.T_diffusion - t
        if c_values is None or steps_done % max(prompt_every, 1) == 0:
            c_node, _ = build_prompt(Leaves(), model, e, slots, prompt_ctx)
            c_values = c_node.value
        E_t = np.concatenate([e, temporal], axis=1)
        leaves = Leaves()
        eps_tilde = guided_noise(
            leaves, model, ad.constant(E_t), t, ad.constant(c_values), guidance
        ).value
        z = rng.standard_normal(e.shape).astype(model.dtype) if t > 1 else None
        e = denoise_step(e, t, eps_tilde, schedule, z).astype(model.dtype)
    return e


def sample(
    model: CityModel,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    prompt_ctx: PromptContext,
    n_users: int,
    length: int,
    seed: int,
    prompt_every: int = 1,
    id_prefix: str = "g",
) -> list[Trajectory]:
    """Generate dense trajectories for `n_users` users over `length` slots.

    Deterministic per seed: each user draws from its own named substream and
    users are emitted in id order.
    """
    if length < 1 or length > model.grid.n_slots:
        raise InvalidInputError(f"length must be in [1, {model.grid.n_slots}]")
    slots = np.arange(length, dtype=np.int64)
    trajs = []
    width = max(4, len(str(max(n_users - 1, 1))))
    for i in range(n_users):
        uid = f"{id_prefix}{i:0{width}d}"
        rng = substream(seed, "sample", uid)
        e0 = sample_spatial(model, schedule, guidance, prompt_ctx, slots, rng, prompt_every)
        decoded = decode_spatial(e0, model.emb)
        trajs.append(Trajectory(uid, slots.copy(), decoded.locations))
    return trajs
