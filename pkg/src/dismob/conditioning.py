"""Physics-informed prompt construction and the conditional noise predictor.

The prompt decodes the current (noisy) embedding to locations, queries the
fitted decay ratio at each (location, slot), and maps
[ratio, slot-of-day fraction, normalized local intensity] through a small MLP
into one conditioning row per trajectory point.  The predictor projects the
embedding to model width, adds a projected 128-dim diffusion-step encoding,
runs a pre-norm transformer over the trajectory points, fuses the prompt by
cross-attention, and emits a noise estimate for the spatial segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .codec import DecodeResult, decode_spatial
from .core import DisasterField
from .errors import ConfigError, InvalidInputError
from .layers import Leaves, cross_attention_forward, dense_forward, multihead_self_attention
from .physics import DecayParams, SpatialKernel, decay_ratio_matrix

T_EMB_WIDTH = 128


@dataclass(frozen=True)
class PredictorConfig:
    layers: int = 2
    heads: int = 4
    model_width: int = 64
    d_k: int = 16
    d_c: int = 16
    prompt_mlp_widths: tuple[int, ...] = (32,)
    t_emb_width: int = T_EMB_WIDTH

    def __post_init__(self):
        for name in ("layers", "heads", "model_width", "d_k", "d_c"):
            if getattr(self, name) < 1:
                raise ConfigError(f"predictor.{name} must be >= 1")
        if self.model_width % self.heads != 0:
            raise ConfigError("predictor.model_width must be divisible by heads")
        if self.t_emb_width != T_EMB_WIDTH:
            raise ConfigError(f"predictor.t_emb_width is fixed at {T_EMB_WIDTH}")
        if any(w < 1 for w in self.prompt_mlp_widths):
            raise ConfigError("predictor.prompt_mlp_widths must all be >= 1")


def time_embedding(t: float) -> np.ndarray:
    """128-vector [sin(f_j t), cos(f_j t)] with f_j = 10^(4j/63), j = 0..63."""
    if t < 0:
        raise InvalidInputError("diffusion step must be >= 0")
    freqs = 10.0 ** (4.0 * np.arange(64) / 63.0)
    arg = freqs * float(t)
    return np.concatenate([np.sin(arg), np.cos(arg)])


@dataclass(frozen=True)
class PromptContext:
    """Fitted decay model plus the per-cell/per-slot lookups the prompt needs."""

    params: DecayParams
    kernel: SpatialKernel
    field: DisasterField
    H: np.ndarray = dc_field(default=None)
    norm_intensity: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        if self.H is None:
            object.__setattr__(
                self, "H", decay_ratio_matrix(self.params, self.kernel, self.field)
            )
        if self.norm_intensity is None:
            peak = float(self.field.intensity.max())
            scaled = self.field.intensity / peak if peak > 0 else self.field.intensity
            object.__setattr__(self, "norm_intensity", scaled)

    def as_no_disaster(self) -> "PromptContext":
        """Same geometry, zero hazard: H identically 1.  Used to condition the
        data term on normal-scenario batches."""
        zero_field = DisasterField(
            np.zeros_like(self.field.intensity), onset_slot=0,
            disaster_type="none", city=self.field.city, unit=self.field.unit,
        )
        return PromptContext(self.params, self.kernel, zero_field)


def prompt_features(
    ctx: PromptContext, locations: np.ndarray, slots: np.ndarray, slots_per_day: int
) -> np.ndarray:
    """(n, 3) rows [H(loc, slot), slot-of-day / T_h, normalized intensity]."""
    h = ctx.H[locations, slots]
    sod = (slots % slots_per_day) / slots_per_day
    n = ctx.norm_intensity[locations, slots]
    return np.stack([h, sod, n], axis=1)


def prompt_mlp(leaves: Leaves, model, features: np.ndarray) -> Node:
    x = ad.constant(features.astype(model.dtype))
    n_hidden = len(model.pred_cfg.prompt_mlp_widths)
    for i in range(n_hidden + 1):
        x = dense_forward(
            leaves, x, model.params[f"prompt.mlp.w{i}"], model.params[f"prompt.mlp.b{i}"]
        )
        if i < n_hidden:
            x = ad.gelu(x)
    return x


def build_prompt(
    leaves: Leaves,
    model,
    spatial_values: np.ndarray,
    slots: np.ndarray,
    ctx: PromptContext,
) -> tuple[Node, DecodeResult]:
    """Disaster embedding rows for the given (noisy) spatial segment values.

    Depends on the embedding only through the decoded locations: inputs that
    decode identically produce identical prompts.
    """
    if ctx is None:
        raise InvalidInputError("prompt requires fitted decay parameters")
    decoded = decode_spatial(spatial_values, model.emb)
    feats = prompt_features(ctx, decoded.locations, slots, model.grid.slots_per_day)
    return prompt_mlp(leaves, model, feats), decoded


def null_condition(leaves: Leaves, model, n: int) -> Node:
    """n copies of the learned null conditioning row."""
    row = leaves.leaf(model.params["prompt.null_row"])
    if n == 0:
        return ad.constant(np.zeros((0, model.pred_cfg.d_c), dtype=model.dtype))
    return ad.repeat_rows(row, n)


def predict_noise(leaves: Leaves, model, E_t: Node, t: float, c: Node) -> Node:
    """Predicted noise for the spatial segment, one row per trajectory point."""
    E_t = ad.as_node(E_t)
    c = ad.as_node(c)
    if c.value.shape[0] != E_t.value.shape[0]:
        raise InvalidInputError(
            f"condition rows {c.value.shape[0]} != embedding rows {E_t.value.shape[0]}"
        )
    cfg = model.pred_cfg
    p = model.params

    x = dense_forward(leaves, E_t, p["predictor.in_proj.w"], p["predictor.in_proj.b"])
    temb = time_embedding(t)[None, :].astype(model.dtype)
    tproj = dense_forward(
        leaves, ad.constant(temb), p["predictor.t_proj.w"], p["predictor.t_proj.b"]
    )
    x = ad.add(x, tproj)

    for i in range(cfg.layers):
        base = f"predictor.layer{i}"
        normed = ad.layer_norm(
            x, leaves.leaf(p[f"{base}.ln1.g"]), leaves.leaf(p[f"{base}.ln1.b"])
        )
        attn = multihead_self_attention(
            leaves, normed, cfg.heads,
            p[f"{base}.attn.wq"], p[f"{base}.attn.wk"],
            p[f"{base}.attn.wv"], p[f"{base}.attn.wo"],
        )
        x = ad.add(x, attn)
        normed = ad.layer_norm(
            x, leaves.leaf(p[f"{base}.ln2.g"]), leaves.leaf(p[f"{base}.ln2.b"])
        )
        hidden = ad.gelu(dense_forward(leaves, normed, p[f"{base}.mlp.w1"], p[f"{base}.mlp.b1"]))
        x = ad.add(x, dense_forward(leaves, hidden, p[f"{base}.mlp.w2"], p[f"{base}.mlp.b2"]))

    normed = ad.layer_norm(
        x, leaves.leaf(p["predictor.cross.ln.g"]), leaves.leaf(p["predictor.cross.ln.b"])
    )
    fused = cross_attention_forward(
        leaves, normed, c,
        p["predictor.cross.wq"], p["predictor.cross.wk"], p["predictor.cross.wv"],
    )
    x = ad.add(x, fused)

    normed = ad.layer_norm(
        x, leaves.leaf(p["predictor.out_head.ln.g"]), leaves.leaf(p["predictor.out_head.ln.b"])
    )
    hidden = ad.gelu(
        dense_forward(leaves, normed, p["predictor.out_head.w1"], p["predictor.out_head.b1"])
    )
    return dense_forward(leaves, hidden, p["predictor.out_head.w2"], p["predictor.out_head.b2"])
