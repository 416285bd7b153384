"""Model assembly: parameter creation, tagging, and embedding plumbing.

Temporal tables and the city-specific input/output projections are private
(they encode local geometry and rhythm); the transformer stack, the
cross-attention fusion, the prompt MLP and the null conditioning row are
shared across cities.  The spectral location embedding is stored with the
model but never trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .codec import (LocationEmbedding, TemporalTables, build_spatial_graph,
                    embed_locations, encode)
from .conditioning import T_EMB_WIDTH, PredictorConfig
from .core import GridSpec, Trajectory
from .errors import ConfigError
from .layers import Leaves, Parameter, init_weight
from .rng import substream

PRIVATE_PREFIXES = ("codec.", "predictor.in_proj.", "predictor.out_head.")


@dataclass(frozen=True)
class CodecConfig:
    spatial_width: int = 12
    dow_width: int = 4
    graph_radius_cells: float = 1.5  # neighborhood radius in cell widths

    def __post_init__(self):
        if self.spatial_width < 1 or self.dow_width < 1:
            raise ConfigError("codec widths must be >= 1")
        if self.graph_radius_cells <= 0:
            raise ConfigError("codec.graph_radius_cells must be > 0")

    def embed_width(self) -> int:
        # [spatial; day-of-week; slot-of-day] with Z sharing the spatial width
        return 2 * self.spatial_width + self.dow_width


@dataclass
class CityModel:
    """One city's assembled model: parameters plus frozen codec geometry."""

    city: str
    grid: GridSpec
    codec_cfg: CodecConfig
    pred_cfg: PredictorConfig
    params: dict[str, Parameter]
    emb: LocationEmbedding

    @property
    def dtype(self):
        return self.params["predictor.in_proj.w"].value.dtype

    def tables(self) -> TemporalTables:
        return TemporalTables(self.params["codec.P"].value, self.params["codec.Z"].value)

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def copy(self) -> "CityModel":
        return CityModel(
            self.city, self.grid, self.codec_cfg, self.pred_cfg,
            {name: p.copy() for name, p in self.params.items()}, self.emb,
        )

    def astype(self, dtype) -> "CityModel":
        return CityModel(
            self.city, self.grid, self.codec_cfg, self.pred_cfg,
            {name: p.astype(dtype) for name, p in self.params.items()}, self.emb,
        )


def tag_for(name: str, city: str) -> str:
    if any(name.startswith(prefix) for prefix in PRIVATE_PREFIXES):
        return f"private:{city}"
    return "shared"


def build_location_embedding(grid: GridSpec, codec_cfg: CodecConfig) -> LocationEmbedding:
    graph = build_spatial_graph(grid, codec_cfg.graph_radius_cells * grid.cell_km)
    return embed_locations(graph, codec_cfg.spatial_width)


def shared_parameters(pred_cfg: PredictorConfig, seed: int) -> dict[str, Parameter]:
    """Shared parameter set, identical for every city under the same seed."""
    rng = substream(seed, "init", "shared")
    mw = pred_cfg.model_width
    params: dict[str, Parameter] = {}

    def weight(name, shape):
        params[name] = Parameter(name, init_weight(shape, rng), "shared")

    def ones(name, size):
        params[name] = Parameter(name, np.ones(size, dtype=np.float32), "shared")

    def zeros(name, shape):
        params[name] = Parameter(name, np.zeros(shape, dtype=np.float32), "shared")

    weight("predictor.t_proj.w", (T_EMB_WIDTH, mw))
    zeros("predictor.t_proj.b", (mw,))
    for i in range(pred_cfg.layers):
        base = f"predictor.layer{i}"
        ones(f"{base}.ln1.g", mw)
        zeros(f"{base}.ln1.b", (mw,))
        for proj in ("wq", "wk", "wv", "wo"):
            weight(f"{base}.attn.{proj}", (mw, mw))
        ones(f"{base}.ln2.g", mw)
        zeros(f"{base}.ln2.b", (mw,))
        weight(f"{base}.mlp.w1", (mw, 2 * mw))
        zeros(f"{base}.mlp.b1", (2 * mw,))
        weight(f"{base}.mlp.w2", (2 * mw, mw))
        zeros(f"{base}.mlp.b2", (mw,))
    ones("predictor.cross.ln.g", mw)
    zeros("predictor.cross.ln.b", (mw,))
    weight("predictor.cross.wq", (mw, pred_cfg.d_k))
    weight("predictor.cross.wk", (pred_cfg.d_c, pred_cfg.d_k))
    weight("predictor.cross.wv", (pred_cfg.d_c, mw))

    widths = (3,) + tuple(pred_cfg.prompt_mlp_widths) + (pred_cfg.d_c,)
    for i in range(len(widths) - 1):
        weight(f"prompt.mlp.w{i}", (widths[i], widths[i + 1]))
        zeros(f"prompt.mlp.b{i}", (widths[i + 1],))
    zeros("prompt.null_row", (1, pred_cfg.d_c))
    return params


def private_parameters(
    city: str,
    grid: GridSpec,
    codec_cfg: CodecConfig,
    pred_cfg: PredictorConfig,
    seed: int,
    emb: LocationEmbedding | None = None,
) -> dict[str, Parameter]:
    """City-private parameter set (temporal tables, in/out projections, D)."""
    rng = substream(seed, "init", city)
    tag = f"private:{city}"
    mw = pred_cfg.model_width
    w_spatial = codec_cfg.spatial_width
    if emb is None:
        emb = build_location_embedding(grid, codec_cfg)
    params: dict[str, Parameter] = {}
    params["codec.D"] = Parameter(
        "codec.D", emb.D.astype(np.float32), tag, trainable=False
    )
    params["codec.P"] = Parameter(
        "codec.P", init_weight((7, codec_cfg.dow_width), rng), tag
    )
    params["codec.Z"] = Parameter(
        "codec.Z", init_weight((grid.slots_per_day, w_spatial), rng), tag
    )
    params["predictor.in_proj.w"] = Parameter(
        "predictor.in_proj.w", init_weight((codec_cfg.embed_width(), mw), rng), tag
    )
    params["predictor.in_proj.b"] = Parameter(
        "predictor.in_proj.b", np.zeros(mw, dtype=np.float32), tag
    )
    params["predictor.out_head.ln.g"] = Parameter(
        "predictor.out_head.ln.g", np.ones(mw, dtype=np.float32), tag
    )
    params["predictor.out_head.ln.b"] = Parameter(
        "predictor.out_head.ln.b", np.zeros(mw, dtype=np.float32), tag
    )
    params["predictor.out_head.w1"] = Parameter(
        "predictor.out_head.w1", init_weight((mw, mw), rng), tag
    )
    params["predictor.out_head.b1"] = Parameter(
        "predictor.out_head.b1", np.zeros(mw, dtype=np.float32), tag
    )
    params["predictor.out_head.w2"] = Parameter(
        "predictor.out_head.w2", init_weight((mw, w_spatial), rng), tag
    )
    params["predictor.out_head.b2"] = Parameter(
        "predictor.out_head.b2", np.zeros(w_spatial, dtype=np.float32), tag
    )
    return params


def build_model(
    city: str,
    grid: GridSpec,
    codec_cfg: CodecConfig,
    pred_cfg: PredictorConfig,
    seed: int,
) -> CityModel:
    """Fresh model for one city: seeded shared + seeded private parameters."""
    emb = build_location_embedding(grid, codec_cfg)
    params = dict(shared_parameters(pred_cfg, seed))
    params.update(private_parameters(city, grid, codec_cfg, pred_cfg, seed, emb))
    return CityModel(city, grid, codec_cfg, pred_cfg, params, emb)


def encode_trajectory(model: CityModel, traj: Trajectory):
    """Array-valued encoding with the model's current tables."""
    return encode(traj, model.tables(), model.emb)


def temporal_segment_node(leaves: Leaves, model: CityModel, slots: np.ndarray) -> Node:
    """Trainable temporal rows [P[dow]; Z[sod]] for the given slots."""
    t_h = model.grid.slots_per_day
    sod = slots % t_h
    dow = (slots // t_h) % 7
    p_rows = ad.gather_rows(leaves.leaf(model.params["codec.P"]), dow)
    z_rows = ad.gather_rows(leaves.leaf(model.params["codec.Z"]), sod)
    return ad.concat_cols([p_rows, z_rows])


def noisy_embedding_node(
    leaves: Leaves, model: CityModel, spatial_values: np.ndarray, slots: np.ndarray
) -> Node:
    """Full embedding rows with a fixed (noised) spatial segment and the
    current trainable temporal segments."""
    spatial = ad.constant(spatial_values.astype(model.dtype))
    return ad.concat_cols([spatial, temporal_segment_node(leaves, model, slots)])
