"""Run configuration: one JSON file is the complete record of a run.

Every invariant violation is reported with its field path; unknown keys are
rejected so typos cannot silently fall back to defaults.  Loading, then
serializing, then loading again yields an identical configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .conditioning import PredictorConfig
from .core import GridSpec
from .errors import ConfigError, DismobError, MissingArtifactError
from .metalearn import MetaConfig
from .model import CodecConfig
from .physics import DecayParams, FitOptions
from .synthworld import DisasterScenario, WorldConfig

_MISSING = object()


class _Reader:
    """Typed dict walker that tracks consumed keys and field paths."""

    def __init__(self, data: dict, path: str = ""):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def _label(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default=_MISSING):
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(f"missing required field {self._label(key)}")
            self.used.add(key)
            return default
        self.used.add(key)
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and not isinstance(value, kind):
            raise ConfigError(
                f"{self._label(key)}: expected {getattr(kind, '__name__', kind)}, "
                f"got {type(value).__name__}"
            )
        if kind is int and isinstance(value, bool):
            raise ConfigError(f"{self._label(key)}: expected int, got bool")
        return value

    def child(self, key: str, default_empty: bool = False) -> "_Reader":
        raw = self.get(key, dict, default={} if default_empty else _MISSING)
        return _Reader(raw, self._label(key))

    def child_list(self, key: str) -> list["_Reader"]:
        raw = self.get(key, list)
        return [
            _Reader(item, f"{self._label(key)}[{i}]") for i, item in enumerate(raw)
        ]

    def finish(self):
        unknown = set(self.data) - self.used
        if unknown:
            names = ", ".join(sorted(self._label(k) for k in unknown))
            raise ConfigError(f"unknown field(s): {names}")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    t_diffusion: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass(frozen=True)
class PhysicsTermConfig:
    sample_budget: int = 64
    every_steps: int = 10
    sharpness: float = 12.0

    def __post_init__(self):
        if self.sample_budget < 1:
            raise ConfigError("model.physics_term.sample_budget must be >= 1")
        if self.every_steps < 1:
            raise ConfigError("model.physics_term.every_steps must be >= 1")
        if self.sharpness <= 0:
            raise ConfigError("model.physics_term.sharpness must be > 0")


@dataclass(frozen=True)
class GuidanceSettings:
    omega: float = 0.2
    p_drop: float = 0.1


@dataclass(frozen=True)
class LossSettings:
    w_diff: float = 1.0
    w_phy: float = 0.0


@dataclass(frozen=True)
class ModelConfig:
    codec: CodecConfig = CodecConfig()
    predictor: PredictorConfig = PredictorConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    weights: LossSettings = LossSettings()
    guidance: GuidanceSettings = GuidanceSettings()
    physics_term: PhysicsTermConfig = PhysicsTermConfig()
    prompt_every: int = 1
    train_on: str = "disaster"
    adapt_on: str = "normal"
    train_steps: int = 400
    train_lr: float = 0.3
    train_batch: int = 8

    def __post_init__(self):
        if self.prompt_every < 1:
            raise ConfigError("model.prompt_every must be >= 1")
        if self.train_on not in ("disaster", "normal"):
            raise ConfigError("model.train_on must be 'disaster' or 'normal'")
        if self.adapt_on not in ("disaster", "normal"):
            raise ConfigError("model.adapt_on must be 'disaster' or 'normal'")
        if self.train_steps < 0:
            raise ConfigError("model.train_steps must be >= 0")
        if self.train_lr < 0:
            raise ConfigError("model.train_lr must be >= 0")
        if self.train_batch < 1:
            raise ConfigError("model.train_batch must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    bins: int = 30
    n_sample_users: int = 64

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("eval.bins must be >= 2")
        if self.n_sample_users < 1:
            raise ConfigError("eval.n_sample_users must be >= 1")


@dataclass(frozen=True)
class CitySpec:
    world: WorldConfig
    scenario: DisasterScenario


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    cities: tuple[CitySpec, ...]
    sources: tuple[str, ...]
    target: str | None
    physics: FitOptions
    model: ModelConfig
    meta: MetaConfig
    eval: EvalConfig

    def city(self, name: str) -> CitySpec:
        for spec in self.cities:
            if spec.world.name == name:
                return spec
        raise ConfigError(f"unknown city {name!r}")


def _read_grid(r: _Reader) -> GridSpec:
    grid = GridSpec(
        rows=r.get("rows", int),
        cols=r.get("cols", int),
        cell_km=r.get("cell_km", float),
        slots_per_day=r.get("slots_per_day", int, 48),
        days=r.get("days", int),
        slot_minutes=r.get("slot_minutes", int, 30),
    )
    r.finish()
    return grid


def _read_decay(r: _Reader) -> DecayParams:
    params = DecayParams(
        k0=r.get("k0", float),
        alpha_decay=r.get("alpha_decay", float),
        rho_km=r.get("rho_km", float),
    )
    r.finish()
    return params


def _read_city(r: _Reader, master_seed: int) -> CitySpec:
    name = r.get("name", str)
    grid = _read_grid(r.child("grid"))
    world = WorldConfig(
        grid=grid,
        n_users=r.get("n_users", int),
        home_work_fraction=r.get("home_work_fraction", float, 0.85),
        epr_rho=r.get("epr_rho", float, 0.35),
        epr_gamma=r.get("epr_gamma", float, 0.6),
        seed=r.get("seed", int, derive_seed(master_seed, "world", name)),
        name=name,
    )
    s = r.child("scenario")
    scenario = DisasterScenario(
        epicenter=s.get("epicenter", int),
        peak_intensity=s.get("peak_intensity", float),
        spatial_sigma_km=s.get("spatial_sigma_km", float),
        onset_slot=s.get("onset_slot", int),
        duration_slots=s.get("duration_slots", int),
        truth_decay=_read_decay(s.child("truth_decay")),
        disaster_type=s.get("disaster_type", str, "generic"),
        unit=s.get("unit", str, ""),
    )
    s.finish()
    r.finish()
    if scenario.epicenter >= grid.n_cells:
        raise ConfigError(f"{r.path}.scenario.epicenter outside the grid")
    return CitySpec(world, scenario)


def derive_seed(seed: int, *path: object) -> int:
    label = "/".join(str(p) for p in path)
    digest = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _wrap(path_label: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except DismobError as exc:
        raise ConfigError(f"{path_label}: {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    root = _Reader(data)
    seed = root.get("seed", int)

    io = root.child("io", default_empty=True)
    out_dir = io.get("out_dir", str, "runs/default")
    io.finish()

    world = root.child("world")
    cities = tuple(_read_city(r, seed) for r in world.child_list("cities"))
    if not cities:
        raise ConfigError("world.cities must not be empty")
    names = [c.world.name for c in cities]
    if len(set(names)) != len(names):
        raise ConfigError("world.cities names must be unique")
    sources = tuple(world.get("sources", list, [names[0]]))
    target = world.get("target", str, None)
    world.finish()
    for s in sources:
        if s not in names:
            raise ConfigError(f"world.sources: unknown city {s!r}")
    if target is not None and target not in names:
        raise ConfigError(f"world.target: unknown city {target!r}")

    ph = root.child("physics", default_empty=True)
    physics = _wrap("physics", lambda: FitOptions(
        min_support=ph.get("min_support", float, 5.0),
        max_iters=ph.get("max_iters", int, 200),
        tol=ph.get("tol", float, 1e-10),
        k0_grid=tuple(ph.get("k0_grid", list, [])),
        alpha_grid=tuple(ph.get("alpha_grid", list, [])),
        rho_grid_km=tuple(ph.get("rho_grid_km", list, [])),
    ))
    ph.finish()

    m = root.child("model", default_empty=True)
    codec_r = m.child("codec", default_empty=True)
    codec = _wrap("model.codec", lambda: CodecConfig(
        spatial_width=codec_r.get("spatial_width", int, 12),
        dow_width=codec_r.get("dow_width", int, 4),
        graph_radius_cells=codec_r.get("graph_radius_cells", float, 1.5),
    ))
    codec_r.finish()
    pred_r = m.child("predictor", default_empty=True)
    predictor = _wrap("model.predictor", lambda: PredictorConfig(
        layers=pred_r.get("layers", int, 2),
        heads=pred_r.get("heads", int, 4),
        model_width=pred_r.get("model_width", int, 64),
        d_k=pred_r.get("d_k", int, 16),
        d_c=pred_r.get("d_c", int, 16),
        prompt_mlp_widths=tuple(pred_r.get("prompt_mlp_widths", list, [32])),
        t_emb_width=pred_r.get("t_emb_width", int, 128),
    ))
    pred_r.finish()
    sched_r = m.child("schedule", default_empty=True)
    schedule = ScheduleConfig(
        kind=sched_r.get("kind", str, "cosine"),
        t_diffusion=sched_r.get("t_diffusion", int, 200),
        beta_min=sched_r.get("beta_min", float, 1e-4),
        beta_max=sched_r.get("beta_max", float, 0.02),
    )
    sched_r.finish()
    if schedule.kind not in ("linear", "cosine"):
        raise ConfigError("model.schedule.kind must be 'linear' or 'cosine'")
    w_r = m.child("loss_weights", default_empty=True)
    weights = LossSettings(
        w_diff=w_r.get("w_diff", float, 1.0), w_phy=w_r.get("w_phy", float, 0.0)
    )
    w_r.finish()
    if weights.w_diff < 0 or weights.w_phy < 0:
        raise ConfigError("model.loss_weights must be >= 0")
    if weights.w_diff == 0 and weights.w_phy == 0:
        raise ConfigError("model.loss_weights must not both be zero")
    g_r = m.child("guidance", default_empty=True)
    guidance = GuidanceSettings(
        omega=g_r.get("omega", float, 0.2), p_drop=g_r.get("p_drop", float, 0.1)
    )
    g_r.finish()
    if guidance.omega < 0:
        raise ConfigError("model.guidance.omega must be >= 0")
    if not 0.0 <= guidance.p_drop < 1.0:
        raise ConfigError("model.guidance.p_drop must be in [0, 1)")
    pt_r = m.child("physics_term", default_empty=True)
    physics_term = _wrap("model.physics_term", lambda: PhysicsTermConfig(
        sample_budget=pt_r.get("sample_budget", int, 64),
        every_steps=pt_r.get("every_steps", int, 10),
        sharpness=pt_r.get("sharpness", float, 12.0),
    ))
    pt_r.finish()
    model = _wrap("model", lambda: ModelConfig(
        codec=codec,
        predictor=predictor,
        schedule=schedule,
        weights=weights,
        guidance=guidance,
        physics_term=physics_term,
        prompt_every=m.get("prompt_every", int, 1),
        train_on=m.get("train_on", str, "disaster"),
        adapt_on=m.get("adapt_on", str, "normal"),
        train_steps=m.get("train_steps", int, 400),
        train_lr=m.get("train_lr", float, 0.3),
        train_batch=m.get("train_batch", int, 8),
    ))
    m.finish()

    meta_r = root.child("meta", default_empty=True)
    meta = _wrap("meta", lambda: MetaConfig(
        lr_inner=meta_r.get("lr_inner", float, 0.3),
        lr_meta=meta_r.get("lr_meta", float, 0.3),
        lr_target=meta_r.get("lr_target", float, 0.3),
        inner_steps=meta_r.get("inner_steps", int, 20),
        meta_rounds=meta_r.get("meta_rounds", int, 5),
        target_steps=meta_r.get("target_steps", int, 50),
        batch_size=meta_r.get("batch_size", int, 8),
    ))
    meta_r.finish()

    eval_r = root.child("eval", default_empty=True)
    eval_cfg = _wrap("eval", lambda: EvalConfig(
        bins=eval_r.get("bins", int, 30),
        n_sample_users=eval_r.get("n_sample_users", int, 64),
    ))
    eval_r.finish()

    root.finish()

    for req, stage in ((sources, "sources"),):
        for name in req:
            if name not in names:
                raise ConfigError(f"world.{stage}: unknown city {name!r}")
    return RunConfig(
        seed=seed, out_dir=out_dir, cities=cities, sources=sources, target=target,
        physics=physics, model=model, meta=meta, eval=eval_cfg,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return parse_config(data)


def config_to_dict(cfg: RunConfig) -> dict:
    def city_dict(spec: CitySpec) -> dict:
        g = spec.world.grid
        s = spec.scenario
        return {
            "name": spec.world.name,
            "grid": {
                "rows": g.rows, "cols": g.cols, "cell_km": g.cell_km,
                "slots_per_day": g.slots_per_day, "days": g.days,
                "slot_minutes": g.slot_minutes,
            },
            "n_users": spec.world.n_users,
            "home_work_fraction": spec.world.home_work_fraction,
            "epr_rho": spec.world.epr_rho,
            "epr_gamma": spec.world.epr_gamma,
            "seed": spec.world.seed,
            "scenario": {
                "epicenter": s.epicenter,
                "peak_intensity": s.peak_intensity,
                "spatial_sigma_km": s.spatial_sigma_km,
                "onset_slot": s.onset_slot,
                "duration_slots": s.duration_slots,
                "truth_decay": {
                    "k0": s.truth_decay.k0,
                    "alpha_decay": s.truth_decay.alpha_decay,
                    "rho_km": s.truth_decay.rho_km,
                },
                "disaster_type": s.disaster_type,
                "unit": s.unit,
            },
        }

    m = cfg.model
    out = {
        "seed": cfg.seed,
        "io": {"out_dir": cfg.out_dir},
        "world": {
            "cities": [city_dict(c) for c in cfg.cities],
            "sources": list(cfg.sources),
        },
        "physics": {
            "min_support": cfg.physics.min_support,
            "max_iters": cfg.physics.max_iters,
            "tol": cfg.physics.tol,
            "k0_grid": list(cfg.physics.k0_grid),
            "alpha_grid": list(cfg.physics.alpha_grid),
            "rho_grid_km": list(cfg.physics.rho_grid_km),
        },
        "model": {
            "codec": {
                "spatial_width": m.codec.spatial_width,
                "dow_width": m.codec.dow_width,
                "graph_radius_cells": m.codec.graph_radius_cells,
            },
            "predictor": {
                "layers": m.predictor.layers,
                "heads": m.predictor.heads,
                "model_width": m.predictor.model_width,
                "d_k": m.predictor.d_k,
                "d_c": m.predictor.d_c,
                "prompt_mlp_widths": list(m.predictor.prompt_mlp_widths),
                "t_emb_width": m.predictor.t_emb_width,
            },
            "schedule": {
                "kind": m.schedule.kind,
                "t_diffusion": m.schedule.t_diffusion,
                "beta_min": m.schedule.beta_min,
                "beta_max": m.schedule.beta_max,
            },
            "loss_weights": {"w_diff": m.weights.w_diff, "w_phy": m.weights.w_phy},
            "guidance": {"omega": m.guidance.omega, "p_drop": m.guidance.p_drop},
            "physics_term": {
                "sample_budget": m.physics_term.sample_budget,
                "every_steps": m.physics_term.every_steps,
                "sharpness": m.physics_term.sharpness,
            },
            "prompt_every": m.prompt_every,
            "train_on": m.train_on,
            "adapt_on": m.adapt_on,
            "train_steps": m.train_steps,
            "train_lr": m.train_lr,
            "train_batch": m.train_batch,
        },
        "meta": {
            "lr_inner": cfg.meta.lr_inner,
            "lr_meta": cfg.meta.lr_meta,
            "lr_target": cfg.meta.lr_target,
            "inner_steps": cfg.meta.inner_steps,
            "meta_rounds": cfg.meta.meta_rounds,
            "target_steps": cfg.meta.target_steps,
            "batch_size": cfg.meta.batch_size,
        },
        "eval": {"bins": cfg.eval.bins, "n_sample_users": cfg.eval.n_sample_users},
    }
    if cfg.target is not None:
        out["world"]["target"] = cfg.target
    return out


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
