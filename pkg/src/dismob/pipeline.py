"""Run orchestration: stages, persisted artifacts, manifests, resumability.

Every stage writes its outputs plus a stage record containing the config
hash; re-running a completed stage under the same config is a no-op that
reports "up to date".  All artifact paths inside manifests are relative to
the run directory so identical configurations produce byte-identical
manifests wherever they run.
"""

from __future__ import annotations

import json
import logging
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import LocationEmbedding
from .config import CitySpec, RunConfig, config_hash
from .conditioning import PromptContext
from .core import (CityDataset, Trajectory, aggregate_out_of_home_flow)
from .diffusion import (GuidanceConfig, LossWeights, PhysicsContext, TrainContext,
                        make_schedule, sample)
from .errors import ConfigError, MissingArtifactError
from .evalsuite import behavior_report, decay_metrics
from .io import read_field, read_trajectories, write_field, write_trajectories
from .metalearn import (MetaStore, adapt_target, assemble, draw_batch, inner_update,
                        meta_train)
from .model import CityModel, build_model
from .physics import DecayParams, FitReport, build_kernel, fit_decay, predict_disaster_flow
from .rng import substream
from .synthworld import build_city_dataset, make_disaster

log = logging.getLogger("dismob")


# ---------------------------------------------------------------- paths

def world_dir(out: Path, city: str) -> Path:
    return out / "world" / city


def physics_path(out: Path, city: str) -> Path:
    return out / "physics" / f"{city}.json"


def train_ckpt_path(out: Path, city: str) -> Path:
    return out / "train" / f"{city}.ckpt"


def meta_ckpt_path(out: Path) -> Path:
    return out / "train" / "meta.ckpt"


def adapt_ckpt_path(out: Path, city: str) -> Path:
    return out / "adapt" / f"{city}.ckpt"


def generated_path(out: Path, city: str) -> Path:
    return out / "generate" / f"{city}.csv"


def metrics_path(out: Path, city: str, ext: str) -> Path:
    return out / "eval" / f"{city}_metrics.{ext}"


# ------------------------------------------------------- stage records

def _stage_record_path(out: Path, stage: str) -> Path:
    return out / ".stages" / f"{stage}.json"


def stage_up_to_date(cfg: RunConfig, out: Path, stage: str, artifacts: list[Path]) -> bool:
    rec = _stage_record_path(out, stage)
    if not rec.exists():
        return False
    try:
        data = json.loads(rec.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    if data.get("config_hash") != config_hash(cfg):
        return False
    return all(p.exists() for p in artifacts)


def mark_stage_done(cfg: RunConfig, out: Path, stage: str, artifacts: list[Path]) -> None:
    rec = _stage_record_path(out, stage)
    rec.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "artifacts": sorted(str(p.relative_to(out)) for p in artifacts),
    }
    rec.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------ manifest

def write_run_manifest(cfg: RunConfig, out: Path) -> Path:
    artifacts = []
    for sub in ("world", "physics", "train", "adapt", "generate", "eval"):
        base = out / sub
        if base.exists():
            artifacts.extend(
                str(p.relative_to(out)) for p in sorted(base.rglob("*")) if p.is_file()
            )
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "dismob": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "artifacts": sorted(artifacts),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ------------------------------------------------------------- stage: world

def stage_world(cfg: RunConfig, out: Path) -> list[Path]:
    artifacts = []
    for spec in cfg.cities:
        d = world_dir(out, spec.world.name)
        artifacts.extend(
            [d / "normal.csv", d / "disaster.csv", d / "field.csv", d / "city.json"]
        )
    if stage_up_to_date(cfg, out, "world", artifacts):
        log.info("world: up to date")
        return artifacts
    for spec in cfg.cities:
        ds = build_city_dataset(spec.world, spec.scenario)
        d = world_dir(out, spec.world.name)
        d.mkdir(parents=True, exist_ok=True)
        write_trajectories(d / "normal.csv", ds.normal)
        write_trajectories(d / "disaster.csv", ds.disaster)
        write_field(d / "field.csv", ds.field)
        meta = {
            "city": spec.world.name,
            "homes": {uid: int(home) for uid, home in sorted(ds.homes.items())},
            "splits": {
                "train": sorted(ds.train_users),
                "val": sorted(ds.val_users),
                "test": sorted(ds.test_users),
            },
            "onset_slot": ds.field.onset_slot,
            "disaster_type": ds.field.disaster_type,
            "unit": ds.field.unit,
        }
        (d / "city.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        log.info("world: generated city %s (%d users)", spec.world.name, spec.world.n_users)
    mark_stage_done(cfg, out, "world", artifacts)
    return artifacts


def load_city(cfg: RunConfig, out: Path, name: str) -> CityDataset:
    spec = cfg.city(name)
    d = world_dir(out, name)
    meta_file = d / "city.json"
    if not meta_file.exists():
        raise MissingArtifactError(
            f"city artifacts for {name!r} not found under {d}; run make-world first"
        )
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    normal = read_trajectories(d / "normal.csv")
    disaster = read_trajectories(d / "disaster.csv")
    field = read_field(
        d / "field.csv", spec.world.grid, onset_slot=meta["onset_slot"],
        disaster_type=meta["disaster_type"], city=name, unit=meta["unit"],
    )
    return CityDataset(
        name=name,
        grid=spec.world.grid,
        normal=tuple(normal),
        disaster=tuple(disaster),
        field=field,
        train_users=frozenset(meta["splits"]["train"]),
        val_users=frozenset(meta["splits"]["val"]),
        test_users=frozenset(meta["splits"]["test"]),
        homes={uid: int(v) for uid, v in meta["homes"].items()},
    )


# ------------------------------------------------------------- stage: fit

def fit_city_physics(cfg: RunConfig, ds: CityDataset) -> tuple[DecayParams, FitReport]:
    normal_train = ds.subset(ds.normal, ds.train_users)
    disaster_train = ds.subset(ds.disaster, ds.train_users)
    f_norm = aggregate_out_of_home_flow(normal_train, ds.grid, ds.homes)
    f_obs = aggregate_out_of_home_flow(disaster_train, ds.grid, ds.homes)
    return fit_decay(f_norm, f_obs, ds.field, ds.grid, cfg.physics)


def stage_fit(cfg: RunConfig, out: Path, cities: list[str] | None = None) -> list[Path]:
    names = cities or [spec.world.name for spec in cfg.cities]
    artifacts = [physics_path(out, name) for name in names]
    if stage_up_to_date(cfg, out, "fit", artifacts):
        log.info("fit-physics: up to date")
        return artifacts
    for name in names:
        ds = load_city(cfg, out, name)
        params, report = fit_city_physics(cfg, ds)
        path = physics_path(out, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(report.as_record(params), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        log.info(
            "fit-physics %s: k0=%.4f alpha=%.4f rho=%.2f rmse=%.4f",
            name, params.k0, params.alpha_decay, params.rho_km, report.rmse,
        )
    mark_stage_done(cfg, out, "fit", artifacts)
    return artifacts


def load_fitted(out: Path, city: str) -> DecayParams:
    path = physics_path(out, city)
    if not path.exists():
        raise MissingArtifactError(
            f"fitted physics for {city!r} not found at {path}; run fit-physics first"
        )
    data = json.loads(path.read_text(encoding="utf-8"))
    return DecayParams(data["k0"], data["alpha_decay"], data["rho_km"])


# ---------------------------------------------------- training assembly

def prompt_context_for(cfg: RunConfig, ds: CityDataset, fitted: DecayParams) -> PromptContext:
    kernel = build_kernel(ds.grid, fitted.rho_km)
    return PromptContext(fitted, kernel, ds.field)


def train_context_for(
    cfg: RunConfig, ds: CityDataset, fitted: DecayParams, mode: str | None = None
) -> TrainContext:
    """Loss context for one city.  With mode "normal" (the zero-shot protocol)
    the data term is conditioned on a no-disaster prompt and the physics term
    alone carries the disaster structure."""
    m = cfg.model
    mode = mode or m.train_on
    schedule = make_schedule(
        m.schedule.kind, m.schedule.t_diffusion, m.schedule.beta_min, m.schedule.beta_max
    )
    guidance = GuidanceConfig(m.guidance.omega, m.guidance.p_drop)
    weights = LossWeights(m.weights.w_diff, m.weights.w_phy)
    pctx = prompt_context_for(cfg, ds, fitted)
    physics = None
    if weights.w_phy > 0:
        normal_train = ds.subset(ds.normal, ds.train_users)
        f_norm_out = aggregate_out_of_home_flow(normal_train, ds.grid, ds.homes)
        F_dis = predict_disaster_flow(f_norm_out, fitted, pctx.kernel, ds.field)
        physics = PhysicsContext(
            pctx, F_dis, n_reference=len(normal_train),
            sample_budget=m.physics_term.sample_budget,
            every_steps=m.physics_term.every_steps,
            sharpness=m.physics_term.sharpness,
            prompt_every=m.prompt_every,
        )
    data_prompt = pctx.as_no_disaster() if mode == "normal" else pctx
    return TrainContext(schedule, weights, guidance, data_prompt, physics)


def training_sets(cfg: RunConfig, ds: CityDataset, mode: str):
    pool = ds.disaster if mode == "disaster" else ds.normal
    return ds.subset(pool, ds.train_users), ds.subset(pool, ds.val_users)


def write_train_log(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("step,loss_diff,loss_phy,loss_total\n")
        for row in rows:
            fh.write(
                f"{row['step']},{row['loss_diff']:.8g},"
                f"{row['loss_phy']:.8g},{row['loss_total']:.8g}\n"
            )


# --------------------------------------------------- stage: train (single)

def stage_train_single(cfg: RunConfig, out: Path, city: str) -> list[Path]:
    ckpt = train_ckpt_path(out, city)
    log_path = out / "train" / f"{city}_log.csv"
    artifacts = [ckpt, log_path]
    if stage_up_to_date(cfg, out, f"train-single-{city}", artifacts):
        log.info("train %s: up to date", city)
        return artifacts
    ds = load_city(cfg, out, city)
    fitted = load_fitted(out, city)
    ctx = train_context_for(cfg, ds, fitted)
    spec = cfg.city(city)
    model = build_model(
        city, spec.world.grid, cfg.model.codec, cfg.model.predictor, cfg.seed
    )
    train_set, _ = training_sets(cfg, ds, cfg.model.train_on)
    rng = substream(cfg.seed, "train", city)
    rows: list[dict] = []
    inner_update(
        model, train_set, cfg.model.train_steps, cfg.model.train_lr, ctx, rng,
        batch_size=cfg.model.train_batch, log=rows,
    )
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model.params)
    write_train_log(log_path, rows)
    mark_stage_done(cfg, out, f"train-single-{city}", artifacts)
    log.info("train %s: %d steps done", city, cfg.model.train_steps)
    return artifacts


# ------------------------------------------------------ stage: train (meta)

def save_meta_store(store: MetaStore, path: Path) -> None:
    params = dict(store.shared)
    for city in sorted(store.private):
        for name, p in store.private[city].items():
            params[f"{city}::{name}"] = p
    save_checkpoint(path, params)


def load_meta_store(cfg: RunConfig, path: Path) -> MetaStore:
    raw = load_checkpoint(path)
    store = MetaStore(cfg.model.codec, cfg.model.predictor, cfg.seed)
    for name, p in raw.items():
        if "::" in name:
            city, bare = name.split("::", 1)
            p.name = bare
            store.private.setdefault(city, {})[bare] = p
        else:
            store.shared[name] = p
    return store


def stage_train_meta(cfg: RunConfig, out: Path) -> list[Path]:
    ckpt = meta_ckpt_path(out)
    log_path = out / "train" / "meta_log.csv"
    artifacts = [ckpt, log_path]
    if stage_up_to_date(cfg, out, "train-meta", artifacts):
        log.info("train --meta: up to date")
        return artifacts
    if not cfg.sources:
        raise ConfigError("world.sources must name at least one city for meta training")
    datasets = [load_city(cfg, out, name) for name in cfg.sources]
    contexts = {ds.name: train_context_for(cfg, ds, load_fitted(out, ds.name)) for ds in datasets}
    store = MetaStore.initialize(cfg.model.codec, cfg.model.predictor, cfg.seed)
    history = meta_train(
        datasets, store, cfg.meta,
        ctx_for=lambda ds: contexts[ds.name],
        data_for=lambda ds: training_sets(cfg, ds, cfg.model.train_on),
        seed=cfg.seed,
    )
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_meta_store(store, ckpt)
    with log_path.open("w", encoding="utf-8") as fh:
        fh.write("round,city,val_loss\n")
        for row in history:
            fh.write(f"{row['round']},{row['city']},{row['val_loss']:.8g}\n")
    mark_stage_done(cfg, out, "train-meta", artifacts)
    return artifacts


# ----------------------------------------------------------- stage: adapt

def stage_adapt(cfg: RunConfig, out: Path) -> list[Path]:
    if cfg.target is None:
        raise ConfigError("world.target must be set for the adapt stage")
    city = cfg.target
    ckpt = adapt_ckpt_path(out, city)
    log_path = out / "adapt" / f"{city}_log.csv"
    artifacts = [ckpt, log_path]
    if stage_up_to_date(cfg, out, "adapt", artifacts):
        log.info("adapt: up to date")
        return artifacts
    store = load_meta_store(cfg, meta_ckpt_path(out))
    ds = load_city(cfg, out, city)
    fitted = load_fitted(out, city)
    ctx = train_context_for(cfg, ds, fitted, mode=cfg.model.adapt_on)
    train_set, _ = training_sets(cfg, ds, cfg.model.adapt_on)
    rows: list[dict] = []
    model, _ = adapt_target(store, ds, cfg.meta, ctx, train_set, cfg.seed, log=rows)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model.params)
    write_train_log(log_path, rows)
    mark_stage_done(cfg, out, "adapt", artifacts)
    return artifacts


# -------------------------------------------------------- stage: generate

def load_city_model(cfg: RunConfig, ckpt_path: Path, city: str) -> CityModel:
    spec = cfg.city(city)
    params = load_checkpoint(ckpt_path)
    missing = [n for n in ("codec.D", "codec.P", "codec.Z") if n not in params]
    if missing:
        raise MissingArtifactError(
            f"{ckpt_path}: checkpoint lacks parameters {missing}; not a city model"
        )
    emb = LocationEmbedding(params["codec.D"].value.astype(np.float64))
    return CityModel(
        city, spec.world.grid, cfg.model.codec, cfg.model.predictor, params, emb
    )


def find_checkpoint(cfg: RunConfig, out: Path, city: str) -> Path:
    for candidate in (adapt_ckpt_path(out, city), train_ckpt_path(out, city)):
        if candidate.exists():
            return candidate
    raise MissingArtifactError(
        f"no checkpoint for city {city!r} under {out}; run train or adapt first"
    )


def stage_generate(
    cfg: RunConfig, out: Path, city: str, ckpt: Path | None = None,
    n_users: int | None = None,
) -> list[Path]:
    gen_path = generated_path(out, city)
    artifacts = [gen_path]
    stage = f"generate-{city}"
    if ckpt is None and stage_up_to_date(cfg, out, stage, artifacts):
        log.info("generate %s: up to date", city)
        return artifacts
    ckpt = ckpt or find_checkpoint(cfg, out, city)
    model = load_city_model(cfg, ckpt, city)
    fitted = load_fitted(out, city)
    spec = cfg.city(city)
    field = make_disaster(spec.scenario, spec.world.grid)
    pctx = PromptContext(fitted, build_kernel(spec.world.grid, fitted.rho_km), field)
    m = cfg.model
    schedule = make_schedule(
        m.schedule.kind, m.schedule.t_diffusion, m.schedule.beta_min, m.schedule.beta_max
    )
    guidance = GuidanceConfig(m.guidance.omega, m.guidance.p_drop)
    trajs = sample(
        model, schedule, guidance, pctx,
        n_users=n_users or cfg.eval.n_sample_users,
        length=spec.world.grid.n_slots,
        seed=cfg.seed,
        prompt_every=m.prompt_every,
    )
    gen_path.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(gen_path, trajs)
    mark_stage_done(cfg, out, stage, artifacts)
    log.info("generate %s: %d trajectories", city, len(trajs))
    return artifacts


# -------------------------------------------------------- stage: evaluate

def evaluate_city(
    cfg: RunConfig, out: Path, city: str, gen: list[Trajectory]
) -> dict[str, float]:
    ds = load_city(cfg, out, city)
    real_test = ds.subset(ds.disaster, ds.test_users)
    report = behavior_report(real_test, gen, ds.grid, bins=cfg.eval.bins)
    mape_rate, mape_speed = decay_metrics(
        gen, ds.disaster, ds.normal, ds.field, ds.grid,
        fit_opts=cfg.physics, homes=ds.homes,
    )
    report["mape_decay_rate"] = mape_rate
    report["mape_decay_speed"] = mape_speed
    return report


_METRIC_ORDER = (
    "jsd_distance", "jsd_radius", "jsd_duration", "jsd_dailyloc",
    "mape_decay_rate", "mape_decay_speed",
)


def write_metrics(out: Path, city: str, metrics: dict[str, float]) -> list[Path]:
    json_path = metrics_path(out, city, "json")
    csv_path = metrics_path(out, city, "csv")
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(
        json.dumps({k: metrics[k] for k in _METRIC_ORDER}, indent=2) + "\n",
        encoding="utf-8",
    )
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(_METRIC_ORDER) + "\n")
        fh.write(",".join(f"{metrics[k]:.8g}" for k in _METRIC_ORDER) + "\n")
    return [json_path, csv_path]


def plot_metric_overlays(cfg: RunConfig, out: Path, city: str, gen) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalsuite import _shared_edges, trajectory_statistics

    ds = load_city(cfg, out, city)
    real_test = ds.subset(ds.disaster, ds.test_users)
    real_stats = trajectory_statistics(real_test, ds.grid)
    gen_stats = trajectory_statistics(gen, ds.grid)
    plot_dir = out / "eval" / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key in ("distance", "radius", "duration", "dailyloc"):
        edges = _shared_edges(real_stats[key], cfg.eval.bins)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.hist(np.clip(real_stats[key], edges[0], edges[-1]), bins=edges,
                alpha=0.55, density=True, label="real")
        ax.hist(np.clip(gen_stats[key], edges[0], edges[-1]), bins=edges,
                alpha=0.55, density=True, label="generated")
        ax.set_title(f"{city}: {key}")
        ax.legend()
        fig.tight_layout()
        path = plot_dir / f"{city}_{key}.svg"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def stage_evaluate(
    cfg: RunConfig, out: Path, city: str, gen_file: Path | None = None,
    plots: bool = False,
) -> list[Path]:
    gen_file = gen_file or generated_path(out, city)
    if not gen_file.exists():
        raise MissingArtifactError(
            f"generated trajectories not found at {gen_file}; run generate first"
        )
    artifacts = [metrics_path(out, city, "json"), metrics_path(out, city, "csv")]
    stage = f"evaluate-{city}"
    if not plots and stage_up_to_date(cfg, out, stage, artifacts):
        log.info("evaluate %s: up to date", city)
        return artifacts
    gen = read_trajectories(gen_file)
    metrics = evaluate_city(cfg, out, city, gen)
    artifacts = write_metrics(out, city, metrics)
    if plots:
        artifacts.extend(plot_metric_overlays(cfg, out, city, gen))
    mark_stage_done(cfg, out, stage, artifacts[:2])
    log.info(
        "evaluate %s: %s", city,
        " ".join(f"{k}={metrics[k]:.4g}" for k in _METRIC_ORDER),
    )
    return artifacts


# ------------------------------------------------------------ pipeline

def run_pipeline(cfg: RunConfig, out: Path, plots: bool = False) -> list[Path]:
    """world -> fit -> meta-train -> adapt -> generate -> evaluate."""
    if cfg.target is None:
        raise ConfigError("pipeline requires world.target")
    artifacts = []
    artifacts += stage_world(cfg, out)
    artifacts += stage_fit(cfg, out)
    artifacts += stage_train_meta(cfg, out)
    artifacts += stage_adapt(cfg, out)
    artifacts += stage_generate(cfg, out, cfg.target)
    artifacts += stage_evaluate(cfg, out, cfg.target, plots=plots)
    return artifacts
