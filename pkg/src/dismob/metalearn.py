"""Shared/private parameter partition and the meta-training loop.

The meta store owns one shared parameter set plus one private set per city.
Assembly deep-copies both, so mutating an assembled model never touches the
store; the training loop explicitly writes adapted private parameters back.
Meta updates are first-order: the validation gradient is evaluated at the
adapted parameters and applied to the stored shared originals.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .codec import LocationEmbedding
from .conditioning import PredictorConfig
from .core import CityDataset, GridSpec, Trajectory
from .errors import ConfigError, InsufficientDataError, InvalidInputError
from .layers import Leaves, Parameter, zero_grads
from .model import (CityModel, CodecConfig, private_parameters, shared_parameters,
                    tag_for)
from .rng import substream


@dataclass(frozen=True)
class MetaConfig:
    lr_inner: float = 0.05
    lr_meta: float = 0.05
    lr_target: float = 0.05
    inner_steps: int = 20
    meta_rounds: int = 5
    target_steps: int = 50
    batch_size: int = 8

    def __post_init__(self):
        # Zero learning rates / step counts are legal degenerate schedules
        # (identity updates); negative values are not.
        for name in ("lr_inner", "lr_meta", "lr_target"):
            if getattr(self, name) < 0:
                raise ConfigError(f"meta.{name} must be >= 0")
        for name in ("inner_steps", "target_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"meta.{name} must be >= 0")
        for name in ("meta_rounds", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"meta.{name} must be >= 1")


@dataclass
class MetaStore:
    """Meta-shared parameters plus per-city private parameter sets."""

    codec_cfg: CodecConfig
    pred_cfg: PredictorConfig
    seed: int
    shared: dict[str, Parameter] = dc_field(default_factory=dict)
    private: dict[str, dict[str, Parameter]] = dc_field(default_factory=dict)

    @classmethod
    def initialize(cls, codec_cfg: CodecConfig, pred_cfg: PredictorConfig, seed: int) -> "MetaStore":
        return cls(codec_cfg, pred_cfg, seed, shared_parameters(pred_cfg, seed), {})

    def ensure_private(self, city: str, grid: GridSpec) -> dict[str, Parameter]:
        if city not in self.private:
            self.private[city] = private_parameters(
                city, grid, self.codec_cfg, self.pred_cfg, self.seed
            )
        return self.private[city]

    def validate_partition(self) -> None:
        for name, p in self.shared.items():
            if p.tag != "shared" or tag_for(name, "any") != "shared":
                raise InvalidInputError(f"parameter {name!r} wrongly placed in shared")
        for city, params in self.private.items():
            for name, p in params.items():
                if p.tag != f"private:{city}" or tag_for(name, city) == "shared":
                    raise InvalidInputError(
                        f"parameter {name!r} wrongly placed in private({city})"
                    )
            if set(params) & set(self.shared):
                raise InvalidInputError("shared and private parameter names overlap")


def assemble(store: MetaStore, city: str, grid: GridSpec) -> CityModel:
    """Deep copies of meta-shared and the city's private set (created fresh on
    first use); mutation of the result never reaches the store."""
    private = store.ensure_private(city, grid)
    params = {name: p.copy() for name, p in store.shared.items()}
    params.update({name: p.copy() for name, p in private.items()})
    emb = LocationEmbedding(params["codec.D"].value.astype(np.float64))
    return CityModel(city, grid, store.codec_cfg, store.pred_cfg, params, emb)


def write_back_private(store: MetaStore, model: CityModel) -> None:
    """Persist a model's adapted private parameters into the store."""
    private = store.private[model.city]
    for name, p in private.items():
        p.value = model.params[name].value.copy()


def draw_batch(
    trajs: tuple[Trajectory, ...] | list[Trajectory],
    batch_size: int,
    rng: np.random.Generator,
) -> list[Trajectory]:
    if not trajs:
        raise InsufficientDataError("empty training set")
    idx = rng.integers(0, len(trajs), size=min(batch_size, len(trajs)))
    return [trajs[i] for i in idx.tolist()]


def sgd_step(
    model: CityModel,
    batch: list[Trajectory],
    loss_ctx,
    rng: np.random.Generator,
    lr: float,
    step: int = 0,
) -> float:
    """One descent step on the context's loss over the given batch."""
    trainable = model.trainable_params()
    zero_grads(trainable)
    leaves = Leaves()
    loss = loss_ctx.compute(leaves, model, batch, rng, step)
    ad.backward(loss)
    leaves.accumulate_grads()
    if lr != 0.0:
        for p in trainable:
            p.value = (p.value - lr * p.grad).astype(p.value.dtype)
    return float(loss.value)


def inner_update(
    model: CityModel,
    train_set,
    steps: int,
    lr_inner: float,
    loss_ctx,
    rng: np.random.Generator,
    batch_size: int = 8,
    log: list | None = None,
    step_offset: int = 0,
) -> tuple[CityModel, float]:
    """`steps` seeded mini-batch descent steps on the total loss, updating the
    model's shared-copy and private parameters in place."""
    last = float("nan")
    for s in range(steps):
        batch = draw_batch(train_set, batch_size, rng)
        last = sgd_step(model, batch, loss_ctx, rng, lr_inner, step=step_offset + s)
        if log is not None:
            log.append({"step": step_offset + s, **loss_ctx.last_parts})
    return model, last


def meta_update(
    store: MetaStore,
    adapted: CityModel,
    val_set,
    lr_meta: float,
    loss_ctx,
    rng: np.random.Generator,
    batch_size: int = 8,
) -> float:
    """First-order meta step: validation gradient at the adapted parameters,
    applied to the stored shared originals only."""
    batch = draw_batch(val_set, batch_size, rng)
    trainable = adapted.trainable_params()
    zero_grads(trainable)
    leaves = Leaves()
    loss = loss_ctx.compute(leaves, adapted, batch, rng, step=0)
    ad.backward(loss)
    leaves.accumulate_grads()
    if lr_meta != 0.0:
        for name, meta_p in store.shared.items():
            grad = adapted.params[name].grad
            meta_p.value = (meta_p.value - lr_meta * grad).astype(meta_p.value.dtype)
    return float(loss.value)


def meta_train(
    cities: list[CityDataset],
    store: MetaStore,
    config: MetaConfig,
    ctx_for: Callable[[CityDataset], object],
    data_for: Callable[[CityDataset], tuple[list[Trajectory], list[Trajectory]]],
    seed: int,
) -> list[dict]:
    """Meta-rounds over the source cities, each round visiting the cities in a
    seeded shuffled order: assemble -> inner update -> write back private ->
    meta update.  Returns per-(round, city) validation losses."""
    if not cities:
        raise InsufficientDataError("meta_train needs at least one source city")
    history = []
    contexts = {ds.name: ctx_for(ds) for ds in cities}
    for rnd in range(config.meta_rounds):
        order = list(range(len(cities)))
        substream(seed, "meta-order", rnd).shuffle(order)
        for pos in order:
            ds = cities[pos]
            model = assemble(store, ds.name, ds.grid)
            train_set, val_set = data_for(ds)
            loss_ctx = contexts[ds.name]
            rng = substream(seed, "train", ds.name, rnd)
            inner_update(
                model, train_set, config.inner_steps, config.lr_inner,
                loss_ctx, rng, batch_size=config.batch_size,
            )
            write_back_private(store, model)
            val_loss = meta_update(
                store, model, val_set, config.lr_meta, loss_ctx, rng,
                batch_size=config.batch_size,
            )
            history.append({"round": rnd, "city": ds.name, "val_loss": val_loss})
    return history


def adapt_target(
    store: MetaStore,
    target: CityDataset,
    config: MetaConfig,
    loss_ctx,
    train_set,
    seed: int,
    log: list | None = None,
) -> tuple[CityModel, float]:
    """Assemble meta-shared with a fresh private set for the target city and
    fine-tune on its training set; the store itself is left unchanged."""
    if not train_set:
        raise InsufficientDataError(f"target city {target.name!r} has no training data")
    model = assemble(store, target.name, target.grid)
    rng = substream(seed, "adapt", target.name)
    model, last = inner_update(
        model, train_set, config.target_steps, config.lr_target,
        loss_ctx, rng, batch_size=config.batch_size, log=log,
    )
    return model, last
