import numpy as np
import pytest

from dismob import autodiff as ad
from dismob.conditioning import PredictorConfig, PromptContext
from dismob.core import GridSpec
from dismob.diffusion import (GuidanceConfig, LossWeights, TrainContext,
                              make_schedule)
from dismob.errors import ConfigError, InsufficientDataError
from dismob.layers import Leaves
from dismob.metalearn import (MetaConfig, MetaStore, adapt_target, assemble,
                              inner_update, meta_train, meta_update, sgd_step,
                              write_back_private)
from dismob.model import CodecConfig, tag_for
from dismob.physics import DecayParams, build_kernel
from dismob.rng import substream
from dismob.synthworld import (DisasterScenario, WorldConfig, build_city_dataset,
                               make_disaster)

GRID = GridSpec(5, 5, 1.0, 48, 1, 30)
CODEC = CodecConfig(spatial_width=8, dow_width=3, graph_radius_cells=1.5)
PRED = PredictorConfig(layers=1, heads=2, model_width=16, d_k=8, d_c=6,
                       prompt_mlp_widths=(8,))


def make_store(seed=3):
    return MetaStore.initialize(CODEC, PRED, seed)


def city_dataset(name, seed, n_users=24):
    cfg = WorldConfig(GRID, n_users, 0.9, 0.2, 0.6, seed=seed, name=name)
    scen = DisasterScenario(12, 0.8, 1.6, 16, 28, DecayParams(0.7, 0.12, 2.0))
    return build_city_dataset(cfg, scen)


def prompt_ctx_for(ds):
    return PromptContext(DecayParams(0.5, 0.1, 2.0), build_kernel(ds.grid, 2.0), ds.field)


def train_ctx(ds):
    return TrainContext(make_schedule("cosine", 8), LossWeights(1.0, 0.0),
                        GuidanceConfig(0.0, 0.1), prompt_ctx_for(ds))


class QuadraticLoss:
    """Surrogate loss: 0.5 * sum((p - target)^2) over one named parameter."""

    def __init__(self, name, target):
        self.name = name
        self.target = target
        self.last_parts = {}

    def compute(self, leaves, model, batch, rng, step=0):
        p = leaves.leaf(model.params[self.name])
        diff = ad.sub(p, ad.constant(self.target))
        loss = ad.scale(ad.sum_all(ad.square(diff)), 0.5)
        self.last_parts = {"loss_diff": float(loss.value), "loss_phy": 0.0,
                           "loss_total": float(loss.value)}
        return loss


class ZeroLoss:
    last_parts = {}

    def compute(self, leaves, model, batch, rng, step=0):
        self.last_parts = {"loss_diff": 0.0, "loss_phy": 0.0, "loss_total": 0.0}
        return ad.constant(np.asarray(0.0))


class TestAssemble:
    def test_two_assemblies_are_independent(self):
        store = make_store()
        a = assemble(store, "cityA", GRID)
        b = assemble(store, "cityA", GRID)
        a.params["codec.P"].value[:] = 123.0
        a.params["predictor.t_proj.w"].value[:] = -7.0
        assert not np.array_equal(a.params["codec.P"].value, b.params["codec.P"].value)
        assert not np.array_equal(a.params["predictor.t_proj.w"].value,
                                  b.params["predictor.t_proj.w"].value)
        # and the store originals are untouched
        assert not np.array_equal(store.shared["predictor.t_proj.w"].value,
                                  a.params["predictor.t_proj.w"].value)

    def test_new_city_gets_seeded_private_init(self):
        store = make_store(seed=9)
        model = assemble(store, "fresh", GRID)
        from dismob.model import private_parameters
        expected = private_parameters("fresh", GRID, CODEC, PRED, seed=9)
        for name, p in expected.items():
            assert np.array_equal(model.params[name].value, p.value)

    def test_name_partition(self):
        store = make_store()
        model = assemble(store, "cityB", GRID)
        shared_names = set(store.shared)
        private_names = set(store.private["cityB"])
        assert shared_names | private_names == set(model.params)
        assert not (shared_names & private_names)
        for name, p in model.params.items():
            assert p.tag == tag_for(name, "cityB")

    def test_partition_validation(self):
        store = make_store()
        assemble(store, "cityC", GRID)
        store.validate_partition()


class TestInnerUpdate:
    def test_zero_learning_rate_is_identity(self):
        store = make_store()
        model = assemble(store, "c", GRID)
        before = {n: p.value.copy() for n, p in model.params.items()}
        ds = city_dataset("c", 5)
        inner_update(model, ds.disaster, steps=3, lr_inner=0.0,
                     loss_ctx=train_ctx(ds), rng=substream(1, "t"), batch_size=2)
        for n, p in model.params.items():
            assert np.array_equal(p.value, before[n])

    def test_zero_gradient_double_is_identity(self):
        store = make_store()
        model = assemble(store, "c", GRID)
        before = {n: p.value.copy() for n, p in model.params.items()}
        ds = city_dataset("c", 5)
        inner_update(model, ds.disaster, steps=3, lr_inner=0.5,
                     loss_ctx=ZeroLoss(), rng=substream(2, "t"), batch_size=2)
        for n, p in model.params.items():
            assert np.array_equal(p.value, before[n])

    def test_single_step_matches_closed_form(self):
        store = make_store()
        model = assemble(store, "c", GRID)
        name = "codec.P"
        target = np.zeros_like(model.params[name].value)
        start = model.params[name].value.copy()
        ds = city_dataset("c", 5)
        lr = 0.25
        inner_update(model, ds.disaster, steps=1, lr_inner=lr,
                     loss_ctx=QuadraticLoss(name, target), rng=substream(3, "t"))
        # gradient of 0.5||p||^2 is p, so p' = p - lr*p exactly
        expected = (start - (lr * start).astype(start.dtype)).astype(start.dtype)
        assert np.allclose(model.params[name].value, expected, atol=1e-7)


class TestMetaUpdate:
    def test_zero_meta_lr_leaves_store(self):
        store = make_store()
        model = assemble(store, "c", GRID)
        before = {n: p.value.copy() for n, p in store.shared.items()}
        ds = city_dataset("c", 5)
        meta_update(store, model, ds.disaster, 0.0, train_ctx(ds), substream(4, "t"))
        for n, p in store.shared.items():
            assert np.array_equal(p.value, before[n])

    def test_private_store_untouched_bitwise(self):
        store = make_store()
        model = assemble(store, "c", GRID)
        private_before = {n: p.value.copy() for n, p in store.private["c"].items()}
        ds = city_dataset("c", 5)
        meta_update(store, model, ds.disaster, 0.3, train_ctx(ds), substream(5, "t"))
        for n, p in store.private["c"].items():
            assert np.array_equal(p.value, private_before[n])

    def test_scalar_model_closed_form(self):
        store = make_store()
        model = assemble(store, "c", GRID)
        name = "prompt.null_row"  # a shared parameter
        target = np.full_like(store.shared[name].value, 2.0)
        adapted_value = model.params[name].value.copy()
        store_before = store.shared[name].value.copy()
        ds = city_dataset("c", 5)
        lr = 0.5
        meta_update(store, model, ds.disaster, lr, QuadraticLoss(name, target),
                    substream(6, "t"))
        # gradient evaluated at the adapted copy, applied to the meta original
        grad = adapted_value - target
        expected = (store_before - lr * grad).astype(store_before.dtype)
        assert np.allclose(store.shared[name].value, expected, atol=1e-7)


class TestMetaTrain:
    def test_requires_cities(self):
        with pytest.raises(InsufficientDataError):
            meta_train([], make_store(), MetaConfig(), lambda ds: None,
                       lambda ds: ((), ()), seed=0)

    def test_single_city_single_round_runs(self):
        store = make_store(seed=11)
        ds = city_dataset("solo", 7)
        cfg = MetaConfig(lr_inner=0.1, lr_meta=0.1, inner_steps=2, meta_rounds=1,
                         target_steps=1, batch_size=2)
        history = meta_train([ds], store, cfg, ctx_for=lambda d: train_ctx(d),
                             data_for=lambda d: (d.disaster, d.disaster), seed=1)
        assert len(history) == 1
        assert history[0]["city"] == "solo"
        assert np.isfinite(history[0]["val_loss"])

    def test_noop_with_zero_learning_rates(self):
        store = make_store(seed=12)
        ds_a = city_dataset("a", 8)
        ds_b = city_dataset("b", 9)
        shared_before = {n: p.value.copy() for n, p in store.shared.items()}
        cfg = MetaConfig(lr_inner=0.0, lr_meta=0.0, inner_steps=2, meta_rounds=2,
                         target_steps=1, batch_size=2)
        meta_train([ds_a, ds_b], store, cfg, ctx_for=lambda d: train_ctx(d),
                   data_for=lambda d: (d.disaster, d.disaster), seed=2)
        for n, p in store.shared.items():
            assert np.array_equal(p.value, shared_before[n])
        for city in ("a", "b"):
            from dismob.model import private_parameters
            expected = private_parameters(city, GRID, CODEC, PRED, seed=12)
            for n, p in store.private[city].items():
                assert np.array_equal(p.value, expected[n].value)

    def test_deterministic(self):
        def run():
            store = make_store(seed=13)
            cities = [city_dataset("a", 8), city_dataset("b", 9)]
            cfg = MetaConfig(lr_inner=0.2, lr_meta=0.2, inner_steps=2,
                             meta_rounds=2, target_steps=1, batch_size=2)
            meta_train(cities, store, cfg, ctx_for=lambda d: train_ctx(d),
                       data_for=lambda d: (d.disaster, d.disaster), seed=3)
            return store
        s1, s2 = run(), run()
        for n in s1.shared:
            assert np.array_equal(s1.shared[n].value, s2.shared[n].value)
        for city in s1.private:
            for n in s1.private[city]:
                assert np.array_equal(s1.private[city][n].value,
                                      s2.private[city][n].value)

    def test_private_write_back(self):
        store = make_store(seed=14)
        ds = city_dataset("wb", 8)
        before = {n: p.value.copy() for n, p in store.ensure_private("wb", GRID).items()}
        cfg = MetaConfig(lr_inner=0.3, lr_meta=0.0, inner_steps=3, meta_rounds=1,
                         target_steps=1, batch_size=2)
        meta_train([ds], store, cfg, ctx_for=lambda d: train_ctx(d),
                   data_for=lambda d: (d.disaster, d.disaster), seed=4)
        changed = any(
            not np.array_equal(store.private["wb"][n].value, before[n])
            for n in before if store.private["wb"][n].trainable
        )
        assert changed


class TestAdaptTarget:
    def test_zero_steps_returns_assembled_init(self):
        store = make_store(seed=15)
        ds = city_dataset("tgt", 10)
        cfg = MetaConfig(target_steps=0)
        model, _ = adapt_target(store, ds, cfg, train_ctx(ds), ds.normal, seed=5)
        ref = assemble(store, "tgt", GRID)
        for n, p in model.params.items():
            assert np.array_equal(p.value, ref.params[n].value)

    def test_empty_training_set(self):
        store = make_store(seed=16)
        ds = city_dataset("tgt", 10)
        with pytest.raises(InsufficientDataError):
            adapt_target(store, ds, MetaConfig(), train_ctx(ds), (), seed=6)

    def test_store_shared_unchanged(self):
        store = make_store(seed=17)
        ds = city_dataset("tgt", 10)
        shared_before = {n: p.value.copy() for n, p in store.shared.items()}
        cfg = MetaConfig(lr_target=0.3, target_steps=3, batch_size=2)
        adapt_target(store, ds, cfg, train_ctx(ds), ds.normal, seed=7)
        for n, p in store.shared.items():
            assert np.array_equal(p.value, shared_before[n])


class TestMetaConfigValidation:
    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError):
            MetaConfig(lr_inner=-0.1)

    def test_zero_rounds_rejected(self):
        with pytest.raises(ConfigError):
            MetaConfig(meta_rounds=0)
