"""Losses, the alternating update, and the fit loop."""

import math

import numpy as np
import pytest

from daf.data import SyntheticSpec, generate_sinusoids, make_windows, split_dataset
from daf.errors import ConfigurationError, ContractError
from daf.model import ModelConfig, WindowBatch, build_models, generator_forward
from daf.numerics import Tensor, backward, concat, constant, no_grad
from daf.training import (
    TrainConfig,
    fit,
    loss_dom,
    loss_seq,
    make_optimizers,
    total_loss,
    train_step,
)

rng = np.random.default_rng(2718)

CFG = ModelConfig(hidden=8, kernel_sizes=(3,), mlp_layers=1, n_covariates=2)


def make_splits(n_target=12, n_source=20, history=14, horizon=3, seed=0):
    def build(n, seed, domain, freq):
        spec = SyntheticSpec(
            n_series=n, history=history, horizon=horizon, seed=seed,
            freq_min=freq[0], freq_max=freq[1],
        )
        wins = make_windows(list(generate_sinusoids(spec)), history, horizon, domain=domain)
        return split_dataset(wins, seed=seed)

    return (
        build(n_source, seed + 1, "source", (1 / history, 8 / history)),
        build(n_target, seed + 2, "target", (2 / history, 2 / history)),
    )


def batches(source, target, k=6):
    bs = WindowBatch.from_windows(source.train[:k])
    bt = WindowBatch.from_windows(target.train[:k])
    return bs, bt


class TestLossSeq:
    def test_perfect_outputs_zero(self):
        x = rng.normal(size=(2, 5))
        y = rng.normal(size=(2, 3))
        out = loss_seq(constant(x), constant(y), x, y)
        assert out.item() == 0.0

    def test_hand_example_T1_tau1(self):
        out = loss_seq(
            constant([[0.0]]), constant([[0.0]]), np.array([[1.0]]), np.array([[1.0]])
        )
        assert out.item() == pytest.approx(2.0)

    def test_quadratic_scaling(self):
        x, y = np.zeros((2, 4)), np.zeros((2, 2))
        xh = rng.normal(size=(2, 4))
        yh = rng.normal(size=(2, 2))
        one = loss_seq(constant(xh), constant(yh), x, y).item()
        two = loss_seq(constant(2 * xh), constant(2 * yh), x, y).item()
        assert two == pytest.approx(4 * one)

    def test_shape_mismatch(self):
        with pytest.raises(Exception, match="shape|outputs"):
            loss_seq(constant(np.zeros((2, 3))), constant(np.zeros((2, 2))),
                     np.zeros((2, 4)), np.zeros((2, 2)))


class TestLossDom:
    def _store_with_disc(self, const=None):
        store = build_models(CFG, "full", seed=1)
        if const is not None:
            for name in ("disc.w0", "disc.b0", "disc.w1"):
                store[name].data[...] = 0.0
            # sigmoid(b1) = const
            store["disc.b1"].data[...] = math.log(const / (1 - const))
        return store

    def test_uninformative_discriminator_2ln2(self):
        store = self._store_with_disc(const=0.5)
        hs = constant(rng.normal(size=(2, 8, 4)))
        ht = constant(rng.normal(size=(3, 8, 5)))
        assert loss_dom(hs, ht, store).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_perfect_separation_near_zero(self):
        store = build_models(CFG, "full", seed=2)
        # craft inputs by scaling a direction the discriminator already separates
        h = rng.normal(size=8)
        from daf.model import discriminate

        p = discriminate(h, store)
        direction = 1.0 if p > 0.5 else -1.0
        hs = constant(np.tile((direction * 1000 * h)[None, :, None], (1, 1, 3)))
        ht = constant(np.tile((-direction * 1000 * h)[None, :, None], (1, 1, 3)))
        assert loss_dom(hs, ht, store).item() < 1e-4

    def test_hand_values(self):
        # D(h_S)=0.8, D(h_T)=0.4 -> -ln 0.8 - ln 0.6
        store = self._store_with_disc(const=0.8)
        hs = constant(np.zeros((1, 8, 1)))
        loss_s = -math.log(0.8)
        store2 = self._store_with_disc(const=0.4)
        ht = constant(np.zeros((1, 8, 1)))
        got = (
            loss_dom(hs, constant(np.full((1, 8, 1), 1e9)), store).item()
            + loss_dom(constant(np.full((1, 8, 1), -1e9)), ht, store2).item()
        )
        # the 1e9 inputs drive their own term to ~0 via the prob clamp floor
        assert got == pytest.approx(loss_s - math.log(0.6), abs=1e-5)

    def test_empty_set_rejected(self):
        store = build_models(CFG, "full", seed=3)
        with pytest.raises(ContractError):
            loss_dom(constant(np.zeros((0, 8, 1))), constant(np.zeros((1, 8, 1))), store)


class TestTotalLoss:
    def test_lambda_zero_reduces_to_seq_sum(self):
        s, t = constant([1.5]), constant([2.5])
        d = constant([7.0])
        assert total_loss(s, t, d, 0.0).item() == pytest.approx(4.0)

    def test_hand_arithmetic(self):
        out = total_loss(constant([0.0]), constant([0.0]), constant([2 * math.log(2)]), 1.0)
        assert out.item() == pytest.approx(-2 * math.log(2), abs=1e-12)

    def test_linearity_in_lambda(self):
        s, t, d = constant([1.0]), constant([1.0]), constant([3.0])
        l1 = total_loss(s, t, d, 1.0).item()
        l2 = total_loss(s, t, d, 2.0).item()
        assert l2 - l1 == pytest.approx(-3.0)

    def test_decomposition_identity(self):
        seq_s, seq_t, dom, lam = 1.37, 0.21, 1.11, 0.7
        out = total_loss(constant([seq_s]), constant([seq_t]), constant([dom]), lam)
        assert abs(out.item() - (seq_s + seq_t - lam * dom)) < 1e-12


class TestTrainStep:
    def test_no_adv_leaves_discriminator_untouched(self):
        source, target = make_splits()
        store = build_models(CFG, "full", seed=5)
        before = {n: store[n].data.copy() for n in store.names() if n.startswith("disc.")}
        cfg = TrainConfig(lam=0.0, strategy="full", adversarial=False, seed=0, epochs=1)
        opts = make_optimizers(store, cfg)
        bs, bt = batches(source, target)
        metrics = train_step(bs, bt, store, opts, CFG, cfg)
        for n, v in before.items():
            assert np.array_equal(store[n].data, v)
        assert metrics["dom"] == 0.0

    def test_adversarial_false_forces_lambda_zero(self):
        cfg = TrainConfig(lam=5.0, adversarial=False)
        assert cfg.effective_lam == 0.0

    def test_attf_never_touches_source_params(self):
        source, target = make_splits()
        store = build_models(CFG, "attf", seed=6)
        cfg = TrainConfig(strategy="attf", adversarial=False, seed=0)
        opts = make_optimizers(store, cfg)
        _, bt = batches(source, target)
        train_step(None, bt, store, opts, CFG, cfg)
        assert not [n for n in store.names() if n.startswith("src.")]

    def test_discriminator_learns_separable_embeddings(self):
        # oracle: fixed, linearly separable q/k features; the D update alone
        # must push the domain loss below 2 ln 2
        store = build_models(CFG, "full", seed=7)
        cfg = TrainConfig(lam=1.0, lr=1e-2, strategy="full", seed=0)
        opts = make_optimizers(store, cfg)
        hs = np.ones((2, 8, 6)) + 0.1 * rng.normal(size=(2, 8, 6))
        ht = -np.ones((2, 8, 6)) + 0.1 * rng.normal(size=(2, 8, 6))
        first = None
        for _ in range(60):
            dom = loss_dom(constant(hs), constant(ht), store)
            if first is None:
                first = dom.item()
            backward(dom * -cfg.lam)
            opts.disc.step("ascend")
            store.zero_grad()
        final = loss_dom(constant(hs), constant(ht), store).item()
        assert final < 2 * math.log(2) < first + 0.1
        assert final < first

    def test_discriminator_update_decreases_dom_loss(self):
        # probe: a tiny ascend step on L (descend on L_dom) reduces L_dom
        source, target = make_splits()
        store = build_models(CFG, "full", seed=8)
        bs, bt = batches(source, target)
        with no_grad():
            out_s = generator_forward(bs, store, CFG, "full", "src", forecast_only=True)
            out_t = generator_forward(bt, store, CFG, "full", "tgt", forecast_only=True)
            hs = np.concatenate([out_s.q.data, out_s.k.data], axis=2)
            ht = np.concatenate([out_t.q.data, out_t.k.data], axis=2)
        cfg = TrainConfig(lam=1.0, lr=1e-6, strategy="full", seed=0)
        opts = make_optimizers(store, cfg)
        before = loss_dom(constant(hs), constant(ht), store).item()
        dom = loss_dom(constant(hs), constant(ht), store)
        backward(dom * -1.0)
        opts.disc.step("ascend")
        store.zero_grad()
        after = loss_dom(constant(hs), constant(ht), store).item()
        assert after < before

    def test_generator_adversarial_direction(self):
        # with the discriminator frozen, a generator step on -lambda*L_dom
        # alone must not decrease L_dom
        source, target = make_splits()
        store = build_models(CFG, "full", seed=9)
        bs, bt = batches(source, target)
        cfg = TrainConfig(lam=1.0, lr=1e-6, strategy="full", seed=0)
        opts = make_optimizers(store, cfg)

        def dom_value():
            with no_grad():
                out_s = generator_forward(bs, store, CFG, "full", "src", forecast_only=True)
                out_t = generator_forward(bt, store, CFG, "full", "tgt", forecast_only=True)
                return loss_dom(
                    constant(np.concatenate([out_s.q.data, out_s.k.data], axis=2)),
                    constant(np.concatenate([out_t.q.data, out_t.k.data], axis=2)),
                    store,
                ).item()

        before = dom_value()
        out_s = generator_forward(bs, store, CFG, "full", "src", forecast_only=True)
        out_t = generator_forward(bt, store, CFG, "full", "tgt", forecast_only=True)
        dom = loss_dom(
            concat([out_s.q, out_s.k], axis=2), concat([out_t.q, out_t.k], axis=2), store
        )
        backward(dom * -cfg.lam)
        opts.gen.step("descend")
        store.zero_grad()
        assert dom_value() >= before - 1e-12

    def test_step_reports_loss_components(self):
        source, target = make_splits()
        store = build_models(CFG, "full", seed=10)
        cfg = TrainConfig(lam=1.0, strategy="full", seed=0)
        opts = make_optimizers(store, cfg)
        bs, bt = batches(source, target)
        metrics = train_step(bs, bt, store, opts, CFG, cfg)
        assert set(metrics) == {"seq_S", "seq_T", "dom"}
        assert metrics["dom"] > 0


class TestFit:
    def test_epoch_arithmetic_single_step(self):
        source, target = make_splits(n_target=12)
        # target train is 4 windows; batch 4 -> exactly 1 step per epoch
        cfg = TrainConfig(
            strategy="attf", adversarial=False, batch_size=4, epochs=3, seed=0,
            patience=100,
        )
        res = fit(None, target, CFG, cfg)
        assert res.steps_run == 3

    def test_patience_stops_training(self):
        source, target = make_splits(n_target=12)
        cfg = TrainConfig(
            strategy="attf", adversarial=False, batch_size=4, epochs=500, seed=0,
            patience=1, eval_every=1,
        )
        res = fit(None, target, CFG, cfg)
        # stops at the second evaluation without improvement
        no_improve = 0
        best = math.inf
        for rec in res.history:
            if rec["val_nd"] < best:
                best = rec["val_nd"]
                no_improve = 0
            else:
                no_improve += 1
            if no_improve >= 1:
                break
        assert res.steps_run == rec["step"]

    def test_same_seed_identical_history(self):
        source, target = make_splits()
        cfg = TrainConfig(strategy="full", batch_size=4, epochs=2, seed=11)
        a = fit(source, target, CFG, cfg)
        b = fit(source, target, CFG, cfg)
        assert a.history == b.history
        assert a.params.to_bytes() == b.params.to_bytes()

    def test_lambda_zero_training_keeps_disc_bits(self):
        source, target = make_splits()
        init = build_models(CFG, "full", seed=12)
        disc_before = {n: init[n].data.copy() for n in init.names() if n.startswith("disc.")}
        cfg = TrainConfig(
            lam=0.0, strategy="full", adversarial=False, batch_size=4, epochs=2, seed=12
        )
        res = fit(source, target, CFG, cfg)
        final = fit(source, target, CFG, cfg, init_store=None)
        for n, v in disc_before.items():
            assert np.array_equal(res.params[n].data, v)
            assert np.array_equal(final.params[n].data, v)

    def test_best_checkpoint_reproduces_val_nd(self):
        from daf.evaluation import evaluate_nd

        source, target = make_splits()
        cfg = TrainConfig(strategy="full", batch_size=4, epochs=3, seed=13)
        res = fit(source, target, CFG, cfg)
        again = evaluate_nd(res.params, CFG, "full", target.validation).nd
        assert abs(again - res.best_val_nd) < 1e-9

    def test_empty_splits_rejected(self):
        source, target = make_splits()
        empty = type(target)(train=[], validation=target.validation, test=target.test)
        with pytest.raises(ConfigurationError):
            fit(source, empty, CFG, TrainConfig(strategy="full"))
        with pytest.raises(ConfigurationError):
            fit(None, target, CFG, TrainConfig(strategy="full"))
