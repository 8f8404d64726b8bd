import math

import numpy as np
import numpy.testing as npt
import pytest

from pta.control import policy_from_name
from pta.data import TaskDataset, split_assignment
from pta.model import ModelSpec, SharedModel, TaskHead
from pta.optim import Adam, OptimizerSettings, Sgd
from pta.training import (DivergenceError, TrainSchedule, evaluate_best,
                          evaluate_costs, evaluate_ensemble, execute_run, pta_loss,
                          train_step, trainable_parameters)


def make_witness():
    """T=1 with the embedding pinned to (6, 7) through a zero-weight linear model."""
    spec = ModelSpec(input_dim=2, hidden_layers=(), embedding_dim=2)
    model = SharedModel(spec, seed=0)
    model.weights[0].values[...] = 0.0
    model.biases[0].values[...] = [6.0, 7.0]
    head = TaskHead(0, 2, 1, 2, "mse", seed=0)
    head.decoders[0].weights.values[...] = [[2.0], [3.0]]
    head.decoders[1].weights.values[...] = [[4.0], [5.0]]
    for dec in head.decoders:
        dec.bias.values[...] = 0.0
        dec.dropout_rate = 0.0
    batch = (np.zeros((1, 2)), np.array([[1.0]]))
    return model, head, batch


def make_random_setup(seed, n_decoders, loss_kind="mse", tasks=1):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(input_dim=3, hidden_layers=((5, "tanh"),), embedding_dim=4)
    model = SharedModel(spec, seed=seed)
    heads, batches = [], []
    for t in range(tasks):
        c = 3 if loss_kind == "cross_entropy" else 2
        head = TaskHead(t, 4, c, n_decoders, loss_kind, seed=seed + t)
        for dec in head.decoders:
            dec.dropout_rate = 0.0
        heads.append(head)
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, c, size=6) if loss_kind == "cross_entropy" else rng.normal(size=(6, c))
        batches.append((x, y))
    return model, heads, batches


class TestPtaLoss:
    def test_witness_value(self):
        model, head, batch = make_witness()
        loss = pta_loss([batch], model, [head], training=False)
        assert loss.item() == (1024.0 + 3364.0) / 2

    def test_duplicate_decoders_collapse_to_single_loss(self):
        model, heads, batches = make_random_setup(1, 4)
        src = heads[0].decoders[0]
        for dec in heads[0].decoders:
            dec.weights.values[...] = src.weights.values
            dec.bias.values[...] = src.bias.values
        loss4 = pta_loss(batches, model, heads, training=False).item()

        model1, heads1, _ = make_random_setup(1, 1)
        heads1[0].decoders[0].weights.values[...] = src.weights.values
        heads1[0].decoders[0].bias.values[...] = src.bias.values
        loss1 = pta_loss(batches, model1, heads1, training=False).item()
        assert abs(loss4 - loss1) <= 1e-12

    def test_perfect_predictions_give_zero(self):
        model, head, batch = make_witness()
        x, _ = batch
        for dec in head.decoders:
            dec.weights.values[...] = 0.0
            dec.bias.values[...] = 4.5
        loss = pta_loss([(x, np.full((1, 1), 4.5))], model, [head], training=False)
        assert loss.item() == 0.0

    def test_empty_batch_rejected(self):
        model, head, _ = make_witness()
        with pytest.raises(ValueError, match="empty batch"):
            pta_loss([(np.zeros((0, 2)), np.zeros((0, 1)))], model, [head])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_loss_carries_task_and_decoder(self):
        model, head, batch = make_witness()
        head.decoders[1].weights.values[...] = 1e200
        with pytest.raises(DivergenceError) as err:
            pta_loss([(batch[0], batch[1] * 1e200)], model, [head], training=False)
        assert err.value.task_id == 0
        assert err.value.decoder_index in (0, 1)

    def test_mismatched_decoder_counts_rejected(self):
        model, heads, batches = make_random_setup(2, 2, tasks=2)
        heads[1].decoders.pop()
        with pytest.raises(ValueError, match="decoder count"):
            pta_loss(batches, model, heads, training=False)


class TestTrainStep:
    def test_duplicated_decoders_at_rate_over_d_match_single_decoder(self):
        for d in (2, 5):
            gamma = 0.05
            model_a, heads_a, batches = make_random_setup(7, d)
            src_w = heads_a[0].decoders[0].weights.values.copy()
            src_b = heads_a[0].decoders[0].bias.values.copy()
            for dec in heads_a[0].decoders:
                dec.weights.values[...] = src_w
                dec.bias.values[...] = src_b
            opt = Sgd(trainable_parameters(model_a, heads_a), gamma / d)
            train_step(model_a, heads_a, opt, batches, mask_seed=(1,))

            model_b, heads_b, _ = make_random_setup(7, 1)
            heads_b[0].decoders[0].weights.values[...] = src_w
            heads_b[0].decoders[0].bias.values[...] = src_b
            opt = Sgd(trainable_parameters(model_b, heads_b), gamma)
            train_step(model_b, heads_b, opt, batches, mask_seed=(1,))

            for pa, pb in zip(model_a.parameters(), model_b.parameters()):
                scale = max(np.max(np.abs(pa.values)), 1.0)
                assert np.max(np.abs(pa.values - pb.values)) / scale <= 1e-12

    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        model, heads, batches = make_random_setup(8, 3)
        before = [p.values.copy() for p in trainable_parameters(model, heads)]
        opt = Sgd(trainable_parameters(model, heads), 0.0)
        train_step(model, heads, opt, batches, mask_seed=(1,))
        for p, b in zip(trainable_parameters(model, heads), before):
            npt.assert_array_equal(p.values, b)

    def test_witness_update_direction(self):
        model, head, batch = make_witness()
        alpha = 0.01
        opt = Sgd(trainable_parameters(model, [head]), alpha)
        before = model.biases[0].values.copy()
        train_step(model, [head], opt, [batch], mask_seed=(1,))
        delta = model.biases[0].values - before
        npt.assert_allclose(delta, -alpha * np.array([592.0, 772.0]), rtol=1e-12)

    def test_frozen_decoders_keep_their_bits_but_shape_the_gradient(self):
        model, heads, batches = make_random_setup(9, 2)
        heads[0].decoders[1].frozen = True
        frozen_w = heads[0].decoders[1].weights.values.copy()
        opt = Sgd(trainable_parameters(model, heads), 0.1)
        train_step(model, heads, opt, batches, mask_seed=(1,))
        npt.assert_array_equal(heads[0].decoders[1].weights.values, frozen_w)
        # gradient through the frozen decoder still reached the shared model:
        model_b, heads_b, _ = make_random_setup(9, 2)
        del heads_b[0].decoders[1]
        opt = Sgd(trainable_parameters(model_b, heads_b), 0.1)
        train_step(model_b, heads_b, opt, batches, mask_seed=(1,))
        assert any(not np.array_equal(pa.values, pb.values)
                   for pa, pb in zip(model.parameters(), model_b.parameters()))

    def test_reported_loss_is_decoder_averaged(self):
        model, head, batch = make_witness()
        opt = Sgd(trainable_parameters(model, [head]), 0.0)
        reported = train_step(model, [head], opt, [batch], mask_seed=(1,))
        assert reported == (1024.0 + 3364.0) / 2

    def test_embed_called_once_per_step_regardless_of_decoders(self):
        for d in (1, 4):
            model, heads, batches = make_random_setup(10, d)
            opt = Sgd(trainable_parameters(model, heads), 0.01)
            before = model.embed_calls
            train_step(model, heads, opt, batches, mask_seed=(1,))
            assert model.embed_calls - before == 1


def make_dataset(seed=0, n=40, kind="mse"):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    if kind == "mse":
        y = rng.normal(size=(n, 2))
        return TaskDataset(0, x, y, "regression", 2, split_assignment(n, (0.5, 0.2, 0.3), seed))
    y = rng.integers(0, 3, size=n)
    return TaskDataset(0, x, y, "classification", 3, split_assignment(n, (0.5, 0.2, 0.3), seed))


class TestEvaluation:
    def test_best_decoder_argmin_and_tie_break(self):
        ds = make_dataset(1)
        model, heads, _ = make_random_setup(1, 3)
        costs = evaluate_costs(model, heads, [ds])[0]
        report = evaluate_best(model, heads, [ds])
        assert report.best_decoder[0] == int(np.argmin(costs))
        # exact tie: duplicate the winning decoder into index 2, winner keeps low index
        win = report.best_decoder[0]
        for target in range(3):
            heads[0].decoders[target].weights.values[...] = heads[0].decoders[win].weights.values
            heads[0].decoders[target].bias.values[...] = heads[0].decoders[win].bias.values
        report = evaluate_best(model, heads, [ds])
        assert report.best_decoder[0] == 0

    def test_single_decoder_reduces_to_plain_evaluation(self):
        ds = make_dataset(2)
        model, heads, _ = make_random_setup(2, 1)
        report = evaluate_best(model, heads, [ds])
        assert report.best_decoder == [0]
        assert report.aggregate_cost == report.best_cost[0]
        assert report.best_cost[0] == evaluate_costs(model, heads, [ds])[0][0]

    def test_adding_a_copied_decoder_never_hurts_the_aggregate(self):
        ds = make_dataset(3)
        model, heads, _ = make_random_setup(3, 2)
        base = evaluate_best(model, heads, [ds]).aggregate_cost
        copied = TaskHead(0, 4, 2, 3, "mse", seed=99)
        for i in range(2):
            copied.decoders[i].weights.values[...] = heads[0].decoders[i].weights.values
            copied.decoders[i].bias.values[...] = heads[0].decoders[i].bias.values
        copied.decoders[2].weights.values[...] = heads[0].decoders[0].weights.values
        copied.decoders[2].bias.values[...] = heads[0].decoders[0].bias.values
        grown = evaluate_best(model, [copied], [ds]).aggregate_cost
        assert grown <= base + 1e-15

    def test_ensemble_of_identical_decoders_matches_single(self):
        ds = make_dataset(4)
        model, heads, _ = make_random_setup(4, 3)
        for dec in heads[0].decoders:
            dec.weights.values[...] = heads[0].decoders[0].weights.values
            dec.bias.values[...] = heads[0].decoders[0].bias.values
        ens = evaluate_ensemble(model, heads, [ds])[0]
        best = evaluate_best(model, heads, [ds])
        assert abs(ens["loss"] - best.best_cost[0]) <= 1e-12

    def test_ensemble_equals_mean_weight_decoder_exactly(self):
        ds = make_dataset(5)
        model, heads, _ = make_random_setup(5, 2)
        ens = evaluate_ensemble(model, heads, [ds])[0]
        mean_head = TaskHead(0, 4, 2, 1, "mse", seed=1)
        mean_head.decoders[0].weights.values[...] = np.mean(
            [d.weights.values for d in heads[0].decoders], axis=0)
        mean_head.decoders[0].bias.values[...] = np.mean(
            [d.bias.values for d in heads[0].decoders], axis=0)
        single = evaluate_best(model, [mean_head], [ds])
        npt.assert_allclose(ens["loss"], single.best_cost[0], rtol=0, atol=1e-12)

    def test_ensemble_matches_brute_force_recomputation(self):
        ds = make_dataset(6, kind="cross_entropy")
        spec = ModelSpec(input_dim=3, hidden_layers=((5, "tanh"),), embedding_dim=4)
        model = SharedModel(spec, seed=6)
        head = TaskHead(0, 4, 3, 3, "cross_entropy", seed=6)
        ens = evaluate_ensemble(model, [head], [ds])[0]

        x, y = ds.split_arrays("val")
        emb = model.embed(x).values
        preds = np.mean([emb @ d.weights.values + d.bias.values for d in head.decoders], axis=0)
        shifted = preds - preds.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        npt.assert_allclose(ens["loss"], -logp[np.arange(len(y)), y].mean(), rtol=1e-12)
        npt.assert_allclose(ens["error"], np.mean(np.argmax(preds, axis=1) != y), rtol=0)

    def test_empty_validation_set_rejected(self):
        ds = make_dataset(7)
        ds.split[ds.split == 1] = 0
        model, heads, _ = make_random_setup(7, 2)
        with pytest.raises(ValueError, match="no val samples"):
            evaluate_best(model, heads, [ds])


class TestOptimizers:
    def test_sgd_step(self):
        p = SharedModel(ModelSpec(input_dim=2, embedding_dim=2), seed=0).weights[0]
        p.values[...] = 1.0
        p.grad[...] = 2.0
        Sgd([p], 0.1).step()
        npt.assert_allclose(p.values, 0.8)

    def test_adam_first_step_moves_by_learning_rate(self):
        p = SharedModel(ModelSpec(input_dim=2, embedding_dim=2), seed=0).weights[0]
        p.values[...] = 1.0
        p.grad[...] = 3.0
        Adam([p], learning_rate=0.1, eps=0.0).step()
        npt.assert_allclose(p.values, 0.9, rtol=1e-12)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            OptimizerSettings(kind="rmsprop").validate()
        with pytest.raises(ValueError):
            OptimizerSettings(learning_rate=0.0).validate()


class TestRunLoop:
    def small_run(self, seed=0, policy="PTA-I", n_decoders=2, metas=3, snapshots=False):
        ds = make_dataset(seed=1, n=40, kind="cross_entropy")
        return execute_run(
            [ds],
            ModelSpec(input_dim=3, hidden_layers=((6, "relu"),), embedding_dim=4),
            n_decoders=n_decoders,
            policy=policy_from_name(policy),
            schedule=TrainSchedule(meta_iteration_length=5, meta_iterations=metas,
                                   batch_size=8),
            optimizer_settings=OptimizerSettings(kind="adam", learning_rate=1e-2),
            seed=seed,
            collect_snapshots=snapshots,
        )

    def test_zero_meta_iterations_returns_initialized_state_and_empty_series(self):
        result = self.small_run(metas=0)
        assert result.metrics == []
        assert result.heads[0].decoders[0].last_cost == math.inf

    def test_fixed_seed_runs_are_bit_identical(self):
        a = self.small_run(seed=5)
        b = self.small_run(seed=5)
        assert [m.to_json_dict() for m in a.metrics] == [m.to_json_dict() for m in b.metrics]
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            npt.assert_array_equal(pa.values, pb.values)

    def test_freeze_smoke_run(self):
        result = self.small_run(seed=2, policy="PTA-F", n_decoders=4, metas=4)
        head = result.heads[0]
        assert [dec.frozen for dec in head.decoders] == [False, True, True, True]
        first_costs = result.metrics[0].costs[0]
        assert all(math.isfinite(c) for c in first_costs)
        assert head.decoders[0].last_cost < math.inf

    def test_metrics_costs_match_decoder_last_cost(self):
        result = self.small_run(seed=3, metas=2)
        last = result.metrics[-1].costs[0]
        assert last == [dec.last_cost for dec in result.heads[0].decoders]

    def test_snapshots_reflect_evaluated_state(self):
        result = self.small_run(seed=4, metas=3, snapshots=True)
        assert len(result.snapshots) == 3 * 2  # metas * (T=1 * D=2)
        snap = result.snapshots[0]
        assert snap.meta_iteration == 1
        assert snap.cost == result.metrics[0].costs[snap.task_id][snap.decoder_index]
