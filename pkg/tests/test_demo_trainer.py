import numpy as np
import pytest

from src import demo_trainer
from src.demo_trainer import (
    DemoModel,
    DivergenceError,
    ScaleBlobDataset,
    sgd_step,
    softmax_cross_entropy,
    standardise,
    train,
)
from src.io_format import read_archive, write_archive
from src.tensor_core import Rng, ShapeError


class TestSgd:
    def _params(self):
        return {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}

    def _grads(self):
        return {"w": np.array([0.25, 0.5]), "b": np.array([-1.0])}

    def test_zero_lr_keeps_params(self):
        params = self._params()
        new, _ = sgd_step(params, self._grads(), lr=0.0)
        for name in params:
            assert np.array_equal(new[name], params[name])

    def test_plain_gradient_descent(self):
        new, _ = sgd_step(self._params(), self._grads(), lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.allclose(new["w"], [0.975, -2.05])
        assert np.allclose(new["b"], [0.6])

    def test_two_momentum_steps(self):
        params, grads = self._params(), self._grads()
        p1, v1 = sgd_step(params, grads, lr=0.1, momentum=0.9, weight_decay=0.0)
        p2, _ = sgd_step(p1, grads, lr=0.1, momentum=0.9, weight_decay=0.0, velocity=v1)
        for name in params:
            assert np.allclose(p2[name], params[name] - 0.1 * (grads[name] + 1.9 * grads[name]))

    def test_weight_decay(self):
        new, vel = sgd_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, lr=1.0,
                            momentum=0.9, weight_decay=0.5)
        assert np.allclose(vel["w"], [1.0])
        assert np.allclose(new["w"], [1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, lr=0.1)
        with pytest.raises(ShapeError):
            sgd_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, lr=0.1)


class TestDataset:
    def test_deterministic(self):
        a = ScaleBlobDataset(3).batches(2, 8)
        b = ScaleBlobDataset(3).batches(2, 8)
        for (xa, ya), (xb, yb) in zip(a, b):
            assert np.array_equal(xa, xb)
            assert np.array_equal(ya, yb)

    def test_balanced_batches(self):
        images, labels = ScaleBlobDataset(0).batch(32)
        assert images.shape == (32, 1, 32, 32)
        counts = np.bincount(labels, minlength=3)
        assert counts.max() - counts.min() <= 1

    def test_larger_blobs_carry_more_mass(self):
        data = ScaleBlobDataset(1)
        images, labels = data.batch(30)
        mass = images.reshape(30, -1).sum(axis=1)
        means = [mass[labels == y].mean() for y in range(3)]
        assert means[0] < means[1] < means[2]

    def test_standardise(self):
        batches = standardise(ScaleBlobDataset(2).batches(3, 12))
        pixels = np.concatenate([x.reshape(-1) for x, _ in batches])
        assert abs(pixels.mean()) < 1e-12
        assert abs(pixels.std() - 1.0) < 1e-12


class TestModel:
    def test_parameter_parity(self):
        assert DemoModel.create(0).param_count() == 1275
        assert DemoModel.create(0, uniform=True).param_count() == 1275

    def test_softmax_cross_entropy_uniform_logits(self):
        loss, grad = softmax_cross_entropy(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
        assert loss == pytest.approx(np.log(3.0))
        assert np.allclose(grad.sum(axis=1), 0.0)

    def test_gradient_against_finite_differences(self):
        model = DemoModel.create(4)
        images, labels = standardise(ScaleBlobDataset(4).batches(1, 6))[0]
        _, grads = model.loss_and_grads(images, labels)
        rng = Rng(17)
        h = 1e-5
        for name in demo_trainer.PARAM_NAMES + ("conv1.weight",):
            param = model.params[name]
            idx = tuple(int(rng.integers(0, n)) for n in param.shape)
            plus = {k: v.copy() for k, v in model.params.items()}
            minus = {k: v.copy() for k, v in model.params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            numeric = (model.loss(images, labels, plus) - model.loss(images, labels, minus)) / (2 * h)
            analytic = grads[name][idx]
            assert abs(numeric - analytic) <= 1e-5 * max(abs(numeric), abs(analytic), 1e-3)

    def test_archive_names(self):
        names = [name for name, _ in DemoModel.create(0).archive_tensors()]
        assert names == ["conv1.weight", "conv2.weight", "fc.weight", "fc.bias"]


class TestTrain:
    def test_single_step(self):
        result = train(1, 0.05, seed=1)
        assert len(result.losses) == 1
        assert len(result.log_rows()) == 1
        assert result.epoch_means() == []

    def test_zero_lr_repeats_losses_per_epoch(self):
        result = train(12, 0.0, seed=2)
        for i in range(6):
            assert abs(result.losses[i] - result.losses[i + 6]) <= 1e-12

    def test_deterministic(self):
        assert train(8, 0.05, seed=3).losses == train(8, 0.05, seed=3).losses

    def test_uniform_model_trains(self):
        result = train(6, 0.05, seed=1, uniform=True)
        assert all(np.isfinite(result.losses))

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            train(0, 0.05, seed=1)
        with pytest.raises(ValueError):
            train(1, -1.0, seed=1)

    def test_divergence_reports_step(self, monkeypatch):
        original = DemoModel.loss_and_grads
        calls = []

        def poisoned(self, images, labels):
            loss, grads = original(self, images, labels)
            calls.append(loss)
            return (float("nan") if len(calls) == 4 else loss), grads

        monkeypatch.setattr(DemoModel, "loss_and_grads", poisoned)
        with pytest.raises(DivergenceError) as info:
            train(10, 0.05, seed=1)
        assert info.value.step == 3

    def test_summary_schema(self, validate):
        validate("train", train(7, 0.05, seed=1).summary())

    def test_archive_round_trip(self):
        result = train(2, 0.05, seed=1)
        back = read_archive(write_archive(result.model.archive_tensors()))
        for name, value in result.model.archive_tensors():
            assert np.array_equal(back[name], value)

    @pytest.mark.slow
    def test_loss_halves(self):
        result = train(200, 0.05, seed=1)
        means = result.epoch_means()
        assert len(means) == 33
        assert means[-1] <= 0.5 * means[0]
        assert train(200, 0.05, seed=1).losses == result.losses
