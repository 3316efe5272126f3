"""
Tests for the dense-connectivity classifier: inference, loss, training and persistence
"""
import math

import numpy as np
import pytest
import torch
from torch import nn

from classifier import (
    EPS,
    EpochRecord,
    TrainRecord,
    bce_loss,
    build_classifier,
    forward,
    load_classifier,
    predict,
    save_classifier,
    train_classifier,
    write_train_record,
)
from conftest import make_samples
from utils.checkpoint import write_container
from utils.errors import CheckpointError, InputError, NonFiniteError, ShapeMismatchError


@pytest.fixture
def model(tiny_classifier_config):
    return build_classifier(tiny_classifier_config, seed=0)


@pytest.fixture
def batch():
    return np.random.default_rng(0).uniform(-1, 1, size=(4, 16, 16, 1)).astype(np.float32)


class TestForward:
    """Test classifier inference"""

    def test_probability_range(self, model, batch):
        probabilities = forward(model, batch)
        assert probabilities.shape == (4,)
        assert probabilities.dtype == np.float64
        assert np.all((probabilities > 0.0) & (probabilities < 1.0))

    def test_feature_maps(self, model, batch):
        probabilities, features = forward(model, batch, with_features=True)
        # Compact stem, one transition: 16 -> 8
        assert features.shape == (4, 8, 8, model.network.feature_channels)
        assert np.all(features >= 0.0)
        assert probabilities.shape == (4,)

    def test_zero_head_is_one_half(self, model, batch):
        with torch.no_grad():
            model.network.head.weight.zero_()
            model.network.head.bias.zero_()
        assert np.all(forward(model, batch) == 0.5)

    def test_duplicate_sample_same_probability(self, model, batch):
        batch[2] = batch[0]
        probabilities = forward(model, batch)
        assert probabilities[0] == pytest.approx(probabilities[2], rel=1e-6)

    def test_permutation_equivariant(self, model, batch):
        order = [2, 0, 3, 1]
        np.testing.assert_allclose(forward(model, batch[order]), forward(model, batch)[order], rtol=1e-6)

    def test_predict_batches(self, model):
        samples = make_samples([0, 1, 0, 1, 1], size=16)
        whole = predict(model, samples, batch_size=5)
        pieces = predict(model, samples, batch_size=2)
        np.testing.assert_allclose(whole, pieces, rtol=1e-6)

    def test_same_seed_same_model(self, tiny_classifier_config, batch):
        a = build_classifier(tiny_classifier_config, seed=3)
        b = build_classifier(tiny_classifier_config, seed=3)
        assert np.array_equal(forward(a, batch), forward(b, batch))

    def test_wrong_shape(self, model):
        with pytest.raises(ShapeMismatchError):
            forward(model, np.zeros((2, 8, 8, 1), dtype=np.float32))

    def test_non_finite_input(self, model, batch):
        batch[1, 2, 3, 0] = np.nan
        with pytest.raises(NonFiniteError):
            forward(model, batch)

    def test_imagenet_stem_with_gray_input(self, tiny_classifier_config):
        config = tiny_classifier_config.model_copy(update={"stem": "imagenet", "resolution": 32})
        gray = build_classifier(config, seed=0)
        images = np.zeros((2, 32, 32, 1), dtype=np.float32)
        assert forward(gray, images).shape == (2,)


class TestBceLoss:
    """Test clamped binary cross-entropy"""

    def test_coin_flip(self):
        assert bce_loss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2), abs=1e-9)

    def test_perfect_prediction_is_clamped(self):
        loss = bce_loss([0.0, 1.0], [0, 1])
        assert 0.0 < loss <= -math.log(1 - EPS) + 1e-12

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(0, 1, size=17)
            y = rng.integers(0, 2, size=17)
            expected = 0.0
            for pi, yi in zip(p, y):
                pi = min(max(pi, EPS), 1 - EPS)
                expected -= (yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) / len(p)
            assert bce_loss(p, y) == pytest.approx(expected, abs=1e-9)

    def test_tensor_in_tensor_out(self):
        p = torch.tensor([0.2, 0.7], dtype=torch.float64, requires_grad=True)
        loss = bce_loss(p, torch.tensor([0, 1]))
        loss.backward()
        assert isinstance(loss, torch.Tensor)
        assert p.grad is not None

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            bce_loss([0.5, 0.5], [1])

    def test_empty(self):
        with pytest.raises(InputError):
            bce_loss([], [])

    def test_bad_label(self):
        with pytest.raises(InputError):
            bce_loss([0.5], [2])

    def test_gradcheck_on_small_network(self):
        """Two convolutions on 8x8 inputs, float64 finite differences"""
        torch.manual_seed(0)
        net = nn.Sequential(
            nn.Conv2d(1, 2, kernel_size=3, padding=1), nn.Tanh(), nn.Conv2d(2, 1, kernel_size=3, padding=1),
        ).double()
        labels = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)

        def loss_of(images):
            logits = net(images).mean(dim=(1, 2, 3))
            return bce_loss(torch.sigmoid(logits), labels)

        images = torch.rand(3, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(loss_of, (images,), eps=1e-6, atol=1e-7, rtol=1e-3)


class TestTrainClassifier:
    """Test the training loop and model selection"""

    def test_record(self, tiny_classifier_config, tiny_samples):
        model, record = train_classifier(tiny_samples, tiny_samples, tiny_classifier_config, seed=0)
        assert 1 <= len(record.epochs) <= tiny_classifier_config.epochs
        assert 1 <= record.best_epoch <= len(record.epochs)
        assert record.initial_train_loss > 0.0
        best = record.epochs[record.best_epoch - 1]
        assert best.val_roc_auc == max(e.val_roc_auc for e in record.epochs)
        assert record.epochs[0].lr == tiny_classifier_config.lr
        assert not model.network.training

    def test_same_seed_same_record(self, tiny_classifier_config, tiny_samples):
        _, a = train_classifier(tiny_samples, tiny_samples, tiny_classifier_config, seed=1)
        _, b = train_classifier(tiny_samples, tiny_samples, tiny_classifier_config, seed=1)
        assert a == b

    @pytest.mark.parametrize("batch_size", [2, 32])
    def test_zero_learning_rate(self, tiny_classifier_config, tiny_samples, batch_size):
        """Parameters and BatchNorm statistics stay put, so both losses stay constant"""
        config = tiny_classifier_config.model_copy(update={"lr": 0.0, "epochs": 3, "batch_size": batch_size})
        model, record = train_classifier(tiny_samples, tiny_samples, config, seed=2)
        initial = build_classifier(config, seed=2)
        for (name, a), (_, b) in zip(model.network.state_dict().items(), initial.network.state_dict().items()):
            assert torch.equal(a, b), name
        assert len({e.train_loss for e in record.epochs}) == 1
        assert len({e.val_loss for e in record.epochs}) == 1
        assert record.epochs[0].train_loss == pytest.approx(record.initial_train_loss, rel=1e-12)

    def test_early_stop_on_stalled_validation_loss(self, mocker, tiny_classifier_config, tiny_samples):
        config = tiny_classifier_config.model_copy(update={"epochs": 10, "early_stop_patience": 2})
        mocker.patch("classifier._dataset_loss",
                     side_effect=lambda model, images, labels: (0.5, np.linspace(0.0, 1.0, len(labels))))
        _, record = train_classifier(tiny_samples, tiny_samples, config, seed=0)
        assert len(record.epochs) == 3
        assert record.best_epoch == 1

    def test_single_class_validation(self, tiny_classifier_config):
        train = make_samples([0, 1, 0], size=16)
        val = make_samples([0, 0], size=16, split="validation", prefix="v")
        with pytest.raises(InputError):
            train_classifier(train, val, tiny_classifier_config, seed=0)

    def test_validation_split_required(self, tiny_classifier_config, tiny_samples):
        """Training samples are never used for model selection"""
        train = [s for s in tiny_samples if s.split == "train"]
        with pytest.raises(InputError, match="validation"):
            train_classifier(train, make_samples([0, 1], size=16, split="train", prefix="v"),
                             tiny_classifier_config, seed=0)
        with pytest.raises(InputError, match="validation"):
            train_classifier(train, train, tiny_classifier_config, seed=0)

    def test_train_split_required(self, tiny_classifier_config, tiny_benchmark):
        manifest, _ = tiny_benchmark
        with pytest.raises(InputError, match="train"):
            train_classifier(manifest.filter("validation"), manifest, tiny_classifier_config, seed=0)

    def test_manifest_input(self, tiny_classifier_config, tiny_benchmark):
        manifest, _ = tiny_benchmark
        config = tiny_classifier_config.model_copy(update={"epochs": 1})
        _, record = train_classifier(manifest, manifest, config, seed=0)
        assert len(record.epochs) == 1

    def test_record_csv(self, tmp_path):
        record = TrainRecord(0.7, [EpochRecord(1, 0.6, 0.65, 0.8, 1e-4)], best_epoch=1)
        lines = write_train_record(record, tmp_path / "train.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_roc_auc,lr"
        assert len(lines) == 2


class TestClassifierCheckpoint:
    """Test classifier persistence"""

    def test_roundtrip_preserves_predictions_and_record(self, tmp_path, tiny_classifier_config, tiny_samples):
        model, record = train_classifier(tiny_samples, tiny_samples, tiny_classifier_config, seed=0)
        path = save_classifier(model, tmp_path / "clf.ckpt", record)
        loaded, loaded_record = load_classifier(path)
        assert loaded_record == record
        assert loaded.config == model.config
        assert np.array_equal(predict(loaded, tiny_samples), predict(model, tiny_samples))

    def test_without_record(self, tmp_path, model):
        _, record = load_classifier(save_classifier(model, tmp_path / "clf.ckpt"))
        assert record is None

    def test_wrong_kind(self, tmp_path):
        path = write_container(tmp_path / "x.ckpt", {}, {"kind": "gan"})
        with pytest.raises(CheckpointError):
            load_classifier(path)

    def test_pretrained_backbone(self, tmp_path, tiny_classifier_config, model):
        path = save_classifier(model, tmp_path / "backbone.ckpt")
        config = tiny_classifier_config.model_copy(update={"pretrained_path": path})
        warm = build_classifier(config, seed=9)
        for (name, a), (_, b) in zip(warm.network.features.state_dict().items(),
                                     model.network.features.state_dict().items()):
            assert torch.equal(a, b), name
        # The head is not part of the backbone
        assert not torch.equal(warm.network.head.weight, model.network.head.weight)
