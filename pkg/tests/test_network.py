#!/usr/bin/env python3
"""
Unit tests for the multi-task network.
"""

import numpy as np
import pytest
import torch
import torch.nn as nn

from src.domain.losses import health_ce, multilabel_bce, seg_bce
from src.domain.network import (
    CMTNet,
    EncoderWeightsError,
    InputShapeError,
    NetworkConfig,
    count_parameters,
    export_embedding,
    forward,
    init_network,
    load_encoder_weights,
    predict_masks,
)
from tests.conftest import tiny_config


def random_images(n, size, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(size=(size, size, 3)).astype(np.float32) for _ in range(n)]


class TestNetworkConfig:
    """Test cases for NetworkConfig."""

    def test_defaults(self):
        """Test the reference architecture defaults."""
        config = NetworkConfig()
        assert config.input_size == (224, 224, 3)
        assert config.widths == (64, 128, 256, 512, 512)
        assert config.embedding_dim == 512
        assert config.head_dims == (256, 64)

    def test_scale_factor(self):
        """Test that scale_factor divides every width."""
        config = NetworkConfig(scale_factor=8)
        assert config.widths[0] == 8
        assert config.embedding_dim == 64
        assert config.head_dims == (32, 8)

    def test_scale_factor_must_divide(self):
        """Test that a non-dividing scale factor is rejected."""
        with pytest.raises(ValueError, match="does not divide"):
            NetworkConfig(scale_factor=3)

    def test_scale_factor_positive(self):
        """Test that scale_factor must be at least 1."""
        with pytest.raises(ValueError, match="scale_factor"):
            NetworkConfig(scale_factor=0)

    def test_unknown_key(self):
        """Test that unknown fields are rejected."""
        with pytest.raises(ValueError):
            NetworkConfig(depth=5)


class TestInitNetwork:
    """Test cases for init_network."""

    def test_same_seed_same_weights(self):
        """Test that a fixed seed reproduces every parameter."""
        a = init_network(tiny_config(), seed=3)
        b = init_network(tiny_config(), seed=3)
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name
        assert a.seed == 3
        assert not a.training

    def test_different_seed(self):
        """Test that different seeds give different weights."""
        a = init_network(tiny_config(), seed=1)
        b = init_network(tiny_config(), seed=2)
        assert not torch.equal(a.encoder[0][0].conv.weight, b.encoder[0][0].conv.weight)

    def test_global_rng_untouched(self):
        """Test that initialization does not consume the global torch RNG."""
        torch.manual_seed(42)
        expected = torch.rand(3)
        torch.manual_seed(42)
        init_network(tiny_config(), seed=0)
        assert torch.equal(torch.rand(3), expected)

    def test_first_block_width(self):
        """Test that scale_factor 8 gives a first block width of 8."""
        net = init_network(NetworkConfig(input_size=(32, 32, 3), scale_factor=8), seed=0)
        assert net.encoder[0][0].conv.out_channels == 8

    def test_pretrained_from_module(self):
        """Test that encoder weights are copied from a matching source network."""
        source = init_network(tiny_config(), seed=10)
        net = init_network(tiny_config(), seed=20, pretrained_encoder=source.encoder)
        assert torch.equal(net.encoder[4][2].conv.weight, source.encoder[4][2].conv.weight)
        assert torch.equal(net.encoder[1][0].bn.running_var, source.encoder[1][0].bn.running_var)
        # decoders keep their own initialization
        assert not torch.equal(net.lung_decoder.classifier.weight, source.lung_decoder.classifier.weight)

    def test_pretrained_wrong_block_count(self):
        """Test that a source with a different layer count is rejected."""
        source = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.Conv2d(4, 4, 3, padding=1))
        with pytest.raises(EncoderWeightsError, match="conv layers"):
            init_network(tiny_config(), seed=0, pretrained_encoder=source)

    def test_pretrained_wrong_width(self):
        """Test that a source with other widths fails on shape."""
        source = init_network(tiny_config(scale_factor=8), seed=0)
        net = init_network(tiny_config(), seed=0)
        with pytest.raises(EncoderWeightsError, match="shape"):
            load_encoder_weights(net, source.encoder)

    def test_pretrained_from_file(self, tmp_dir):
        """Test that a VGG-style state dict with a features. prefix loads."""
        source = init_network(tiny_config(), seed=5)
        state = {f"features.{k}": v for k, v in source.encoder.state_dict().items()}
        torch.save(state, tmp_dir / "enc.pt")
        net = init_network(tiny_config(), seed=6, pretrained_encoder=tmp_dir / "enc.pt")
        assert torch.equal(net.encoder[0][0].conv.bias, source.encoder[0][0].conv.bias)

    def test_pretrained_unreadable(self, tmp_dir):
        """Test that an unreadable weight file is reported."""
        (tmp_dir / "bad.pt").write_bytes(b"junk")
        with pytest.raises(EncoderWeightsError, match="Cannot read"):
            init_network(tiny_config(), seed=0, pretrained_encoder=tmp_dir / "bad.pt")

    def test_parameter_count_scales(self):
        """Test that shrinking widths shrinks the parameter count."""
        assert count_parameters(init_network(tiny_config(scale_factor=8), 0)) > \
            count_parameters(init_network(tiny_config(scale_factor=16), 0))


class TestForward:
    """Test cases for forward and derived outputs."""

    def test_bundle_invariants(self):
        """Test shapes and normalization of every output."""
        net = init_network(tiny_config(), seed=0)
        bundles = forward(net, random_images(2, 32))
        assert len(bundles) == 2
        for b in bundles:
            assert b.lung_probs.shape == (2, 32, 32)
            assert b.disease_probs.shape == (2, 32, 32)
            assert torch.allclose(b.lung_probs.sum(0), torch.ones(32, 32), atol=1e-5)
            assert torch.allclose(b.disease_probs.sum(0), torch.ones(32, 32), atol=1e-5)
            assert abs(float(b.health_probs.sum()) - 1.0) < 1e-5
            assert 0.0 <= float(b.covid_score) <= 1.0
            assert 0.0 <= float(b.other_score) <= 1.0
            assert not b.lung_probs.requires_grad

    def test_identical_images_identical_bundles(self):
        """Test eval-mode determinism within a batch."""
        net = init_network(tiny_config(), seed=0)
        image = random_images(1, 32)[0]
        a, b = forward(net, [image, image])
        assert torch.equal(a.lung_probs, b.lung_probs)
        assert torch.equal(a.health_probs, b.health_probs)
        assert a.scores() == b.scores()

    def test_softmax_multilabel(self):
        """Test that softmax mode makes the two multi-label scores sum to 1."""
        net = init_network(tiny_config(multilabel_activation="softmax"), seed=0)
        bundle = forward(net, random_images(1, 32))[0]
        assert abs(float(bundle.covid_score + bundle.other_score) - 1.0) < 1e-5

    def test_wrong_input_shape(self):
        """Test that images of the wrong size are rejected."""
        net = init_network(tiny_config(), seed=0)
        with pytest.raises(InputShapeError, match="expected batch"):
            forward(net, random_images(1, 16))

    def test_training_mode_keeps_graph(self):
        """Test that training=True returns differentiable outputs."""
        net = init_network(tiny_config(), seed=0)
        bundles = forward(net, random_images(2, 32), training=True)
        assert bundles[0].health_probs.requires_grad
        assert net.training

    def test_argmax_invariant_to_bias_shift(self):
        """Test that shifting both lung logits by a constant keeps the mask."""
        net = init_network(tiny_config(), seed=0)
        images = random_images(1, 32)
        before, _ = predict_masks(forward(net, images)[0])
        with torch.no_grad():
            net.lung_decoder.classifier.bias += 3.0
        after, _ = predict_masks(forward(net, images)[0])
        assert np.array_equal(before, after)

    def test_masks_are_binary(self):
        """Test argmax masks."""
        net = init_network(tiny_config(), seed=0)
        lung, disease = predict_masks(forward(net, random_images(1, 32))[0])
        assert lung.shape == disease.shape == (32, 32)
        assert set(np.unique(lung)) <= {0, 1}


class TestExportEmbedding:
    """Test cases for export_embedding."""

    def test_full_scale_length(self):
        """Test that the reference topology embeds into 512 values."""
        assert NetworkConfig().embedding_dim == 512
        net = CMTNet(NetworkConfig(input_size=(32, 32, 3)))
        net.eval()
        assert export_embedding(net, random_images(1, 32))[0].shape == (512,)

    def test_scaled_length(self):
        """Test that scale_factor 8 gives 64 values."""
        net = init_network(NetworkConfig(input_size=(32, 32, 3), scale_factor=8), seed=0)
        assert export_embedding(net, random_images(1, 32))[0].shape == (64,)

    def test_deterministic(self):
        """Test identical embeddings for identical inputs."""
        net = init_network(tiny_config(), seed=0)
        image = random_images(1, 32)[0]
        a, b = export_embedding(net, [image, image])
        assert np.array_equal(a, b)


class TestGradients:
    """Finite-difference checks of analytic gradients through every branch."""

    def _setup(self):
        config = NetworkConfig(input_size=(16, 16, 3), scale_factor=8)
        net = init_network(config, seed=0).double()
        net.eval()
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.uniform(size=(1, 3, 16, 16)))
        lung = torch.from_numpy((rng.uniform(size=(16, 16)) < 0.5).astype(np.float64))
        disease = torch.from_numpy((rng.uniform(size=(16, 16)) < 0.2).astype(np.float64))
        return net, x, lung, disease

    def _losses(self, net, x, lung, disease):
        out = net(x)
        return {
            "z1": seg_bce(out.lung_probs[0, 1], lung),
            "z2": seg_bce(out.disease_probs[0, 1], disease),
            "z3": health_ce(out.health_probs[0], 1),
            "z4": multilabel_bce(out.multilabel_scores[0, 0], out.multilabel_scores[0, 1], 1, 0),
        }

    @pytest.mark.parametrize("component,param_name", [
        ("z1", "lung_decoder.classifier.weight"),
        ("z1", "encoder.0.0.conv.weight"),
        ("z2", "disease_decoder.blocks.0.0.conv.weight"),
        ("z3", "health_head.fc1.weight"),
        ("z4", "multilabel_head.fc3.weight"),
        ("z4", "encoder.4.2.conv.bias"),
    ])
    def test_matches_central_differences(self, component, param_name):
        """Test analytic gradients against central differences in float64."""
        net, x, lung, disease = self._setup()
        param = dict(net.named_parameters())[param_name]

        net.zero_grad()
        self._losses(net, x, lung, disease)[component].backward()
        analytic = param.grad.detach().reshape(-1).clone()

        rng = np.random.default_rng(1)
        indices = rng.choice(param.numel(), size=min(5, param.numel()), replace=False)
        h = 1e-6
        flat = param.data.view(-1)
        for i in indices:
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
                plus = self._losses(net, x, lung, disease)[component].item()
                flat[i] = original - h
                minus = self._losses(net, x, lung, disease)[component].item()
                flat[i] = original
            numeric = (plus - minus) / (2 * h)
            scale = max(abs(numeric), abs(analytic[i].item()))
            # absolute floor covers round-off on gradients that are exactly zero
            assert abs(numeric - analytic[i].item()) <= 1e-4 * scale + 1e-6, (component, param_name, int(i))
