#!/usr/bin/env python3
"""
The multi-task network: one shared VGG16-BN style encoder, two SegNet style
decoders (lung and disease localization) and two classification branches
(healthy/unhealthy and COVID + other-disease multi-label).

Info:
Every encoder block is a stack of conv + batch norm + ReLU layers followed
by a 2x2 max-pool whose indices are kept. Each decoder mirrors the encoder:
it unpools with those indices and runs a conv stack of the same depth, then
a final 3x3 conv produces two channels (0 = background, 1 = foreground)
normalized by a per-pixel SoftMax.

Both classification branches read one shared vector: the top encoder
feature map after global average pooling. Each branch is three FC layers
(ReLU, ReLU, output). The healthy/unhealthy branch ends in a 2-way SoftMax
(index 1 = unhealthy); the multi-label branch ends in two independent
sigmoid scores (C, O), or in a 2-way SoftMax when configured so.

Pooling uses ceil_mode so that small desk-scale inputs (e.g. 16x16) still
pass through all five blocks.
"""

from __future__ import annotations

import logging
import pathlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator

logger = logging.getLogger(__name__)

WeightSource = Union[str, pathlib.Path, Mapping[str, torch.Tensor], nn.Module]


class NetworkConfigError(ValueError):
    """Raised for inconsistent network configurations."""


class EncoderWeightsError(ValueError):
    """Raised when pretrained encoder weights do not fit the configuration."""


class InputShapeError(ValueError):
    """Raised when a batch does not match the configured input size."""


class NetworkConfig(BaseModel):
    """Architecture description.

    scale_factor divides every channel width and head width, giving cheap
    desk-scale instances with the same topology.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_size: Tuple[int, int, int] = (224, 224, 3)
    encoder_layers: Tuple[int, ...] = (2, 2, 3, 3, 3)
    encoder_widths: Tuple[int, ...] = (64, 128, 256, 512, 512)
    head_hidden_dims: Tuple[int, int] = (256, 64)
    scale_factor: int = 1
    multilabel_activation: Literal["sigmoid", "softmax"] = "sigmoid"

    @model_validator(mode="after")
    def _check(self) -> "NetworkConfig":
        if self.scale_factor < 1:
            raise NetworkConfigError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if len(self.encoder_layers) != len(self.encoder_widths):
            raise NetworkConfigError("encoder_layers and encoder_widths must have equal length")
        if self.input_size[2] != 3:
            raise NetworkConfigError(f"input must have 3 channels, got {self.input_size[2]}")
        for width in tuple(self.encoder_widths) + tuple(self.head_hidden_dims):
            if width % self.scale_factor:
                raise NetworkConfigError(f"scale_factor {self.scale_factor} does not divide width {width}")
        return self

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(w // self.scale_factor for w in self.encoder_widths)

    @property
    def head_dims(self) -> Tuple[int, int]:
        h1, h2 = self.head_hidden_dims
        return h1 // self.scale_factor, h2 // self.scale_factor

    @property
    def embedding_dim(self) -> int:
        return self.widths[-1]


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(OrderedDict([
            ("conv", nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)),
            ("bn", nn.BatchNorm2d(out_channels)),
            ("relu", nn.ReLU(inplace=True)),
        ]))


def _conv_stack(in_channels: int, out_channels: Sequence[int]) -> nn.Sequential:
    layers = []
    for width in out_channels:
        layers.append(ConvBNReLU(in_channels, width))
        in_channels = width
    return nn.Sequential(*layers)


class SegNetDecoder(nn.Module):
    """Mirror of the encoder driven by max-pool indices."""

    def __init__(self, widths: Sequence[int], layers: Sequence[int], num_classes: int = 2):
        super().__init__()
        blocks = []
        for i in reversed(range(len(widths))):
            target = widths[i - 1] if i > 0 else widths[0]
            outs = [widths[i]] * (layers[i] - 1) + [target]
            blocks.append(_conv_stack(widths[i], outs))
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Conv2d(widths[0], num_classes, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, indices: Sequence[torch.Tensor],
                sizes: Sequence[torch.Size]) -> torch.Tensor:
        for block, idx, size in zip(self.blocks, reversed(indices), reversed(sizes)):
            x = F.max_unpool2d(x, idx, kernel_size=2, stride=2, output_size=size[-2:])
            x = block(x)
        return self.classifier(x)


def _fc_branch(in_dim: int, hidden: Tuple[int, int], out_dim: int = 2) -> nn.Sequential:
    return nn.Sequential(OrderedDict([
        ("fc1", nn.Linear(in_dim, hidden[0])),
        ("relu1", nn.ReLU(inplace=True)),
        ("fc2", nn.Linear(hidden[0], hidden[1])),
        ("relu2", nn.ReLU(inplace=True)),
        ("fc3", nn.Linear(hidden[1], out_dim)),
    ]))


class NetworkOutput(NamedTuple):
    """Batched network outputs; probabilities keep the autograd graph."""

    lung_logits: torch.Tensor
    disease_logits: torch.Tensor
    lung_probs: torch.Tensor
    disease_probs: torch.Tensor
    health_probs: torch.Tensor
    multilabel_scores: torch.Tensor
    embedding: torch.Tensor


class CMTNet(nn.Module):
    """Shared encoder, two decoders, two classification branches."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.seed: Optional[int] = None
        self.trained_epochs = 0
        widths, layers = config.widths, config.encoder_layers

        blocks = []
        in_channels = config.input_size[2]
        for width, depth in zip(widths, layers):
            blocks.append(_conv_stack(in_channels, [width] * depth))
            in_channels = width
        self.encoder = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2, return_indices=True, ceil_mode=True)

        self.lung_decoder = SegNetDecoder(widths, layers)
        self.disease_decoder = SegNetDecoder(widths, layers)

        self.gap = nn.AdaptiveAvgPool2d(1)
        self.health_head = _fc_branch(config.embedding_dim, config.head_dims)
        self.multilabel_head = _fc_branch(config.embedding_dim, config.head_dims)

    def encode(self, x: torch.Tensor):
        """Run the encoder; returns (top map, pool indices, pre-pool sizes)."""
        indices, sizes = [], []
        for block in self.encoder:
            x = block(x)
            sizes.append(x.size())
            x, idx = self.pool(x)
            indices.append(idx)
        return x, indices, sizes

    def forward(self, x: torch.Tensor) -> NetworkOutput:
        expected = tuple(self.config.input_size)
        if x.dim() != 4 or (x.shape[2], x.shape[3], x.shape[1]) != expected:
            raise InputShapeError(f"expected batch of shape (B, {expected[2]}, {expected[0]}, {expected[1]}), got {tuple(x.shape)}")

        top, indices, sizes = self.encode(x)
        lung_logits = self.lung_decoder(top, indices, sizes)
        disease_logits = self.disease_decoder(top, indices, sizes)

        embedding = torch.flatten(self.gap(top), 1)
        health_probs = torch.softmax(self.health_head(embedding), dim=1)
        multilabel_logits = self.multilabel_head(embedding)
        if self.config.multilabel_activation == "sigmoid":
            multilabel_scores = torch.sigmoid(multilabel_logits)
        else:
            multilabel_scores = torch.softmax(multilabel_logits, dim=1)

        return NetworkOutput(
            lung_logits=lung_logits,
            disease_logits=disease_logits,
            lung_probs=torch.softmax(lung_logits, dim=1),
            disease_probs=torch.softmax(disease_logits, dim=1),
            health_probs=health_probs,
            multilabel_scores=multilabel_scores,
            embedding=embedding,
        )

    def encoder_batchnorms(self) -> List[nn.BatchNorm2d]:
        return [m for m in self.encoder.modules() if isinstance(m, nn.BatchNorm2d)]


@dataclass(frozen=True)
class PredictionBundle:
    """Outputs for one sample.

    lung_probs / disease_probs are (2, H, W) per-pixel distributions with
    channel 1 the foreground; health_probs is (2,) with index 1 unhealthy.
    """

    lung_probs: torch.Tensor
    disease_probs: torch.Tensor
    health_probs: torch.Tensor
    covid_score: torch.Tensor
    other_score: torch.Tensor
    embedding: torch.Tensor

    def lung_mask(self) -> np.ndarray:
        return self.lung_probs.detach().argmax(dim=0).cpu().numpy().astype(np.uint8)

    def disease_mask(self) -> np.ndarray:
        return self.disease_probs.detach().argmax(dim=0).cpu().numpy().astype(np.uint8)

    def scores(self) -> dict:
        """Scalar scores as plain floats for reports and score files."""
        return {
            "covid_score": float(self.covid_score.detach()),
            "other_score": float(self.other_score.detach()),
            "p_unhealthy": float(self.health_probs[1].detach()),
            "p_healthy": float(self.health_probs[0].detach()),
        }


def to_bundles(output: NetworkOutput) -> List[PredictionBundle]:
    """Split batched outputs into one bundle per sample."""
    return [
        PredictionBundle(
            lung_probs=output.lung_probs[i],
            disease_probs=output.disease_probs[i],
            health_probs=output.health_probs[i],
            covid_score=output.multilabel_scores[i, 0],
            other_score=output.multilabel_scores[i, 1],
            embedding=output.embedding[i],
        )
        for i in range(output.lung_probs.shape[0])
    ]


def images_to_tensor(images, net: Optional[nn.Module] = None) -> torch.Tensor:
    """Stack H x W x 3 arrays (or pass through a B x 3 x H x W tensor)."""
    if isinstance(images, torch.Tensor):
        tensor = images
    else:
        arrays = [np.asarray(image, dtype=np.float32) for image in images]
        if not arrays:
            raise InputShapeError("empty batch")
        if any(a.ndim != 3 for a in arrays):
            raise InputShapeError("images must be H x W x 3 arrays")
        tensor = torch.from_numpy(np.stack(arrays).transpose(0, 3, 1, 2).copy())
    if net is not None:
        param = next(net.parameters())
        tensor = tensor.to(device=param.device, dtype=param.dtype)
    return tensor


def _iter_modules_from_state(state: Mapping[str, torch.Tensor]):
    """Group a flat state dict into (prefix, {param: tensor}) in key order."""
    groups: "OrderedDict[str, dict]" = OrderedDict()
    for key, tensor in state.items():
        prefix, _, name = key.rpartition(".")
        groups.setdefault(prefix, {})[name] = tensor
    return groups.items()


def _resolve_weight_source(source: WeightSource) -> Mapping[str, torch.Tensor]:
    if isinstance(source, nn.Module):
        return source.state_dict()
    if isinstance(source, str) and source == "imagenet":
        from torchvision.models import VGG16_BN_Weights, vgg16_bn
        return vgg16_bn(weights=VGG16_BN_Weights.IMAGENET1K_V1).features.state_dict()
    if isinstance(source, (str, pathlib.Path)):
        try:
            return torch.load(pathlib.Path(source), map_location="cpu", weights_only=True)
        except Exception as e:
            raise EncoderWeightsError(f"Cannot read encoder weights from {source}: {e}") from e
    return source


def load_encoder_weights(net: CMTNet, source: WeightSource) -> None:
    """Copy VGG-style conv (+ batch norm) weights into the encoder, in order.

    Args:
        net: Target network.
        source: "imagenet" for torchvision's VGG16-BN, a checkpoint path, a
            state dict or a module whose conv layers follow encoder order.

    Raises:
        EncoderWeightsError: If the layer count or any tensor shape differs.
    """
    state = dict(_resolve_weight_source(source))
    if any(key.startswith("features.") for key in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}

    convs, bns = [], []
    for _, params in _iter_modules_from_state(state):
        if "running_mean" in params:
            bns.append(params)
        elif "weight" in params and params["weight"].dim() == 4:
            convs.append(params)

    targets = [layer for block in net.encoder for layer in block]
    if len(convs) != len(targets):
        raise EncoderWeightsError(f"expected {len(targets)} conv layers, source has {len(convs)}")
    if bns and len(bns) != len(targets):
        raise EncoderWeightsError(f"expected {len(targets)} batch norm layers, source has {len(bns)}")

    with torch.no_grad():
        for i, layer in enumerate(targets):
            for name, tensor in convs[i].items():
                _copy_param(layer.conv, name, tensor, f"encoder conv {i}")
            if bns:
                for name, tensor in bns[i].items():
                    _copy_param(layer.bn, name, tensor, f"encoder batch norm {i}")
    logger.info(f"Loaded pretrained encoder weights into {len(targets)} layers")


def _copy_param(module: nn.Module, name: str, tensor: torch.Tensor, where: str) -> None:
    target = getattr(module, name, None)
    if target is None:
        return
    if tuple(target.shape) != tuple(tensor.shape):
        raise EncoderWeightsError(f"{where}.{name}: shape {tuple(tensor.shape)} != expected {tuple(target.shape)}")
    target.copy_(tensor.to(dtype=target.dtype))


def init_network(config: NetworkConfig, seed: int, pretrained_encoder: Optional[WeightSource] = None) -> CMTNet:
    """Build a network with deterministic initialization.

    The global torch RNG is left untouched.

    Args:
        config: Architecture description.
        seed: Initialization seed.
        pretrained_encoder: Optional encoder weight source (see load_encoder_weights).

    Returns:
        CMTNet in eval mode.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CMTNet(config)
    net.seed = seed
    if pretrained_encoder is not None:
        load_encoder_weights(net, pretrained_encoder)
    net.eval()
    logger.debug(f"Initialized network with seed {seed}: {count_parameters(net)} parameters")
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def forward(net: CMTNet, images, training: bool = False) -> List[PredictionBundle]:
    """Run the network on a batch.

    Args:
        net: Network.
        images: Sequence of H x W x 3 arrays or a B x 3 x H x W tensor.
        training: Batch norm in batch-statistics mode and autograd enabled;
            otherwise running statistics and no graph.

    Returns:
        One PredictionBundle per image.

    Raises:
        InputShapeError: If the batch does not match the configured input size.
    """
    net.train(training)
    tensor = images_to_tensor(images, net)
    with torch.set_grad_enabled(training):
        output = net(tensor)
    return to_bundles(output)


def predict_masks(bundle: PredictionBundle) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax lung and disease masks for one bundle."""
    return bundle.lung_mask(), bundle.disease_mask()


def export_embedding(net: CMTNet, images) -> List[np.ndarray]:
    """Post-GAP encoder embeddings, one vector per image (eval mode)."""
    return [b.embedding.detach().cpu().numpy() for b in forward(net, images, training=False)]
