"""Convolutional feature extraction and masked Gram matrices.

Two interchangeable backends expose the same six taps:

* ``VGGExtractor`` wraps a pretrained torchvision VGG-19 (or VGG-16). Inputs
  in [0, 1] are normalized with the ImageNet mean/std before the network.
* ``TestExtractor`` is a small fixed-weight CNN with the same stage layout
  (two 3x3 convolutions per stage, 2x2 average pooling between stages).
  Weights are drawn from the config seed. It uses softplus activations so
  that finite-difference checks are not disturbed by ReLU kinks, and maps
  inputs from [0, 1] to [-1, 1]. In structured mode (the default) the first
  three channels of every conv carry the input colors, and each stage adds
  Laplacian and gradient stencils, so Gram statistics see color and edges.

Style taps are the first activation of each of the five stages, the content
tap is the second activation of stage four.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from scenestyle.config import Config

STYLE_TAPS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
CONTENT_TAP = "relu4_2"
ALL_TAPS = STYLE_TAPS + (CONTENT_TAP,)
DEEPEST_STYLE_TAP = STYLE_TAPS[-1]
# four 2x poolings happen before the deepest tap
MIN_INPUT_SIZE = 16

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_VGG_TAP_INDEX = {
    "vgg19": {"relu1_1": 1, "relu2_1": 6, "relu3_1": 11, "relu4_1": 20, "relu4_2": 22, "relu5_1": 29},
    "vgg16": {"relu1_1": 1, "relu2_1": 6, "relu3_1": 11, "relu4_1": 18, "relu4_2": 20, "relu5_1": 25},
}


class FeatureError(ValueError):
    pass


@dataclass
class GramMatrix:
    matrix: torch.Tensor  # (C, C)
    pixel_count: int


class FeatureExtractor(nn.Module):
    """Base class: subclasses implement ``_forward_taps`` on a normalized batch."""

    # spatial downsampling factor of each tap relative to the input
    tap_strides = {"relu1_1": 1, "relu2_1": 2, "relu3_1": 4, "relu4_1": 8, "relu4_2": 8, "relu5_1": 16}

    def forward(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        return extract_features(image, self)

    def _forward_taps(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        raise NotImplementedError


# 3x3 stencils for the structured channels: Laplacian and scaled central differences
_LAPLACE = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))
_DX = ((0.0, 0.0, 0.0), (-2.0, 0.0, 2.0), (0.0, 0.0, 0.0))
_DY = ((0.0, -2.0, 0.0), (0.0, 0.0, 0.0), (0.0, 2.0, 0.0))


class TestExtractor(FeatureExtractor):
    __test__ = False  # keep pytest from collecting it

    def __init__(self, channels=(16, 32, 64, 64, 64), seed: int = 0, dtype=torch.float32, beta: float = 8.0,
                 structured: bool = True, structured_gain: float = 4.0):
        """Seeded random VGG-shaped network for tests and desk-scale runs.

        Sharp softplus keeps the features nonlinear enough for Gram matching
        to reproduce blob shapes while staying smooth for gradient checks.
        Replicate padding avoids the frame that zero padding paints at borders.

        With ``structured=True`` the first three channels of every layer carry
        the (pooled) input colors through the network, and the first layer of
        each stage adds sign-split Laplacian and gradient responses of those
        colors. Every stage then sees edges and blobs at its own scale, which
        makes Gram matching reproduce round patterns far more reliably than
        purely random filters. Remaining channels stay random.
        """
        super().__init__()
        self.beta = beta
        self.structured = structured
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c_in = 3
        for c_out in channels:
            for _ in range(2):
                conv = nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="replicate")
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / (9 * c_in)))
                    conv.bias.copy_(torch.randn(c_out, generator=gen) * 0.05)
                self.convs.append(conv)
                c_in = c_out
        if structured:
            self._structure(structured_gain)
        self.to(dtype)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def _structure(self, gain: float) -> None:
        stencils = [torch.tensor(k) for k in (_LAPLACE, _DX, _DY)]
        for i, conv in enumerate(self.convs):
            w, b = conv.weight, conv.bias
            if w.shape[0] < 3:
                raise ValueError("structured test backend needs at least 3 channels per layer")
            w[:3] = 0.0
            # inputs live in [-1, 1]; the offset keeps the carried colors in softplus's linear range
            b[:3] = 1.5 if i == 0 else 0.0
            for c in range(3):
                w[c, c, 1, 1] = 1.0
            if i % 2:
                continue
            k = 3
            for c in range(3):
                for stencil in stencils:
                    for sign in (1.0, -1.0):
                        if k < w.shape[0]:
                            w[k] = 0.0
                            w[k, c] = sign * gain * stencil
                            b[k] = 0.0
                            k += 1

    def _forward_taps(self, x):
        taps = {}
        for stage in range(5):
            if stage:
                x = F.avg_pool2d(x, 2)
            x = F.softplus(self.convs[2 * stage](x), beta=self.beta)
            taps[f"relu{stage + 1}_1"] = x
            if stage == 4:
                break
            x = F.softplus(self.convs[2 * stage + 1](x), beta=self.beta)
            taps[f"relu{stage + 1}_2"] = x
        return {k: taps[k] for k in ALL_TAPS}

    def normalize(self, image: torch.Tensor) -> torch.Tensor:
        return image * 2.0 - 1.0


class VGGExtractor(FeatureExtractor):
    def __init__(self, variant: str = "vgg19", weights_path: str | Path | None = None):
        super().__init__()
        import torchvision.models as tvm

        if variant not in _VGG_TAP_INDEX:
            raise FeatureError(f"unknown VGG variant {variant!r}")
        ctor = getattr(tvm, variant)
        model = ctor(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            if any(k.startswith("features.") for k in state):
                model.load_state_dict(state, strict=False)
            else:
                model.features.load_state_dict(state)
        else:
            enum = getattr(tvm, f"{variant.upper()}_Weights").IMAGENET1K_V1
            try:
                model.load_state_dict(enum.get_state_dict(progress=False))
            except Exception as exc:  # network or cache failure
                raise FeatureError(
                    f"could not load pretrained {variant} weights from the torch cache; "
                    "set weights_path to a local state dict"
                ) from exc
        self.tap_index = _VGG_TAP_INDEX[variant]
        last = max(self.tap_index.values())
        self.features = model.features[: last + 1]
        for m in self.features:
            if isinstance(m, nn.ReLU):
                m.inplace = False
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def normalize(self, image):
        return (image - self.mean.to(image.dtype)) / self.std.to(image.dtype)

    def _forward_taps(self, x):
        by_index = {i: name for name, i in self.tap_index.items()}
        taps = {}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in by_index:
                taps[by_index[i]] = x
        return {k: taps[k] for k in ALL_TAPS}


def make_extractor(config: Config, dtype=torch.float32) -> FeatureExtractor:
    if config.backend == "test":
        return TestExtractor(config.test_channels, seed=config.seed, dtype=dtype, beta=config.test_beta,
                             structured=config.test_structured)
    return VGGExtractor(config.backend, config.weights_path).to(dtype)


def extract_features(image: torch.Tensor, extractor: FeatureExtractor) -> dict[str, torch.Tensor]:
    """Tap activations for a (3, H, W) or (1, 3, H, W) image in [0, 1].

    Returns (C, h, w) tensors keyed by tap name.
    """
    x = image if image.dim() == 4 else image[None]
    if min(x.shape[-2:]) < MIN_INPUT_SIZE:
        raise FeatureError(f"image {tuple(x.shape[-2:])} is smaller than {MIN_INPUT_SIZE} px")
    taps = extractor._forward_taps(extractor.normalize(x))
    return {k: v[0] for k, v in taps.items()}


def masked_gram(features: torch.Tensor, mask) -> GramMatrix:
    """Gram matrix of the feature vectors at masked positions, divided by their count."""
    c = features.shape[0]
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool).reshape(-1)
    f = features.reshape(c, -1)[:, mask]
    m = int(mask.sum())
    return GramMatrix(f @ f.T / max(1, m), m)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block majority vote down to ``target`` (h, w); ties count as set.

    Blocks follow floor pooling: rows and columns beyond ``target * factor``
    are ignored, matching what strided pooling discards.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    th, tw = target
    if th > h or tw > w:
        raise ValueError(f"target {target} is larger than mask {mask.shape}")
    if (th, tw) == (h, w):
        return mask.copy()
    fh, fw = h // th, w // tw
    blocks = mask[: th * fh, : tw * fw].reshape(th, fh, tw, fw)
    votes = blocks.sum(axis=(1, 3))
    return 2 * votes >= fh * fw
