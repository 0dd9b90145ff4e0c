"""Full detector: hierarchical encoder plus correlation mask decoder.

``build_model`` is the one entry point for constructing a network; parameter
initialization is a pure function of ``ModelConfig.seed``, so two builds with
the same config produce bit-identical parameters.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ModelConfig
from .decoder import CycleFC, MaskDecoder, MultiScaleCycleFC
from .encoder import EfficientSelfAttention, HierarchicalEncoder

TRUNC_NORMAL_STD = 0.02


class ForgeryDetector(nn.Module):
    """Predicts a per-pixel two-class similarity mask for one image batch."""

    def __init__(self, config: ModelConfig, debug=False):
        super().__init__()
        self.config = config
        self.encoder = HierarchicalEncoder(config.encoder, debug=debug)
        self.decoder = MaskDecoder(config)

    def forward(self, images):
        """(B, 3, H, W) in [0, 1] -> (mask (B, 2, H, W), distillation bundle)."""
        return self.decoder(self.encoder(images))

    def predict_mask(self, images):
        return self.forward(images)[0]


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize every parameter in ``model``.

    Linear and attention weights draw truncated normals (sigma 0.02), convs
    draw fan-in-scaled normals, norms and cycle-FC mixing weights start at
    one, biases at zero.  Draw order follows module registration order, so
    the result depends only on the architecture and the seed.
    """
    gen = torch.Generator(device="cpu").manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=TRUNC_NORMAL_STD, generator=gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Conv2d):
            fan_in = module.in_channels // module.groups * module.kernel_size[0] * module.kernel_size[1]
            module.weight.data.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
        elif isinstance(module, EfficientSelfAttention):
            if module.sr_weight is not None:
                nn.init.trunc_normal_(module.sr_weight, std=TRUNC_NORMAL_STD, generator=gen)
        elif isinstance(module, CycleFC):
            nn.init.trunc_normal_(module.weight, std=TRUNC_NORMAL_STD, generator=gen)
            nn.init.zeros_(module.bias)
        elif isinstance(module, MultiScaleCycleFC):
            nn.init.ones_(module.branch_weights)


def build_model(config: ModelConfig, dtype=torch.float32, debug=False) -> ForgeryDetector:
    """Construct and seed-initialize a detector.

    Initialization always happens in float32 and is then cast, so the double
    precision variant of a model holds exactly the same values.
    """
    model = ForgeryDetector(config, debug=debug)
    init_parameters(model, config.seed)
    return model.to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
