"""
Dense-connectivity binary classifier with a single-logit head

The pre-pooling feature maps and the head weights are both exposed so class
activation maps can be formed as sum_k w_k * f_k.
"""
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import DenseNet


class DenseNetClassifier(nn.Module):
    """torchvision DenseNet features + ReLU + global average pool + Linear(K, 1)

    Inputs are [-1, 1] images in NCHW layout; they are mapped to [0, 1] and
    standardised with `mean`/`std` inside the model.
    """

    def __init__(self, channels: int = 3, resolution: int = 224,
                 growth_rate: int = 32, block_config: Sequence[int] = (6, 12, 24, 16),
                 num_init_features: int = 64, bn_size: int = 4, stem: str = "imagenet",
                 mean: Optional[Sequence[float]] = None, std: Optional[Sequence[float]] = None):
        super().__init__()
        self.channels = channels
        self.resolution = resolution
        backbone = DenseNet(growth_rate=growth_rate, block_config=tuple(block_config),
                            num_init_features=num_init_features, bn_size=bn_size, num_classes=1)
        if stem == "compact":
            backbone.features.conv0 = nn.Conv2d(channels, num_init_features, kernel_size=3,
                                                stride=1, padding=1, bias=False)
            backbone.features.pool0 = nn.Identity()
        elif channels != 3:
            backbone.features.conv0 = nn.Conv2d(channels, num_init_features, kernel_size=7,
                                                stride=2, padding=3, bias=False)
        nn.init.kaiming_normal_(backbone.features.conv0.weight)

        self.features = backbone.features
        self.head = nn.Linear(backbone.classifier.in_features, 1)
        nn.init.zeros_(self.head.bias)

        mean = list(mean) if mean is not None else [0.5] * channels
        std = list(std) if std is not None else [0.5] * channels
        if len(mean) != channels or len(std) != channels:
            raise ValueError(f"mean/std need {channels} entries")
        self.register_buffer("input_mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("input_std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    @property
    def feature_channels(self) -> int:
        return self.head.in_features

    def standardize(self, x: torch.Tensor) -> torch.Tensor:
        return ((x + 1.0) / 2.0 - self.input_mean) / self.input_std

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Final dense block activations (after the closing norm + ReLU), N x K x h x w"""
        return F.relu(self.features(self.standardize(x)))

    def forward_with_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.feature_maps(x)
        pooled = torch.flatten(F.adaptive_avg_pool2d(features, 1), 1)
        return self.head(pooled).squeeze(1), features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits, shape N"""
        return self.forward_with_features(x)[0]
