"""
Residual translation generator, patch discriminator and the replay buffer
used by the cycle-consistent GAN
"""
from typing import List, Optional

import numpy as np
import torch
from torch import nn


class ResidualBlock(nn.Module):
    """Two reflection-padded 3x3 convolutions with a skip connection"""

    def __init__(self, features: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(features, features, kernel_size=3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(features),
            nn.ReLU(inplace=True),
            nn.Conv2d(features, features, kernel_size=3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(features),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Image-to-image generator: c7s1-F, two stride-2 downsamples,
    residual blocks, two upsamples, c7s1-C, tanh

    Output has the input's shape and lies in [-1, 1].
    """

    def __init__(self, channels: int, resolution: int, residual_blocks: int = 9, filters: int = 64):
        super().__init__()
        self.channels = channels
        self.resolution = resolution

        layers: List[nn.Module] = [
            nn.Conv2d(channels, filters, kernel_size=7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(filters),
            nn.ReLU(inplace=True),
        ]
        features = filters
        for _ in range(2):
            layers += [
                nn.Conv2d(features, features * 2, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(features * 2),
                nn.ReLU(inplace=True),
            ]
            features *= 2

        layers += [ResidualBlock(features) for _ in range(residual_blocks)]

        for _ in range(2):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(features, features // 2, kernel_size=3, padding=1),
                nn.InstanceNorm2d(features // 2),
                nn.ReLU(inplace=True),
            ]
            features //= 2

        layers += [nn.Conv2d(features, channels, kernel_size=7, padding=3, padding_mode="reflect"), nn.Tanh()]
        self.layers = nn.Sequential(*layers)
        self.apply(init_weights_normal)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class PatchDiscriminator(nn.Module):
    """Patch discriminator: a grid of real/fake scores, one per receptive field

    Three layers give the usual 70x70 receptive field.
    """

    def __init__(self, channels: int, filters: int = 64, layers: int = 3):
        super().__init__()
        modules: List[nn.Module] = [
            nn.Conv2d(channels, filters, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        multiplier = 1
        for n in range(1, layers):
            previous, multiplier = multiplier, min(2 ** n, 8)
            modules += [
                nn.Conv2d(filters * previous, filters * multiplier, kernel_size=4, stride=2, padding=1),
                nn.InstanceNorm2d(filters * multiplier),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        previous, multiplier = multiplier, min(2 ** layers, 8)
        modules += [
            nn.Conv2d(filters * previous, filters * multiplier, kernel_size=4, stride=1, padding=1),
            nn.InstanceNorm2d(filters * multiplier),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(filters * multiplier, 1, kernel_size=4, stride=1, padding=1),
        ]
        self.layers = nn.Sequential(*modules)
        self.apply(init_weights_normal)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def init_weights_normal(module: nn.Module):
    """Convolution weights ~ N(0, 0.02), biases zero"""
    if isinstance(module, nn.Conv2d):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class ReplayBuffer:
    """Pool of past generated images for discriminator updates

    Until full, every new image is stored and returned. Afterwards each new
    image is, with probability 0.5, swapped for a random stored one.
    """

    def __init__(self, capacity: int = 50, rng: Optional[np.random.Generator] = None):
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng()
        self.images: List[torch.Tensor] = []

    def __len__(self) -> int:
        return len(self.images)

    def push_and_pop(self, batch: torch.Tensor) -> torch.Tensor:
        batch = batch.detach()
        if self.capacity == 0:
            return batch
        out = []
        for image in batch:
            if len(self.images) < self.capacity:
                self.images.append(image.clone())
                out.append(image)
            elif self.rng.uniform() > 0.5:
                index = int(self.rng.integers(0, self.capacity))
                out.append(self.images[index].clone())
                self.images[index] = image.clone()
            else:
                out.append(image)
        return torch.stack(out)

    def state_tensor(self) -> Optional[torch.Tensor]:
        return torch.stack(self.images) if self.images else None

    def load_state_tensor(self, stacked: Optional[torch.Tensor]):
        self.images = [image.clone() for image in stacked] if stacked is not None else []
