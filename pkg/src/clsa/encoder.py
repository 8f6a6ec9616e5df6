"""Query/key encoders (backbone + projector) and the momentum update."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ArchConfig:
    """Residual backbone followed by a two-layer projector.

    ``depths`` lists the number of basic blocks per stage; stage ``i`` has
    ``width * 2**i`` channels and every stage after the first halves the
    resolution. Normalisation is GroupNorm so that no statistics are shared
    across samples in either encoder.
    """

    width: int = 32
    depths: tuple[int, ...] = (1, 1, 1)
    hidden_dim: int = 512
    embed_dim: int = 128
    gn_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.width <= 0 or not self.depths or min(self.depths) < 1:
            raise ValueError("width must be positive and every stage needs at least one block")
        if self.width % self.gn_groups:
            raise ValueError("width must be divisible by gn_groups")
        if self.hidden_dim <= 0 or self.embed_dim <= 0:
            raise ValueError("hidden_dim and embed_dim must be positive")

    @property
    def feature_dim(self) -> int:
        return self.width * 2 ** (len(self.depths) - 1)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.GroupNorm(groups, cout)
            )

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Backbone(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        g = arch.gn_groups
        self.stem = nn.Sequential(
            nn.Conv2d(3, arch.width, 3, 1, 1, bias=False), nn.GroupNorm(g, arch.width), nn.ReLU()
        )
        layers = []
        cin = arch.width
        for i, depth in enumerate(arch.depths):
            cout = arch.width * 2**i
            for j in range(depth):
                layers.append(BasicBlock(cin, cout, 2 if (i > 0 and j == 0) else 1, g))
                cin = cout
        self.layers = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x):
        x = self.layers(self.stem(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class Encoder(nn.Module):
    """``normalize(g(f(x)))``; :meth:`features` exposes the pooled ``f(x)``."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.backbone = Backbone(arch)
        self.projector = nn.Sequential(
            nn.Linear(self.backbone.out_dim, arch.hidden_dim),
            nn.ReLU(),
            nn.Linear(arch.hidden_dim, arch.embed_dim),
        )

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return F.normalize(self.projector(self.backbone(x)), dim=1)


class EncoderPair(nn.Module):
    """Gradient-trained query encoder and its momentum-averaged key copy."""

    def __init__(self, arch: ArchConfig, momentum: float = 0.999):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.arch = arch
        self.momentum = momentum
        self.query = Encoder(arch)
        self.key = copy.deepcopy(self.query)
        for p in self.key.parameters():
            p.requires_grad_(False)

    def encode_query(self, images):
        return encode(self.query, images)

    @torch.no_grad()
    def encode_key(self, images):
        return encode(self.key, images)

    @torch.no_grad()
    def momentum_update(self, momentum: float | None = None) -> None:
        momentum_update(self, momentum)

    def num_parameters(self) -> dict[str, int]:
        count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
        return {
            "backbone": count(self.query.backbone),
            "projector": count(self.query.projector),
            "total_query": count(self.query),
        }


def init_pair(seed: int, arch: ArchConfig | None = None, momentum: float = 0.999) -> EncoderPair:
    """Build a pair deterministically from ``seed``; the key is an exact copy."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EncoderPair(arch or ArchConfig(), momentum)


def as_batch(images) -> torch.Tensor:
    """Stack a sequence of ``C x H x W`` arrays into one tensor.

    Views with different spatial sizes cannot share a forward pass and must be
    grouped by size by the caller.
    """
    if isinstance(images, torch.Tensor):
        return images
    if isinstance(images, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(images))
    shapes = {tuple(np.shape(im)) for im in images}
    if len(shapes) > 1:
        raise ValueError(
            f"images of mixed sizes {sorted(shapes)} in one call; group views by spatial size"
        )
    return torch.from_numpy(np.stack(images).astype(np.float32, copy=False))


def encode(encoder: Encoder, images: torch.Tensor | Sequence[np.ndarray]) -> torch.Tensor:
    x = as_batch(images)
    param = next(encoder.parameters())
    return encoder(x.to(dtype=param.dtype, device=param.device))


@torch.no_grad()
def momentum_update(pair: EncoderPair, momentum: float | None = None) -> EncoderPair:
    """``key <- m * key + (1 - m) * query`` for every parameter and buffer."""
    m = pair.momentum if momentum is None else momentum
    q_state = list(pair.query.parameters()) + list(pair.query.buffers())
    k_state = list(pair.key.parameters()) + list(pair.key.buffers())
    if len(q_state) != len(k_state):
        raise ValueError("query and key encoders have different structures")
    for pq, pk in zip(q_state, k_state):
        if pq.shape != pk.shape:
            raise ValueError(f"shape mismatch {tuple(pq.shape)} vs {tuple(pk.shape)}")
        if pk.is_floating_point():
            pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)
    return pair
