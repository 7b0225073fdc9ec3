"""Spectral compression and patch tokenization.

The band axis is squeezed through three 1x1 convolutions, then the feature
map is tiled into non-overlapping m x m patches. Each patch yields one
spectral token (1x1 conv, patch-average pool, linear map) and one spatial
token (3x3 conv inside the patch, flatten, linear map), so both sequences
have one token per patch and stay strictly patch-local.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def centered_he_uniform(rng: np.random.Generator, shape, fan_in: int
                        ) -> np.ndarray:
    """He-scale init with zero-sum rows per output unit.

    LeakyReLU outputs carry a positive mean; random row sums turn that mean
    into per-channel offsets that can leave every pre-activation of a narrow
    layer negative (and the stack effectively dead). Centering each output
    unit's weights removes the response to the constant component.
    """
    w = he_uniform(rng, shape, fan_in)
    flat = w.reshape(shape[0], -1)
    return (flat - flat.mean(axis=1, keepdims=True)).reshape(shape)


def compression_schedule(bands: int, channels: int) -> Tuple[int, int, int]:
    """Channel counts after each 1x1 conv: bands/2, bands/4 (ceil), then C."""
    return -(-bands // 2), -(-bands // 4), channels


@dataclass
class FrontendParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    spe_conv_w: Tensor
    spe_conv_b: Tensor
    spe_fc_w: Tensor   # channels -> spectral token dim
    spe_fc_b: Tensor
    spa_conv_w: Tensor  # 3x3, channels -> spatial token dim
    spa_conv_b: Tensor
    spa_fc_w: Tensor   # spatial_dim * m^2 -> spatial token dim
    spa_fc_b: Tensor
    patch_size: int

    @classmethod
    def initialize(cls, rng: np.random.Generator, bands: int, channels: int,
                   spectral_dim: int, spatial_dim: int, patch_size: int
                   ) -> "FrontendParams":
        if bands < 4:
            raise ConfigError(f"compression needs at least 4 bands, got {bands}")
        if patch_size < 1:
            raise ConfigError(f"patch_size must be positive, got {patch_size}")
        c1, c2, c3 = compression_schedule(bands, channels)

        def conv(c_out, c_in, k):
            w = Tensor(centered_he_uniform(rng, (c_out, c_in, k, k), c_in * k * k),
                       requires_grad=True)
            b = Tensor(np.zeros(c_out), requires_grad=True)
            return w, b

        conv1_w, conv1_b = conv(c1, bands, 1)
        conv2_w, conv2_b = conv(c2, c1, 1)
        conv3_w, conv3_b = conv(c3, c2, 1)
        spe_conv_w, spe_conv_b = conv(channels, channels, 1)
        spa_conv_w, spa_conv_b = conv(spatial_dim, channels, 3)
        flat = spatial_dim * patch_size * patch_size
        return cls(
            conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b,
            spe_conv_w, spe_conv_b,
            Tensor(he_uniform(rng, (channels, spectral_dim), channels),
                   requires_grad=True),
            Tensor(np.zeros(spectral_dim), requires_grad=True),
            spa_conv_w, spa_conv_b,
            Tensor(he_uniform(rng, (flat, spatial_dim), flat), requires_grad=True),
            Tensor(np.zeros(spatial_dim), requires_grad=True),
            patch_size,
        )

    def named(self, prefix: str = "frontend") -> dict:
        fields = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
                  "spe_conv_w", "spe_conv_b", "spe_fc_w", "spe_fc_b",
                  "spa_conv_w", "spa_conv_b", "spa_fc_w", "spa_fc_b")
        return {f"{prefix}.{name}": getattr(self, name) for name in fields}


@dataclass
class TokenSequences:
    """One spectral and one spatial token per patch, plus the patch tiling."""

    spectral: Tensor  # (n_patches, spectral_dim)
    spatial: Tensor   # (n_patches, spatial_dim)
    patch_grid: Tuple[int, int]
    patch_size: int

    @property
    def n_tokens(self) -> int:
        return self.spectral.shape[0]


def compress(params: FrontendParams, image: Tensor) -> Tensor:
    """bands x H x W -> channels x H x W via the three-conv squeeze.

    The input is standardized by scene-level scalar constants before the
    first convolution: reflectance is nonnegative with a large mean, which
    would otherwise drive whole channels negative at init and let the
    LeakyReLU stack collapse the signal.
    """
    if image.ndim != 3:
        raise ShapeError(f"compress expects bands x H x W, got {image.shape}")
    if image.shape[0] < 4:
        raise ConfigError(f"compress needs at least 4 bands, got {image.shape[0]}")
    mu = float(image.data.mean())
    sd = float(image.data.std())
    h = ad.scale(ad.sub(image, Tensor(np.full(image.shape, mu))),
                 1.0 / (sd if sd > 0 else 1.0))
    h = ad.leaky_relu(ad.conv2d(h, params.conv1_w, params.conv1_b, padding=0))
    h = ad.leaky_relu(ad.conv2d(h, params.conv2_w, params.conv2_b, padding=0))
    return ad.leaky_relu(ad.conv2d(h, params.conv3_w, params.conv3_b, padding=0))


def tokenize(params: FrontendParams, fmap: Tensor) -> TokenSequences:
    """channels x H x W -> per-patch spectral and spatial token sequences."""
    m = params.patch_size
    _, height, width = fmap.shape
    if m > min(height, width):
        raise ConfigError(
            f"patch size {m} exceeds image extent {height}x{width}")
    blocks = ad.tile_patches(fmap, m)  # (n, C, m, m)
    grid = (-(-height // m), -(-width // m))

    spe = ad.conv2d_batched(blocks, params.spe_conv_w, params.spe_conv_b, padding=0)
    pooled = ad.mean(spe, axis=(2, 3))  # (n, C): average over the padded patch
    spectral = ad.add(ad.matmul(pooled, params.spe_fc_w), params.spe_fc_b)

    spa = ad.conv2d_batched(blocks, params.spa_conv_w, params.spa_conv_b, padding=1)
    flat = ad.reshape(spa, (spa.shape[0], spa.shape[1] * m * m))
    spatial = ad.add(ad.matmul(flat, params.spa_fc_w), params.spa_fc_b)

    return TokenSequences(spectral, spatial, grid, m)
