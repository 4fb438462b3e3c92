"""Synthetic images and patch-grid helpers."""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ShapeError


def substream(seed, name):
    """Independent generator for a named purpose ("init", "data", "gumbel", ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def patchify(images, patch):
    """(B, H, W, C) -> (B, T, P*P*C), patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"image extents {(H, W)} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = images.reshape(B, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch * patch * C)


def unpatchify(patches, grid, patch, channels):
    patches = np.asarray(patches)
    B = patches.shape[0]
    gh, gw = grid
    x = patches.reshape(B, gh, gw, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * patch, gw * patch, channels)


class ImageSource:
    """Images whose patches are decoded from independent low-dimensional latents.

    Pixel values have roughly unit variance. ``sample`` is a pure function of
    the generator passed in.
    """

    def __init__(self, seed=0, size=32, channels=3, patch=8, latent_dim=6, pixel_noise=0.1):
        self.size, self.channels, self.patch = size, channels, patch
        self.grid = (size // patch, size // patch)
        self.n_patches = self.grid[0] * self.grid[1]
        self.patch_dim = patch * patch * channels
        self.latent_dim = latent_dim
        self.pixel_noise = pixel_noise
        rng = substream(seed, "image-decoder")
        self.decoder = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(latent_dim, self.patch_dim))
        self._scale = 1.0 / np.sqrt(1.0 + pixel_noise**2)

    def sample_patches(self, rng, n):
        u = rng.standard_normal((n, self.n_patches, self.latent_dim))
        px = u @ self.decoder + self.pixel_noise * rng.standard_normal((n, self.n_patches, self.patch_dim))
        return px * self._scale

    def sample(self, rng, n):
        return unpatchify(self.sample_patches(rng, n), self.grid, self.patch, self.channels)
