"""Synthetic teacher feature generators and the feature-file format.

Three structurally different kinds stand in for real foundation models:

``local``
    a per-patch two-layer nonlinear projection; token j depends on patch j only.
``mixing``
    a per-patch projection averaged over a Gaussian neighbourhood on the patch grid.
``global``
    a per-patch projection shifted by a projection of the image-mean patch.

Each teacher also adds a small fixed offset vector, which keeps the teachers
linearly distinguishable without making the cosine objective trivial.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .data import patchify, substream
from .errors import ContractError, FormatError
from .fileio import atomic_write

KINDS = ("local", "mixing", "global")


class SyntheticTeacher:
    def __init__(self, seed, dim, kind, patch_dim, grid, hidden=48, offset_scale=0.15):
        if kind not in KINDS:
            raise ContractError(f"unknown teacher kind {kind!r}; expected one of {KINDS}")
        self.seed, self.dim, self.kind = seed, dim, kind
        self.grid = tuple(grid)
        self.patch_dim = patch_dim
        rng = substream(seed, f"teacher-{kind}")
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, hidden))
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden * 0.39), size=(hidden, dim))
        self.offset = rng.normal(0.0, offset_scale, size=dim)
        if kind == "mixing":
            self.kernel = _grid_kernel(self.grid, sigma=1.0)
        elif kind == "global":
            self.w_global = rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, dim))

    @property
    def n_patches(self):
        return self.grid[0] * self.grid[1]

    def features_from_patches(self, patches):
        """(B, T, patch_dim) -> (B, T, dim)."""
        p = np.asarray(patches, dtype=np.float64)
        if p.shape[-2:] != (self.n_patches, self.patch_dim):
            raise ContractError(f"patch array {p.shape} does not match grid {self.grid} x {self.patch_dim}")
        pre = np.tanh(p @ self.w1) @ self.w2
        if self.kind == "mixing":
            pre = np.einsum("jk,bkd->bjd", self.kernel, pre)
        elif self.kind == "global":
            g = np.sqrt(self.n_patches) * p.mean(axis=-2, keepdims=True) @ self.w_global
            pre = 0.6 * pre + 0.8 * g
        return np.tanh(pre) + self.offset

    def __call__(self, images, patch_size):
        return self.features_from_patches(patchify(images, patch_size))


def _grid_kernel(grid, sigma):
    gh, gw = grid
    yy, xx = np.divmod(np.arange(gh * gw), gw)
    d2 = (yy[:, None] - yy[None]) ** 2 + (xx[:, None] - xx[None]) ** 2
    k = np.exp(-d2 / (2 * sigma**2))
    k /= k.sum(axis=1, keepdims=True)
    # rescale so a unit-variance input stays unit-variance after mixing
    return k / np.sqrt((k**2).sum(axis=1, keepdims=True))


def teacher_features(teacher, image, patch_size):
    """Features of one image (H, W, C) -> (T, D), or a batch -> (B, T, D)."""
    image = np.asarray(image)
    out = teacher(image, patch_size)
    return out[0] if image.ndim == 3 else out


class TeacherBank:
    """Teachers indexed 0..I-1 in a fixed order."""

    def __init__(self, teachers, patch_size):
        self.teachers = list(teachers)
        self.patch_size = patch_size

    @classmethod
    def build(cls, seed=0, kinds=("mixing", "local", "global"), dims=(32, 32, 32), patch_size=8,
              channels=3, grid=(4, 4)):
        if len(kinds) != len(dims):
            raise ContractError("one output dim per teacher kind is required")
        patch_dim = patch_size * patch_size * channels
        return cls([SyntheticTeacher(seed + i, d, k, patch_dim, grid) for i, (k, d) in enumerate(zip(kinds, dims))],
                   patch_size)

    def __len__(self):
        return len(self.teachers)

    def __getitem__(self, i):
        return self.teachers[i]

    @property
    def dims(self):
        return tuple(t.dim for t in self.teachers)

    def targets(self, images):
        patches = patchify(images, self.patch_size)
        return [t.features_from_patches(patches) for t in self.teachers]


# ---------------------------------------------------------------- feature files

FEAT_MAGIC = b"VERFEAT1"


def encode_features(features):
    f = np.asarray(features, dtype="<f8")
    if f.ndim != 2:
        raise ContractError(f"feature files hold a (T, D) array, got shape {f.shape}")
    return FEAT_MAGIC + struct.pack("<II", *f.shape) + np.ascontiguousarray(f).tobytes()


def decode_features(blob):
    if len(blob) < 8 or blob[:8] != FEAT_MAGIC:
        raise FormatError("missing VERFEAT1 magic", 0)
    if len(blob) < 16:
        raise FormatError("truncated header", len(blob))
    T, D = struct.unpack_from("<II", blob, 8)
    expected = 8 * T * D
    if len(blob) - 16 != expected:
        raise FormatError(f"header declares {T}x{D} values ({expected} bytes) but payload has "
                          f"{len(blob) - 16} bytes", 16)
    return np.frombuffer(blob, "<f8", T * D, 16).reshape(T, D).astype(np.float64)


def save_features(path, features):
    atomic_write(os.fspath(path), encode_features(features))


def load_features(path):
    with open(path, "rb") as f:
        return decode_features(f.read())
