"""Frozen visual feature extractor and latent autoencoder stand-ins.

Both are fixed, seeded linear maps: the image encoder is a random-
projection patch pyramid with a constant positional bias, the latent
coder a 4x spatial downsample whose decode is the exact transposed map.
Neither is ever trained; determinism is part of their contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

IMG_SIZE = 32
LATENT_CHANNELS = 4
LATENT_SIZE = 8
# Latents are kept well below unit scale so that global image statistics
# stay hidden inside the forward-process noise until mid-schedule; prompt
# conditioning then carries real information over a wide timestep band
# instead of only at extreme noise levels.
LATENT_SCALE = 0.15


@dataclass
class VisualEmbedding:
    """Per-image patch features from the frozen encoder (P x d)."""

    patches: np.ndarray

    @property
    def pooled(self) -> np.ndarray:
        return self.patches.mean(axis=0)


class ImageEncoder:
    """Fixed random-projection patch pyramid over 32x32 RGB images.

    Three pyramid levels (8px, 16px, full-image patches) give P=21
    patches; each is projected to `dim` features and offset by a fixed
    per-patch bias, so even a black image maps to a nonzero constant.
    """

    LEVELS = (8, 16, 32)

    def __init__(self, seed: int = 0, dim: int = 64, img_size: int = IMG_SIZE,
                 dtype=np.float32):
        self.dim = int(dim)
        self.img_size = int(img_size)
        self.dtype = np.dtype(dtype)
        rng = Rng(seed).child("image-encoder")
        self._projections = []
        self.num_patches = 0
        for level, patch in enumerate(self.LEVELS):
            n_pix = patch * patch * 3
            proj = rng.child(f"level{level}").normal((n_pix, self.dim), np.float64)
            proj /= np.sqrt(n_pix)
            self._projections.append(proj.astype(self.dtype))
            self.num_patches += (self.img_size // patch) ** 2
        bias = rng.child("bias").normal((self.num_patches, self.dim), np.float64)
        self.bias = (0.05 * bias).astype(self.dtype)
        for arr in self._projections + [self.bias]:
            arr.setflags(write=False)

    def encode(self, img: np.ndarray) -> VisualEmbedding:
        img = np.asarray(img, dtype=self.dtype)
        if img.shape != (self.img_size, self.img_size, 3):
            raise ValueError(
                f"expected {self.img_size}x{self.img_size}x3 image, got {img.shape}"
            )
        feats = []
        for proj, patch in zip(self._projections, self.LEVELS):
            n = self.img_size // patch
            blocks = img.reshape(n, patch, n, patch, 3).transpose(0, 2, 1, 3, 4)
            flat = blocks.reshape(n * n, patch * patch * 3)
            feats.append(flat @ proj)
        patches = np.concatenate(feats, axis=0) + self.bias
        return VisualEmbedding(patches=patches)


class LatentCoder:
    """Fixed 4x downsampling projection with transposed decode.

    Each 4x4 pixel block maps to 4 latent channels through a frozen
    orthonormal row basis (three per-channel block means plus one fixed
    texture direction). encode applies LATENT_SCALE on top of the basis
    and is linear with no bias; decode applies the transposed basis with
    the inverse scale, so decode(encode(x)) is the orthogonal projection
    of each block onto the basis.
    """

    BLOCK = 4

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.img_size = IMG_SIZE
        self.latent_size = LATENT_SIZE
        self.channels = LATENT_CHANNELS
        n_pix = self.BLOCK * self.BLOCK * 3
        rows = np.zeros((self.channels, n_pix), dtype=np.float64)
        # Rows 0-2: normalized per-channel block means (disjoint support,
        # already orthonormal).
        pix = np.arange(n_pix)
        for c in range(3):
            rows[c, pix % 3 == c] = 1.0
            rows[c] /= np.linalg.norm(rows[c])
        extra = Rng(seed).child("latent-extra").normal((n_pix,), np.float64)
        for c in range(3):
            extra -= (extra @ rows[c]) * rows[c]
        rows[3] = extra / np.linalg.norm(extra)
        self._enc_rows = (LATENT_SCALE * rows).astype(self.dtype)
        self._dec_rows = (rows / LATENT_SCALE).astype(self.dtype)
        self._enc_rows.setflags(write=False)
        self._dec_rows.setflags(write=False)

    def _blocks(self, img: np.ndarray) -> np.ndarray:
        b, n = self.BLOCK, self.latent_size
        return img.reshape(n, b, n, b, 3).transpose(0, 2, 1, 3, 4).reshape(n, n, b * b * 3)

    def encode(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=self.dtype)
        if img.shape != (self.img_size, self.img_size, 3):
            raise ValueError(
                f"expected {self.img_size}x{self.img_size}x3 image, got {img.shape}"
            )
        z = self._blocks(img) @ self._enc_rows.T  # (8, 8, 4)
        return z.transpose(2, 0, 1).copy()

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=self.dtype)
        if z.shape != (self.channels, self.latent_size, self.latent_size):
            raise ValueError(
                f"expected {self.channels}x{self.latent_size}x{self.latent_size} latent, "
                f"got {z.shape}"
            )
        b, n = self.BLOCK, self.latent_size
        blocks = z.transpose(1, 2, 0) @ self._dec_rows  # (8, 8, 48)
        img = blocks.reshape(n, n, b, b, 3).transpose(0, 2, 1, 3, 4)
        return img.reshape(self.img_size, self.img_size, 3).copy()
