"""Toy tokenizers mapping videos, images, camera poses and prompts to latent grids.

All grids use the ``(frames, C, H/4, W/4)`` layout.
"""
from __future__ import annotations

import math
import zlib
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, NonFiniteInput, PromptTooLong, TooManyIds

PATCH = 4
MAX_IDS = 3
# 3x4 extrinsics are flattened row by row; recorded in checkpoint headers.
FLATTEN_ORDER = "row_major"


def _as_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def patchify(video: torch.Tensor) -> torch.Tensor:
    """``(F, 3, H, W)`` -> ``(F, H/4, W/4, 48)`` with patch vectors ordered (channel, dy, dx)."""
    f, c, h, w = video.shape
    x = video.reshape(f, c, h // PATCH, PATCH, w // PATCH, PATCH)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(f, h // PATCH, w // PATCH, c * PATCH * PATCH)


def unpatchify(patches: torch.Tensor, channels: int = 3) -> torch.Tensor:
    f, gh, gw, _ = patches.shape
    x = patches.reshape(f, gh, gw, channels, PATCH, PATCH)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(f, channels, gh * PATCH, gw * PATCH)


class PatchCodec(nn.Module):
    """Frozen linear autoencoder over non-overlapping 4x4 patches.

    ``encode(v) = scale * W @ patch + bias`` and ``decode`` applies the
    pseudo-inverse. The default bias centers pixels at 0.5 so latents are
    roughly zero-mean; with ``bias = 0`` both maps are linear.
    """

    def __init__(self, channels: int, scale: float = 2.0, temporal_factor: int = 1, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.temporal_factor = temporal_factor
        d = 3 * PATCH * PATCH
        gen = torch.Generator().manual_seed(seed)
        basis, _ = torch.linalg.qr(torch.randn(d, d, generator=gen, dtype=torch.float64))
        self.register_buffer("weight", torch.zeros(channels, d, dtype=torch.float32))
        self.register_buffer("bias", torch.zeros(channels, dtype=torch.float32))
        self.register_buffer("recon_threshold", torch.tensor(float("inf"), dtype=torch.float32))
        self.register_buffer("scale", torch.tensor(float(scale), dtype=torch.float32))
        self._set_basis(basis.T, seed)
        self._black: dict = {}

    def _set_basis(self, basis: torch.Tensor, seed: int) -> None:
        """``basis`` rows are orthonormal patch directions, most important first."""
        d = basis.shape[1]
        if self.channels >= d:
            gen = torch.Generator().manual_seed(seed + 1)
            embed, _ = torch.linalg.qr(torch.randn(self.channels, d, generator=gen, dtype=torch.float64))
            w = embed @ basis
        else:
            w = basis[: self.channels]
        self.weight.copy_(w.to(self.weight.dtype))
        centered = torch.full((d,), 0.5, dtype=torch.float64)
        self.bias.copy_((-float(self.scale) * w @ centered).to(self.bias.dtype))
        self._black = {}

    def fit(self, videos: Sequence[np.ndarray], held_out: Sequence[np.ndarray], seed: int = 0) -> float:
        """PCA fit on patches of ``videos``; records a reconstruction threshold from ``held_out``."""
        patches = torch.cat([patchify(_as_tensor(v, torch.float64)).reshape(-1, 48) for v in videos]) - 0.5
        cov = patches.T @ patches / max(1, patches.shape[0])
        evals, evecs = torch.linalg.eigh(cov)
        order = torch.argsort(evals, descending=True)
        self._set_basis(evecs[:, order].T, seed)
        errs = [float(((self.decode(self.encode(v)) - _as_tensor(v, self.weight.dtype)) ** 2).mean())
                for v in held_out]
        mse = max(errs) if errs else 0.0
        self.recon_threshold.fill_(max(10.0 * mse, 1e-8))
        return mse

    def _temporal_pool(self, video: torch.Tensor) -> torch.Tensor:
        tf = self.temporal_factor
        if tf == 1:
            return video
        f = video.shape[0]
        n = math.ceil(f / tf)
        pad = n * tf - f
        if pad:
            video = torch.cat([video, video[-1:].expand(pad, *video.shape[1:])])
        return video.reshape(n, tf, *video.shape[1:]).mean(dim=1)

    def encode(self, video) -> torch.Tensor:
        v = _as_tensor(video, self.weight.dtype)
        if v.ndim != 4 or v.shape[1] != 3:
            raise DimensionError(f"video must be (F, 3, H, W), got {tuple(v.shape)}")
        if v.shape[2] % PATCH or v.shape[3] % PATCH:
            raise DimensionError(f"H and W must be divisible by {PATCH}, got {tuple(v.shape[2:])}")
        v = self._temporal_pool(v)
        z = patchify(v) @ (self.scale * self.weight).T + self.bias
        return z.permute(0, 3, 1, 2).contiguous()

    def encode_image(self, image) -> torch.Tensor:
        """One ``(3, H, W)`` still image -> ``(1, C, H/4, W/4)``; never pooled in time."""
        img = _as_tensor(image, self.weight.dtype)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DimensionError(f"image must be (3, H, W), got {tuple(img.shape)}")
        if img.shape[1] % PATCH or img.shape[2] % PATCH:
            raise DimensionError(f"H and W must be divisible by {PATCH}")
        z = patchify(img[None]) @ (self.scale * self.weight).T + self.bias
        return z.permute(0, 3, 1, 2).contiguous()

    def decode(self, z) -> torch.Tensor:
        z = _as_tensor(z, self.weight.dtype)
        if z.ndim != 4 or z.shape[1] != self.channels:
            raise DimensionError(f"latent must be (N, {self.channels}, h, w), got {tuple(z.shape)}")
        dec = torch.linalg.pinv(self.scale * self.weight.double()).to(z.dtype)
        patches = (z.permute(0, 2, 3, 1) - self.bias) @ dec.T
        video = unpatchify(patches).clamp(0.0, 1.0)
        if self.temporal_factor > 1:
            video = video.repeat_interleave(self.temporal_factor, dim=0)
        return video

    def black(self, height: int, width: int) -> torch.Tensor:
        """Cached encoding of an all-black image, ``(1, C, H/4, W/4)``."""
        key = (height, width, self.weight.dtype)
        if key not in self._black:
            self._black[key] = self.encode_image(torch.zeros(3, height, width, dtype=self.weight.dtype))
        return self._black[key]

    def _apply(self, fn, *args, **kwargs):
        self._black = {}
        return super()._apply(fn, *args, **kwargs)


def flatten_poses(traj) -> torch.Tensor:
    """``(F, 3, 4)`` -> ``(F, 12)``, row-major."""
    t = traj if isinstance(traj, torch.Tensor) else torch.as_tensor(np.asarray(traj))
    if t.ndim != 3 or tuple(t.shape[1:]) != (3, 4):
        raise DimensionError(f"trajectory must be (F, 3, 4), got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise NonFiniteInput("camera trajectory contains non-finite values")
    return t.reshape(t.shape[0], 12)


def unflatten_poses(flat: torch.Tensor) -> torch.Tensor:
    return flat.reshape(flat.shape[0], 3, 4)


def broadcast_poses(flat: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """``(F, 12)`` -> ``(F, 12, H/4, W/4)``: every grid cell carries its frame's pose."""
    if height % PATCH or width % PATCH:
        raise DimensionError(f"H and W must be divisible by {PATCH}")
    return flat[:, :, None, None].expand(-1, -1, height // PATCH, width // PATCH)


class CameraTokenizer(nn.Module):
    def __init__(self, emb_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(12, emb_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(emb_dim, emb_dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, traj, height: int, width: int) -> torch.Tensor:
        dtype = self.fc1.weight.dtype
        grid = broadcast_poses(flatten_poses(traj).to(dtype), height, width)
        x = grid.permute(0, 2, 3, 1)  # per-position MLP over the 12 channels
        x = self.fc2(self.act(self.fc1(x)))
        return x.permute(0, 3, 1, 2).contiguous()


class TextTokenizer(nn.Module):
    """Hashed bag-of-words stand-in for a real text encoder. Id 0 is padding."""

    def __init__(self, emb_dim: int, max_len: int = 8, buckets: int = 64):
        super().__init__()
        self.max_len = max_len
        self.buckets = buckets
        self.embed = nn.Embedding(buckets, emb_dim)
        nn.init.normal_(self.embed.weight, std=0.02)

    def ids(self, prompt: str) -> torch.Tensor:
        words = prompt.lower().split()
        if len(words) > self.max_len:
            raise PromptTooLong(f"prompt has {len(words)} words, max {self.max_len}")
        ids = [1 + zlib.crc32(w.encode()) % (self.buckets - 1) for w in words]
        return torch.tensor(ids + [0] * (self.max_len - len(ids)), dtype=torch.long)

    def forward(self, prompt_or_ids) -> torch.Tensor:
        ids = self.ids(prompt_or_ids) if isinstance(prompt_or_ids, str) else prompt_or_ids
        return self.embed(ids)  # (max_len, C)

    def grid(self, prompt_or_ids) -> torch.Tensor:
        """Embeddings as a one-frame ``(1, C, 1, max_len)`` grid."""
        return self(prompt_or_ids).T[None, :, None, :]


def tokenize_id_images(codec: PatchCodec, images, height: Optional[int] = None,
                       width: Optional[int] = None) -> torch.Tensor:
    """Three ID slot frames; absent slots carry the black-image encoding."""
    imgs = [] if images is None else list(images)
    if len(imgs) > MAX_IDS:
        raise TooManyIds(f"at most {MAX_IDS} ID images, got {len(imgs)}")
    if imgs:
        height, width = np.shape(imgs[0])[-2:]
    if height is None or width is None:
        raise DimensionError("canvas size needed when no ID image is given")
    slots = [codec.encode_image(img) for img in imgs]
    slots += [codec.black(height, width)] * (MAX_IDS - len(slots))
    return torch.cat(slots)
