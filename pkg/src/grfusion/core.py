"""Shared data model, image I/O and deterministic tensor helpers.

Arrays follow two conventions. Images handed around as numpy are ``H x W x 3``
float32 in ``[0, 1]``; tensors fed to networks are ``B x C x H x W``. Every
convolution in the package pads by reflection so outputs keep the input size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ArityError, DomainError, ImageReadError, ParamError, StackShapeError

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# visualization levels for {defocused, hard, focused}
MASK_LEVELS = {0.0: 0, 0.5: 128, 1.0: 255}


def rgb_to_luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.astype(np.float32, copy=False)
    return (img[..., :3] @ LUMA_WEIGHTS).astype(np.float32)


@dataclass(frozen=True)
class SourceStack:
    """N co-registered source images, each ``H x W x 3`` in ``[0, 1]``."""

    images: np.ndarray
    paths: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim == 3:
            images = np.repeat(images[..., None], 3, axis=-1)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise StackShapeError(f"expected N x H x W x 3 images, got shape {images.shape}")
        if images.shape[0] < 2:
            raise ArityError(f"fusion needs at least 2 sources, got {images.shape[0]}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DomainError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)

    @classmethod
    def from_list(cls, images: Sequence[np.ndarray], paths: Sequence[str] = ()) -> "SourceStack":
        if len(images) < 2:
            raise ArityError(f"fusion needs at least 2 sources, got {len(images)}")
        shapes = {img.shape[:2] for img in images}
        if len(shapes) != 1:
            raise StackShapeError(f"source images differ in size: {sorted(shapes)}")
        arrays = [np.repeat(a[..., None], 3, -1) if a.ndim == 2 else a for a in images]
        return cls(np.stack(arrays).astype(np.float32), tuple(str(p) for p in paths))

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def luma(self) -> np.ndarray:
        """``N x H x W`` BT.601 luma view."""
        return rgb_to_luma(self.images)

    def __len__(self) -> int:
        return self.n


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit image as ``H x W x 3`` float32 in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def load_stack(paths: Sequence[str | Path]) -> SourceStack:
    if len(paths) < 2:
        raise ArityError(f"fusion needs at least 2 sources, got {len(paths)}")
    images = [load_image(p) for p in paths]
    return SourceStack.from_list(images, paths)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path)


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    """Map a binary or hard mask onto the {0, 128, 255} visualization levels."""
    mask = np.asarray(mask, dtype=np.float64)
    out = np.zeros(mask.shape, dtype=np.uint8)
    out[mask == 0.5] = 128
    out[mask == 1.0] = 255
    return out


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    save_image(path, mask_to_uint8(mask))


# ---------------------------------------------------------------------------
# tensor helpers


def reflect_indices(n: int, pad: int, device=None) -> torch.Tensor:
    """Gather indices for reflect padding of any width (reflection repeats)."""
    idx = torch.arange(-pad, n + pad, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def reflect_pad(x: torch.Tensor, pad_h: int, pad_w: int) -> torch.Tensor:
    """Reflect-pad the last two dims; unlike ``F.pad`` any pad width works."""
    if pad_h:
        x = x.index_select(-2, reflect_indices(x.shape[-2], pad_h, x.device))
    if pad_w:
        x = x.index_select(-1, reflect_indices(x.shape[-1], pad_w, x.device))
    return x


def conv2d_reflect(x: torch.Tensor, weight: torch.Tensor, bias=None, dilation: int = 1, groups: int = 1):
    """Same-size ``conv2d`` with reflect padding."""
    kh, kw = weight.shape[-2:]
    x = reflect_pad(x, dilation * (kh // 2), dilation * (kw // 2))
    return F.conv2d(x, weight, bias, dilation=dilation, groups=groups)


def gaussian_kernel1d(sigma: float, ksize: int, dtype=torch.float32) -> torch.Tensor:
    if not sigma > 0:
        raise ParamError(f"sigma must be positive, got {sigma}")
    if ksize < 1 or ksize % 2 == 0:
        raise ParamError(f"ksize must be a positive odd integer, got {ksize}")
    x = torch.arange(ksize, dtype=torch.float64) - ksize // 2
    k = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return (k / k.sum()).to(dtype)


def default_ksize(sigma: float) -> int:
    return 2 * math.ceil(3 * sigma) + 1


def gaussian_blur(img, sigma: float, ksize: int | None = None):
    """Separable Gaussian blur over the last two axes.

    Accepts numpy arrays or tensors shaped ``(..., H, W)`` and returns the same
    type. Use :func:`blur_rgb` for ``H x W x 3`` numpy images.
    """
    if ksize is None:
        ksize = default_ksize(sigma)
    is_numpy = isinstance(img, np.ndarray)
    x = torch.from_numpy(np.array(img)) if is_numpy else img
    if not x.is_floating_point():
        x = x.float()
    k = gaussian_kernel1d(sigma, ksize, x.dtype).to(x.device)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    flat = x.reshape(-1, 1, h, w)
    flat = conv2d_reflect(flat, k.view(1, 1, ksize, 1))
    flat = conv2d_reflect(flat, k.view(1, 1, 1, ksize))
    out = flat.reshape(*lead, h, w)
    return out.numpy() if is_numpy else out


def blur_rgb(img: np.ndarray, sigma: float, ksize: int | None = None) -> np.ndarray:
    """Blur an ``H x W x C`` numpy image channel by channel."""
    chw = np.ascontiguousarray(np.moveaxis(img, -1, 0))
    return np.ascontiguousarray(np.moveaxis(gaussian_blur(chw, sigma, ksize), 0, -1))


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """``N x H x W x C`` (or ``N x H x W``) numpy to ``N x C x H x W`` tensor."""
    t = torch.tensor(np.asarray(images, dtype=np.float32))
    if t.ndim == 3:
        return t.unsqueeze(1)
    return t.permute(0, 3, 1, 2).contiguous()
