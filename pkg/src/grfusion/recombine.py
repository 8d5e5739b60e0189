"""Hard-pixel-guided construction of the fused image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import SourceStack
from .errors import ArityError, ConsistencyError, DomainError

MODES = ("full", "mode1", "mode2", "mode3")


@dataclass(frozen=True)
class DecisionMaps:
    """Updated per-source selection maps plus the hard mask they exclude."""

    maps: np.ndarray  # N x H x W, binary
    hard: np.ndarray  # H x W, {0, 1/2}

    def coverage(self) -> np.ndarray:
        return self.maps.sum(0) + 2 * self.hard


def _as_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    arr = np.stack([np.asarray(m, dtype=np.float32) for m in masks])
    if not np.all((arr == 0) | (arr == 1)):
        raise DomainError("focus masks must be binary")
    return arr


def _check_hard(hard: np.ndarray, shape) -> np.ndarray:
    hard = np.asarray(hard, dtype=np.float32)
    if hard.shape != shape:
        raise DomainError(f"hard mask {hard.shape} does not match masks {shape}")
    if not np.all((hard == 0) | (hard == 0.5)):
        raise DomainError("hard mask must contain only 0 and 1/2")
    return hard


def repair_hard_mask(masks: Sequence[np.ndarray], hard: np.ndarray) -> np.ndarray:
    """Reclassify pixels marked easy but not claimed by exactly one source as hard."""
    arr = _as_masks(masks)
    hard = _check_hard(hard, arr.shape[1:]).copy()
    hard[(hard == 0) & (arr.sum(0) != 1)] = 0.5
    return hard


def update_decision_maps(masks: Sequence[np.ndarray], hard: np.ndarray, repair: bool = False) -> DecisionMaps:
    """``M~_i = 1`` where ``M_i + M_h == 1``, i.e. source ``i`` is focused and the pixel is not hard."""
    arr = _as_masks(masks)
    hard = _check_hard(hard, arr.shape[1:])
    bad = (hard == 0) & (arr.sum(0) != 1)
    if bad.any():
        if not repair:
            raise ConsistencyError(f"{int(bad.sum())} pixels are marked easy but not claimed by exactly one source")
        hard = repair_hard_mask(masks, hard)
    maps = (arr + hard[None] == 1).astype(np.float32)
    return DecisionMaps(maps, hard)


def compose(stack: SourceStack | np.ndarray, dm: DecisionMaps, full_focus: np.ndarray) -> np.ndarray:
    """``F = sum_i M~_i * I_i + 2 M_h * F_g``.

    Non-hard pixels receive ``1 * I_i`` plus exact zeros, so they are copied
    from their source without rounding.
    """
    images = stack.images if isinstance(stack, SourceStack) else np.asarray(stack)
    if images.shape[0] != dm.maps.shape[0]:
        raise ArityError(f"{images.shape[0]} sources but {dm.maps.shape[0]} decision maps")
    if images.shape[1:3] != dm.hard.shape or np.shape(full_focus)[:2] != dm.hard.shape:
        raise DomainError("image, decision map and full-focus sizes disagree")
    if not np.array_equal(dm.coverage(), np.ones_like(dm.hard)):
        raise ConsistencyError("decision maps do not partition the image")
    expand = (lambda m: m[..., None]) if images.ndim == 4 else (lambda m: m)
    out = np.zeros(images.shape[1:], dtype=np.result_type(images.dtype, np.float32))
    for img, m in zip(images, dm.maps):
        out += expand(m) * img
    out += expand(2 * dm.hard) * np.asarray(full_focus)
    return out


def compose_ablation(stack: SourceStack, masks: Sequence[np.ndarray], full_focus: np.ndarray, mode: str = "full", repair: bool = False) -> np.ndarray:
    """Fused image under one of the composition modes.

    ``mode1`` trusts the first mask and ``mode2`` the second (both two-source
    only), ``mode3`` returns the generated image, ``full`` is :func:`compose`.
    """
    from .hpd import detect_hard_pixels

    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode == "mode3":
        return np.asarray(full_focus, dtype=np.float32).copy()
    if mode == "full":
        hard = detect_hard_pixels(masks)
        return compose(stack, update_decision_maps(masks, hard, repair=repair), full_focus)
    if stack.n != 2 or len(masks) != 2:
        raise ArityError(f"{mode} is defined for exactly two sources")
    i1, i2 = stack.images
    if mode == "mode1":
        m = np.asarray(masks[0], dtype=np.float32)[..., None]
        return m * i1 + (1 - m) * i2
    m = np.asarray(masks[1], dtype=np.float32)[..., None]
    return (1 - m) * i1 + m * i2
