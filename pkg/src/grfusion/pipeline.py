"""End-to-end N-source fusion in a single pass."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import SourceStack, save_image, save_mask
from .errors import UntrainedModelError
from .ffig import FfigConfig, FfigNetwork, generate_full_focus
from .hpd import HpdNetwork, detect_focus, detect_hard_pixels
from .recombine import DecisionMaps, compose, compose_ablation, update_decision_maps
from .train import load_network


@dataclass
class FusionResult:
    fused: np.ndarray
    probabilities: list[np.ndarray]
    masks: list[np.ndarray]
    hard: np.ndarray
    decision: DecisionMaps | None
    full_focus: np.ndarray

    def save_side_outputs(self, out_dir: str | Path, stem: str = "fused") -> None:
        out_dir = Path(out_dir)
        for i, (p, m) in enumerate(zip(self.probabilities, self.masks), 1):
            save_image(out_dir / f"{stem}_p{i}.png", p)
            save_mask(out_dir / f"{stem}_M{i}.png", m)
        save_mask(out_dir / f"{stem}_Mh.png", self.hard)
        if self.decision is not None:
            for i, m in enumerate(self.decision.maps, 1):
                save_mask(out_dir / f"{stem}_Mtilde{i}.png", m)
        save_image(out_dir / f"{stem}_Fg.png", self.full_focus)


def load_models(checkpoint_dir: str | Path | None, allow_untrained: bool = False, seed: int = 0, delta: int | None = None):
    """Networks from ``checkpoint_dir``, or seeded random ones when allowed."""
    if checkpoint_dir is not None and (Path(checkpoint_dir) / "hpd" / "manifest.json").is_file():
        hpd = load_network(checkpoint_dir, "hpd")
        ffig_path = Path(checkpoint_dir) / "ffig" / "manifest.json"
        if ffig_path.is_file():
            ffig = load_network(checkpoint_dir, "ffig")
        elif allow_untrained:
            torch.manual_seed(seed)
            ffig = FfigNetwork().eval()
        else:
            raise UntrainedModelError(f"no ffig checkpoint under {checkpoint_dir}")
    elif allow_untrained:
        torch.manual_seed(seed)
        hpd, ffig = HpdNetwork().eval(), FfigNetwork().eval()
    else:
        raise UntrainedModelError(f"no hpd checkpoint under {checkpoint_dir}")
    if delta is not None:
        ffig.cfg = FfigConfig(**{**ffig.cfg.to_dict(), "delta": delta})
    for net in (hpd, ffig):
        if not allow_untrained and not bool(net.trained):
            raise UntrainedModelError(f"{type(net).__name__} checkpoint was never trained")
    return hpd, ffig


def fuse(
    stack: SourceStack,
    hpd: HpdNetwork,
    ffig: FfigNetwork,
    mode: str = "full",
    tile_size: int = 128,
    overlap: int = 16,
    repair: bool = False,
) -> FusionResult:
    """Detect focus per source, find hard pixels, generate ``F_g`` and recombine.

    All N sources go through one detection pass and one generation pass;
    nothing is fused pairwise.
    """
    focus = detect_focus(stack, hpd, tile_size=tile_size, overlap=overlap)
    probs = [p for p, _ in focus]
    masks = [m for _, m in focus]
    hard = detect_hard_pixels(masks)
    full_focus = generate_full_focus(stack, hard, ffig)
    decision = None
    if mode == "full":
        decision = update_decision_maps(masks, hard, repair=repair)
        fused = compose(stack, decision, full_focus)
    else:
        fused = compose_ablation(stack, masks, full_focus, mode)
    return FusionResult(fused, probs, masks, hard, decision, full_focus)
