"""Full-focus image generation with multi-directional edge embedding.

The generator turns a stack of RGB sources and the hard-pixel mask into an
all-in-focus RGB estimate used wherever focus detection is ambiguous.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import SourceStack, conv2d_reflect, images_to_tensor
from .errors import DomainError, ParamError

# (dy, dx) of the neighbour carrying -1, in N, NE, E, SE, S, SW, W, NW order
DIRECTIONS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def directional_kernels(dtype=torch.float32) -> torch.Tensor:
    """Eight 3x3 difference stencils: +1 at the centre, -1 at one neighbour."""
    k = torch.zeros(8, 3, 3, dtype=dtype)
    k[:, 1, 1] = 1.0
    for n, (dy, dx) in enumerate(_OFFSETS):
        k[n, 1 + dy, 1 + dx] = -1.0
    return k


def directional_response(img: torch.Tensor) -> torch.Tensor:
    """Signed convolution of each channel with the 8 kernels.

    ``img`` is ``B x C x H x W``; the result is ``B x 8 x C x H x W``. This is
    true convolution (kernel flipped), so the E kernel yields ``I(x) - I(x-1)``.
    """
    b, c, h, w = img.shape
    k = directional_kernels(img.dtype).to(img.device).flip(-1, -2)
    weight = k.repeat(c, 1, 1).unsqueeze(1)  # (C*8, 1, 3, 3), grouped per channel
    out = conv2d_reflect(img, weight, groups=c)
    return out.view(b, c, 8, h, w).transpose(1, 2)


def extract_edges(img):
    """Absolute directional edge maps.

    Tensor ``B x C x H x W`` gives ``B x 8 x C x H x W``; numpy ``C x H x W``
    gives ``8 x C x H x W`` and numpy ``H x W`` gives ``8 x H x W``.
    """
    if isinstance(img, np.ndarray):
        t = torch.from_numpy(np.array(img))
        if t.ndim == 2:
            return extract_edges(t[None, None])[0, :, 0].numpy()
        return extract_edges(t[None])[0].numpy()
    return directional_response(img).abs()


def laplacian_edges(img: torch.Tensor) -> torch.Tensor:
    """``|Laplacian|`` per channel, the stand-in when the directional bank is disabled."""
    c = img.shape[1]
    k = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], dtype=img.dtype, device=img.device)
    return conv2d_reflect(img, k.expand(c, 1, 3, 3), groups=c).abs()


def integrate_edges(bank: torch.Tensor, weights: torch.Tensor, tol: float = 1e-5) -> torch.Tensor:
    """Per-pixel convex combination of the eight direction maps.

    ``bank`` is ``B x 8 x C x H x W`` and ``weights`` ``B x 8 x H x W``.
    """
    if bank.shape[:2] != weights.shape[:2] or bank.shape[-2:] != weights.shape[-2:]:
        raise DomainError(f"bank {tuple(bank.shape)} and weights {tuple(weights.shape)} disagree")
    if (weights < 0).any() or ((weights.sum(1) - 1).abs() > tol).any():
        raise DomainError("direction weights must be non-negative and sum to 1 per pixel")
    return (weights.unsqueeze(2) * bank).sum(1)


def _check_delta(delta: int, h: int, w: int) -> None:
    if delta < 0:
        raise ParamError(f"delta must be >= 0, got {delta}")
    if delta >= max(h, w):
        raise ParamError(f"window radius {delta} exceeds a {h}x{w} image")


def efe_attend(edge_feat: torch.Tensor, src_feat: torch.Tensor, delta: int = 3) -> torch.Tensor:
    """Neighbourhood attention where edge features query source features.

    For every pixel the inner products of ``edge_feat(x, y)`` with
    ``src_feat`` over the ``(2*delta+1)^2`` window become softmax weights on
    those same source vectors. Windows are clipped at the border and the
    softmax runs over the positions that remain.
    """
    if edge_feat.shape != src_feat.shape:
        raise DomainError("edge and source features must share a shape")
    b, c, h, w = src_feat.shape
    _check_delta(delta, h, w)
    if delta == 0:
        return src_feat.clone()
    padded = F.pad(src_feat, (delta,) * 4)
    valid = F.pad(src_feat.new_ones(1, 1, h, w), (delta,) * 4)
    offsets = [(dy, dx) for dy in range(2 * delta + 1) for dx in range(2 * delta + 1)]
    logits = []
    for dy, dx in offsets:
        shifted = padded[..., dy : dy + h, dx : dx + w]
        score = (edge_feat * shifted).sum(1)
        ok = valid[:, 0, dy : dy + h, dx : dx + w] > 0
        logits.append(score.masked_fill(~ok, float("-inf")))
    attn = torch.softmax(torch.stack(logits, 1), dim=1)
    out = torch.zeros_like(src_feat)
    for k, (dy, dx) in enumerate(offsets):
        out = out + attn[:, k : k + 1] * padded[..., dy : dy + h, dx : dx + w]
    return out


def merge_sources(per_source: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Elementwise maximum over sources of ``f_hat_i + f_i``."""
    if not per_source:
        raise DomainError("no sources to merge")
    shapes = {tuple(t.shape) for pair in per_source for t in pair}
    if len(shapes) != 1:
        raise DomainError(f"feature shapes differ: {sorted(shapes)}")
    sums = torch.stack([f_hat + f for f_hat, f in per_source])
    return sums.amax(0)


class ReflectConv2d(nn.Conv2d):
    """Same-size convolution with reflect padding that tolerates tiny inputs."""

    def __init__(self, cin, cout, k, dilation=1, bias=True):
        super().__init__(cin, cout, k, dilation=dilation, bias=bias)

    def forward(self, x):
        return conv2d_reflect(x, self.weight, self.bias, dilation=self.dilation[0])


@dataclass
class FfigConfig:
    in_channels: int = 3
    feat_channels: int = 16
    delta: int = 3
    wg_reduction: int = 4
    dilations: tuple[int, ...] = (1, 3, 5, 7)
    # ablation toggles
    use_mdee: bool = True
    use_wg: bool = True
    use_efe: bool = True
    use_hard_mask: bool = True

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        if self.delta < 0:
            raise ParamError("delta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class WeightGenerator(nn.Module):
    """Per-pixel softmax weights over the eight directions."""

    def __init__(self, in_channels: int, reduction: int = 4, dilations=(1, 3, 5, 7)):
        super().__init__()
        mid = max(in_channels // reduction, 1)
        self.reduce = nn.Conv2d(in_channels, mid, 1)
        self.entry = ReflectConv2d(mid, mid, 3)
        self.dilated = nn.ModuleList(ReflectConv2d(mid, mid, 3, dilation=d) for d in dilations)
        self.head = nn.Conv2d(2 * mid, 8, 1)

    def forward(self, x):
        reduced = self.reduce(x)
        r = F.relu(self.entry(reduced))
        r = F.relu(sum(conv(r) for conv in self.dilated))
        return torch.softmax(self.head(torch.cat([reduced, r], 1)), dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = ReflectConv2d(channels, channels, 3)
        self.conv2 = ReflectConv2d(channels, channels, 3)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class FfigNetwork(nn.Module):
    def __init__(self, cfg: FfigConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FfigConfig()
        c, f = cfg.in_channels, cfg.feat_channels
        self.weight_gen = WeightGenerator(8 * c, cfg.wg_reduction, cfg.dilations)
        self.edge_proj = nn.Conv2d(c, f, 1)
        self.src_feat = nn.Sequential(ReflectConv2d(c, f, 3, bias=False), nn.BatchNorm2d(f), nn.ReLU(inplace=True))
        self.concat_proj = nn.Conv2d(2 * f, f, 1)  # replaces EFE when disabled
        self.decoder = nn.Sequential(ResidualBlock(f + 1), ReflectConv2d(f + 1, c, 3))
        nn.init.constant_(self.decoder[-1].bias, 0.5)
        self.register_buffer("trained", torch.tensor(False))

    def edge_features(self, img: torch.Tensor) -> torch.Tensor:
        """Integrated edge map ``F_edge`` (``B x C x H x W``)."""
        if not self.cfg.use_mdee:
            return laplacian_edges(img)
        bank = extract_edges(img)
        if not self.cfg.use_wg:
            return bank.sum(1)
        return integrate_edges(bank, self.direction_weights(bank))

    def direction_weights(self, bank: torch.Tensor) -> torch.Tensor:
        return self.weight_gen(bank.flatten(1, 2))

    def source_branch(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f_edge = self.edge_proj(self.edge_features(img))
        f = self.src_feat(img)
        if self.cfg.use_efe:
            f_hat = efe_attend(f_edge, f, self.cfg.delta)
        else:
            f_hat = self.concat_proj(torch.cat([f_edge, f], 1))
        return f_hat, f

    def forward(self, sources: torch.Tensor, hard: torch.Tensor) -> torch.Tensor:
        """``sources`` is ``B x N x C x H x W``, ``hard`` is ``B x 1 x H x W`` in {0, 1/2}."""
        b, n, c, h, w = sources.shape
        if hard.shape[-2:] != (h, w):
            raise DomainError(f"hard mask {tuple(hard.shape[-2:])} does not match sources {(h, w)}")
        f_hat, f = self.source_branch(sources.reshape(b * n, c, h, w))
        pairs = list(zip(f_hat.view(b, n, -1, h, w).unbind(1), f.view(b, n, -1, h, w).unbind(1)))
        merged = merge_sources(pairs)
        guide = 2 * hard if self.cfg.use_hard_mask else torch.zeros_like(hard)
        return self.decoder(torch.cat([guide.to(merged.dtype), merged], 1)).clamp(0.0, 1.0)


@torch.no_grad()
def generate_full_focus(stack: SourceStack, hard: np.ndarray, net: FfigNetwork) -> np.ndarray:
    """Decode the all-in-focus estimate ``F_g`` as an ``H x W x 3`` array."""
    hard = np.asarray(hard, dtype=np.float32)
    if hard.shape != (stack.height, stack.width):
        raise DomainError(f"hard mask {hard.shape} does not match stack {(stack.height, stack.width)}")
    was_training = net.training
    net.eval()
    param = next(net.parameters())
    try:
        src = images_to_tensor(stack.images).to(param.device, param.dtype)[None]
        m_h = torch.from_numpy(hard).to(param.device, param.dtype)[None, None]
        out = net(src, m_h)[0]
    finally:
        net.train(was_training)
    return out.permute(1, 2, 0).cpu().numpy().astype(np.float32)
