"""Per-source focus detection network and the N-source hard-pixel rule.

Each source is scored independently against the mean of the remaining
sources, which is what lets the pipeline accept any number of inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import SourceStack, gaussian_blur
from .errors import ConfigError, DomainError, UntrainedModelError


@dataclass
class HpdConfig:
    in_channels: int = 1
    sife_channels: int = 16
    msfa_channels: int = 32
    qkv_dim: int = 32
    n_msfa: int = 5
    decoder_widths: tuple[int, ...] = (32, 32, 16, 16, 1)
    ca_reduction: int = 8
    sigma: float = 1.0
    ksize: int = 5
    threshold: float = 0.5
    # ablation toggles
    use_fm: bool = True
    use_mpg: bool = True
    use_reverse: bool = True
    use_msfa: bool = True

    def __post_init__(self):
        self.decoder_widths = tuple(self.decoder_widths)
        if self.sife_channels % 2:
            raise ConfigError("SIFE width must be even so modulation can split it in halves")
        if self.msfa_channels != 2 * self.sife_channels:
            raise ConfigError("MSFA width must equal the concat of two SIFE outputs")
        if self.decoder_widths[-1] != 1:
            raise ConfigError("decoder must end in a single channel")

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin: int, cout: int, k: int = 3):
        super().__init__(
            nn.Conv2d(cin, cout, k, padding=k // 2, padding_mode="reflect", bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


def edge_pair(img, sigma: float = 1.0, ksize: int = 5):
    """Normalized edge energy ``B`` and its reverse ``R = 1 - B``.

    ``img`` is ``H x W`` or ``B x 1 x H x W``; normalization runs per image.
    A constant image has no edges and yields ``B = 0``.
    """
    is_numpy = isinstance(img, np.ndarray)
    x = torch.from_numpy(np.array(img, dtype=np.float64)) if is_numpy else img
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, None]
    edge = (x - gaussian_blur(x, sigma, ksize)).abs()
    flat = edge.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    degenerate = span <= 0
    b = torch.where(degenerate, torch.zeros_like(edge), (edge - lo) / torch.where(degenerate, torch.ones_like(span), span))
    r = 1.0 - b
    if squeeze:
        b, r = b[0, 0], r[0, 0]
    if is_numpy:
        return b.numpy(), r.numpy()
    return b, r


def modulate(features: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Scale and shift the first half of the channels, pass the rest through."""
    c = features.shape[1]
    if c % 2:
        raise ConfigError(f"cannot split {c} channels into equal halves")
    left, right = features[:, : c // 2], features[:, c // 2 :]
    if alpha.shape[1] != c // 2 or beta.shape[1] != c // 2:
        raise ConfigError("modulation parameters must cover exactly half the channels")
    return torch.cat([alpha * left + beta, right], dim=1)


class FocusModulation(nn.Module):
    """Source feature extractor plus the edge-conditioned parameter generator."""

    def __init__(self, cfg: HpdConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.sife_channels
        self.sife = nn.Sequential(ConvBNReLU(cfg.in_channels, c), ConvBNReLU(c, c))
        self.alpha_gen = nn.Conv2d(2, c // 2, 3, padding=1, padding_mode="reflect")
        self.beta_gen = nn.Conv2d(2, c // 2, 3, padding=1, padding_mode="reflect")

    def params(self, x_i: torch.Tensor, x_rest: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b_i, _ = edge_pair(x_i, self.cfg.sigma, self.cfg.ksize)
        b_rest, r_rest = edge_pair(x_rest, self.cfg.sigma, self.cfg.ksize)
        guide = torch.cat([b_i, r_rest if self.cfg.use_reverse else b_rest], dim=1)
        return torch.sigmoid(self.alpha_gen(guide)), torch.sigmoid(self.beta_gen(guide))

    def forward(self, x_i, x_rest, alpha=None, beta=None):
        """Return ``(F_i_mod, F_rest_mod)``; pass ``alpha``/``beta`` to override the generator."""
        f_i, f_rest = self.sife(x_i), self.sife(x_rest)
        if not (self.cfg.use_fm and self.cfg.use_mpg) and alpha is None:
            return f_i, f_rest
        if alpha is None or beta is None:
            gen_a, gen_b = self.params(x_i, x_rest)
            alpha = gen_a if alpha is None else alpha
            beta = gen_b if beta is None else beta
        return modulate(f_i, alpha, beta), modulate(f_rest, alpha, beta)


def focus_modulate(input_i, input_rest, net: "HpdNetwork", alpha=None, beta=None) -> torch.Tensor:
    """Modulated features of source ``i`` (``B x C x H x W`` inputs)."""
    f_i, _ = net.fm(input_i, input_rest, alpha, beta)
    return f_i


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(x.mean(dim=(2, 3), keepdim=True))
        mx = self.mlp(x.amax(dim=(2, 3), keepdim=True))
        return x * torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, k: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, k, padding=k // 2, padding_mode="reflect", bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


def cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """Scaled dot-product attention between flattened feature maps.

    ``q``, ``k``, ``v`` are ``B x C x H x W``. Each map is reshaped to
    ``C x HW``, so ``q @ k^T`` is a ``C x C`` affinity scaled by the square
    root of the contracted length ``HW``. Returns ``(out, weights)`` with
    ``out`` shaped like ``v``.
    """
    b, c, h, w = q.shape
    qf, kf, vf = q.reshape(b, c, h * w), k.reshape(b, -1, h * w), v.reshape(b, -1, h * w)
    weights = torch.softmax(qf @ kf.transpose(1, 2) / math.sqrt(h * w), dim=-1)
    return (weights @ vf).reshape(b, -1, h, w), weights


def select_by_magnitude(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise pick of whichever value has the larger magnitude; ties go to ``a``."""
    return torch.where(a.abs() >= b.abs(), a, b)


class MSFA(nn.Module):
    """Multi-scale feature aggregation with cross-branch saliency enhancement."""

    def __init__(self, channels: int = 32, qkv_dim: int = 32, reduction: int = 8):
        super().__init__()
        if qkv_dim != channels:
            raise ConfigError("residual add needs qkv_dim == channels")
        self.branch3 = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"), nn.BatchNorm2d(channels))
        self.branch7 = nn.Sequential(nn.Conv2d(channels, channels, 7, padding=3, padding_mode="reflect"), nn.BatchNorm2d(channels))
        self.ca3, self.sa3 = ChannelAttention(channels, reduction), SpatialAttention()
        self.ca7, self.sa7 = ChannelAttention(channels, reduction), SpatialAttention()
        self.mix3 = nn.Conv2d(2 * channels, channels, 1)
        self.mix7 = nn.Conv2d(2 * channels, channels, 1)
        self.qkv3 = nn.Conv2d(channels, 3 * qkv_dim, 1, bias=False)
        self.qkv7 = nn.Conv2d(channels, 3 * qkv_dim, 1, bias=False)

    def forward(self, x):
        f3, f7 = self.branch3(x), self.branch7(x)
        bar3 = self.mix3(torch.cat([self.ca3(f3), self.sa3(f3)], dim=1))
        bar7 = self.mix7(torch.cat([self.ca7(f7), self.sa7(f7)], dim=1))
        q3, k3, v3 = self.qkv3(bar3).chunk(3, dim=1)
        q7, k7, v7 = self.qkv7(bar7).chunk(3, dim=1)
        hat3 = cross_attention(q3, k7, v3)[0] + bar3
        hat7 = cross_attention(q7, k3, v7)[0] + bar7
        return select_by_magnitude(hat3, hat7)


class HpdNetwork(nn.Module):
    """Focus probability network: FM, stem conv, 5x(MSFA, conv) encoder, 5-conv decoder.

    Every layer has stride 1, so the output map matches the input size.
    """

    def __init__(self, cfg: HpdConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or HpdConfig()
        c = cfg.msfa_channels
        self.fm = FocusModulation(cfg)
        self.stem = ConvBNReLU(c, c)
        layers: list[nn.Module] = []
        for _ in range(cfg.n_msfa):
            layers.append(MSFA(c, cfg.qkv_dim, cfg.ca_reduction) if cfg.use_msfa else ConvBNReLU(c, c))
            layers.append(ConvBNReLU(c, c))
        self.encoder = nn.Sequential(*layers)
        dec: list[nn.Module] = []
        cin = c
        for width in cfg.decoder_widths[:-1]:
            dec.append(ConvBNReLU(cin, width))
            cin = width
        dec.append(nn.Conv2d(cin, 1, 3, padding=1, padding_mode="reflect"))
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("trained", torch.tensor(False))

    def forward(self, x_i: torch.Tensor, x_rest: torch.Tensor) -> torch.Tensor:
        f_i, f_rest = self.fm(x_i, x_rest)
        feat = self.encoder(self.stem(torch.cat([f_i, f_rest], dim=1)))
        return torch.sigmoid(self.decoder(feat))


def combine_rest(images: np.ndarray | torch.Tensor, i: int):
    """Mean of every source except ``i`` along axis 0."""
    n = images.shape[0]
    if n < 2:
        raise DomainError("need at least two sources to form the remainder")
    return (images.sum(0) - images[i]) / (n - 1)


def _tile_starts(size: int, tile: int, overlap: int) -> list[int]:
    step = tile - 2 * overlap
    starts, s = [], 0
    while True:
        starts.append(min(s, size - tile))
        if s + tile >= size:
            return starts
        s += step


def _tiled_probability(net: HpdNetwork, x_i: torch.Tensor, x_rest: torch.Tensor, tile: int, overlap: int) -> torch.Tensor:
    h, w = x_i.shape[-2:]
    if tile <= 0 or (h <= tile and w <= tile):
        return net(x_i, x_rest)
    if tile <= 2 * overlap:
        raise ConfigError("tile size must exceed twice the overlap")
    th, tw = min(tile, h), min(tile, w)
    out = torch.empty_like(x_i)
    ys, xs = _tile_starts(h, th, overlap), _tile_starts(w, tw, overlap)
    for iy, y0 in enumerate(ys):
        for ix, x0 in enumerate(xs):
            p = net(x_i[..., y0 : y0 + th, x0 : x0 + tw], x_rest[..., y0 : y0 + th, x0 : x0 + tw])
            cy0 = 0 if iy == 0 else overlap
            cy1 = th if iy == len(ys) - 1 else th - overlap
            cx0 = 0 if ix == 0 else overlap
            cx1 = tw if ix == len(xs) - 1 else tw - overlap
            out[..., y0 + cy0 : y0 + cy1, x0 + cx0 : x0 + cx1] = p[..., cy0:cy1, cx0:cx1]
    return out


@torch.no_grad()
def detect_focus(
    stack: SourceStack,
    net: HpdNetwork,
    tile_size: int = 128,
    overlap: int = 16,
    strict: bool = False,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Focus probability ``p_i`` and binary mask ``M_i`` for every source.

    Runs the network in eval mode, one source at a time, so the result for a
    source does not depend on the order of the others.
    """
    if strict and not bool(net.trained):
        raise UntrainedModelError("focus network has no trained weights")
    was_training = net.training
    net.eval()
    param = next(net.parameters())
    luma = torch.from_numpy(stack.luma).to(param.device, param.dtype)
    results = []
    try:
        for i in range(stack.n):
            x_i = luma[i][None, None]
            x_rest = combine_rest(luma, i)[None, None]
            p = _tiled_probability(net, x_i, x_rest, tile_size, overlap)[0, 0].cpu().numpy()
            m = (p > net.cfg.threshold).astype(np.float32)
            results.append((p.astype(np.float32), m))
    finally:
        net.train(was_training)
    return results


def _check_binary(masks: Sequence[np.ndarray]) -> np.ndarray:
    arr = np.stack([np.asarray(m) for m in masks])
    if not np.all((arr == 0) | (arr == 1)):
        raise DomainError("focus masks must contain only 0 and 1")
    return arr


def detect_hard_pixels(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Hard mask: 0 where exactly one source claims focus, 1/2 elsewhere."""
    if len(masks) < 1:
        raise DomainError("no masks given")
    shapes = {np.shape(m) for m in masks}
    if len(shapes) != 1:
        raise DomainError(f"mask shapes differ: {sorted(shapes)}")
    total = _check_binary(masks).sum(axis=0)
    return np.where(total == 1, 0.0, 0.5).astype(np.float32)
