"""Synthetic training data, the two losses and the two-stage training loop.

Stage ``hpd`` fits the focus network with cross entropy. Stage ``ffig``
then fits the generator; its hard masks come from the frozen focus network
run on each training pair, the same way they are produced at inference.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .core import SourceStack, blur_rgb, default_ksize, gaussian_blur, images_to_tensor, load_image, rgb_to_luma, save_image, save_mask
from .errors import DependencyError, DomainError, ParamError
from .ffig import FfigConfig, FfigNetwork
from .hpd import HpdConfig, HpdNetwork, combine_rest, detect_focus, detect_hard_pixels

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLUR_SIGMAS = (1.0, 2.0, 3.0, 4.0, 5.0)
PATCH = 256
CE_EPS = 1e-7


@dataclass
class TrainConfig:
    epochs_hpd: int = 600
    batch_hpd: int = 24
    epochs_ffig: int = 600
    batch_ffig: int = 4
    lr: float = 1e-4
    lr_decay: float = 0.9
    lam: float = 0.05
    blur_bank_size: int = 5
    decay_every: int = 20
    sum_loss: bool = False
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ParamError(f"lambda must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ParamError(f"learning rate must be positive, got {self.lr}")
        if self.batch_hpd < 1 or self.batch_ffig < 1:
            raise ParamError("batch sizes must be >= 1")
        if not 1 <= self.blur_bank_size <= len(BLUR_SIGMAS):
            raise ParamError(f"blur bank holds 1..{len(BLUR_SIGMAS)} filters")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: exponential decay applied every ``decay_every`` epochs."""
        return self.lr * self.lr_decay ** (epoch // max(self.decay_every, 1))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainSample:
    sources: np.ndarray  # N x H x W x 3
    gt_masks: np.ndarray  # N x H x W, binary
    gt_image: np.ndarray  # H x W x 3
    blur_id: int = 0


# ---------------------------------------------------------------------------
# data synthesis


def synthesize_pair(gt: np.ndarray, mask: np.ndarray, blur_id: int) -> TrainSample:
    """Two-source multifocus pair from an all-in-focus image and a binary mask.

    Source 1 is sharp where ``mask`` is 1 and blurred elsewhere, source 2 the
    reverse.
    """
    mask = np.asarray(mask, dtype=np.float32)
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError("synthesis mask must be binary")
    if mask.shape != gt.shape[:2]:
        raise DomainError(f"mask {mask.shape} does not match image {gt.shape[:2]}")
    if not 0 <= blur_id < len(BLUR_SIGMAS):
        raise ParamError(f"blur_id must be in [0, {len(BLUR_SIGMAS)})")
    gt = np.asarray(gt, dtype=np.float32)
    blurred = blur_variant(gt, blur_id)
    m = mask[..., None]
    i1 = m * gt + (1 - m) * blurred
    i2 = m * blurred + (1 - m) * gt
    return TrainSample(np.stack([i1, i2]), np.stack([mask, 1 - mask]), gt, blur_id)


def blur_variant(img: np.ndarray, blur_id: int) -> np.ndarray:
    sigma = BLUR_SIGMAS[blur_id]
    return blur_rgb(img, sigma, default_ksize(sigma)).astype(np.float32)


def _blob_polygon(rng: np.random.Generator, h: int, w: int) -> list[tuple[float, float]]:
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    base = rng.uniform(0.15, 0.45) * min(h, w)
    n = 64
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    if rng.random() < 0.5:
        # ellipse
        a, b, rot = base, base * rng.uniform(0.4, 1.0), rng.uniform(0, np.pi)
        ys, xs = a * np.sin(t), b * np.cos(t)
        ys, xs = ys * np.cos(rot) - xs * np.sin(rot), ys * np.sin(rot) + xs * np.cos(rot)
    else:
        # star-shaped polygon with a smooth random radius profile
        radius = base * np.ones(n)
        for k in range(1, 4):
            radius += base * rng.uniform(0, 0.3 / k) * np.cos(k * t + rng.uniform(0, 2 * np.pi))
        ys, xs = radius * np.sin(t), radius * np.cos(t)
    return list(zip((xs + cx).tolist(), (ys + cy).tolist()))


def random_contour_mask(h: int, w: int, rng_seed: int) -> np.ndarray:
    """Binary mask made of 1-3 smooth random blobs, foreground fraction in [0.2, 0.8]."""
    if h < 64 or w < 64:
        raise ParamError("mask generator needs h, w >= 64")
    rng = np.random.default_rng(rng_seed)
    for _ in range(200):
        canvas = Image.new("L", (w, h), 0)
        draw = ImageDraw.Draw(canvas)
        for _ in range(int(rng.integers(1, 4))):
            draw.polygon(_blob_polygon(rng, h, w), fill=255)
        soft = gaussian_blur(np.asarray(canvas, dtype=np.float32) / 255.0, 0.02 * min(h, w))
        mask = (soft > 0.5).astype(np.float32)
        if rng.random() < 0.5:
            mask = 1 - mask
        if 0.2 <= mask.mean() <= 0.8:
            return mask
    # fallback: a half-plane split, always inside the fraction bounds
    mask = np.zeros((h, w), np.float32)
    mask[:, : w // 2] = 1
    return mask


def synthetic_texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Colored multi-scale noise texture, a stand-in when no image corpus is given."""
    layers = np.zeros((3, h, w), np.float32)
    for sigma, amp in ((0.7, 1.0), (1.5, 0.8), (3.0, 0.6), (6.0, 0.5)):
        noise = rng.standard_normal((3, h, w)).astype(np.float32)
        layers += amp * gaussian_blur(noise, sigma) * sigma
    mix = rng.uniform(0.2, 1.0, (3, 3)).astype(np.float32)
    img = np.einsum("ij,jhw->hwi", mix, layers)
    lo, hi = img.min(), img.max()
    return (0.05 + 0.9 * (img - lo) / (hi - lo)).astype(np.float32)


def random_crops(img: np.ndarray, count: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise DomainError(f"image {h}x{w} is smaller than the {size}px crop")
    out = []
    for _ in range(count):
        y, x = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        out.append(img[y : y + size, x : x + size].copy())
    return out


def make_dataset(
    count: int,
    seed: int,
    size: int = PATCH,
    corpus: Sequence[str | Path] | None = None,
    crops_per_image: int = 9,
    blur_bank_size: int = len(BLUR_SIGMAS),
) -> list[TrainSample]:
    """``count`` synthetic pairs; ground truths are corpus crops or synthetic textures."""
    rng = np.random.default_rng(seed)
    gts: list[np.ndarray] = []
    if corpus:
        for path in corpus:
            gts.extend(random_crops(load_image(path), crops_per_image, size, rng))
            if len(gts) >= count:
                break
        if len(gts) < count:
            raise DomainError(f"corpus yields {len(gts)} crops, {count} requested")
    else:
        gts = [synthetic_texture(size, size, rng) for _ in range(count)]
    samples = []
    for gt in gts[:count]:
        mask = random_contour_mask(size, size, int(rng.integers(2**31)))
        samples.append(synthesize_pair(gt, mask, int(rng.integers(blur_bank_size))))
    return samples


def write_synth_cache(samples: Sequence[TrainSample], root: str | Path) -> Path:
    """Materialize ``sample_k/{I1,I2,mask,gt}.png`` under ``root``."""
    root = Path(root)
    for k, s in enumerate(samples):
        d = root / f"sample_{k}"
        for j, img in enumerate(s.sources, 1):
            save_image(d / f"I{j}.png", img)
        save_mask(d / "mask.png", s.gt_masks[0])
        save_image(d / "gt.png", s.gt_image)
    return root


def read_synth_cache(root: str | Path) -> list[TrainSample]:
    root = Path(root)
    dirs = sorted((p for p in root.glob("sample_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
    samples = []
    for d in dirs:
        srcs = sorted(d.glob("I*.png"), key=lambda p: int(p.stem[1:]))
        mask = (np.asarray(Image.open(d / "mask.png").convert("L")) > 127).astype(np.float32)
        if len(srcs) == 2:
            masks = np.stack([mask, 1 - mask])
        else:
            raise DomainError(f"{d}: cache holds two-source pairs only")
        samples.append(TrainSample(np.stack([load_image(p) for p in srcs]), masks, load_image(d / "gt.png")))
    return samples


# ---------------------------------------------------------------------------
# losses


def ce_loss(p, g, eps: float = CE_EPS, reduction: str = "mean"):
    """Binary cross entropy over N probability maps.

    ``reduction="mean"`` averages over sources and pixels; ``"sum"`` is the
    raw double sum. Returns a tensor for tensor inputs, a float otherwise.
    """
    as_numpy = not isinstance(p, torch.Tensor) and not (isinstance(p, (list, tuple)) and isinstance(p[0], torch.Tensor))
    if isinstance(p, (list, tuple)):
        p = torch.stack([torch.as_tensor(x) for x in p])
    if isinstance(g, (list, tuple)):
        g = torch.stack([torch.as_tensor(x) for x in g])
    p, g = torch.as_tensor(p), torch.as_tensor(g)
    if p.shape != g.shape:
        raise DomainError(f"prediction {tuple(p.shape)} and label {tuple(g.shape)} differ")
    g = g.to(p.dtype)
    p = p.clamp(eps, 1 - eps)
    terms = -(g * torch.log(p) + (1 - g) * torch.log1p(-p))
    loss = terms.sum() if reduction == "sum" else terms.mean()
    return float(loss) if as_numpy else loss


def rec_loss(fused, target, hard, lam: float = 0.05, reduction: str = "mean"):
    """Global L1 plus ``lam`` times the L1 restricted to hard pixels."""
    if lam < 0:
        raise ParamError(f"lambda must be >= 0, got {lam}")
    as_numpy = not isinstance(fused, torch.Tensor)
    fused, target, hard = (torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x for x in (fused, target, hard))
    if fused.shape != target.shape:
        raise DomainError(f"output {tuple(fused.shape)} and target {tuple(target.shape)} differ")
    diff = fused - target
    reduce = torch.sum if reduction == "sum" else torch.mean
    hard = torch.broadcast_to(hard.to(diff.dtype), diff.shape) if hard.ndim != diff.ndim else hard.to(diff.dtype)
    loss = reduce(diff.abs()) + lam * reduce((hard * fused - hard * target).abs())
    return float(loss) if as_numpy else loss


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointBundle:
    path: Path
    manifest: dict = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.manifest["stage"]

    @property
    def epochs_completed(self) -> int:
        return int(self.manifest.get("epochs_completed", 0))


def _manifest(stage: str, net_cfg, cfg: TrainConfig, epochs: int, losses: list[float]) -> dict:
    m = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "network": net_cfg.to_dict(),
        "train": asdict(cfg),
        "epochs_completed": epochs,
        "trained": epochs > 0,
        "final_loss": losses[-1] if losses else None,
    }
    if stage == "hpd":
        m.update(qkv_dim=net_cfg.qkv_dim, threshold=net_cfg.threshold, sigma=net_cfg.sigma, ksize=net_cfg.ksize)
    return m


def save_checkpoint(root: str | Path, stage: str, net, cfg: TrainConfig, epoch: int, losses: list[float], lrs: list[float], optimizer=None, generator=None) -> CheckpointBundle:
    d = Path(root) / stage
    d.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), d / "weights.pt")
    if optimizer is not None:
        torch.save({"optimizer": optimizer.state_dict(), "generator": generator.get_state() if generator is not None else None, "torch_rng": torch.get_rng_state(), "epoch": epoch}, d / "state.pt")
    manifest = _manifest(stage, net.cfg, cfg, epoch, losses)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(d / "loss_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr"])
        for k, (loss, lr) in enumerate(zip(losses, lrs), 1):
            writer.writerow([k, repr(loss), repr(lr)])
    return CheckpointBundle(d, manifest)


def read_manifest(root: str | Path, stage: str) -> dict:
    path = Path(root) / stage / "manifest.json"
    if not path.is_file():
        raise DependencyError(f"no {stage} checkpoint under {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DependencyError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def read_loss_log(root: str | Path, stage: str) -> tuple[list[float], list[float]]:
    path = Path(root) / stage / "loss_log.csv"
    losses, lrs = [], []
    if path.is_file():
        with open(path) as fh:
            for row in csv.DictReader(fh):
                losses.append(float(row["loss"]))
                lrs.append(float(row["lr"]))
    return losses, lrs


def load_network(root: str | Path, stage: str):
    """Rebuild the network of ``stage`` from its checkpoint directory."""
    manifest = read_manifest(root, stage)
    if stage == "hpd":
        net = HpdNetwork(HpdConfig(**manifest["network"]))
    else:
        net = FfigNetwork(FfigConfig(**manifest["network"]))
    net.load_state_dict(torch.load(Path(root) / stage / "weights.pt", map_location="cpu", weights_only=True))
    net.eval()
    return net


# ---------------------------------------------------------------------------
# training


def _hpd_instances(samples: Sequence[TrainSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-source (input, remainder, label) triples, stacked along the batch axis."""
    xs, rests, labels = [], [], []
    for s in samples:
        luma = torch.from_numpy(rgb_to_luma(s.sources))
        for i in range(luma.shape[0]):
            xs.append(luma[i])
            rests.append(combine_rest(luma, i))
            labels.append(torch.from_numpy(s.gt_masks[i]))
    return torch.stack(xs)[:, None], torch.stack(rests)[:, None], torch.stack(labels)[:, None]


def hard_masks_from(net: HpdNetwork, samples: Sequence[TrainSample]) -> np.ndarray:
    out = []
    for s in samples:
        focus = detect_focus(SourceStack(s.sources), net, tile_size=0)
        out.append(detect_hard_pixels([m for _, m in focus]))
    return np.stack(out)


def mask_accuracy(net: HpdNetwork, samples: Sequence[TrainSample]) -> float:
    """Fraction of pixels where the eval-mode mask matches the synthesis mask."""
    hits = total = 0
    for s in samples:
        focus = detect_focus(SourceStack(s.sources), net, tile_size=0)
        for (_, m), g in zip(focus, s.gt_masks):
            hits += int((m == g).sum())
            total += m.size
    return hits / total


def train_stage(
    stage: str,
    samples: Sequence[TrainSample],
    cfg: TrainConfig,
    out_dir: str | Path,
    epochs: int | None = None,
    resume: bool = False,
    net_cfg: HpdConfig | FfigConfig | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> CheckpointBundle:
    """Train one stage with Adam and write weights, manifest and loss log to ``out_dir/stage``.

    ``epochs`` overrides the stage's epoch count from ``cfg``. With
    ``resume=True`` training continues from the saved optimizer and RNG state.
    """
    if stage not in ("hpd", "ffig"):
        raise ValueError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    total = epochs if epochs is not None else (cfg.epochs_hpd if stage == "hpd" else cfg.epochs_ffig)
    batch = cfg.batch_hpd if stage == "hpd" else cfg.batch_ffig
    reduction = "sum" if cfg.sum_loss else "mean"

    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    if stage == "hpd":
        net = HpdNetwork(net_cfg if isinstance(net_cfg, HpdConfig) else None)
        x, rest, label = _hpd_instances(samples)
        n_items = x.shape[0]
    else:
        read_manifest(out_dir, "hpd")
        hpd_net = load_network(out_dir, "hpd")
        net = FfigNetwork(net_cfg if isinstance(net_cfg, FfigConfig) else None)
        sources = torch.stack([images_to_tensor(s.sources) for s in samples])
        targets = torch.stack([images_to_tensor(s.gt_image[None])[0] for s in samples])
        hard = torch.from_numpy(hard_masks_from(hpd_net, samples))[:, None]
        n_items = sources.shape[0]
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr)

    start, losses, lrs = 0, [], []
    if resume and (out_dir / stage / "state.pt").is_file():
        net.load_state_dict(torch.load(out_dir / stage / "weights.pt", weights_only=True))
        state = torch.load(out_dir / stage / "state.pt", weights_only=False)
        optimizer.load_state_dict(state["optimizer"])
        generator.set_state(state["generator"])
        torch.set_rng_state(state["torch_rng"])
        start = int(state["epoch"])
        losses, lrs = read_loss_log(out_dir, stage)
        losses, lrs = losses[:start], lrs[:start]

    bundle = None
    net.train()
    for epoch in range(start, total):
        lr = cfg.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = torch.randperm(n_items, generator=generator)
        running, seen = 0.0, 0
        for lo in range(0, n_items, batch):
            idx = order[lo : lo + batch]
            optimizer.zero_grad()
            if stage == "hpd":
                loss = ce_loss(net(x[idx], rest[idx]), label[idx], reduction=reduction)
            else:
                loss = rec_loss(net(sources[idx], hard[idx]), targets[idx], hard[idx], cfg.lam, reduction=reduction)
            loss.backward()
            optimizer.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        losses.append(running / seen)
        lrs.append(lr)
        log.info("%s epoch %d/%d loss %.6f lr %.2e", stage, epoch + 1, total, losses[-1], lr)
        if on_epoch is not None:
            on_epoch(epoch + 1, losses[-1])
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == total:
            net.trained.fill_(True)
            bundle = save_checkpoint(out_dir, stage, net, cfg, epoch + 1, losses, lrs, optimizer, generator)
    if bundle is None:
        net.trained.fill_(start > 0)
        bundle = save_checkpoint(out_dir, stage, net, cfg, start, losses, lrs, optimizer, generator)
    return bundle
