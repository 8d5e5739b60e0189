"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``. The toy-training criterion trains both
stages on 20 synthetic 256x256 pairs and takes roughly an hour on one CPU.
"""

from __future__ import annotations

import itertools
import math
import sys
import time

import numpy as np
import pytest
import torch

from grfusion.core import SourceStack, blur_rgb, to_uint8
from grfusion.ffig import FfigNetwork, WeightGenerator, efe_attend, extract_edges, generate_full_focus, integrate_edges
from grfusion.hpd import MSFA, HpdNetwork, detect_focus, detect_hard_pixels, focus_modulate, select_by_magnitude
from grfusion.metrics import q_abf, q_mi, q_ssim
from grfusion.pipeline import fuse
from grfusion.recombine import compose, update_decision_maps
from grfusion.train import (
    TrainConfig,
    blur_variant,
    ce_loss,
    load_network,
    make_dataset,
    mask_accuracy,
    random_contour_mask,
    read_loss_log,
    synthetic_texture,
    train_stage,
)

from conftest import ACCEPTANCE_LINES
from gradcheck import max_relative_error

# toy two-stage schedule for the convergence criterion (see README)
TOY_CONFIG = dict(epochs_hpd=50, batch_hpd=2, epochs_ffig=200, batch_ffig=1, lr=1e-3, decay_every=20, seed=0)


def report(number: int, title: str, checks: dict[str, bool], detail: str, elapsed: float, limit: float) -> None:
    checks = {**checks, f"time<{limit:g}s": elapsed < limit}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail} ({elapsed:.2f}s)"
    if failed:
        line += f" -- failed: {', '.join(failed)}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ---------------------------------------------------------------------------


def test_c01_hard_pixel_rule_matches_enumeration():
    t0 = time.perf_counter()
    mismatches = 0
    for n in (2, 3, 4, 6):
        combos = np.array(list(itertools.product([0.0, 1.0], repeat=n)), dtype=np.float32)
        hard = detect_hard_pixels([combos[:, i].reshape(1, -1) for i in range(n)])[0]
        oracle = np.array([0.0 if row.sum() == 1 else 0.5 for row in combos], dtype=np.float32)
        mismatches += int((hard != oracle).sum())
    elapsed = time.perf_counter() - t0
    report(1, "hard-pixel rule", {"exact": mismatches == 0}, f"{mismatches} mismatches over N in {{2,3,4,6}}", elapsed, 1.0)


def test_c02_partition_of_unity():
    t0 = time.perf_counter()
    gen = np.random.default_rng(0)
    violations = 0
    for _ in range(1000):
        n = int(gen.integers(2, 7))
        masks = [(gen.random((1, 1)) < 0.5).astype(np.float32) for _ in range(n)]
        dm = update_decision_maps(masks, detect_hard_pixels(masks))
        violations += int(np.any(dm.maps.sum(0) + 2 * dm.hard != 1))
    elapsed = time.perf_counter() - t0
    report(2, "partition of unity", {"exact": violations == 0}, f"{violations}/1000 violations", elapsed, 1.0)


def test_c03_composition_is_bit_exact():
    t0 = time.perf_counter()
    gen = np.random.default_rng(0)
    raw = gen.integers(0, 256, (3, 64, 64, 3), dtype=np.uint8)
    stack = SourceStack.from_list(raw.astype(np.float32) / 255.0)
    owner = gen.integers(0, 3, (64, 64))
    masks = [(owner == i).astype(np.float32) for i in range(3)]
    f_g = gen.random((64, 64, 3), dtype=np.float32)
    fused = compose(stack, update_decision_maps(masks, np.zeros((64, 64), np.float32)), f_g)
    selected = np.take_along_axis(raw, owner[None, ..., None], 0)[0]
    easy_ok = np.array_equal(to_uint8(fused), selected)
    zero = [np.zeros((64, 64), np.float32)] * 3
    all_hard = compose(stack, update_decision_maps(zero, np.full((64, 64), 0.5, np.float32)), f_g)
    hard_ok = np.array_equal(all_hard, f_g)
    elapsed = time.perf_counter() - t0
    detail = f"selection byte-identical={easy_ok}, all-hard equals F_g={hard_ok}"
    report(3, "composition bit-exactness", {"selection": easy_ok, "all-hard": hard_ok}, detail, elapsed, 1.0)


def _efe_loop(e: np.ndarray, f: np.ndarray, delta: int) -> np.ndarray:
    c, h, w = f.shape
    out = np.zeros((c, h, w))
    for y in range(h):
        for x in range(w):
            y0, y1, x0, x1 = max(0, y - delta), min(h, y + delta + 1), max(0, x - delta), min(w, x + delta + 1)
            window = f[:, y0:y1, x0:x1].reshape(c, -1)
            logits = e[:, y, x] @ window
            wts = np.exp(logits - logits.max())
            out[:, y, x] = window @ (wts / wts.sum())
    return out


def test_c04_efe_matches_brute_force():
    t0 = time.perf_counter()
    gen = np.random.default_rng(0)
    worst, count = 0.0, 0
    for h, w, c, delta in itertools.product(range(1, 9), range(1, 9), range(1, 5), range(0, 3)):
        if delta >= max(h, w):
            continue  # window larger than the image is rejected by contract
        e = gen.normal(size=(c, h, w)).astype(np.float32)
        f = gen.normal(size=(c, h, w)).astype(np.float32)
        got = efe_attend(torch.from_numpy(e)[None], torch.from_numpy(f)[None], delta)[0].numpy()
        worst = max(worst, float(np.abs(got - _efe_loop(e.astype(np.float64), f.astype(np.float64), delta)).max()))
        count += 1
    elapsed = time.perf_counter() - t0
    report(4, "EFE brute-force equivalence", {"max diff<1e-6": worst < 1e-6}, f"{count} instances, max |diff| {worst:.2e}", elapsed, 10.0)


def test_c05_selection_and_convexity():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    gen = WeightGenerator(16).eval()
    select_ok = convex_ok = True
    worst_sum = 0.0
    with torch.no_grad():
        for _ in range(1000):
            a, b = torch.randn(2, 2, 4, 5, 5).unbind(0)
            a[0, 0, 0, 0] = -b[0, 0, 0, 0]  # force a magnitude tie
            stacked = torch.stack([a, b])
            pick = stacked.abs().argmax(0)  # first index wins ties
            oracle = torch.gather(stacked, 0, pick[None])[0]
            select_ok &= torch.equal(select_by_magnitude(a, b), oracle)

            bank = extract_edges(torch.rand(1, 2, 5, 5, dtype=torch.float64))
            weights = gen(bank.float().flatten(1, 2))
            worst_sum = max(worst_sum, float((weights.sum(1) - 1).abs().max()))
            out = integrate_edges(bank, weights.double())
            convex_ok &= bool(torch.all(out >= bank.amin(1) - 1e-12) and torch.all(out <= bank.amax(1) + 1e-12))
    elapsed = time.perf_counter() - t0
    sums_ok = worst_sum <= 1e-6
    detail = f"argmax-of-abs={select_ok}, within [min,max]={convex_ok}, max |sum-1| {worst_sum:.1e}"
    report(5, "selection and convexity", {"selection": select_ok, "convexity": convex_ok, "weights sum": sums_ok}, detail, elapsed, 5.0)


def test_c06_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    proj = lambda shape, seed: torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    errs = {}

    hpd = HpdNetwork().double().eval()
    x, rest = torch.rand(2, 1, 1, 32, 32, dtype=torch.float64).unbind(0)
    p1 = proj((1, 16, 32, 32), 1)
    fm_params = [hpd.fm.alpha_gen.weight, hpd.fm.beta_gen.weight, hpd.fm.sife[0][0].weight, hpd.fm.sife[1][0].weight]
    errs["FM"] = max_relative_error(lambda: (focus_modulate(x, rest, hpd) * p1).sum(), fm_params, count=24)

    block = MSFA(32, 32).double().eval()
    feat = torch.randn(1, 32, 12, 12, dtype=torch.float64)
    p2 = proj((1, 32, 12, 12), 2)
    msfa_params = [block.qkv3.weight, block.qkv7.weight, block.mix3.weight, block.mix7.weight]
    errs["MSFA"] = max_relative_error(lambda: (block(feat) * p2).sum(), msfa_params, count=24)

    wg = WeightGenerator(24).double()
    bank = torch.rand(1, 24, 16, 16, dtype=torch.float64)
    p3 = proj((1, 8, 16, 16), 3)
    wg_params = [wg.reduce.weight, wg.entry.weight, wg.head.weight, *(c.weight for c in wg.dilated)]
    errs["WG"] = max_relative_error(lambda: (wg(bank) * p3).sum(), wg_params, count=24)

    ffig = FfigNetwork().double().eval()
    img = torch.rand(2, 3, 12, 12, dtype=torch.float64)
    p4 = proj((2, 16, 12, 12), 4)
    efe_params = [ffig.edge_proj.weight, ffig.edge_proj.bias, ffig.src_feat[0].weight]
    errs["EFE"] = max_relative_error(lambda: (ffig.source_branch(img)[0] * p4).sum(), efe_params, count=24)

    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(6, "gradient checks", {k: v < 1e-3 for k, v in errs.items()}, f"max rel err {detail}", elapsed, 60.0)


def test_c07_synthesis_identity():
    t0 = time.perf_counter()
    worst = 0.0
    masks_ok = True
    for seed in range(100):
        sample = make_dataset(1, seed, size=256)[0]
        blurred = blur_variant(sample.gt_image, sample.blur_id)
        worst = max(worst, float(np.abs(sample.sources.sum(0) - (sample.gt_image + blurred)).max()))
        masks_ok &= np.array_equal(sample.gt_masks[1], 1 - sample.gt_masks[0])
    elapsed = time.perf_counter() - t0
    detail = f"max |I1+I2-(G+blur G)| {worst:.1e}, complementary labels={masks_ok}"
    report(7, "synthesis identity", {"sum<=1e-6": worst <= 1e-6, "labels": masks_ok}, detail, elapsed, 5.0)


def test_c08_toy_training_converges(tmp_path):
    t0 = time.perf_counter()
    samples = make_dataset(20, seed=0, size=256)
    cfg = TrainConfig(**TOY_CONFIG)
    train_stage("hpd", samples, cfg, tmp_path)
    losses, _ = read_loss_log(tmp_path, "hpd")
    accuracy = mask_accuracy(load_network(tmp_path, "hpd"), samples)
    train_stage("ffig", samples, cfg, tmp_path)
    net = load_network(tmp_path, "ffig")
    hpd = load_network(tmp_path, "hpd")
    gen_err = mean_err = 0.0
    for s in samples:
        stack = SourceStack(s.sources)
        hard = detect_hard_pixels([m for _, m in detect_focus(stack, hpd, tile_size=0)])
        gen_err += float(np.abs(generate_full_focus(stack, hard, net) - s.gt_image).mean()) / len(samples)
        mean_err += float(np.abs(s.sources.mean(0) - s.gt_image).mean()) / len(samples)
    elapsed = time.perf_counter() - t0
    ratio = losses[-1] / losses[0]
    checks = {"ce halves": ratio < 0.5, "accuracy>=0.9": accuracy >= 0.9, "F_g beats mean": gen_err < mean_err}
    detail = f"ce {losses[0]:.4f}->{losses[-1]:.4f} (x{ratio:.3f}), mask accuracy {accuracy:.4f}, L1 F_g {gen_err:.4f} vs mean {mean_err:.4f}"
    report(8, "toy training convergence", checks, detail, elapsed, 3 * 3600.0)


def test_c09_metric_anchors():
    t0 = time.perf_counter()
    samples = make_dataset(10, seed=0, size=256)
    f = samples[0].gt_image
    ssim_anchor = abs(q_ssim(f, np.stack([f, f])) - 2.0)
    p = torch.full((2, 64, 64), 0.5, dtype=torch.float64)
    g = (torch.rand(2, 64, 64, generator=torch.Generator().manual_seed(0)) < 0.5).double()
    ce_anchor = abs(float(ce_loss(p, g)) - math.log(2))
    abf_self = q_abf(f, np.stack([f, f]))
    wins = {"q_abf": 0, "q_mi": 0, "q_ssim": 0}
    for s in samples:
        average = s.sources.mean(0)
        for name, fn in (("q_abf", q_abf), ("q_mi", q_mi), ("q_ssim", q_ssim)):
            wins[name] += fn(s.gt_image, s.sources) >= fn(average, s.sources)
    elapsed = time.perf_counter() - t0
    checks = {
        "q_ssim(F,(F,F))=2": ssim_anchor <= 1e-6,
        "ce(0.5)=ln2": ce_anchor <= 1e-9,
        "q_abf self>=0.99": abf_self >= 0.99,
        **{f"{k} ordering>=9/10": v >= 9 for k, v in wins.items()},
    }
    detail = (
        f"|q_ssim-2| {ssim_anchor:.1e}, |ce-ln2| {ce_anchor:.1e}, q_abf self {abf_self:.4f}, "
        f"composite>=average wins: " + ", ".join(f"{k} {v}/10" for k, v in wins.items())
    )
    report(9, "metric anchors", checks, detail, elapsed, 60.0)


def _n_source_stack(n: int, seed: int, size: int = 64) -> SourceStack:
    """Each source is sharp on its own region of a random partition and blurred elsewhere."""
    gen = np.random.default_rng(seed)
    gt = synthetic_texture(size, size, gen)
    owner = np.zeros((size, size), int)
    for i in range(1, n):
        owner[random_contour_mask(size, size, seed * 10 + i) == 1] = i
    images = []
    for i in range(n):
        m = (owner == i)[..., None]
        images.append(np.where(m, gt, blur_rgb(gt, 1.0 + 2.0 * i / n)))
    return SourceStack.from_list(images)


def test_c10_single_pass_n_source_fusion(tmp_path):
    t0 = time.perf_counter()
    cfg = TrainConfig(batch_hpd=4, batch_ffig=2, lr=1e-3, decay_every=1000, seed=0)
    samples = make_dataset(4, seed=1, size=64)
    train_stage("hpd", samples, cfg, tmp_path, epochs=3)
    train_stage("ffig", samples, cfg, tmp_path, epochs=2)
    hpd, ffig = load_network(tmp_path, "hpd"), load_network(tmp_path, "ffig")
    calls = {"hpd": 0, "ffig": 0, "ffig_sources": []}
    hpd.register_forward_hook(lambda *_: calls.__setitem__("hpd", calls["hpd"] + 1))

    def _ffig_hook(_module, args, _out):
        calls["ffig"] += 1
        calls["ffig_sources"].append(args[0].shape[1])

    ffig.register_forward_hook(_ffig_hook)
    results = {}
    for n in (2, 3, 4, 6):
        calls.update(hpd=0, ffig=0, ffig_sources=[])
        stack = _n_source_stack(n, seed=n)
        out = fuse(stack, hpd, ffig).fused
        results[n] = (
            out.shape == stack.images.shape[1:]
            and calls["hpd"] == n
            and calls["ffig"] == 1
            and calls["ffig_sources"] == [n]
            and bool(np.isfinite(out).all())
        )
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"N={n} {'ok' if ok else 'bad'}" for n, ok in results.items())
    report(10, "N-ary single-pass fusion", {f"N={n}": ok for n, ok in results.items()}, detail + " (one detection per source, one generation pass)", elapsed, 30.0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
