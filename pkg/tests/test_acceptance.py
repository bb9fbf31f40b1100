"""Acceptance suite. Each test carries a ``criterion`` marker; the terminal
summary prints one pass/fail line per criterion."""
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from remake.cloud_lift import backproject, extract_object, project
from remake.metrics import compute_metrics, global_l1, masked_l1
from remake.net import ModelConfig, Variant, init_params, load_checkpoint
from remake.pipeline import (TrainConfig, ablate, build_dataset, build_shift_benchmark, evaluate,
                             predict_samples, train, with_preset)
from remake.region_atlas import classify_regions, region_stats
from remake.relative_depth import proxy_relative_depth
from remake.scene_forge import CameraIntrinsics, generate_scene, load_split, random_scene_spec

from conftest import gradient_check, random_inputs, sphere_spec
from test_metrics import brute_force

TARGET_RATIOS = {"REFRACTION": 0.6008, "REFLECTION": 0.1747, "NORMAL": 0.2245}
ABLATION_SEEDS = (0, 1, 2, 3, 4)


@pytest.mark.criterion(1, title="metric oracle equivalence")
def test_metric_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(120):
        gt = rng.uniform(0.2, 3.0, (16, 16))
        gt[rng.uniform(size=gt.shape) < 0.1] = 0.0
        pred = gt * rng.uniform(0.8, 1.2, gt.shape) + rng.normal(0, 0.01, gt.shape)
        pred[rng.uniform(size=gt.shape) < 0.05] = 0.0
        sel = rng.uniform(size=gt.shape) < 0.6
        sel[0, 0], gt[0, 0] = True, 1.0
        ref = brute_force(pred, gt, sel)
        rep = compute_metrics(pred, gt, sel)
        for k in ("rmse", "mae", "rel"):
            worst = max(worst, abs(getattr(rep, k) - ref[k]) / max(abs(ref[k]), 1e-300))
        for t, v in ref["delta"].items():
            worst = max(worst, abs(rep.delta[t] - v) / max(v, 1e-300) if v else abs(rep.delta[t]))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"120 pairs, max rel err {worst:.1e}, {elapsed:.2f}s")
    assert worst < 1e-9
    assert elapsed < 10


@pytest.mark.criterion(2, title="delta 1.01 boundary at 0.5 m")
def test_delta_boundary(record_property):
    gt = np.array([0.5])
    inside = compute_metrics(np.array([0.5049]), gt).delta[1.01]
    outside = compute_metrics(np.array([0.5051]), gt).delta[1.01]
    exact = compute_metrics(np.array([1.01]), np.array([1.0])).delta[1.01]
    record_property("detail", f"0.5049 -> {inside:.0f}%, 0.5051 -> {outside:.0f}%, ratio 1.01 -> {exact:.0f}%")
    assert inside == 100.0 and outside == 0.0 and exact == 0.0


@pytest.mark.criterion(3, title="gradient check (float64, 16x16)")
def test_gradient_check(record_property):
    t0 = time.perf_counter()
    cfg = ModelConfig(height=16, width=16)
    worst = {}
    for seed in (0, 1, 2):
        net = init_params(cfg, seed=seed, dtype=torch.float64)
        errs = gradient_check(net, random_inputs(cfg, seed=seed, batch=2), seed=seed)
        for g, e in errs.items():
            worst[g] = max(worst.get(g, 0.0), e)
    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{g} {e:.1e}" for g, e in worst.items()) + f", {elapsed:.1f}s")
    assert set(worst) == {"mask_encoder", "rel_encoder", "depth_encoder", "decoder"}
    assert max(worst.values()) < 1e-4
    assert elapsed < 120


@pytest.mark.slow
@pytest.mark.criterion(4, title="overfit capability (desk preset, 8 samples, 200 epochs)")
def test_overfit(tmp_path, record_property):
    t0 = time.perf_counter()
    ds = build_dataset(tmp_path / "ds", count=10, seed=4)
    samples = load_split(ds, "train")
    assert len(samples) == 8
    cfg = with_preset(TrainConfig(dataset=str(ds), loss="global", out_dir=str(tmp_path / "run")), "desk")
    cfg = replace(cfg, epochs=200)
    m = train(cfg, samples, [])
    net, _ = load_checkpoint(
        tmp_path / "run" / m.checkpoint)
    preds = predict_samples(net, samples, cfg)
    model_rmse = np.sqrt(np.mean(np.concatenate(
        [(p - s.depth_gt)[(s.mask > 0) & (s.depth_gt > 0)] ** 2 for p, s in zip(preds, samples)])))
    raw_rmse = np.sqrt(np.mean(np.concatenate(
        [(s.depth_raw - s.depth_gt)[(s.mask > 0) & (s.depth_gt > 0)] ** 2 for s in samples])))
    ratio = m.epoch_losses[-1] / m.epoch_losses[0]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"loss {m.epoch_losses[0]:.3f} -> {m.epoch_losses[-1]:.4f} ({100 * ratio:.1f}%), "
                              f"masked RMSE {model_rmse:.4f} vs raw {raw_rmse:.4f}, {elapsed:.0f}s")
    assert ratio < 0.2
    assert model_rmse < raw_rmse
    assert elapsed < 600


@pytest.mark.slow
@pytest.mark.criterion(5, title="ablation direction on the distribution-shift benchmark")
def test_ablation_direction(tmp_path, record_property):
    t0 = time.perf_counter()
    rows = []
    for seed in ABLATION_SEEDS:
        ds = build_shift_benchmark(tmp_path / f"shift{seed}", seed=seed)
        base = with_preset(TrainConfig(dataset=str(ds), seed=seed, out_dir=str(tmp_path / f"abl{seed}")), "desk")
        table = ablate(base, variants=(Variant.FULL, Variant.BLANK, Variant.NO_TRANS_DEPTH))
        rows.append({k: v.rmse for k, v in table.items()})
        print(f"seed {seed}: " + ", ".join(f"{k} {v:.4f}" for k, v in rows[-1].items()), flush=True)
    full_beats_blank = sum(r["full"] < r["blank"] for r in rows)
    ntd_worse = sum(r["no-trans-depth"] > r["full"] for r in rows)
    elapsed = time.perf_counter() - t0
    means = {k: np.mean([r[k] for r in rows]) for k in rows[0]}
    record_property("detail", f"full<blank {full_beats_blank}/5, no-trans-depth>full {ntd_worse}/5, "
                              + ", ".join(f"mean {k} {v:.4f}" for k, v in means.items())
                              + f", {elapsed / 60:.1f} min")
    assert full_beats_blank >= 4
    assert ntd_worse >= 3
    assert elapsed < 90 * 60


@pytest.mark.criterion(6, title="region pipeline round-trip")
def test_region_round_trip(record_property):
    agree, worst = 0, 0.0
    for seed in range(20):
        s = generate_scene(random_scene_spec(seed))
        rmap = classify_regions(s.depth_raw, s.depth_gt, s.mask)
        agree += int(np.array_equal(rmap.labels, s.region_labels))
        stats = region_stats(rmap, s.depth_gt, s.depth_gt)
        worst = max(worst, max(abs(stats[k].fraction - v) for k, v in TARGET_RATIOS.items()))
    big = generate_scene(sphere_spec())
    stats = region_stats(classify_regions(big.depth_raw, big.depth_gt, big.mask), big.depth_gt, big.depth_gt)
    worst_big = max(abs(stats[k].fraction - v) for k, v in TARGET_RATIOS.items())
    record_property("detail", f"{agree}/20 exact, max fraction error {worst:.3f} (32x32), "
                              f"{worst_big:.4f} ({int(big.mask.sum())} px object)")
    assert agree == 20
    assert worst <= 0.05 and worst_big <= 0.05


@pytest.mark.criterion(7, title="relative-depth affine invariance")
def test_affine_invariance(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        d = rng.uniform(0.2, 3.0, (24, 24))
        d[rng.uniform(size=d.shape) < 0.1] = 0.0
        a, b = rng.uniform(0.01, 100.0), rng.uniform(0.0, 10.0)
        moved = np.where(d > 0, a * d + b, 0.0)
        worst = max(worst, np.abs(proxy_relative_depth(moved).values - proxy_relative_depth(d).values).max())
    record_property("detail", f"50 trials, max diff {worst:.1e}")
    assert worst <= 1e-12


@pytest.mark.criterion(8, title="point-cloud round-trip")
def test_point_cloud_round_trip(record_property):
    rng = np.random.default_rng(8)
    K = CameraIntrinsics(fx=500.0, fy=510.0, cx=319.5, cy=239.5, width=640, height=480)
    depth = np.where(rng.uniform(size=(480, 640)) < 0.2, rng.uniform(0.1, 3.0, (480, 640)), 0.0)
    cloud = backproject(depth, K)
    pix_err = np.abs(project(cloud.points, K) - cloud.pixels).max()
    depth_exact = np.array_equal(cloud.points[:, 2], depth[cloud.pixels[:, 1], cloud.pixels[:, 0]])
    s = generate_scene(sphere_spec())
    obj = extract_object(s.depth_gt, s.mask, s.intrinsics)
    surf = sphere_spec().primitives[0].surface_distance(obj.points).max()
    record_property("detail", f"pixel err {pix_err:.1e}, depths exact {depth_exact}, "
                              f"sphere surface err {surf:.1e} over {len(obj)} points")
    assert pix_err < 1e-9 and depth_exact
    assert surf < 1e-6


@pytest.mark.criterion(9, title="loss-regime identities")
def test_loss_regime_identities(tmp_path, record_property):
    rng = np.random.default_rng(9)
    gt = torch.tensor(rng.uniform(0.2, 1.0, (4, 16, 16)))
    gt[0, 0, :4] = 0.0
    pred = torch.tensor(rng.uniform(0.2, 1.0, (4, 16, 16)))
    exact = global_l1(pred, gt).item() == masked_l1(pred, gt, torch.ones_like(gt)).item()

    ds = build_dataset(tmp_path / "ds", count=10, seed=9)
    samples = [replace(s, mask=np.ones_like(s.mask)) for s in load_split(ds, "train")]
    tiny = ModelConfig(dims=(16, 32), depths=(1, 1), heads=(1, 2), decoder_blocks=1, decoder_width=32)
    runs = {}
    for loss in ("global", "mask"):
        cfg = TrainConfig(dataset=str(ds), model=tiny, loss=loss, epochs=4, batch_size=4,
                          out_dir=str(tmp_path / loss))
        runs[loss] = train(cfg, samples, []).epoch_losses
    record_property("detail", f"loss values equal {exact}, traces equal {runs['global'] == runs['mask']}")
    assert exact
    assert runs["global"] == runs["mask"]


@pytest.mark.slow
@pytest.mark.criterion(10, title="end-to-end determinism of train + evaluate")
def test_end_to_end_determinism(tmp_path, record_property):
    ds = build_dataset(tmp_path / "ds", count=10, seed=10)
    tiny = ModelConfig(dims=(16, 32), depths=(1, 1), heads=(1, 2), decoder_blocks=1, decoder_width=32)
    outputs = []
    for run in ("a", "b"):
        cfg = TrainConfig(dataset=str(ds), model=tiny, epochs=5, batch_size=4, seed=3,
                          out_dir=str(tmp_path / run))
        m = train(cfg)
        evaluate(tmp_path / run / m.checkpoint, ds, out_dir=tmp_path / f"eval_{run}")
        outputs.append((tmp_path / f"eval_{run}" / "metrics.json").read_bytes())
    record_property("detail", f"metrics.json {len(outputs[0])} bytes, identical {outputs[0] == outputs[1]}")
    assert outputs[0] == outputs[1]
