import copy
import json
import math
import os

import numpy as np
import pytest
import torch

from blurvatar.config import default_config
from blurvatar.datagen import generate
from blurvatar.diffopt import TrainState
from blurvatar.errors import ParameterError
from blurvatar.metrics import (
    evaluate,
    luminance,
    psnr,
    ssim,
    union_crop,
    write_csv,
    write_report,
)


def reference_ssim(a, b, k1=0.01, k2=0.03):
    """Brute-force local-window oracle, independent of the vectorized path."""
    x = luminance(a) if a.ndim == 3 else a
    y = luminance(b) if b.ndim == 3 else b
    size, sigma = 11, 1.5
    ax = np.arange(size) - 5.0
    w1 = np.exp(-0.5 * (ax / sigma) ** 2)
    w1 /= w1.sum()
    win = np.outer(w1, w1)
    h, w = x.shape
    vals = []
    for r in range(h - size + 1):
        for c in range(w - size + 1):
            px = x[r:r + size, c:c + size]
            py = y[r:r + size, c:c + size]
            mx = (win * px).sum()
            my = (win * py).sum()
            sxx = (win * px * px).sum() - mx * mx
            syy = (win * py * py).sum() - my * my
            sxy = (win * px * py).sum() - mx * my
            vals.append(((2 * mx * my + k1 ** 2) * (2 * sxy + k2 ** 2))
                        / ((mx * mx + my * my + k1 ** 2) * (sxx + syy + k2 ** 2)))
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_is_inf(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(img, img.copy()) == math.inf

    def test_uniform_difference_20db(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        assert abs(psnr(a, b) - 20.0) < 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(8, 8, 3))
        b = rng.uniform(size=(8, 8, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(2)
        base = rng.uniform(0.3, 0.7, size=(16, 16, 3))
        noise = rng.normal(size=base.shape)
        values = [psnr(base, base + amp * noise) for amp in (0.01, 0.03, 0.1)]
        assert values[0] > values[1] > values[2]

    def test_crop_restricts_region(self):
        a = np.zeros((8, 8, 3))
        b = np.zeros((8, 8, 3))
        b[0, 0] = 1.0
        assert psnr(a, b, crop=(1, 8, 1, 8)) == math.inf
        assert psnr(a, b) < math.inf


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert abs(ssim(img, img.copy()) - 1.0) < 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=(14, 14, 3))
        b = rng.uniform(size=(14, 14, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_matches_brute_force_reference(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(15, 13, 3))
        b = np.clip(a + 0.15 * rng.normal(size=a.shape), 0, 1)
        assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-10

    def test_inverted_checkerboard_negative(self):
        tile = np.indices((16, 16)).sum(axis=0) % 2
        a = np.repeat(tile[:, :, None], 3, axis=2).astype(np.float64)
        b = 1.0 - a
        assert ssim(a, b) < 0.0

    def test_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = rng.uniform(size=(12, 12, 3))
            b = rng.uniform(size=(12, 12, 3))
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small_rejected(self):
        with pytest.raises(ParameterError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestUnionCrop:
    def test_pads_and_unions(self):
        a = np.zeros((32, 32, 3))
        b = np.zeros((32, 32, 3))
        a[10, 12] = 1.0
        b[15, 20] = 1.0
        r0, r1, c0, c1 = union_crop(a, b, pad=2, min_size=1)
        assert (r0, r1) == (8, 18)
        assert (c0, c1) == (10, 23)

    def test_background_only_falls_back_to_full(self):
        a = np.zeros((16, 16, 3))
        assert union_crop(a, a) == (0, 16, 0, 16)

    def test_minimum_size_for_ssim(self):
        a = np.zeros((32, 32, 3))
        a[16, 16] = 1.0
        r0, r1, c0, c1 = union_crop(a, a, pad=0)
        assert r1 - r0 >= 11 and c1 - c0 >= 11


@pytest.fixture(scope="module")
def eval_dataset(tmp_path_factory):
    cfg = default_config()
    cfg.motion.n_frames = 2
    cfg.datagen.t_gt = 3
    cfg.train.density = 80.0
    cfg.rig.width = cfg.rig.height = 48
    cfg.rig.fx = cfg.rig.fy = 45.0
    cfg.rig.cx = cfg.rig.cy = 24.0
    cfg.rig.n_train = 2
    cfg.rig.n_eval = 2
    root = tmp_path_factory.mktemp("evalds")
    generate(cfg, str(root))
    return cfg, str(root)


class TestEvaluate:
    def test_ground_truth_checkpoint_is_inf_everywhere(self, eval_dataset):
        _, root = eval_dataset
        gt = TrainState.load(os.path.join(root, "gt_checkpoint.json"))
        report = evaluate(gt, root)
        for rec in report["records"]:
            assert rec["psnr"] == math.inf
            assert abs(rec["ssim"] - 1.0) < 1e-9
        assert report["aggregate"]["psnr"] == math.inf
        assert report["middle"]["psnr"] == math.inf
        assert report["non_middle"]["psnr"] == math.inf

    def test_black_render_closed_form(self, eval_dataset):
        _, root = eval_dataset
        gt = TrainState.load(os.path.join(root, "gt_checkpoint.json"))
        black = copy.deepcopy(gt)
        with torch.no_grad():
            black.params["gauss.colors"] = torch.zeros_like(black.params["gauss.colors"])
        report = evaluate(black, root, timesteps=[0.5])
        from blurvatar.imgio import read_png

        man = json.load(open(os.path.join(root, "manifest.json")))
        rec = report["records"][0]
        gt_img = read_png(os.path.join(root, man["frames"][rec["camera"]][rec["frame"]]))
        crop = union_crop(gt_img, np.zeros_like(gt_img), pad=gt.config.eval.crop_pad)
        region = gt_img[crop[0]:crop[1], crop[2]:crop[3]]
        expected = 10.0 * math.log10(1.0 / float(np.mean(region ** 2)))
        assert abs(rec["psnr"] - expected) < 1e-9

    def test_empty_timesteps_empty_report(self, eval_dataset):
        _, root = eval_dataset
        gt = TrainState.load(os.path.join(root, "gt_checkpoint.json"))
        report = evaluate(gt, root, timesteps=[])
        assert report["records"] == []

    def test_aggregates_are_means(self, eval_dataset):
        _, root = eval_dataset
        gt = TrainState.load(os.path.join(root, "gt_checkpoint.json"))
        noisy = copy.deepcopy(gt)
        with torch.no_grad():
            rng = np.random.default_rng(0)
            noisy.params["gauss.means"] += torch.tensor(
                0.01 * rng.normal(size=tuple(noisy.params["gauss.means"].shape)), dtype=torch.float64)
        report = evaluate(noisy, root)
        vals = [r["psnr"] for r in report["records"]]
        assert all(math.isfinite(v) for v in vals)
        assert abs(report["aggregate"]["psnr"] - float(np.mean(vals))) < 1e-12
        mids = [r["psnr"] for r in report["records"] if r["s"] == 0.5]
        assert abs(report["middle"]["psnr"] - float(np.mean(mids))) < 1e-12

    def test_report_and_csv_files(self, eval_dataset, tmp_path):
        _, root = eval_dataset
        gt = TrainState.load(os.path.join(root, "gt_checkpoint.json"))
        report = evaluate(gt, root, timesteps=[0.5])
        out = tmp_path / "report.json"
        write_report(report, str(out))
        loaded = json.load(open(out))
        assert loaded["aggregate"]["psnr"] == "inf"
        assert loaded["lpips"] is None
        csv_path = tmp_path / "report.csv"
        write_csv(report, str(csv_path))
        lines = open(csv_path).read().strip().splitlines()
        assert lines[0] == "camera,frame,s,psnr,ssim"
        assert len(lines) == 1 + len(report["records"])
