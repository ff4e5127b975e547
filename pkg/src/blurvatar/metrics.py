"""Quantitative evaluation: PSNR, SSIM, bounding-box cropping and the held-out protocol.

Evaluation renders the model on every held-out sharp camera at the requested
sub-frame times, quantizes both sides to 8 bits (the storage precision of the
dataset), crops to the padded union bounding box of non-background pixels,
and aggregates per timestep. Ground truth at the middle timestep comes from
the stored files; other timesteps are rendered on demand from the dataset's
ground-truth checkpoint.
"""

from __future__ import annotations

import json
import logging
import math
import os

import numpy as np
import torch

from .config import config_to_dict
from .errors import DataError, ParameterError
from .imgio import from_uint8, quantize_f32, read_png, to_uint8

logger = logging.getLogger(__name__)

MIDDLE_S = 0.5


def psnr(a: np.ndarray, b: np.ndarray, crop=None) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when identical."""
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if crop is not None:
        r0, r1, c0, c1 = crop
        a = a[r0:r1, c0:c1]
        b = b[r0:r1, c0:c1]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a symmetric 1-D kernel."""
    from numpy.lib.stride_tricks import sliding_window_view

    rows = sliding_window_view(img, kernel.size, axis=0) @ kernel
    return sliding_window_view(rows, kernel.size, axis=1) @ kernel


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma."""
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM on luminance, 11x11 Gaussian window (sigma 1.5), range 1.0."""
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ParameterError(f"images must be at least 11x11 for SSIM, got {a.shape[:2]}")
    x = luminance(a) if a.ndim == 3 else a.astype(np.float64)
    y = luminance(b) if b.ndim == 3 else b.astype(np.float64)
    win = _gaussian_window()
    c1 = k1 ** 2
    c2 = k2 ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x * mu_x
    syy = _filter_valid(y * y, win) - mu_y * mu_y
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def union_crop(a: np.ndarray, b: np.ndarray, pad: int = 4, min_size: int = 11):
    """Padded bounding box of non-background (nonzero) pixels in either image.

    Returns (r0, r1, c0, c1), half-open. Falls back to the full image when both
    are background-only, and expands to at least min_size per side.
    """
    h, w = a.shape[:2]
    mask = (a.max(axis=-1) > 1e-9) | (b.max(axis=-1) > 1e-9)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return 0, h, 0, w
    r0 = max(int(rows[0]) - pad, 0)
    r1 = min(int(rows[-1]) + 1 + pad, h)
    c0 = max(int(cols[0]) - pad, 0)
    c1 = min(int(cols[-1]) + 1 + pad, w)
    while r1 - r0 < min_size and (r0 > 0 or r1 < h):
        r0 = max(r0 - 1, 0)
        r1 = min(r1 + 1, h)
    while c1 - c0 < min_size and (c0 > 0 or c1 < w):
        c0 = max(c0 - 1, 0)
        c1 = min(c1 + 1, w)
    return r0, r1, c0, c1


def _quantize8(img: np.ndarray) -> np.ndarray:
    # float32 snap first, mirroring the dataset writer's storage path bit-for-bit
    return from_uint8(to_uint8(quantize_f32(img)))


def _mean(values: list[float]) -> float:
    if not values:
        return math.nan
    return float(np.mean(values)) if all(math.isfinite(v) for v in values) else math.inf


def evaluate(state, manifest_dir: str, timesteps=None, crop_pad: int | None = None) -> dict:
    """Render the checkpointed model on every held-out camera and score it.

    Returns the EvalReport dict: per-record metrics, aggregate means, and the
    middle vs non-middle split. LPIPS is reserved as null for schema stability.
    """
    from .diffopt import TrainState
    from .renderer import Camera, render_sharp

    manifest_path = os.path.join(manifest_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing manifest: {manifest_path}") from exc
    if timesteps is None:
        timesteps = list(state.config.eval.timesteps)
    if crop_pad is None:
        crop_pad = state.config.eval.crop_pad
    eval_cams = [Camera.from_dict(cd) for cd in manifest["cameras"] if cd["role"] == "eval-sharp"]
    n_frames = manifest["n_frames"]
    bg = np.array(manifest.get("background", [0.0, 0.0, 0.0]))
    gt_state = TrainState.load(os.path.join(manifest_dir, manifest["gt_checkpoint"]))
    gt_avatar = gt_state.avatar()
    gt_motion = gt_state.motion_state()
    avatar = state.avatar()
    motion = state.motion_state()

    for cam in eval_cams:
        for rel in manifest["frames"][cam.cam_id]:
            if not os.path.exists(os.path.join(manifest_dir, rel)):
                raise DataError(f"missing evaluation image: {rel}")

    records = []
    with torch.no_grad():
        for cam in eval_cams:
            for fi in range(n_frames):
                for s in timesteps:
                    if s == MIDDLE_S:
                        gt = read_png(os.path.join(manifest_dir, manifest["frames"][cam.cam_id][fi]))
                    else:
                        gt = _quantize8(render_sharp(gt_avatar, gt_motion, fi, s, cam, bg).image.numpy())
                    rendered = _quantize8(render_sharp(avatar, motion, fi, s, cam, bg).image.numpy())
                    crop = union_crop(gt, rendered, pad=crop_pad)
                    records.append({
                        "camera": cam.cam_id,
                        "frame": fi,
                        "s": s,
                        "psnr": psnr(rendered, gt, crop=crop),
                        "ssim": ssim(rendered[crop[0]:crop[1], crop[2]:crop[3]],
                                     gt[crop[0]:crop[1], crop[2]:crop[3]]),
                    })

    middle = [r for r in records if r["s"] == MIDDLE_S]
    non_middle = [r for r in records if r["s"] != MIDDLE_S]
    per_camera = {}
    for cam in eval_cams:
        rs = [r for r in records if r["camera"] == cam.cam_id]
        if rs:
            per_camera[cam.cam_id] = {"psnr": _mean([r["psnr"] for r in rs]),
                                      "ssim": _mean([r["ssim"] for r in rs])}
    report = {
        "records": records,
        "aggregate": {"psnr": _mean([r["psnr"] for r in records]),
                      "ssim": _mean([r["ssim"] for r in records])},
        "middle": {"psnr": _mean([r["psnr"] for r in middle]),
                   "ssim": _mean([r["ssim"] for r in middle])},
        "non_middle": {"psnr": _mean([r["psnr"] for r in non_middle]),
                       "ssim": _mean([r["ssim"] for r in non_middle])},
        "per_camera": per_camera,
        "timesteps": list(timesteps),
        "lpips": None,
        "config": {"crop_pad": crop_pad, "run_config": config_to_dict(state.config)},
    }
    return report


def _json_safe(obj):
    """inf/nan become strings so the report stays strict JSON."""
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
        return obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def write_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(report), fh, sort_keys=True, indent=1)


def write_csv(report: dict, path: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["camera", "frame", "s", "psnr", "ssim"])
        for r in report["records"]:
            writer.writerow([r["camera"], r["frame"], r["s"], r["psnr"], r["ssim"]])
