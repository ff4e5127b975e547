"""Synthetic benchmark generator.

A procedurally animated avatar (per-joint sinusoids in absolute time) is
fitted per exposure frame onto spline control knots by collocation, so the
ground-truth motion is exactly representable by the model and continuous
across frame boundaries. Blurry observations average t_gt quantized subframe
renders; held-out cameras store the mid-exposure sharp frame. Everything is
derived from one seed and regenerates byte-identically.
"""

from __future__ import annotations

import json
import logging
import os

import numpy as np
import torch

from .avatar import Skeleton, load_skeleton, seed_gaussians
from .config import JointMotionConfig, RunConfig, config_to_dict
from .errors import ConfigError, DataError
from .imgio import quantize_f32, write_f32, write_png
from .motion import SplineBank, blend_weights, subframe_times
from .renderer import Camera, MotionState, render_at_times, render_sharp
from .diffopt import LBS_KEYS, NONRIGID_KEYS, TrainState, init_state, seed_streams_for

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ground-truth motion


class MotionScript:
    """Per-channel sinusoids over absolute capture time.

    channel value(t) = axis * amplitude * sin(2*pi*frequency*t + phase);
    exposures are contiguous, frame n covering [n*tau, (n+1)*tau), so the pose
    at the end of one frame is the pose at the start of the next.
    """

    def __init__(self, skeleton: Skeleton, joints: dict[str, JointMotionConfig],
                 root: JointMotionConfig, tau_s: float, n_frames: int):
        self.skeleton = skeleton
        self.tau_s = float(tau_s)
        self.n_frames = int(n_frames)
        self.root = root
        self.channels: list[JointMotionConfig | None] = [None] * skeleton.n_channels
        name_to_idx = {n: i for i, n in enumerate(skeleton.names)}
        for name, jm in joints.items():
            if name not in name_to_idx:
                raise ConfigError(f"motion script names unknown joint {name!r}")
            self.channels[name_to_idx[name]] = jm
        self.channels[skeleton.n_joints] = root  # trailing root-translation channel

    def pose_at(self, t_abs: float) -> np.ndarray:
        """Scripted pose (J_ch, 3) at absolute time t_abs seconds."""
        out = np.zeros((self.skeleton.n_channels, 3))
        for ch, jm in enumerate(self.channels):
            if jm is None or jm.amplitude == 0.0:
                continue
            axis = np.asarray(jm.axis, dtype=np.float64)
            norm = np.linalg.norm(axis)
            if norm > 0:
                axis = axis / norm
            out[ch] = axis * (jm.amplitude * np.sin(2.0 * np.pi * jm.frequency * t_abs + jm.phase))
        return out

    def frame_pose(self, frame: int, s: float) -> np.ndarray:
        return self.pose_at((frame + s) * self.tau_s)

    def to_dict(self) -> dict:
        def jm_dict(jm):
            return {"axis": list(jm.axis), "amplitude": jm.amplitude,
                    "frequency": jm.frequency, "phase": jm.phase}

        joints = {}
        for ch, jm in enumerate(self.channels[: self.skeleton.n_joints]):
            if jm is not None:
                joints[self.skeleton.names[ch]] = jm_dict(jm)
        return {"tau_s": self.tau_s, "n_frames": self.n_frames,
                "joints": joints, "root": jm_dict(self.root)}


def collocation_nodes(p: int) -> np.ndarray:
    """Times where the fitted spline must match the script: 0..1 inclusive."""
    if p == 1:
        return np.array([0.0])
    return np.arange(p, dtype=np.float64) / (p - 1)


def fit_spline_bank(script: MotionScript, p: int) -> torch.Tensor:
    """Knots (N_e, J_ch, P, 3) whose spline interpolates the script at the nodes.

    Nodes include both frame endpoints (for P >= 2), which carries the
    script's continuity across exposure boundaries onto the spline bank.
    """
    nodes = collocation_nodes(p)
    basis = np.stack([blend_weights(s, p) for s in nodes])   # (P, P)
    n_ch = script.skeleton.n_channels
    knots = np.zeros((script.n_frames, n_ch, p, 3))
    for n in range(script.n_frames):
        values = np.stack([script.frame_pose(n, s) for s in nodes])   # (P, J_ch, 3)
        sol = np.linalg.solve(basis, values.reshape(p, -1))
        knots[n] = sol.reshape(p, n_ch, 3).transpose(1, 0, 2)
    return torch.tensor(knots, dtype=torch.float64)


# ---------------------------------------------------------------------------
# rig


def build_rig(config: RunConfig) -> tuple[list[Camera], list[Camera]]:
    """Interleaved train/eval cameras on a circle around the subject."""
    rig = config.rig
    total = rig.n_train + rig.n_eval
    if total < 1:
        raise ConfigError("rig needs at least one camera")
    train_idx = {int(round(i * total / rig.n_train)) % total for i in range(rig.n_train)} if rig.n_train else set()
    target = np.asarray(rig.target, dtype=np.float64)
    train_cams, eval_cams = [], []
    for i in range(total):
        azimuth = 2.0 * np.pi * i / total
        eye = np.array([rig.radius_m * np.sin(azimuth), rig.cam_height_m, rig.radius_m * np.cos(azimuth)])
        cam = Camera.look_at(
            eye, target,
            fx=rig.fx, fy=rig.fy, cx=rig.cx, cy=rig.cy,
            width=rig.width, height=rig.height, near=rig.near,
            cam_id=f"c{i:02d}",
        )
        (train_cams if i in train_idx else eval_cams).append(cam)
    return train_cams, eval_cams


# ---------------------------------------------------------------------------
# ground-truth state


def build_gt_state(config: RunConfig, skeleton: Skeleton) -> tuple[TrainState, MotionScript]:
    """Ground-truth TrainState: seeded Gaussians, collocated spline, zero nets."""
    import copy

    config = copy.deepcopy(config)
    config.train.ablation = "none"  # the ground truth is always the full model
    streams = seed_streams_for(config.seed)
    script = MotionScript(skeleton, config.motion.joints, config.motion.root,
                          config.motion.tau_s, config.motion.n_frames)
    knots = fit_spline_bank(script, config.train.control_knots)
    gauss, base_weights = seed_gaussians(skeleton, config.train.density,
                                         streams["gt_gaussians"], jitter=config.train.jitter)
    shape = config.datagen.shape_sigma * streams["shape"].normal(size=skeleton.n_joints)
    params: dict[str, torch.Tensor] = {
        "gauss.means": gauss.means,
        "gauss.quats": gauss.quats,
        "gauss.log_scales": gauss.log_scales,
        "gauss.opacity_logits": gauss.opacity_logits,
        "gauss.colors": gauss.colors,
        "motion.knots": knots,
        "shape.log_scales": torch.tensor(shape, dtype=torch.float64),
    }
    from .motion import nonrigid_init
    from .avatar import lbs_net_init

    for key, tensor in zip(NONRIGID_KEYS, nonrigid_init(streams["nonrigid"], zero_last=True)):
        params[key] = torch.zeros_like(tensor)
    for key, tensor in zip(LBS_KEYS, lbs_net_init(skeleton.n_joints, streams["lbs"], zero_last=True)):
        params[key] = torch.zeros_like(tensor)
    state = TrainState(params, config, skeleton, streams["train"])
    state.base_weights = base_weights
    return state, script


# ---------------------------------------------------------------------------
# generation


def generate(config: RunConfig, out_dir: str, float_dump: bool | None = None) -> dict:
    """Write a full dataset directory and return its manifest."""
    if float_dump is None:
        float_dump = config.datagen.float_dump
    skeleton = load_skeleton(config.skeleton)
    state, script = build_gt_state(config, skeleton)
    train_cams, eval_cams = build_rig(config)
    avatar = state.avatar()
    mot = state.motion_state()
    bg = np.zeros(3)
    n_frames = config.motion.n_frames
    t_gt = config.datagen.t_gt
    times = subframe_times(t_gt)

    os.makedirs(out_dir, exist_ok=True)
    skeleton.save(os.path.join(out_dir, "skeleton.json"))
    frames: dict[str, list[str]] = {}
    with torch.no_grad():
        for cam in train_cams:
            cam_dir = os.path.join(out_dir, "images", cam.cam_id)
            os.makedirs(cam_dir, exist_ok=True)
            if float_dump:
                os.makedirs(os.path.join(cam_dir, "subframes"), exist_ok=True)
            rels = []
            for fi in range(n_frames):
                acc = np.zeros((cam.height, cam.width, 3))
                for ti, s in enumerate(times):
                    sub = render_sharp(avatar, mot, fi, s, cam, bg).image.numpy()
                    sub = quantize_f32(sub)
                    acc += sub
                    if float_dump:
                        write_f32(os.path.join(cam_dir, "subframes", f"{fi:04d}_t{ti:02d}.f32"), sub)
                blur = quantize_f32(acc / t_gt)
                rel = os.path.join("images", cam.cam_id, f"{fi:04d}.png")
                write_png(os.path.join(out_dir, rel), blur)
                if float_dump:
                    write_f32(os.path.join(cam_dir, f"{fi:04d}.f32"), blur)
                rels.append(rel)
            frames[cam.cam_id] = rels
        for cam in eval_cams:
            cam_dir = os.path.join(out_dir, "images", cam.cam_id)
            os.makedirs(cam_dir, exist_ok=True)
            rels = []
            for fi in range(n_frames):
                sharp = quantize_f32(render_sharp(avatar, mot, fi, 0.5, cam, bg).image.numpy())
                rel = os.path.join("images", cam.cam_id, f"{fi:04d}.png")
                write_png(os.path.join(out_dir, rel), sharp)
                if float_dump:
                    write_f32(os.path.join(cam_dir, f"{fi:04d}.f32"), sharp)
                rels.append(rel)
            frames[cam.cam_id] = rels

        # coarse poses: mid-exposure spline pose plus seeded noise
        streams = seed_streams_for(config.seed)
        coarse_rng = streams["coarse"]
        bank = state.bank()
        coarse = np.zeros((n_frames, skeleton.n_channels, 3))
        for fi in range(n_frames):
            pose = bank.pose(fi, 0.5).numpy().copy()
            pose[: skeleton.n_joints] += config.datagen.coarse_rot_sigma * coarse_rng.normal(
                size=(skeleton.n_joints, 3))
            pose[skeleton.n_joints] += config.datagen.coarse_trans_sigma * coarse_rng.normal(size=3)
            coarse[fi] = pose

    with open(os.path.join(out_dir, "coarse_poses.json"), "w", encoding="utf-8") as fh:
        json.dump({"poses": coarse.tolist()}, fh, sort_keys=True)
    state.save(os.path.join(out_dir, "gt_checkpoint.json"))

    manifest = {
        "version": 1,
        "skeleton": "skeleton.json",
        "background": [0.0, 0.0, 0.0],
        "n_frames": n_frames,
        "tau_s": config.motion.tau_s,
        "t_gt": t_gt,
        "seed": config.seed,
        "cameras": [dict(cam.to_dict(), role="train-blur") for cam in train_cams]
        + [dict(cam.to_dict(), role="eval-sharp") for cam in eval_cams],
        "frames": frames,
        "gt_checkpoint": "gt_checkpoint.json",
        "coarse_poses": "coarse_poses.json",
        "motion_script": script.to_dict(),
        "float_dump": bool(float_dump),
        "config": config_to_dict(config),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    logger.info("dataset written to %s (%d blur cams, %d eval cams, %d frames)",
                out_dir, len(train_cams), len(eval_cams), n_frames)
    return manifest


def blur_magnitude_sweep(config: RunConfig, out_dir: str, taus: list[float],
                         float_dump: bool | None = None) -> list[str]:
    """One dataset per exposure duration, sharing skeleton, rig and seed."""
    import copy

    if any(t <= 0 for t in taus):
        raise ConfigError("exposure durations must be positive")
    dirs = []
    for tau in taus:
        cfg = copy.deepcopy(config)
        cfg.motion.tau_s = float(tau)
        sub = os.path.join(out_dir, f"tau_{tau:.3f}")
        generate(cfg, sub, float_dump=float_dump)
        dirs.append(sub)
    return dirs


# ---------------------------------------------------------------------------
# gradient-check scene


def gradcheck_skeleton() -> Skeleton:
    return Skeleton(
        names=["base", "tip"],
        parents=[-1, 0],
        rest_offsets=np.array([[0.0, 0.2, 0.0], [0.25, 0.0, 0.0]]),
        bone_radii=np.array([0.05, 0.05]),
        palette=np.array([[0.8, 0.3, 0.3], [0.3, 0.5, 0.8]]),
    )


def build_gradcheck_scene(config: RunConfig):
    """Tiny two-joint scene with perturbed parameters and nonzero residuals.

    The observed images come from a differently perturbed twin so that the
    photometric loss (and hence every gradient) is well away from zero.

    Finite differences and the frozen-decision backward only agree where the
    loss is smooth, so the scene keeps every pixel strictly inside every
    Gaussian's 3-sigma ellipse (large soft blobs over a small window) and
    keeps accumulated opacity low enough that the transmittance floor is
    never approached: no +-h probe can flip an inclusion decision.
    """
    import copy

    from .diffopt import Dataset, training_times

    gc = config.gradcheck
    cfg = copy.deepcopy(config)
    cfg.train.subframes = 2
    cfg.train.density = gc.n_gaussians / 0.25  # one bone of length 0.25 m
    cfg.train.ablation = "none"
    cfg.motion.n_frames = 2
    skeleton = gradcheck_skeleton()
    size = gc.image_size
    cams = [
        Camera.look_at(np.array([0.0, 0.25, -0.85]), np.array([0.12, 0.2, 0.0]),
                       fx=1.6 * size, fy=1.6 * size, cx=size / 2, cy=size / 2,
                       width=size, height=size, cam_id="g00"),
        Camera.look_at(np.array([0.75, 0.3, 0.4]), np.array([0.12, 0.2, 0.0]),
                       fx=1.6 * size, fy=1.6 * size, cx=size / 2, cy=size / 2,
                       width=size, height=size, cam_id="g01"),
    ]
    rng = np.random.Generator(np.random.PCG64(config.seed + 12345))
    base_pose = np.zeros((2, skeleton.n_channels, 3))

    def perturbed_state() -> TrainState:
        streams = seed_streams_for(config.seed)
        st = init_state(cfg, skeleton, base_pose, streams, zero_nets=False)
        with torch.no_grad():
            for key in st.params:
                jolt = 0.04 * rng.normal(size=tuple(st.params[key].shape))
                st.params[key] = st.params[key] + torch.tensor(jolt, dtype=torch.float64)
            # big soft blobs: 3-sigma footprints cover the whole image window
            n = st.n_gaussians
            st.params["gauss.log_scales"] = torch.tensor(
                np.log(0.32) + 0.08 * rng.normal(size=(n, 3)), dtype=torch.float64)
            st.params["gauss.opacity_logits"] = torch.tensor(
                -0.4 + 0.2 * rng.normal(size=n), dtype=torch.float64)
            st.params["gauss.colors"] = torch.tensor(
                rng.uniform(0.2, 0.8, size=(n, 3)), dtype=torch.float64)
        return st

    target = perturbed_state()
    state = perturbed_state()
    observed = {}
    avatar = target.avatar()
    mot = target.motion_state()
    with torch.no_grad():
        for cam in cams:
            for fi in range(2):
                blur, _ = render_at_times(avatar, mot, fi, training_times(cfg.train.subframes), cam, np.zeros(3))
                observed[(cam.cam_id, fi)] = blur.detach()
    dataset = Dataset(
        manifest={}, root="", skeleton=skeleton,
        train_cameras=cams, eval_cameras=[],
        observed=observed, coarse_poses=base_pose, background=np.zeros(3),
    )
    return state, dataset
