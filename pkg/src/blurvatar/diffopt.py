"""Losses, Adam, adaptive density control, the training loop, and gradient checking.

All optimizable parameters live in a flat name -> tensor map inside TrainState
together with their Adam moments; the whole state round-trips through a JSON
checkpoint with full float precision, so identical seeds produce byte-identical
checkpoints and training can resume exactly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import motion as motion_mod
from .avatar import (
    CanonicalAvatar,
    GaussianParams,
    Skeleton,
    lbs_net_init,
    seed_gaussians,
)
from .config import RunConfig, config_from_dict, config_to_dict
from .errors import ConfigError, DataError, GradientError, ParameterError
from .motion import IndependentBank, SplineBank, inter_frame_reg, nonrigid_init, subframe_times
from .renderer import Camera, MotionState, render_at_times, render_sharp

logger = logging.getLogger(__name__)

NONRIGID_KEYS = tuple(f"nonrigid.{w}{k}" for k in range(3) for w in ("w", "b"))
LBS_KEYS = tuple(f"lbs.{w}{k}" for k in range(3) for w in ("w", "b"))

# parameter name -> learning-rate group
LR_GROUP = {
    "gauss.means": "means",
    "gauss.quats": "quats",
    "gauss.log_scales": "log_scales",
    "gauss.opacity_logits": "opacity",
    "gauss.colors": "colors",
    "motion.knots": "knots",
    "shape.log_scales": "shape",
    **{k: "nonrigid" for k in NONRIGID_KEYS},
    **{k: "lbs" for k in LBS_KEYS},
}


@dataclass
class LossReport:
    total: float
    l1: float
    reg: float
    lambda_reg: float
    per_camera: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "l1": self.l1,
            "reg": self.reg,
            "lambda_reg": self.lambda_reg,
            "per_camera": self.per_camera,
        }


def photometric_loss(rendered: torch.Tensor, observed: torch.Tensor, crop=None) -> torch.Tensor:
    """Mean absolute difference over (optionally cropped) pixels and channels."""
    if rendered.shape != observed.shape:
        raise ParameterError(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(observed.shape)}")
    if crop is not None:
        r0, r1, c0, c1 = crop
        rendered = rendered[r0:r1, c0:c1]
        observed = observed[r0:r1, c0:c1]
    return torch.mean(torch.abs(rendered - observed))


class TrainState:
    """All optimizable parameters plus Adam moments, iteration counter and RNG."""

    def __init__(self, params: dict[str, torch.Tensor], config: RunConfig,
                 skeleton: Skeleton, rng: np.random.Generator, iteration: int = 0):
        self.params = params
        self.config = config
        self.skeleton = skeleton
        self.rng = rng
        self.iteration = iteration
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}
        # base skin weights are derived data (not optimized) but persist exactly
        self.base_weights = torch.full(
            (params["gauss.means"].shape[0], skeleton.n_joints), 1.0 / skeleton.n_joints, dtype=torch.float64
        )
        # densification accumulators
        self.grad_accum = torch.zeros(params["gauss.means"].shape[0], dtype=torch.float64)
        self.grad_count = torch.zeros(params["gauss.means"].shape[0], dtype=torch.float64)

    # -- views -------------------------------------------------------------

    @property
    def n_gaussians(self) -> int:
        return self.params["gauss.means"].shape[0]

    def optimized_keys(self) -> list[str]:
        ablation = self.config.train.ablation
        keys = list(self.params.keys())
        if ablation == "no-nonrigid":
            keys = [k for k in keys if not k.startswith("nonrigid.")]
        if ablation == "no-lbs-opt":
            keys = [k for k in keys if not k.startswith("lbs.")]
        if ablation == "no-shape-opt":
            keys = [k for k in keys if not k.startswith("shape.")]
        return keys

    def bank(self):
        if self.config.train.ablation == "no-interp":
            return IndependentBank(self.params["motion.knots"])
        return SplineBank(self.params["motion.knots"])

    def motion_state(self) -> MotionState:
        nonrigid = None
        if self.config.train.ablation != "no-nonrigid":
            nonrigid = [self.params[k] for k in NONRIGID_KEYS]
        return MotionState(bank=self.bank(), nonrigid=nonrigid, sigma_disp=self.config.train.sigma_disp)

    def avatar(self) -> CanonicalAvatar:
        lbs = None
        if self.config.train.ablation != "no-lbs-opt":
            lbs = [self.params[k] for k in LBS_KEYS]
        g = GaussianParams(
            means=self.params["gauss.means"],
            quats=self.params["gauss.quats"],
            log_scales=self.params["gauss.log_scales"],
            opacity_logits=self.params["gauss.opacity_logits"],
            colors=self.params["gauss.colors"],
        )
        return CanonicalAvatar(
            skeleton=self.skeleton,
            shape_log_scales=self.params["shape.log_scales"],
            gaussians=g,
            base_weights=self.base_weights,
            lbs_net=lbs,
        )

    # -- checkpointing -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "config": config_to_dict(self.config),
            "skeleton": self.skeleton.to_dict(),
            "iteration": self.iteration,
            "rng_seed": self.config.seed,
            "rng_state": self.rng.bit_generator.state,
            "params": {k: {"shape": list(v.shape), "data": v.detach().reshape(-1).tolist()}
                       for k, v in self.params.items()},
            "adam_m": {k: v.reshape(-1).tolist() for k, v in self.m.items()},
            "adam_v": {k: v.reshape(-1).tolist() for k, v in self.v.items()},
            "base_weights": {"shape": list(self.base_weights.shape),
                             "data": self.base_weights.reshape(-1).tolist()},
            "grad_accum": self.grad_accum.tolist(),
            "grad_count": self.grad_count.tolist(),
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainState":
        if data.get("version") != 1:
            raise DataError(f"unsupported checkpoint version {data.get('version')!r}")
        config = config_from_dict(data["config"])
        skeleton = Skeleton.from_dict(data["skeleton"])
        params = {}
        for k, spec in data["params"].items():
            params[k] = torch.tensor(spec["data"], dtype=torch.float64).reshape(spec["shape"])
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = data["rng_state"]
        state = cls(params, config, skeleton, rng, iteration=data["iteration"])
        for k in params:
            state.m[k] = torch.tensor(data["adam_m"][k], dtype=torch.float64).reshape(params[k].shape)
            state.v[k] = torch.tensor(data["adam_v"][k], dtype=torch.float64).reshape(params[k].shape)
        bw = data["base_weights"]
        state.base_weights = torch.tensor(bw["data"], dtype=torch.float64).reshape(bw["shape"])
        state.grad_accum = torch.tensor(data["grad_accum"], dtype=torch.float64)
        state.grad_count = torch.tensor(data["grad_count"], dtype=torch.float64)
        return state

    @classmethod
    def load(cls, path: str) -> "TrainState":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except FileNotFoundError as exc:
            raise DataError(f"missing checkpoint: {path}") from exc


def init_state(config: RunConfig, skeleton: Skeleton, coarse_poses: np.ndarray,
               seed_streams: dict[str, np.random.Generator],
               shape_log_scales: np.ndarray | None = None,
               zero_nets: bool = True) -> TrainState:
    """Fresh TrainState: seeded Gaussians, constant splines at the coarse poses.

    coarse_poses: (N_e, J_ch, 3). Nets start zeroed (identity) unless a
    gradient-check scene asks otherwise.
    """
    tc = config.train
    gauss, base_weights = seed_gaussians(skeleton, tc.density, seed_streams["gaussians"], jitter=tc.jitter)
    poses = torch.tensor(coarse_poses, dtype=torch.float64)
    if tc.ablation == "no-interp":
        bank_knots = IndependentBank.constant(poses, tc.subframes).knots
    else:
        bank_knots = SplineBank.constant(poses, tc.control_knots).knots
    params: dict[str, torch.Tensor] = {
        "gauss.means": gauss.means,
        "gauss.quats": gauss.quats,
        "gauss.log_scales": gauss.log_scales,
        "gauss.opacity_logits": gauss.opacity_logits,
        "gauss.colors": gauss.colors,
        "motion.knots": bank_knots,
    }
    nonrigid = nonrigid_init(seed_streams["nonrigid"], zero_last=zero_nets)
    for key, tensor in zip(NONRIGID_KEYS, nonrigid):
        params[key] = tensor
    lbs = lbs_net_init(skeleton.n_joints, seed_streams["lbs"], zero_last=zero_nets)
    for key, tensor in zip(LBS_KEYS, lbs):
        params[key] = tensor
    if shape_log_scales is None:
        shape_log_scales = np.zeros(skeleton.n_joints)
    params["shape.log_scales"] = torch.tensor(shape_log_scales, dtype=torch.float64)
    state = TrainState(params, config, skeleton, seed_streams["train"])
    state.base_weights = base_weights
    return state


def seed_streams_for(seed: int) -> dict[str, np.random.Generator]:
    """Independent, reproducible RNG streams derived from one seed."""
    names = ("gaussians", "nonrigid", "lbs", "train", "coarse", "shape", "gt_gaussians")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.Generator(np.random.PCG64(seq)) for name, seq in zip(names, children)}


def backward(loss: torch.Tensor, state: TrainState,
             extra_inputs: list[torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Reverse-accumulate the loss into a gradient per optimized parameter.

    Parameters untouched by the loss (culled Gaussians, frozen groups) get
    exact zeros. Non-finite gradients abort with the offending group's name.
    """
    keys = state.optimized_keys()
    inputs = [state.params[k] for k in keys] + list(extra_inputs or [])
    grads = torch.autograd.grad(loss, inputs, allow_unused=True, materialize_grads=True)
    out: dict[str, torch.Tensor] = {}
    for k, g in zip(keys, grads[: len(keys)]):
        if not bool(torch.isfinite(g).all()):
            raise GradientError(k)
        out[k] = g
    if extra_inputs:
        out["__extra__"] = grads[len(keys):]  # type: ignore[assignment]
    return out


def adam_step(state: TrainState, grads: dict[str, torch.Tensor], lr_overrides: dict | None = None) -> None:
    """In-place Adam update with bias correction on every optimized group.

    The Gaussian-mean rate decays exponentially to means_final_mult of its
    initial value over the configured run length.
    """
    tc = state.config.train
    b1, b2, eps = tc.adam_beta1, tc.adam_beta2, tc.adam_eps
    t = state.iteration + 1
    lrs = {
        "means": tc.lrs.means * tc.lrs.means_final_mult ** (state.iteration / max(tc.iterations, 1)),
        "quats": tc.lrs.quats,
        "log_scales": tc.lrs.log_scales,
        "opacity": tc.lrs.opacity,
        "colors": tc.lrs.colors,
        "knots": tc.lrs.knots,
        "nonrigid": tc.lrs.nonrigid,
        "lbs": tc.lrs.lbs,
        "shape": tc.lrs.shape,
    }
    if lr_overrides:
        lrs.update(lr_overrides)
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    with torch.no_grad():
        for key, g in grads.items():
            if key == "__extra__":
                continue
            lr = lrs[LR_GROUP[key]]
            m = state.m[key]
            v = state.v[key]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bias1
            v_hat = v / bias2
            state.params[key].sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))


def _rebuild_gaussians(state: TrainState, keep: torch.Tensor,
                       new_rows: dict[str, torch.Tensor], new_weights: torch.Tensor | None) -> None:
    """Apply a prune/densify edit: keep rows, then append new ones with zero moments."""
    gauss_keys = ["gauss.means", "gauss.quats", "gauss.log_scales", "gauss.opacity_logits", "gauss.colors"]
    for k in gauss_keys:
        kept = state.params[k][keep]
        added = new_rows.get(k)
        state.params[k] = torch.cat([kept, added]) if added is not None else kept
        m_kept, v_kept = state.m[k][keep], state.v[k][keep]
        if added is not None:
            state.m[k] = torch.cat([m_kept, torch.zeros_like(added)])
            state.v[k] = torch.cat([v_kept, torch.zeros_like(added)])
        else:
            state.m[k], state.v[k] = m_kept, v_kept
    bw_kept = state.base_weights[keep]
    state.base_weights = torch.cat([bw_kept, new_weights]) if new_weights is not None else bw_kept
    n = state.params["gauss.means"].shape[0]
    state.grad_accum = torch.zeros(n, dtype=torch.float64)
    state.grad_count = torch.zeros(n, dtype=torch.float64)


def density_control(state: TrainState) -> dict:
    """Clone, split and prune Gaussians based on accumulated screen-space gradients.

    Returns a summary dict {cloned, split, pruned}. Cloned/split Gaussians get
    zero-initialized Adam moments; the accumulators reset afterwards.
    """
    dc = state.config.train.densify
    with torch.no_grad():
        scales = torch.clamp(torch.exp(state.params["gauss.log_scales"]), max=1.0)
        max_scale = scales.max(dim=-1).values
        opacity = torch.sigmoid(state.params["gauss.opacity_logits"])
        mean_grad = state.grad_accum / torch.clamp(state.grad_count, min=1.0)

        prune = (opacity < dc.prune_opacity) | (max_scale > dc.prune_scale)
        high_grad = (mean_grad > dc.grad_threshold) & ~prune
        room = max(dc.max_gaussians - state.n_gaussians, 0)
        clone = high_grad & (max_scale < dc.scale_threshold)
        split = high_grad & (max_scale >= dc.scale_threshold)
        n_new = int(clone.sum()) + int(split.sum())
        if n_new > room:
            logger.info("density control: at cap (%d), skipping densification", dc.max_gaussians)
            clone = torch.zeros_like(clone)
            split = torch.zeros_like(split)

        new_rows: dict[str, torch.Tensor] = {}
        new_weights = None
        pieces = {k: [] for k in ("gauss.means", "gauss.quats", "gauss.log_scales",
                                  "gauss.opacity_logits", "gauss.colors")}
        weight_pieces = []
        if bool(clone.any()):
            idx = torch.nonzero(clone, as_tuple=False).squeeze(-1)
            for k in pieces:
                pieces[k].append(state.params[k][idx].clone())
            weight_pieces.append(state.base_weights[idx].clone())
        if bool(split.any()):
            idx = torch.nonzero(split, as_tuple=False).squeeze(-1)
            # children sample inside the parent and shrink; the parent row is dropped
            parent_scales = scales[idx]
            from .avatar import quat_normalize, quat_to_rotation

            rot = quat_to_rotation(quat_normalize(state.params["gauss.quats"][idx]))
            for _ in range(2):
                local = torch.tensor(
                    state.rng.normal(size=(idx.shape[0], 3)), dtype=torch.float64
                ) * parent_scales
                offset = torch.einsum("nab,nb->na", rot, local)
                pieces["gauss.means"].append(state.params["gauss.means"][idx] + offset)
                pieces["gauss.quats"].append(state.params["gauss.quats"][idx].clone())
                pieces["gauss.log_scales"].append(
                    state.params["gauss.log_scales"][idx] - np.log(dc.split_factor)
                )
                pieces["gauss.opacity_logits"].append(state.params["gauss.opacity_logits"][idx].clone())
                pieces["gauss.colors"].append(state.params["gauss.colors"][idx].clone())
                weight_pieces.append(state.base_weights[idx].clone())
        if weight_pieces:
            for k in pieces:
                new_rows[k] = torch.cat(pieces[k])
            new_weights = torch.cat(weight_pieces)

        keep = ~(prune | split)
        summary = {"cloned": int(clone.sum()), "split": int(split.sum()), "pruned": int(prune.sum())}
        if bool(prune.any()) or bool(split.any()) or new_rows:
            _rebuild_gaussians(state, keep, new_rows if new_rows else {}, new_weights)
        else:
            state.grad_accum.zero_()
            state.grad_count.zero_()
        for k, tensor in state.params.items():
            if not bool(torch.isfinite(tensor).all()):
                raise GradientError(k, f"non-finite values in {k} after density control")
    return summary


@dataclass
class Dataset:
    """In-memory view of a generated dataset directory."""

    manifest: dict
    root: str
    skeleton: Skeleton
    train_cameras: list[Camera]
    eval_cameras: list[Camera]
    observed: dict[tuple[str, int], torch.Tensor]   # (camera_id, frame) -> blurry image
    coarse_poses: np.ndarray                        # (N_e, J_ch, 3)
    background: np.ndarray


def load_dataset(root: str) -> Dataset:
    import os

    from .imgio import read_png

    manifest_path = os.path.join(root, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing manifest: {manifest_path}") from exc
    skeleton = Skeleton.load(os.path.join(root, manifest["skeleton"]))
    train_cams, eval_cams = [], []
    for cd in manifest["cameras"]:
        cam = Camera.from_dict(cd)
        (train_cams if cd["role"] == "train-blur" else eval_cams).append(cam)
    observed = {}
    n_frames = manifest["n_frames"]
    for cam in train_cams:
        frames = manifest["frames"][cam.cam_id]
        if len(frames) != n_frames:
            raise DataError(f"camera {cam.cam_id}: expected {n_frames} frames, found {len(frames)}")
        for fi, rel in enumerate(frames):
            img = read_png(os.path.join(root, rel))
            observed[(cam.cam_id, fi)] = torch.tensor(img, dtype=torch.float64)
    with open(os.path.join(root, manifest["coarse_poses"]), "r", encoding="utf-8") as fh:
        coarse = np.array(json.load(fh)["poses"], dtype=np.float64)
    return Dataset(
        manifest=manifest,
        root=root,
        skeleton=skeleton,
        train_cameras=train_cams,
        eval_cameras=eval_cams,
        observed=observed,
        coarse_poses=coarse,
        background=np.array(manifest.get("background", [0.0, 0.0, 0.0])),
    )


def training_times(t: int) -> list[float]:
    """Subframe schedule for one blur composite; t=1 is the naive mid-exposure baseline."""
    if t == 1:
        return [0.5]
    return subframe_times(t)


def train_step(state: TrainState, dataset: Dataset, cam: Camera, frame: int) -> LossReport:
    """One optimization step on a single (camera, frame) pair."""
    tc = state.config.train
    for k in state.optimized_keys():
        state.params[k].requires_grad_(True)
    avatar = state.avatar()
    mot = state.motion_state()
    blur, outs = render_at_times(avatar, mot, frame, training_times(tc.subframes),
                                 cam, dataset.background)
    observed = dataset.observed[(cam.cam_id, frame)]
    l1 = photometric_loss(blur, observed)
    lam = 0.0 if tc.ablation == "no-reg" else tc.lambda_reg
    reg = inter_frame_reg(mot.bank)
    loss = l1 + lam * reg

    mean2d_tensors = [o.mean2d for o in outs if o.mean2d is not None]
    grads = backward(loss, state, mean2d_tensors)
    extra = grads.pop("__extra__", ())

    dc = tc.densify
    densify_active = dc.start <= state.iteration <= dc.end
    if densify_active and mean2d_tensors:
        with torch.no_grad():
            for out, g2d in zip([o for o in outs if o.mean2d is not None], extra):
                norms = torch.linalg.vector_norm(g2d, dim=-1)
                idx = torch.from_numpy(out.keep_idx)
                state.grad_accum.index_add_(0, idx, norms)
                state.grad_count.index_add_(0, idx, torch.ones_like(norms))

    adam_step(state, grads)
    for k in state.params:
        state.params[k] = state.params[k].detach()
    report = LossReport(
        total=float(loss.detach()),
        l1=float(l1.detach()),
        reg=float(reg.detach()),
        lambda_reg=lam,
        per_camera={cam.cam_id: float(l1.detach())},
    )
    return report


def train(dataset: Dataset, config: RunConfig, out_dir: str | None = None,
          resume: TrainState | None = None, log_hook=None) -> tuple[TrainState, list[dict]]:
    """Optimize an avatar against a dataset's blurry observations.

    Iterations sample (camera, frame) pairs round-robin. Returns the final
    state and the metric log (one entry per log_every iterations).
    """
    import os

    tc = config.train
    if resume is not None:
        state = resume
    else:
        streams = seed_streams_for(config.seed)
        state = init_state(config, dataset.skeleton, dataset.coarse_poses, streams)
    n_e = dataset.coarse_poses.shape[0]
    pairs = [(cam, fi) for fi in range(n_e) for cam in dataset.train_cameras]
    if not pairs:
        raise DataError("dataset has no (camera, frame) pairs to train on")
    dc = tc.densify
    log: list[dict] = []
    t_start = time.monotonic()
    while state.iteration < tc.iterations:
        cam, frame = pairs[state.iteration % len(pairs)]
        report = train_step(state, dataset, cam, frame)
        it = state.iteration
        densify_now = dc.start < it <= dc.end and (it - dc.start) % dc.every == 0
        if densify_now:
            summary = density_control(state)
            logger.info("iter %d density control: %s (now %d Gaussians)", it, summary, state.n_gaussians)
        state.iteration += 1
        if tc.log_every and (state.iteration % tc.log_every == 0 or state.iteration == 1):
            entry = {
                "iteration": state.iteration,
                "loss": report.total,
                "l1": report.l1,
                "reg": report.reg,
                "n_gaussians": state.n_gaussians,
                "wall_time_s": time.monotonic() - t_start,
            }
            if tc.eval_every and state.iteration % tc.eval_every == 0 and dataset.root:
                from .metrics import evaluate

                rep_eval = evaluate(state, dataset.root)
                entry["eval_psnr"] = rep_eval["aggregate"]["psnr"]
                entry["eval_ssim"] = rep_eval["aggregate"]["ssim"]
            log.append(entry)
            if log_hook:
                log_hook(entry)
        if out_dir and tc.checkpoint_every and state.iteration % tc.checkpoint_every == 0:
            state.save(os.path.join(out_dir, f"checkpoint_{state.iteration:06d}.json"))
    return state, log


# ---------------------------------------------------------------------------
# gradient checking


def _flat_params(state: TrainState) -> list[tuple[str, int]]:
    out = []
    for k in state.optimized_keys():
        out.extend((k, i) for i in range(state.params[k].numel()))
    return out


def gradcheck_loss(state: TrainState, dataset: Dataset) -> torch.Tensor:
    """Full-pipeline loss on every (camera, frame) pair of a tiny scene."""
    tc = state.config.train
    avatar = state.avatar()
    mot = state.motion_state()
    total = torch.zeros((), dtype=torch.float64)
    n_e = dataset.coarse_poses.shape[0]
    for cam in dataset.train_cameras:
        for frame in range(n_e):
            blur, _ = render_at_times(avatar, mot, frame, training_times(tc.subframes),
                                      cam, dataset.background)
            total = total + photometric_loss(blur, dataset.observed[(cam.cam_id, frame)])
    lam = 0.0 if tc.ablation == "no-reg" else tc.lambda_reg
    return total + lam * inter_frame_reg(mot.bank)


def analytic_gradients(state: TrainState, dataset: Dataset) -> dict[str, torch.Tensor]:
    for k in state.optimized_keys():
        state.params[k].requires_grad_(True)
    loss = gradcheck_loss(state, dataset)
    grads = backward(loss, state)
    for k in state.params:
        state.params[k] = state.params[k].detach()
    return grads


def gradcheck(config: RunConfig) -> dict:
    """Compare analytic gradients with central differences on a tiny scene.

    Samples config.gradcheck.n_samples parameters stratified across every
    group; reports per-group and overall max/median relative error. Passing
    means max relative error < config.gradcheck.max_rel_err.
    """
    from .datagen import build_gradcheck_scene

    state, dataset = build_gradcheck_scene(config)
    grads = analytic_gradients(state, dataset)
    h = config.gradcheck.step
    rng = np.random.Generator(np.random.PCG64(config.seed + 777))

    by_group: dict[str, list[tuple[str, int]]] = {}
    for k in state.optimized_keys():
        by_group.setdefault(LR_GROUP[k], []).append(k)
    all_entries = _flat_params(state)
    n_samples = min(config.gradcheck.n_samples, len(all_entries))
    chosen: list[tuple[str, int]] = []
    # at least two probes per group, the rest sampled uniformly
    for group, keys in sorted(by_group.items()):
        pool = [(k, i) for k in keys for i in range(state.params[k].numel())]
        take = min(2, len(pool))
        sel = rng.choice(len(pool), size=take, replace=False)
        chosen.extend(pool[int(i)] for i in sel)
    remaining = [e for e in all_entries if e not in set(chosen)]
    extra = max(n_samples - len(chosen), 0)
    if extra and remaining:
        sel = rng.choice(len(remaining), size=min(extra, len(remaining)), replace=False)
        chosen.extend(remaining[int(i)] for i in sel)

    records = []
    with torch.no_grad():
        for key, idx in chosen:
            flat = state.params[key].reshape(-1)
            orig = float(flat[idx])
            flat[idx] = orig + h
            loss_plus = float(gradcheck_loss(state, dataset))
            flat[idx] = orig - h
            loss_minus = float(gradcheck_loss(state, dataset))
            flat[idx] = orig
            fd = (loss_plus - loss_minus) / (2.0 * h)
            an = float(grads[key].reshape(-1)[idx])
            denom = max(abs(an), abs(fd))
            rel = 0.0 if denom < 1e-9 else abs(an - fd) / denom
            records.append({"param": key, "index": idx, "analytic": an, "fd": fd, "rel_err": rel})

    rels = np.array([r["rel_err"] for r in records])
    report = {
        "n_checked": len(records),
        "max_rel_err": float(rels.max()),
        "median_rel_err": float(np.median(rels)),
        "threshold": config.gradcheck.max_rel_err,
        "passed": bool(rels.max() < config.gradcheck.max_rel_err),
        "worst": sorted(records, key=lambda r: -r["rel_err"])[:10],
        "groups_checked": sorted({LR_GROUP[r["param"]] for r in records}),
    }
    return report
