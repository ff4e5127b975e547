"""Differentiable pinhole splatting and the exposure-averaging blur compositor.

Rendering assembles each posed Gaussian's world covariance R S S^T R^T,
projects it through the camera with the perspective Jacobian (plus a 0.3 px^2
low-pass dilation), depth-sorts, and alpha-blends per pixel. A blurry frame is
the plain average of T sharp renders at uniformly spaced sub-frame times.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .avatar import CanonicalAvatar, effective_weights, forward_kinematics, quat_normalize, quat_to_rotation, warp_gaussians
from .errors import ParameterError
from .motion import displace_pose, subframe_times
from .raster import blend_image

logger = logging.getLogger(__name__)

COV2D_DILATION = 0.3  # px^2 added to the projected covariance diagonal


@dataclass
class Camera:
    """Static pinhole camera, world-to-camera convention x-right / y-down / z-forward."""

    rotation: np.ndarray      # (3, 3) world -> camera
    translation: np.ndarray   # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    cam_id: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0 or self.near <= 0:
            raise ParameterError("focal lengths and near plane must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-8 or np.linalg.det(self.rotation) < 0:
            raise ParameterError("camera rotation must be orthonormal with det +1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), **kwargs) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        z = target - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, up)
        nx = np.linalg.norm(x)
        if nx < 1e-12:
            raise ParameterError("camera forward axis is parallel to the up vector")
        x = x / nx
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(rotation=rot, translation=-rot @ eye, **kwargs)

    def to_dict(self) -> dict:
        return {
            "id": self.cam_id,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.array(d["rotation"]), translation=np.array(d["translation"]),
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"], near=d.get("near", 0.1),
            cam_id=d.get("id", ""),
        )


def assemble_covariance(quats: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """World covariance R S S^T R^T from (N, 4) quaternions and (N, 3) log-scales.

    Quaternions are normalized first; scales are exp-mapped and clamped to at
    most 1 meter.
    """
    rot = quat_to_rotation(quat_normalize(quats))
    scales = torch.clamp(torch.exp(log_scales), max=1.0)
    m = rot * scales[:, None, :]
    return m @ m.transpose(-1, -2)


def project_gaussians(means: torch.Tensor, cov3d: torch.Tensor, cam: Camera):
    """Project posed Gaussians; returns (mean2d, cov2d, depth, keep_idx).

    Gaussians at depth <= near are culled. cov2d includes the low-pass
    dilation, so it is positive definite whenever the input covariance is PSD.
    """
    rot = torch.as_tensor(cam.rotation, dtype=means.dtype)
    trans = torch.as_tensor(cam.translation, dtype=means.dtype)
    p_cam = means @ rot.T + trans
    keep = p_cam[:, 2] > cam.near
    keep_idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    p = p_cam[keep_idx]
    if p.shape[0] == 0:
        empty = torch.zeros((0,), dtype=means.dtype)
        return empty.reshape(0, 2), empty.reshape(0, 2, 2), empty, keep_idx
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    inv_z = 1.0 / z
    mean2d = torch.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], dim=-1)
    zero = torch.zeros_like(z)
    j_row0 = torch.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z * inv_z], dim=-1)
    j_row1 = torch.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], dim=-1)
    jac = torch.stack([j_row0, j_row1], dim=-2)          # (M, 2, 3)
    jw = jac @ rot
    cov2d = jw @ cov3d[keep_idx] @ jw.transpose(-1, -2)
    cov2d = cov2d + COV2D_DILATION * torch.eye(2, dtype=means.dtype)
    return mean2d, cov2d, z, keep_idx


def _conic(cov2d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of 2x2 covariances packed as (a, b, c); also returns the determinant."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    inv_det = 1.0 / det
    return torch.stack([c * inv_det, -b * inv_det, a * inv_det], dim=-1), det


@dataclass
class PosedGaussians:
    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor


@dataclass
class RasterOut:
    """Rendered image plus the per-render hooks density control needs."""

    image: torch.Tensor               # (H, W, 3), unclamped accumulation
    mean2d: torch.Tensor | None       # (M, 2) screen positions of kept Gaussians
    keep_idx: np.ndarray | None       # global indices of the kept Gaussians


def rasterize(posed: PosedGaussians, cam: Camera, background=(0.0, 0.0, 0.0)) -> RasterOut:
    """Render one sharp image of posed Gaussians. Empty scenes yield the background."""
    bg = np.asarray(background, dtype=np.float64)
    dtype = posed.means.dtype
    n = posed.means.shape[0]
    if n == 0:
        img = torch.from_numpy(np.tile(bg, (cam.height, cam.width, 1)).astype(np.float64)).to(dtype)
        return RasterOut(image=img, mean2d=None, keep_idx=None)
    cov3d = assemble_covariance(posed.quats, posed.log_scales)
    mean2d, cov2d, depth, keep_idx = project_gaussians(posed.means, cov3d, cam)
    conic, det = _conic(cov2d)
    pd = (det > 0) & (cov2d[:, 0, 0] > 0) & (cov2d[:, 1, 1] > 0)
    if not bool(pd.all()):
        logger.warning("culling %d Gaussians with non-positive-definite projected covariance", int((~pd).sum()))
        sel = torch.nonzero(pd, as_tuple=False).squeeze(-1)
        mean2d, conic, depth = mean2d[sel], conic[sel], depth[sel]
        cov2d = cov2d[sel]
        keep_idx = keep_idx[sel]
    if mean2d.shape[0] == 0:
        img = torch.from_numpy(np.tile(bg, (cam.height, cam.width, 1)).astype(np.float64)).to(dtype)
        return RasterOut(image=img, mean2d=None, keep_idx=None)

    order = torch.argsort(depth.detach(), stable=True)
    mean2d = mean2d[order]
    conic = conic[order]
    cov2d_d = cov2d.detach()[order]
    keep_idx = keep_idx[order]
    alpha0 = torch.sigmoid(posed.opacity_logits)[keep_idx]
    colors = torch.clamp(posed.colors, 0.0, 1.0)[keep_idx]

    # 3-sigma bounding boxes (frozen, like the sort) from the covariance eigenvalues
    with torch.no_grad():
        a = cov2d_d[:, 0, 0].numpy()
        b = cov2d_d[:, 0, 1].numpy()
        c = cov2d_d[:, 1, 1].numpy()
        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
        mx = mean2d[:, 0].detach().numpy()
        my = mean2d[:, 1].detach().numpy()
        bx0 = np.clip(np.floor(mx - radius), 0, cam.width).astype(np.int64)
        bx1 = np.clip(np.ceil(mx + radius) + 1, 0, cam.width).astype(np.int64)
        by0 = np.clip(np.floor(my - radius), 0, cam.height).astype(np.int64)
        by1 = np.clip(np.ceil(my + radius) + 1, 0, cam.height).astype(np.int64)
        nonempty = (bx1 > bx0) & (by1 > by0)
        if nonempty.any():
            px0 = int(bx0[nonempty].min())
            px1 = int(bx1[nonempty].max())
            py0 = int(by0[nonempty].min())
            py1 = int(by1[nonempty].max())
        else:
            px0 = px1 = py0 = py1 = 0

    meta = (bx0, bx1, by0, by1, px0, px1, py0, py1, bg, cam.width, cam.height)
    img = blend_image(mean2d, conic, alpha0, colors, meta).to(dtype)
    return RasterOut(image=img, mean2d=mean2d, keep_idx=keep_idx.numpy())


def pose_avatar(avatar: CanonicalAvatar, pose: torch.Tensor,
                weights: torch.Tensor | None = None) -> PosedGaussians:
    """Warp the canonical avatar by a full pose (J_ch, 3): joints plus root translation.

    The effective skin weights are time-invariant; callers rendering several
    sub-frame times may precompute them once and pass them in.
    """
    k = avatar.skeleton.n_joints
    if pose.shape != (k + 1, 3):
        raise ParameterError(f"expected ({k + 1}, 3) pose, got {tuple(pose.shape)}")
    g_rot, g_trans = forward_kinematics(avatar.skeleton, avatar.shape_log_scales, pose[:k], pose[k])
    if weights is None:
        weights = effective_weights(avatar.base_weights, avatar.lbs_net, avatar.gaussians.means)
    posed_means, posed_quats = warp_gaussians(avatar, g_rot, g_trans, weights)
    g = avatar.gaussians
    return PosedGaussians(posed_means, posed_quats, g.log_scales, g.opacity_logits, g.colors)


@dataclass
class MotionState:
    """Sub-frame motion: knot bank plus the optional non-rigid displacement net."""

    bank: object                                 # SplineBank or IndependentBank
    nonrigid: list[torch.Tensor] | None = None
    sigma_disp: float = 0.1

    def pose(self, frame: int, s: float) -> torch.Tensor:
        theta_hat = self.bank.pose(frame, s)
        n_joints = self.bank.n_channels - 1
        return displace_pose(self.nonrigid, theta_hat, s, n_joints, self.sigma_disp)


def render_sharp(avatar: CanonicalAvatar, mot: MotionState, frame: int, s: float,
                 cam: Camera, background=(0.0, 0.0, 0.0),
                 weights: torch.Tensor | None = None) -> RasterOut:
    """One sharp render at normalized time s within an exposure frame."""
    if not (0.0 <= s <= 1.0):
        raise ParameterError(f"normalized time must lie in [0, 1], got {s}")
    posed = pose_avatar(avatar, mot.pose(frame, s), weights=weights)
    return rasterize(posed, cam, background)


def render_at_times(avatar: CanonicalAvatar, mot: MotionState, frame: int,
                    times: list[float], cam: Camera,
                    background=(0.0, 0.0, 0.0)) -> tuple[torch.Tensor, list[RasterOut]]:
    """Average of sharp renders at the given times, in list order."""
    if not times:
        raise ParameterError("need at least one subframe time")
    weights = effective_weights(avatar.base_weights, avatar.lbs_net, avatar.gaussians.means)
    outs = [render_sharp(avatar, mot, frame, s, cam, background, weights=weights) for s in times]
    acc = outs[0].image
    for out in outs[1:]:
        acc = acc + out.image
    return acc / len(times), outs


def render_blur(avatar: CanonicalAvatar, mot: MotionState, frame: int, cam: Camera,
                t: int, background=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """Blurry frame: mean of t sharp renders at times i/(t-1) (a single render at s=0 for t=1)."""
    if t < 1:
        raise ParameterError(f"subframe count must be >= 1, got {t}")
    img, _ = render_at_times(avatar, mot, frame, subframe_times(t), cam, background)
    return img
