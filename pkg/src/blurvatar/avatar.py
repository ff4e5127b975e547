"""Canonical avatar: toy skeleton, forward kinematics, skinning, Gaussian seeding.

The canonical Gaussians live in the unit-shape rest frame. Posing applies
linear blend skinning with per-joint transforms G_j = T_j(pose, shape) o A_j^-1,
where A_j is the joint's rest transform at zero pose and unit shape, so the
zero pose with unit shape is exactly the identity warp.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ParameterError, StructuralError

logger = logging.getLogger(__name__)


@dataclass
class Skeleton:
    """Joint tree. parents[0] == -1; parent index < child index throughout."""

    names: list[str]
    parents: list[int]
    rest_offsets: np.ndarray    # (K, 3) meters, offset from parent in rest pose
    bone_radii: np.ndarray      # (K,) meters, radius of the bone ending at each joint
    palette: np.ndarray         # (K, 3) RGB in [0, 1], color of the bone ending at each joint

    def __post_init__(self):
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        self.bone_radii = np.asarray(self.bone_radii, dtype=np.float64)
        self.palette = np.asarray(self.palette, dtype=np.float64)
        k = len(self.names)
        if len(self.parents) != k or self.rest_offsets.shape != (k, 3):
            raise StructuralError("skeleton field lengths disagree")
        if k == 0 or self.parents[0] != -1:
            raise StructuralError("joint 0 must be the root (parent -1)")
        for j in range(1, k):
            if not (0 <= self.parents[j] < j):
                raise StructuralError(f"joint {j}: parent index must be < child index and >= 0")

    @property
    def n_joints(self) -> int:
        return len(self.names)

    @property
    def n_channels(self) -> int:
        """Pose channels: one per joint plus the trailing root-translation channel."""
        return self.n_joints + 1

    @property
    def rest_positions(self) -> np.ndarray:
        """(K, 3) world joint positions at zero pose and unit shape."""
        pos = np.zeros((self.n_joints, 3))
        for j in range(self.n_joints):
            p = self.parents[j]
            pos[j] = self.rest_offsets[j] if p < 0 else pos[p] + self.rest_offsets[j]
        return pos

    @property
    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) pairs; one bone per non-root joint."""
        return [(self.parents[j], j) for j in range(1, self.n_joints)]

    def to_dict(self) -> dict:
        return {
            "joints": [
                {
                    "name": self.names[j],
                    "parent": self.parents[j],
                    "rest_offset": list(self.rest_offsets[j]),
                    "bone_radius": float(self.bone_radii[j]),
                    "color": list(self.palette[j]),
                }
                for j in range(self.n_joints)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        joints = data.get("joints")
        if not joints:
            raise StructuralError("skeleton document has no joints")
        return cls(
            names=[j["name"] for j in joints],
            parents=[int(j["parent"]) for j in joints],
            rest_offsets=np.array([j["rest_offset"] for j in joints], dtype=np.float64),
            bone_radii=np.array([j["bone_radius"] for j in joints], dtype=np.float64),
            palette=np.array([j["color"] for j in joints], dtype=np.float64),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Skeleton":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def stickman_11() -> Skeleton:
    """Default 11-joint toy skeleton: pelvis, spine, head, shoulders, elbows, hips, knees."""
    joints = [
        # name          parent  rest offset            radius  color
        ("pelvis",      -1, (0.00, 0.95, 0.00), 0.060, (0.85, 0.30, 0.30)),
        ("spine",        0, (0.00, 0.45, 0.00), 0.070, (0.90, 0.65, 0.20)),
        ("head",         1, (0.00, 0.25, 0.00), 0.085, (0.95, 0.85, 0.55)),
        ("l_shoulder",   1, (-0.22, 0.00, 0.00), 0.045, (0.25, 0.70, 0.35)),
        ("l_elbow",      3, (-0.28, 0.00, 0.00), 0.040, (0.30, 0.85, 0.80)),
        ("r_shoulder",   1, (0.22, 0.00, 0.00), 0.045, (0.25, 0.45, 0.85)),
        ("r_elbow",      5, (0.28, 0.00, 0.00), 0.040, (0.60, 0.40, 0.90)),
        ("l_hip",        0, (-0.11, -0.05, 0.00), 0.050, (0.85, 0.35, 0.60)),
        ("l_knee",       7, (0.00, -0.42, 0.00), 0.045, (0.55, 0.55, 0.55)),
        ("r_hip",        0, (0.11, -0.05, 0.00), 0.050, (0.80, 0.55, 0.35)),
        ("r_knee",       9, (0.00, -0.42, 0.00), 0.045, (0.35, 0.60, 0.60)),
    ]
    return Skeleton(
        names=[j[0] for j in joints],
        parents=[j[1] for j in joints],
        rest_offsets=np.array([j[2] for j in joints]),
        bone_radii=np.array([j[3] for j in joints]),
        palette=np.array([j[4] for j in joints]),
    )


def load_skeleton(spec: str) -> Skeleton:
    """Resolve a skeleton config value: a builtin name or a JSON file path."""
    if spec == "stickman-11":
        return stickman_11()
    return Skeleton.load(spec)


def axis_angle_to_rotation(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, (..., 3) -> (..., 3, 3), Taylor-safe near zero angle."""
    theta_sq = (aa * aa).sum(dim=-1)
    small = theta_sq < 1e-16
    # Exact branch operands are clamped away from 0 so neither branch of the
    # torch.where produces NaN gradients.
    theta = torch.sqrt(torch.clamp(theta_sq, min=1e-30))
    sin_c = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    cos_c = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / torch.clamp(theta_sq, min=1e-30))
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=aa.dtype).expand(k.shape)
    return eye + sin_c[..., None, None] * k + cos_c[..., None, None] * (k @ k)


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)


def quat_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (w, x, y, z) -> rotation matrix, (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r00 = 1 - 2 * (y * y + z * z)
    r01 = 2 * (x * y - w * z)
    r02 = 2 * (x * z + w * y)
    r10 = 2 * (x * y + w * z)
    r11 = 1 - 2 * (x * x + z * z)
    r12 = 2 * (y * z - w * x)
    r20 = 2 * (x * z - w * y)
    r21 = 2 * (y * z + w * x)
    r22 = 1 - 2 * (x * x + y * y)
    return torch.stack(
        [
            torch.stack([r00, r01, r02], dim=-1),
            torch.stack([r10, r11, r12], dim=-1),
            torch.stack([r20, r21, r22], dim=-1),
        ],
        dim=-2,
    )


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product, (w, x, y, z) convention."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


class _TopEigvec(torch.autograd.Function):
    """Top eigenvector of a batch of symmetric matrices.

    The stock eigh backward divides by gaps between every eigenvalue pair and
    returns NaN whenever any two non-top eigenvalues coincide, which is the
    generic case for rotation profile matrices (spectrum {3, -1, -1, -1}).
    First-order perturbation of a simple top eigenpair only needs the gaps
    from the top, so the backward here stays finite as long as the top
    eigenvalue itself is separated.
    """

    @staticmethod
    def forward(ctx, k):
        vals, vecs = torch.linalg.eigh(k)
        ctx.save_for_backward(vals, vecs)
        return vecs[..., -1]

    @staticmethod
    def backward(ctx, grad_q):
        vals, vecs = ctx.saved_tensors
        top = vecs[..., -1]
        rest = vecs[..., :-1]                               # (..., 4, 3)
        gaps = vals[..., -1:] - vals[..., :-1]              # (..., 3), > 0 for a simple top
        gaps = torch.clamp(gaps, min=1e-12)
        coef = torch.einsum("...a,...ai->...i", grad_q, rest) / gaps
        basis = torch.einsum("...i,...ai->...a", coef, rest)
        return basis[..., :, None] * top[..., None, :]


def polar_rotation_quat(m: torch.Tensor) -> torch.Tensor:
    """Quaternion of the polar (closest-rotation) factor of (..., 3, 3) matrices.

    The rotation maximizing tr(R^T M) has the quaternion that is the top
    eigenvector of the symmetric 4x4 profile matrix built linearly from M,
    which keeps the computation differentiable and stable for blends of
    nearby rotations (top eigenvalue well separated).
    """
    m00, m01, m02 = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    m10, m11, m12 = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    m20, m21, m22 = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    k = torch.stack(
        [
            torch.stack([m00 + m11 + m22, m21 - m12, m02 - m20, m10 - m01], dim=-1),
            torch.stack([m21 - m12, m00 - m11 - m22, m01 + m10, m02 + m20], dim=-1),
            torch.stack([m02 - m20, m01 + m10, -m00 + m11 - m22, m12 + m21], dim=-1),
            torch.stack([m10 - m01, m02 + m20, m12 + m21, -m00 - m11 + m22], dim=-1),
        ],
        dim=-2,
    )
    q = _TopEigvec.apply(k)
    sign = torch.where(q[..., 0:1] < 0, -torch.ones_like(q[..., 0:1]), torch.ones_like(q[..., 0:1]))
    return q * sign


def det3(m: torch.Tensor) -> torch.Tensor:
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


@dataclass
class GaussianParams:
    """Learnable fields of the canonical Gaussian set (torch tensors)."""

    means: torch.Tensor           # (N, 3) meters, canonical space
    quats: torch.Tensor           # (N, 4), normalized before covariance assembly
    log_scales: torch.Tensor      # (N, 3), exp() clamped to (0, 1] meters
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor          # (N, 3) RGB, clamped to [0, 1] at render time

    @property
    def count(self) -> int:
        return self.means.shape[0]


@dataclass
class CanonicalAvatar:
    """Everything needed to pose and render the sharp scene representation."""

    skeleton: Skeleton
    shape_log_scales: torch.Tensor       # (K,) per-joint bone-length log-scales
    gaussians: GaussianParams
    base_weights: torch.Tensor           # (N, K) simplex rows
    lbs_net: list[torch.Tensor] | None   # skinning-offset MLP, None disables it
    rest_positions: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rest_positions = self.skeleton.rest_positions


def forward_kinematics(
    skeleton: Skeleton,
    shape_log_scales: torch.Tensor,
    joint_rotations: torch.Tensor,
    root_translation: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Skinning transforms (G_R, G_t) for every joint.

    joint_rotations: (K, 3) axis-angle; root_translation: (3,). Composition per
    joint is parent o Translate(scale_j * rest_offset_j) o Rotate(theta_j); the
    root additionally composes the global translation. The returned transforms
    are relative to the unit-shape zero-pose rest configuration, so they are
    all identity exactly there.
    """
    k = skeleton.n_joints
    if joint_rotations.shape != (k, 3):
        raise ParameterError(f"expected ({k}, 3) joint rotations, got {tuple(joint_rotations.shape)}")
    rot_local = axis_angle_to_rotation(joint_rotations)
    scales = torch.exp(shape_log_scales)
    offsets = torch.as_tensor(skeleton.rest_offsets, dtype=joint_rotations.dtype)
    r_world: list[torch.Tensor] = [None] * k  # type: ignore[list-item]
    t_world: list[torch.Tensor] = [None] * k  # type: ignore[list-item]
    for j in range(k):
        p = skeleton.parents[j]
        step = scales[j] * offsets[j]
        if p < 0:
            r_world[j] = rot_local[j]
            t_world[j] = root_translation + step
        else:
            r_world[j] = r_world[p] @ rot_local[j]
            t_world[j] = t_world[p] + r_world[p] @ step
    rw = torch.stack(r_world)
    tw = torch.stack(t_world)
    rest = torch.as_tensor(skeleton.rest_positions, dtype=joint_rotations.dtype)
    g_t = tw - torch.einsum("kab,kb->ka", rw, rest)
    return rw, g_t


def effective_weights(
    base_weights: torch.Tensor,
    lbs_net: list[torch.Tensor] | None,
    means: torch.Tensor,
    eps: float = 1e-6,
) -> torch.Tensor:
    """Skin weights after the learned offset: softmax(log(base + eps) + delta(mean)).

    With the offset net disabled or zero-initialized this reduces to the
    (eps-smoothed) base weights; the result always lies on the simplex.
    """
    logits = torch.log(base_weights + eps)
    if lbs_net is not None:
        from .motion import mlp_forward

        logits = logits + mlp_forward(lbs_net, means)
    return torch.softmax(logits, dim=-1)


def warp_gaussians(
    avatar: CanonicalAvatar,
    g_rot: torch.Tensor,
    g_trans: torch.Tensor,
    weights: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pose the canonical Gaussians: returns (posed means (N,3), posed quats (N,4)).

    Means follow the blended rigid transforms; orientations rotate by the
    polar factor of the weight-blended rotation matrix composed onto each
    Gaussian's own quaternion. Scales, opacities and colors are untouched by
    posing. A non-positive blend determinant falls back to the highest-weight
    joint's rotation.
    """
    means = avatar.gaussians.means
    blend_rot = torch.einsum("nk,kab->nab", weights, g_rot)     # (N, 3, 3)
    blend_t = weights @ g_trans                                  # (N, 3)
    posed_means = torch.einsum("nab,nb->na", blend_rot, means) + blend_t

    det = det3(blend_rot)
    if bool((det <= 0).any()):
        bad = det <= 0
        logger.warning("degenerate blended rotation for %d Gaussians; using highest-weight joint", int(bad.sum()))
        top = torch.argmax(weights, dim=-1)
        fallback = g_rot[top]
        blend_rot = torch.where(bad[:, None, None], fallback, blend_rot)
    blend_quat = polar_rotation_quat(blend_rot)
    posed_quats = quat_multiply(blend_quat, quat_normalize(avatar.gaussians.quats))
    return posed_means, posed_quats


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point (N, 3) to segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def seed_gaussians(
    skeleton: Skeleton,
    density: float,
    rng: np.random.Generator,
    jitter: bool = True,
) -> tuple[GaussianParams, torch.Tensor]:
    """Sample the initial canonical Gaussians along the unit-shape bones.

    Each bone receives floor(length * density) Gaussians spread evenly along
    the segment, jittered inside a ball of the bone radius when enabled.
    Initial scale is isotropic at radius/2, opacity starts at 0.5, colors come
    from the bone palette. Base skin weights blend the two nearest bones by
    inverse distance.
    """
    if density <= 0:
        raise ParameterError("density must be positive")
    rest = skeleton.rest_positions
    means, colors, radii_per_g = [], [], []
    for parent, child in skeleton.bones:
        a, b = rest[parent], rest[child]
        length = float(np.linalg.norm(b - a))
        count = int(np.floor(length * density))
        if count == 0:
            continue
        ts = (np.arange(count) + 0.5) / count
        pts = a[None, :] + ts[:, None] * (b - a)[None, :]
        if jitter:
            direction = rng.normal(size=(count, 3))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            radius = skeleton.bone_radii[child] * rng.uniform(size=count) ** (1.0 / 3.0)
            pts = pts + direction * radius[:, None]
        means.append(pts)
        colors.append(np.tile(skeleton.palette[child], (count, 1)))
        radii_per_g.append(np.full(count, skeleton.bone_radii[child]))
    if not means:
        raise ParameterError("density too low: no Gaussians seeded on any bone")
    means_np = np.concatenate(means)
    colors_np = np.concatenate(colors)
    radii_np = np.concatenate(radii_per_g)
    n = means_np.shape[0]

    k = skeleton.n_joints
    dists = np.full((n, k), np.inf)
    for parent, child in skeleton.bones:
        dists[:, child] = _point_segment_distance(means_np, rest[parent], rest[child])
    base = np.zeros((n, k))
    bone_joints = [child for _, child in skeleton.bones]
    if len(bone_joints) == 1:
        base[:, bone_joints[0]] = 1.0
    else:
        order = np.argsort(dists, axis=1)
        for i in range(n):
            j0, j1 = order[i, 0], order[i, 1]
            w0 = 1.0 / (dists[i, j0] + 1e-8)
            w1 = 1.0 / (dists[i, j1] + 1e-8)
            base[i, j0] = w0 / (w0 + w1)
            base[i, j1] = w1 / (w0 + w1)

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    params = GaussianParams(
        means=torch.tensor(means_np, dtype=torch.float64),
        quats=torch.tensor(quats, dtype=torch.float64),
        log_scales=torch.tensor(np.log(np.tile((radii_np / 2.0)[:, None], (1, 3))), dtype=torch.float64),
        opacity_logits=torch.zeros(n, dtype=torch.float64),
        colors=torch.tensor(colors_np, dtype=torch.float64),
    )
    return params, torch.tensor(base, dtype=torch.float64)


LBS_HIDDEN = 32


def lbs_net_init(n_joints: int, rng: np.random.Generator, zero_last: bool = True) -> list[torch.Tensor]:
    """Skinning-offset net: canonical mean -> per-joint weight logits."""
    from .motion import mlp_init

    return mlp_init([3, LBS_HIDDEN, LBS_HIDDEN, n_joints], rng, zero_last=zero_last)
