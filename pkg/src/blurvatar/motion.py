"""Sub-frame pose representation.

Each exposure frame carries P control knots per pose channel; the pose at
normalized time s in [0, 1] is the uniform B-spline blend B(s) @ M(P) @ knots.
A small shared MLP adds a bounded non-rigid displacement on top of the
interpolated joint angles. Channels are 3-vectors: axis-angle radians for the
joints, meters for the trailing root-translation channel.
"""

from __future__ import annotations

import logging
import math
from functools import lru_cache

import numpy as np
import torch

from .errors import ParameterError

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def interpolation_matrix(p: int) -> np.ndarray:
    """P x P matrix turning the power basis [1, s, ..., s^(P-1)] into uniform
    B-spline blending weights.

    Entries are computed with exact integer arithmetic and normalized by
    1/(P-1)! so that the rows of B(s) @ M form a partition of unity; for P=4
    this is the standard uniform cubic B-spline matrix.
    """
    if not isinstance(p, int) or not (1 <= p <= 8):
        raise ParameterError(f"control knot count must be an integer in [1, 8], got {p!r}")
    m = np.zeros((p, p), dtype=np.float64)
    norm = math.factorial(p - 1)
    for i in range(p):
        lead = math.comb(p - 1, p - 1 - i)
        for j in range(p):
            acc = 0
            for s in range(j, p):
                base = p - s - 1
                power = base ** (p - 1 - i) if (base, p - 1 - i) != (0, 0) else 1
                acc += (-1) ** (s - j) * math.comb(p, s - j) * power
            m[i, j] = lead * acc / norm
    m.setflags(write=False)
    return m


def timestep_basis(s: float, p: int) -> np.ndarray:
    """Power basis row [1, s, s^2, ..., s^(P-1)] for normalized time s in [0, 1]."""
    if not (0.0 <= s <= 1.0):
        raise ParameterError(f"normalized time must lie in [0, 1], got {s}")
    if not isinstance(p, int) or not (1 <= p <= 8):
        raise ParameterError(f"control knot count must be an integer in [1, 8], got {p!r}")
    return np.power(float(s), np.arange(p, dtype=np.float64))


@lru_cache(maxsize=4096)
def _blend_weights(s: float, p: int) -> np.ndarray:
    w = timestep_basis(s, p) @ interpolation_matrix(p)
    w.setflags(write=False)
    return w


def blend_weights(s: float, p: int) -> np.ndarray:
    """B(s) @ M(P): the P blending weights applied to a frame's knots at time s."""
    return _blend_weights(float(s), p)


def subframe_times(t: int) -> list[float]:
    """Uniform normalized times for t subframes: i/(t-1), or [0.0] when t == 1."""
    if t < 1:
        raise ParameterError(f"subframe count must be >= 1, got {t}")
    if t == 1:
        return [0.0]
    return [i / (t - 1) for i in range(t)]


class SplineBank:
    """Per-exposure-frame, per-channel control knots. knots: (N_e, J_ch, P, 3)."""

    kind = "spline"

    def __init__(self, knots: torch.Tensor):
        if knots.ndim != 4 or knots.shape[-1] != 3:
            raise ParameterError(f"knots must have shape (N_e, J_ch, P, 3), got {tuple(knots.shape)}")
        self.knots = knots

    @property
    def n_frames(self) -> int:
        return self.knots.shape[0]

    @property
    def n_channels(self) -> int:
        return self.knots.shape[1]

    @property
    def p(self) -> int:
        return self.knots.shape[2]

    @classmethod
    def constant(cls, poses: torch.Tensor, p: int) -> "SplineBank":
        """Bank whose spline is constant within each frame at the given pose.

        poses: (N_e, J_ch, 3). All P knots equal the frame pose, so partition
        of unity makes the interpolated pose equal it at every s.
        """
        knots = poses.unsqueeze(2).repeat(1, 1, p, 1).clone()
        return cls(knots)

    def pose(self, frame: int, s: float) -> torch.Tensor:
        """Interpolated rigid pose (J_ch, 3) at normalized time s within a frame."""
        if not (0 <= frame < self.n_frames):
            raise ParameterError(f"frame {frame} out of range [0, {self.n_frames})")
        w = torch.tensor(blend_weights(s, self.p), dtype=self.knots.dtype)
        return torch.einsum("p,jpc->jc", w, self.knots[frame])

    def endpoint_poses(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Interpolated poses of every frame at s=0 and s=1, each (N_e, J_ch, 3)."""
        w0 = torch.tensor(blend_weights(0.0, self.p), dtype=self.knots.dtype)
        w1 = torch.tensor(blend_weights(1.0, self.p), dtype=self.knots.dtype)
        start = torch.einsum("p,njpc->njc", w0, self.knots)
        end = torch.einsum("p,njpc->njc", w1, self.knots)
        return start, end


class IndependentBank:
    """Ablation variant: one free pose per subframe index instead of a spline.

    knots: (N_e, J_ch, T, 3). Queries at arbitrary s snap to the nearest
    subframe index round(s * (T - 1)).
    """

    kind = "independent"

    def __init__(self, knots: torch.Tensor):
        if knots.ndim != 4 or knots.shape[-1] != 3:
            raise ParameterError(f"knots must have shape (N_e, J_ch, T, 3), got {tuple(knots.shape)}")
        self.knots = knots

    @property
    def n_frames(self) -> int:
        return self.knots.shape[0]

    @property
    def n_channels(self) -> int:
        return self.knots.shape[1]

    @property
    def p(self) -> int:
        return self.knots.shape[2]

    @classmethod
    def constant(cls, poses: torch.Tensor, t: int) -> "IndependentBank":
        knots = poses.unsqueeze(2).repeat(1, 1, t, 1).clone()
        return cls(knots)

    def pose(self, frame: int, s: float) -> torch.Tensor:
        if not (0 <= frame < self.n_frames):
            raise ParameterError(f"frame {frame} out of range [0, {self.n_frames})")
        if not (0.0 <= s <= 1.0):
            raise ParameterError(f"normalized time must lie in [0, 1], got {s}")
        t = self.knots.shape[2]
        idx = 0 if t == 1 else int(round(s * (t - 1)))
        return self.knots[frame, :, idx]

    def endpoint_poses(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.knots[:, :, 0], self.knots[:, :, -1]


def mlp_init(sizes: list[int], rng: np.random.Generator, zero_last: bool = True) -> list[torch.Tensor]:
    """Fully-connected net parameters [W0, b0, W1, b1, ...], tanh activations.

    Hidden layers draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the final layer
    is zeroed by default so the net starts as the identity perturbation.
    """
    params: list[torch.Tensor] = []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        if zero_last and k == len(sizes) - 2:
            w = np.zeros((fan_out, fan_in))
            b = np.zeros(fan_out)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
        params.append(torch.tensor(w, dtype=torch.float64))
        params.append(torch.tensor(b, dtype=torch.float64))
    return params


def mlp_forward(params: list[torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """tanh MLP; the final layer is linear (callers bound it as needed)."""
    n_layers = len(params) // 2
    for k in range(n_layers):
        w, b = params[2 * k], params[2 * k + 1]
        x = x @ w.T + b
        if k < n_layers - 1:
            x = torch.tanh(x)
    return x


NONRIGID_HIDDEN = 32


def nonrigid_init(rng: np.random.Generator, zero_last: bool = True) -> list[torch.Tensor]:
    """Displacement net: (interpolated joint angle, s) -> 3-vector, 2x32 tanh."""
    return mlp_init([4, NONRIGID_HIDDEN, NONRIGID_HIDDEN, 3], rng, zero_last=zero_last)


def displace_pose(
    net: list[torch.Tensor] | None,
    pose_hat: torch.Tensor,
    s: float,
    n_joints: int,
    sigma_disp: float = 0.1,
) -> torch.Tensor:
    """Add the bounded non-rigid displacement to the interpolated pose.

    Applied per joint channel with shared weights; the root-translation channel
    passes through untouched. With a zero final layer the result equals
    pose_hat exactly; otherwise each joint moves by at most sigma_disp in the
    infinity norm (tanh bound times the output scale).
    """
    if net is None:
        return pose_hat
    joints = pose_hat[:n_joints]
    s_col = torch.full((n_joints, 1), float(s), dtype=pose_hat.dtype)
    inp = torch.cat([joints, s_col], dim=1)
    delta = sigma_disp * torch.tanh(mlp_forward(net, inp))
    return torch.cat([joints + delta, pose_hat[n_joints:]], dim=0)


def inter_frame_reg(bank) -> torch.Tensor:
    """Mean L2 distance between each frame's end pose and the next frame's start pose.

    Computed on the rigid interpolated poses (before non-rigid displacement)
    and averaged over channels and frame boundaries. Returns 0 for a single
    frame, where no boundary exists.
    """
    n_e = bank.n_frames
    if n_e < 2:
        logger.info("inter_frame_reg: fewer than 2 frames, returning 0")
        return torch.zeros((), dtype=bank.knots.dtype)
    start, end = bank.endpoint_poses()
    diff = end[:-1] - start[1:]                      # (N_e-1, J_ch, 3)
    norms = torch.linalg.vector_norm(diff, dim=-1)   # (N_e-1, J_ch)
    return norms.sum() / (bank.n_channels * (n_e - 1))
