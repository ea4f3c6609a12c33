"""Camera model in a unified frame, per-pixel ray maps and the ray encoder.

Conventions
-----------
* Camera axes follow OpenCV: x right, y down, z forward.
* An extrinsic maps camera coordinates to unified coordinates
  (``x_unified = R @ x_cam + t``), so ``t`` is the optical centre.
* The unified frame is the camera frame of the front view at frame 0.
* Pixel ``(u, v)`` (column, row) has its centre at ``(u + 0.5, v + 0.5)``.

Geometry is computed in float64 and handed to the network as float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, ValidationError
from .numerics import gelu

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def inverse(self) -> np.ndarray:
        if not (self.fx > 0 and self.fy > 0) or not (math.isfinite(self.fx) and math.isfinite(self.fy)):
            raise ValidationError(f"singular or invalid intrinsics: fx={self.fx}, fy={self.fy}")
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def validate(self, height: int, width: int) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.cx < width and 0 < self.cy < height):
            raise ValidationError("principal point outside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class CameraExtrinsics:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        check_rotation(self.rotation)

    def matrix(self) -> np.ndarray:
        return pose_matrix(self.rotation, self.translation)


def check_rotation(r: np.ndarray, what: str = "rotation") -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValidationError(f"{what} must be a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
        raise ValidationError(f"{what} is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise ValidationError(f"{what} is not a proper rotation (det != +1)")


def check_pose(m: np.ndarray, what: str = "pose") -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValidationError(f"{what} must be 4x4")
    check_rotation(m[:3, :3], what)
    if not np.allclose(m[3], [0, 0, 0, 1]):
        raise ValidationError(f"{what} has an invalid bottom row")


def pose_matrix(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


def rigid_inverse(m: np.ndarray) -> np.ndarray:
    r, t = m[:3, :3], m[:3, 3]
    return pose_matrix(r.T, -r.T @ t)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


# Camera axes (right, down, forward) expressed in an x-forward, y-left, z-up body frame.
CAM_FROM_BODY_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_mount(yaw: float, position: Sequence[float], pitch_down: float = 0.0) -> np.ndarray:
    """Camera-to-ego pose for a camera looking along ``yaw`` (CCW, radians)."""
    rot = rot_z(yaw) @ CAM_FROM_BODY_AXES @ rot_x(-pitch_down)
    return pose_matrix(rot, np.asarray(position, dtype=np.float64))


@dataclass
class UnifiedRig:
    """Per-(frame, view) cameras with extrinsics in the unified frame."""

    intrinsics: list[CameraIntrinsics]
    extrinsics: np.ndarray  # (T, V, 4, 4) camera -> unified
    front_view: int = 0
    to_unified: np.ndarray | None = None  # world -> unified, (4, 4)
    frame_ids: list[int] | None = None  # absolute scene frames, when cut from a longer scene
    view_ids: list[int] | None = None

    @property
    def num_frames(self) -> int:
        return self.extrinsics.shape[0]

    @property
    def num_views(self) -> int:
        return self.extrinsics.shape[1]

    def extrinsic(self, t: int, v: int) -> CameraExtrinsics:
        self._check(t, v)
        m = self.extrinsics[t, v]
        return CameraExtrinsics(m[:3, :3].copy(), m[:3, 3].copy())

    def _check(self, t: int, v: int) -> None:
        if not (0 <= t < self.num_frames and 0 <= v < self.num_views):
            raise ValidationError(f"(t={t}, v={v}) not in rig of {self.num_frames}x{self.num_views}")

    def world_to_unified(self, points: np.ndarray) -> np.ndarray:
        m = self.to_unified if self.to_unified is not None else np.eye(4)
        return np.asarray(points, dtype=np.float64) @ m[:3, :3].T + m[:3, 3]

    def subset(self, frames: Sequence[int] | None = None, views: Sequence[int] | None = None) -> "UnifiedRig":
        frames = list(range(self.num_frames)) if frames is None else list(frames)
        views = list(range(self.num_views)) if views is None else list(views)
        return UnifiedRig(
            [self.intrinsics[v] for v in views],
            self.extrinsics[np.ix_(frames, views)].copy(),
            views.index(self.front_view) if self.front_view in views else 0,
            None if self.to_unified is None else self.to_unified.copy(),
            None if self.frame_ids is None else [self.frame_ids[f] for f in frames],
            None if self.view_ids is None else [self.view_ids[v] for v in views],
        )


def build_unified_rig(
    intrinsics: Sequence[CameraIntrinsics],
    ego_poses: np.ndarray,
    mount_poses: np.ndarray,
    front_view: int = 0,
) -> UnifiedRig:
    """Express every (frame, view) camera in the frame-0 front camera's frame.

    ``ego_poses[t]`` maps ego to world, ``mount_poses[v]`` maps camera to ego.
    """
    ego_poses = np.asarray(ego_poses, dtype=np.float64)
    mount_poses = np.asarray(mount_poses, dtype=np.float64)
    if ego_poses.ndim != 3 or mount_poses.ndim != 3:
        raise DimensionError("ego_poses and mount_poses must be stacks of 4x4 matrices")
    if len(intrinsics) != len(mount_poses):
        raise DimensionError("one intrinsics entry per mounted view required")
    if not 0 <= front_view < len(mount_poses):
        raise ValidationError("front view index out of range")
    for i, p in enumerate(ego_poses):
        check_pose(p, f"ego pose {i}")
    for i, p in enumerate(mount_poses):
        check_pose(p, f"mount pose {i}")

    anchor = ego_poses[0] @ mount_poses[front_view]  # front camera (t=0) -> world
    to_unified = rigid_inverse(anchor)
    T, V = len(ego_poses), len(mount_poses)
    ext = np.empty((T, V, 4, 4))
    for t in range(T):
        for v in range(V):
            ext[t, v] = to_unified @ ego_poses[t] @ mount_poses[v]
    ext[0, front_view] = np.eye(4)  # exact by construction
    return UnifiedRig(list(intrinsics), ext, front_view, to_unified)


@dataclass
class RayMap:
    origins: np.ndarray  # (H, W, 3)
    directions: np.ndarray  # (H, W, 3), unit norm


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Homogeneous pixel centres, shape (H, W, 3)."""
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def compute_ray_map(rig: UnifiedRig, t: int, v: int, height: int, width: int) -> RayMap:
    rig._check(t, v)
    k_inv = rig.intrinsics[v].inverse()
    m = rig.extrinsics[t, v]
    d = pixel_grid(height, width) @ (m[:3, :3] @ k_inv).T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(m[:3, 3], d.shape).copy()
    return RayMap(o, d)


def ray_maps(rig: UnifiedRig, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """All ray maps of a rig stacked as (T, V, H, W, 3) origins and directions."""
    T, V = rig.num_frames, rig.num_views
    o = np.empty((T, V, height, width, 3))
    d = np.empty_like(o)
    for t in range(T):
        for v in range(V):
            rm = compute_ray_map(rig, t, v, height, width)
            o[t, v], d[t, v] = rm.origins, rm.directions
    return o, d


def project_points(points: np.ndarray, rig: UnifiedRig, t: int, v: int) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of unified-frame points to continuous pixel coords.

    Returns ``(uv, depth)``; ``uv`` is meaningless where ``depth <= 0``.
    """
    rig._check(t, v)
    m = rig.extrinsics[t, v]
    pts = np.asarray(points, dtype=np.float64)
    cam = (pts - m[:3, 3]) @ m[:3, :3]  # R^T (p - c), row-wise
    depth = cam[..., 2]
    kk = rig.intrinsics[v].matrix()
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (cam @ kk.T)[..., :2] / depth[..., None]
    return uv, depth


def fourier_encode(values, j: int):
    """``[sin(2^0 pi c), cos(2^0 pi c), ..., sin(2^(j-1) pi c), cos(2^(j-1) pi c)]`` per value.

    Works on the last axis of a numpy array or torch tensor; blocks for each
    value are concatenated in input order, so the output width is ``2*j*k``.
    """
    if j < 1:
        raise ValidationError("frequency count j must be >= 1")
    is_np = not isinstance(values, torch.Tensor)
    x = torch.as_tensor(np.asarray(values, dtype=np.float64)) if is_np else values
    freqs = (2.0 ** torch.arange(j, dtype=x.dtype)) * math.pi
    ang = x.unsqueeze(-1) * freqs  # (..., k, j)
    enc = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., k, j, 2)
    enc = enc.reshape(*x.shape[:-1], x.shape[-1] * 2 * j)
    return enc.numpy() if is_np else enc


class RayEncoder(nn.Module):
    """Fourier features of (origin, direction) through a two-layer GELU MLP,
    average-pooled onto the patch grid."""

    def __init__(self, width: int, patch: int, freqs: int = 8, hidden: int = 64, origin_scale: float = 50.0):
        super().__init__()
        self.freqs = freqs
        self.patch = patch
        self.origin_scale = origin_scale
        self.in_width = 2 * freqs * 6
        self.fc1 = nn.Linear(self.in_width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def encode(self, origins: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        rays = torch.cat([origins / self.origin_scale, directions], dim=-1)
        return fourier_encode(rays, self.freqs)

    def forward(self, origins: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        """``(..., H, W, 3)`` rays -> ``(..., H/p, W/p, C)`` features."""
        enc = self.encode(origins, directions)
        if enc.shape[-1] != self.fc1.in_features:
            raise DimensionError(f"ray encoding width {enc.shape[-1]} != MLP input {self.fc1.in_features}")
        h = gelu(self.fc1(enc))
        # fc2 is affine, so pooling its input equals pooling its per-pixel output.
        h = pool_patches(h, self.patch)
        return self.fc2(h)


def pool_patches(x: torch.Tensor, p: int) -> torch.Tensor:
    """Average ``(..., H, W, C)`` over non-overlapping ``p x p`` patches."""
    *lead, H, W, C = x.shape
    if H % p or W % p:
        raise DimensionError(f"{H}x{W} not divisible by patch {p}")
    x = x.reshape(*lead, H // p, p, W // p, p, C)
    return x.mean(dim=(-4, -2))


def ray_embed(ray_map: RayMap, encoder: RayEncoder) -> torch.Tensor:
    """Patch-grid features ``(H/p, W/p, C)`` for a single ray map."""
    o = torch.as_tensor(ray_map.origins, dtype=encoder.fc1.weight.dtype)
    d = torch.as_tensor(ray_map.directions, dtype=encoder.fc1.weight.dtype)
    return encoder(o, d)
