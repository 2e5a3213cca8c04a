"""Lift masked depth pixels into world coordinates.

For a pixel (u, v) with depth d the world point is

    [x, y, z, 1]^T = T @ inv(K) @ [u*d, v*d, d, 1]^T

where K is the 4x4 pinhole intrinsic matrix and T the camera-to-world
transform. Pixel indices address pixel centers directly (no half-pixel
offset).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .maskops import BinaryMask, SizeMismatch

RIGID_TOL = 1e-9


class ProjectionError(ValueError):
    pass


class InvalidDepth(ProjectionError):
    pass


class BehindCamera(ProjectionError):
    pass


class NonRigidTransform(ProjectionError):
    pass


def rigid_problems(T, tol: float = RIGID_TOL) -> list[str]:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        return [f"expected 4x4 matrix, got shape {T.shape}"]
    out = []
    if not np.all(np.isfinite(T)):
        out.append("non-finite entries")
        return out
    R = T[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        out.append("rotation block is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        out.append("rotation determinant is not +1")
    if np.abs(T[3] - [0, 0, 0, 1]).max() > 0:
        out.append("bottom row is not (0, 0, 0, 1)")
    return out


def check_rigid(T, tol: float = RIGID_TOL) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    bad = rigid_problems(T, tol)
    if bad:
        raise NonRigidTransform("; ".join(bad))
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def problems(self) -> list[str]:
        vals = (self.fx, self.fy, self.cx, self.cy)
        out = []
        if not all(math.isfinite(v) for v in vals):
            out.append("intrinsics must be finite")
        elif self.fx <= 0 or self.fy <= 0:
            out.append("focal lengths must be positive")
        return out

    @property
    def matrix(self) -> np.ndarray:
        """The 4x4 intrinsic matrix."""
        return np.array(
            [
                [self.fx, 0.0, self.cx, 0.0],
                [0.0, self.fy, self.cy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class CameraExtrinsics:
    """Camera-to-world rigid transform, stored row-major."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in np.asarray(self.values, dtype=float).ravel())
        if len(vals) != 16:
            raise ProjectionError(f"extrinsics need 16 numbers, got {len(vals)}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_matrix(cls, T) -> "CameraExtrinsics":
        return cls(tuple(np.asarray(T, dtype=float).ravel()))

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls.from_matrix(np.eye(4))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.values).reshape(4, 4)

    @property
    def camera_center(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def problems(self) -> list[str]:
        return rigid_problems(self.matrix)


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel depth in meters. Zero or non-finite entries are invalid."""

    depth: np.ndarray
    validity: np.ndarray

    @classmethod
    def from_array(cls, depth, valid=None) -> "DepthImage":
        d = np.array(depth, dtype=float)
        if d.ndim != 2:
            raise ProjectionError("depth must be 2-D")
        ok = np.isfinite(d) & (d > 0)
        if valid is not None:
            ok &= np.asarray(valid, dtype=bool)
        d.setflags(write=False)
        ok.setflags(write=False)
        return cls(d, ok)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def load_depth_png(path: str | Path) -> DepthImage:
    """Read a 16-bit millimeter depth PNG (0 = no reading)."""
    from PIL import Image

    with Image.open(path) as im:
        mm = np.asarray(im, dtype=np.uint16 if im.mode.startswith("I;16") else None)
    if mm.ndim != 2:
        raise ProjectionError(f"{path}: depth PNG must be single-channel")
    return DepthImage.from_array(mm.astype(float) / 1000.0)


def save_depth_png(depth_m: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    d = np.nan_to_num(np.asarray(depth_m, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)
    mm = np.clip(np.rint(d * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def backproject_pixel(u: float, v: float, d: float, K: CameraIntrinsics, T: CameraExtrinsics) -> np.ndarray:
    if not (math.isfinite(d) and d > 0):
        raise InvalidDepth(f"depth must be finite and positive, got {d}")
    cam = np.array([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d])
    M = T.matrix
    return M[:3, :3] @ cam + M[:3, 3]


@dataclass(frozen=True)
class AffordanceCloud:
    points: np.ndarray  # (N, 3) world coordinates, meters
    source_pixels: np.ndarray  # (N, 2) integer (u, v)

    def __post_init__(self):
        if len(self.points) != len(self.source_pixels):
            raise ProjectionError("points and source_pixels differ in length")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_points(cls, pts) -> "AffordanceCloud":
        """A cloud with no pixel provenance (synthetic data)."""
        p = np.asarray(pts, dtype=float).reshape(-1, 3)
        return cls(p, np.full((len(p), 2), -1, dtype=np.int64))


def full_grid(width: int, height: int) -> np.ndarray:
    """All (u, v) pixels, row by row."""
    vv, uu = np.mgrid[0:height, 0:width]
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def backproject_masked(
    mask: BinaryMask,
    depth: DepthImage,
    K: CameraIntrinsics,
    T: CameraExtrinsics,
    points: Sequence[tuple[int, int]] | np.ndarray | None = None,
) -> AffordanceCloud:
    """Lift the pixels of ``points`` that are both masked and have valid depth.

    ``points`` defaults to the full image grid in row-major order; output
    order always follows ``points``.
    """
    if mask.shape != depth.depth.shape:
        raise SizeMismatch(mask.shape, depth.depth.shape)
    P = full_grid(mask.width, mask.height) if points is None else np.asarray(points, dtype=np.int64).reshape(-1, 2)
    u, v = P[:, 0], P[:, 1]
    if len(P) and (u.min() < 0 or v.min() < 0 or u.max() >= mask.width or v.max() >= mask.height):
        raise ProjectionError("point set has pixels outside the image")
    keep = mask.bits[v, u] & depth.validity[v, u]
    P = P[keep]
    d = depth.depth[P[:, 1], P[:, 0]]
    cam = np.stack([(P[:, 0] - K.cx) * d / K.fx, (P[:, 1] - K.cy) * d / K.fy, d], axis=1)
    M = T.matrix
    world = cam @ M[:3, :3].T + M[:3, 3]
    return AffordanceCloud(world, P)


def project_point(x: float, y: float, z: float, K: CameraIntrinsics, T: CameraExtrinsics) -> tuple[float, float, float]:
    """Inverse of :func:`backproject_pixel`: world point to (u, v, depth)."""
    cam = invert_rigid(T.matrix) @ np.array([x, y, z, 1.0])
    d = cam[2]
    if not d > 0:
        raise BehindCamera(f"point has camera depth {d}")
    return (K.fx * cam[0] / d + K.cx, K.fy * cam[1] / d + K.cy, float(d))
