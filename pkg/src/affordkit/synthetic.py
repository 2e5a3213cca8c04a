"""Synthetic fixtures: handle-like point clouds, rendered depth scenes, manifests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AffordanceRecord,
    CategoryLabel,
    DatasetManifest,
    Domain,
    ManifestHeader,
    ProvenanceTag,
    ProvenanceTool,
    ReasoningKind,
    SplitTag,
)
from .instructions import build_template
from .maskops import BinaryMask, rle_encode
from .projection import CameraExtrinsics, CameraIntrinsics


def cylinder_cloud(
    n: int = 5000,
    radius: float = 0.015,
    length: float = 0.2,
    seed: int = 0,
    axis=(1.0, 0.0, 0.0),
    center=(0.0, 0.0, 0.0),
) -> np.ndarray:
    """Points uniform on the lateral surface of a cylinder."""
    rng = np.random.default_rng(seed)
    a = np.asarray(axis, dtype=float)
    a /= np.linalg.norm(a)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    t = rng.uniform(-length / 2, length / 2, n)
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = t[:, None] * a + radius * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)
    return pts + np.asarray(center, dtype=float)


def look_down_extrinsics(height: float) -> CameraExtrinsics:
    """Camera at (0, 0, height) looking along world -z; image x along world +x."""
    T = np.eye(4)
    T[:3, :3] = np.diag([1.0, -1.0, -1.0])
    T[2, 3] = height
    return CameraExtrinsics.from_matrix(T)


@dataclass(frozen=True)
class CylinderScene:
    depth: np.ndarray  # meters, 0 where the ray misses
    mask: BinaryMask
    K: CameraIntrinsics
    T: CameraExtrinsics
    radius: float
    length: float


def render_cylinder_scene(
    width: int = 640,
    height: int = 480,
    focal: float = 1000.0,
    camera_height: float = 0.4,
    radius: float = 0.015,
    length: float = 0.2,
) -> CylinderScene:
    """Ray-cast a horizontal cylinder (axis world x, centered at the origin) from above."""
    K = CameraIntrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2)
    T = look_down_extrinsics(camera_height)
    vv, uu = np.mgrid[0:height, 0:width].astype(float)
    # ray direction in world coordinates for unit camera depth
    dx = (uu - K.cx) / K.fx
    dy = -(vv - K.cy) / K.fy
    dz = -np.ones_like(dx)
    oz = camera_height
    # solve (s*dy)^2 + (oz + s*dz)^2 = r^2 for the nearest s > 0
    a = dy**2 + dz**2
    b = 2 * oz * dz
    c = oz**2 - radius**2
    disc = b**2 - 4 * a * c
    hit = disc >= 0
    s = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), 0.0)
    hit &= s > 0
    hit &= np.abs(s * dx) <= length / 2
    depth = np.where(hit, s, 0.0)  # camera depth equals s for unit-z rays
    return CylinderScene(depth, BinaryMask(hit), K, T, radius, length)


_CATEGORIES = ("mug", "knife", "hammer", "screwdriver", "spatula", "wok", "power drill", "scissors")


def random_manifest(
    n: int,
    seed: int = 0,
    size: tuple[int, int] = (24, 32),
    split: str = "val",
    image_root: str = "images",
) -> DatasetManifest:
    """Manifest of ``n`` records with random rectangular affordance masks."""
    rng = np.random.default_rng(seed)
    h, w = size
    records = []
    kinds = list(ReasoningKind)
    for i in range(n):
        cat = CategoryLabel(_CATEGORIES[int(rng.integers(len(_CATEGORIES)))])
        bits = np.zeros((h, w), dtype=bool)
        if rng.random() > 0.05:
            y0, x0 = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
            y1, x1 = int(rng.integers(y0 + 1, h + 1)), int(rng.integers(x0 + 1, w + 1))
            bits[y0:y1, x0:x1] = True
        zs_cat = split == "val" and rng.random() < 0.2
        zs_dom = split == "val" and rng.random() < 0.2
        records.append(
            AffordanceRecord(
                id=f"rec{i:05d}",
                image_path=f"img{i:05d}.png",
                category=cat,
                domain=list(Domain)[int(rng.integers(4))],
                splits=SplitTag(split, zs_cat, zs_dom, kinds[int(rng.integers(len(kinds)))]),
                instruction=build_template(cat),
                mask=rle_encode(BinaryMask(bits)),
                provenance=ProvenanceTag(ProvenanceTool.ORIGINAL_MASK, "synthetic"),
            )
        )
    return DatasetManifest(ManifestHeader(image_root), tuple(records))
