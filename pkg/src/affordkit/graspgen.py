"""Geometric grasp proposal for a parallel-jaw gripper.

The proposer is a deterministic PCA baseline: the gripper sits at the cloud
centroid, approaches along the camera ray, and closes across the thinnest
principal direction of the affordance region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .projection import AffordanceCloud, CameraExtrinsics, CameraIntrinsics, check_rigid

TIE_RTOL = 1e-9
# A principal axis closer than this to the approach ray cannot act as a
# closing direction.
MAX_CLOSING_APPROACH_COS = math.cos(math.radians(30.0))


class TooFewPoints(ValueError):
    def __init__(self, count: int, min_points: int):
        super().__init__(f"cloud has {count} points, need at least {min_points}")
        self.count = count
        self.min_points = min_points


@dataclass(frozen=True)
class GripperSpec:
    max_width: float = 0.085
    finger_margin: float = 0.005
    min_points: int = 50

    def __post_init__(self):
        if not self.max_width > 0:
            raise ValueError("max_width must be positive")
        if not self.finger_margin >= 0:
            raise ValueError("finger_margin must be non-negative")
        if self.min_points < 1:
            raise ValueError("min_points must be at least 1")


@dataclass(frozen=True)
class GraspPose:
    """Gripper frame. Rotation columns are (approach, closing, orthogonal)."""

    position: np.ndarray
    rotation: np.ndarray
    width: float
    score: float

    @property
    def approach(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def closing(self) -> np.ndarray:
        return self.rotation[:, 1]

    @property
    def orthogonal(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_json(self) -> dict:
        return {
            "position": [float(x) for x in self.position],
            "rotation": [float(x) for x in self.rotation.ravel()],
            "width": float(self.width),
            "score": float(self.score),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GraspPose":
        return cls(
            np.asarray(obj["position"], dtype=float),
            np.asarray(obj["rotation"], dtype=float).reshape(3, 3),
            float(obj["width"]),
            float(obj["score"]),
        )


@dataclass(frozen=True)
class PrincipalAxes:
    centroid: np.ndarray
    axes: np.ndarray  # (3, 3), one unit axis per row, descending variance
    variances: np.ndarray
    extents: np.ndarray


def _sign_fix(vec: np.ndarray, refs: np.ndarray) -> np.ndarray:
    for ref in refs:
        dot = float(vec @ ref)
        if abs(dot) > 1e-12:
            return vec if dot > 0 else -vec
    return vec


def _tied(variances: np.ndarray, i: int, j: int) -> bool:
    scale = max(float(variances.max()), 1e-300)
    return abs(variances[i] - variances[j]) <= TIE_RTOL * scale


def _subspace_basis(vectors: np.ndarray, prefer: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span(vectors), built from projected ``prefer`` rows."""
    P = vectors.T @ vectors
    basis: list[np.ndarray] = []
    for ref in prefer:
        w = P @ ref
        for b in basis:
            w = w - (w @ b) * b
        n = np.linalg.norm(w)
        if n > 1e-6:
            basis.append(w / n)
        if len(basis) == len(vectors):
            break
    return np.array(basis)


def principal_axes(cloud: AffordanceCloud | np.ndarray, min_points: int = 50) -> PrincipalAxes:
    pts = cloud.points if isinstance(cloud, AffordanceCloud) else np.asarray(cloud, dtype=float)
    if len(pts) < min_points:
        raise TooFewPoints(len(pts), min_points)
    centroid = pts.mean(axis=0)
    X = pts - centroid
    cov = X.T @ X / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.maximum(evals[order], 0.0)
    vecs = evecs[:, order].T

    # Eigenvectors inside a degenerate eigenspace are arbitrary; rebuild them
    # from the world axes so the output is deterministic.
    world = np.eye(3)
    i = 0
    while i < 3:
        j = i + 1
        while j < 3 and _tied(evals, i, j):
            j += 1
        if j - i > 1:
            vecs[i:j] = _subspace_basis(vecs[i:j], world)
        i = j

    axes = np.array([_sign_fix(v / np.linalg.norm(v), world) for v in vecs])
    proj = X @ axes.T
    extents = proj.max(axis=0) - proj.min(axis=0)
    return PrincipalAxes(centroid, axes, evals, extents)


def _closing_axis(pa: PrincipalAxes, approach: np.ndarray, frame: np.ndarray) -> np.ndarray:
    order = sorted(range(3), key=lambda k: (pa.extents[k], k))
    for k in order:
        group = [j for j in range(3) if _tied(pa.variances, k, j)]
        if len(group) > 1:
            # Degenerate eigenspace: pick its direction most orthogonal to the
            # approach; a remaining tie goes to the lowest-index frame axis.
            S = pa.axes[group]
            coef = S @ approach
            if np.linalg.norm(coef) > 1e-12:
                # directions in span(S) orthogonal to the approach
                _, _, vt = np.linalg.svd(coef[None, :])
                S = vt[1:] @ S
            return _subspace_basis(S, frame)[0]
        c = pa.axes[k]
        if abs(c @ approach) > MAX_CLOSING_APPROACH_COS:
            continue
        c = c - (c @ approach) * approach
        return c / np.linalg.norm(c)
    raise ValueError("no principal axis usable as a closing direction")


def propose_grasp(
    cloud: AffordanceCloud | np.ndarray,
    K: CameraIntrinsics | None,
    T: CameraExtrinsics,
    gripper: GripperSpec = GripperSpec(),
) -> GraspPose:
    """Propose one grasp for an affordance cloud seen from camera ``T``.

    Position is the centroid and the approach runs from the camera center to
    it. The closing direction is the smallest-extent principal axis, made
    orthogonal to the approach; axes within 30 degrees of the approach ray
    are skipped in favour of the next smallest. Its sign and any tie-break
    use the camera frame axes, so the proposal moves rigidly with the scene.

    Width is the cloud extent across the jaws plus both finger margins,
    clamped to the gripper opening. Score is the fraction of points lying
    inside the closing slab of that width.
    """
    pts = cloud.points if isinstance(cloud, AffordanceCloud) else np.asarray(cloud, dtype=float)
    pa = principal_axes(pts, gripper.min_points)
    M = T.matrix
    frame = M[:3, :3].T  # camera x, y, z axes in world coordinates, one per row
    ray = pa.centroid - M[:3, 3]
    n = np.linalg.norm(ray)
    approach = ray / n if n > 1e-12 else frame[2]

    closing = _sign_fix(_closing_axis(pa, approach, frame), frame)
    ortho = np.cross(approach, closing)
    rotation = np.column_stack([approach, closing, ortho])

    offsets = (pts - pa.centroid) @ closing
    extent = float(offsets.max() - offsets.min())
    width = min(extent + 2 * gripper.finger_margin, gripper.max_width)
    if not width > 0:
        raise ValueError("cloud has zero extent across the jaws and no finger margin")
    score = float(np.count_nonzero(np.abs(offsets) <= width / 2 + 1e-12)) / len(pts)
    return GraspPose(pa.centroid, rotation, width, score)


def transform_grasp(p: GraspPose, R) -> GraspPose:
    R = check_rigid(R)
    return GraspPose(
        R[:3, :3] @ p.position + R[:3, 3],
        R[:3, :3] @ p.rotation,
        p.width,
        p.score,
    )


def pose_problems(p: GraspPose, gripper: GripperSpec | None = None, tol: float = 1e-9) -> list[str]:
    out = []
    Rm = p.rotation
    if np.abs(Rm.T @ Rm - np.eye(3)).max() > tol:
        out.append("rotation is not orthonormal")
    if abs(np.linalg.det(Rm) - 1.0) > tol:
        out.append("rotation is not right-handed")
    if not p.width > 0:
        out.append("width must be positive")
    if gripper is not None and p.width > gripper.max_width:
        out.append("width exceeds gripper opening")
    if not 0.0 <= p.score <= 1.0:
        out.append("score outside [0, 1]")
    return out
