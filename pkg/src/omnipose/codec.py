"""Gaussian target heatmaps and sub-pixel peak decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REFINEMENTS = ("none", "quarter_offset", "taylor")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    v: int = 2


@dataclass
class PoseAnnotation:
    keypoints: list[Keypoint]
    area: float | None = None
    head_size: float | None = None
    id: int | str | None = None
    image_id: int | str | None = None
    score: float | None = None

    @property
    def num_joints(self) -> int:
        return len(self.keypoints)

    def coords(self) -> np.ndarray:
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64).reshape(-1, 2)

    def visibility(self) -> np.ndarray:
        return np.array([k.v for k in self.keypoints], dtype=int)

    @classmethod
    def from_flat(cls, flat: Sequence[float], **kw) -> "PoseAnnotation":
        """Build from COCO-style ``[x1, y1, v1, x2, y2, v2, ...]``."""
        if len(flat) % 3:
            raise ValueError(f"keypoint array length {len(flat)} is not a multiple of 3")
        kps = [Keypoint(float(flat[i]), float(flat[i + 1]), int(flat[i + 2])) for i in range(0, len(flat), 3)]
        return cls(kps, **kw)

    def to_flat(self) -> list[float]:
        out: list[float] = []
        for k in self.keypoints:
            out += [float(k.x), float(k.y), int(k.v)]
        return out


@dataclass(frozen=True)
class HeatmapMeta:
    """``image = heatmap * stride + offset``."""

    stride: float = 4
    offset: tuple[float, float] = (0.0, 0.0)
    sigma: float = 3.0

    def __post_init__(self):
        if not self.stride > 0 or not self.sigma > 0:
            raise ValueError("stride and sigma must be positive")
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))

    def to_heatmap(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.offset[0]) / self.stride, (y - self.offset[1]) / self.stride

    def to_image(self, hx: float, hy: float) -> tuple[float, float]:
        return hx * self.stride + self.offset[0], hy * self.stride + self.offset[1]


def gaussian_plane(cx: float, cy: float, h: int, w: int, sigma: float) -> np.ndarray:
    ys, xs = np.arange(h, dtype=np.float64)[:, None], np.arange(w, dtype=np.float64)[None, :]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))


def encode(ann: PoseAnnotation, meta: HeatmapMeta, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized Gaussian targets ``[K, h, w]`` centred at the real-valued joints, plus the joint mask.

    Unlabeled joints (``v == 0``) get a zero plane and ``mask = False``.
    """
    if h < 1 or w < 1:
        raise ValueError(f"heatmap size must be positive, got {h}x{w}")
    planes = np.zeros((ann.num_joints, h, w))
    mask = np.zeros(ann.num_joints, dtype=bool)
    for k, kp in enumerate(ann.keypoints):
        if kp.v <= 0:
            continue
        cx, cy = meta.to_heatmap(kp.x, kp.y)
        planes[k] = gaussian_plane(cx, cy, h, w, meta.sigma)
        mask[k] = True
    return planes, mask


def _quarter_offset(p: np.ndarray, mx: int, my: int) -> tuple[float, float]:
    h, w = p.shape
    dx = dy = 0.0
    if 0 < mx < w - 1:
        dx = 0.25 * np.sign(p[my, mx + 1] - p[my, mx - 1])
    if 0 < my < h - 1:
        dy = 0.25 * np.sign(p[my + 1, mx] - p[my - 1, mx])
    return float(dx), float(dy)


def _taylor_offset(p: np.ndarray, mx: int, my: int) -> tuple[float, float]:
    h, w = p.shape
    if not (0 < mx < w - 1 and 0 < my < h - 1):
        return 0.0, 0.0
    L = np.log(np.maximum(p[my - 1 : my + 2, mx - 1 : mx + 2], 0.0) + 1e-12)
    gx = 0.5 * (L[1, 2] - L[1, 0])
    gy = 0.5 * (L[2, 1] - L[0, 1])
    hxx = L[1, 2] - 2 * L[1, 1] + L[1, 0]
    hyy = L[2, 1] - 2 * L[1, 1] + L[0, 1]
    hxy = 0.25 * (L[2, 2] - L[2, 0] - L[0, 2] + L[0, 0])
    det = hxx * hyy - hxy * hxy
    if not (hxx < 0 and det > 0):
        return 0.0, 0.0
    ox = -(hyy * gx - hxy * gy) / det
    oy = -(hxx * gy - hxy * gx) / det
    return float(np.clip(ox, -0.5, 0.5)), float(np.clip(oy, -0.5, 0.5))


def decode_plane(plane: np.ndarray, refinement: str = "taylor") -> tuple[float, float, float]:
    """Peak location ``(x, y)`` in heatmap coordinates and its height."""
    if refinement not in REFINEMENTS:
        raise ValueError(f"refinement must be one of {REFINEMENTS}, got {refinement!r}")
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise ValueError(f"cannot decode an empty or non-2-D plane of shape {plane.shape}")
    idx = int(np.argmax(plane))  # first occurrence in row-major order
    my, mx = divmod(idx, plane.shape[1])
    conf = float(plane[my, mx])
    dx = dy = 0.0
    if refinement == "quarter_offset":
        dx, dy = _quarter_offset(plane, mx, my)
    elif refinement == "taylor":
        dx, dy = _taylor_offset(plane, mx, my)
    return mx + dx, my + dy, conf


def decode(heatmaps: np.ndarray, meta: HeatmapMeta, refinement: str = "taylor",
           joint_mask: Sequence[bool] | None = None) -> list[tuple[Keypoint, float]]:
    """Decode ``[K, H, W]`` heatmaps into image-space keypoints with confidences.

    Masked joints, and joints whose peak is not positive, come back with
    ``v = 0`` and confidence 0.
    """
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    if heatmaps.ndim != 3:
        raise ValueError(f"heatmaps must be [K, H, W], got shape {heatmaps.shape}")
    out = []
    for k, plane in enumerate(heatmaps):
        hx, hy, conf = decode_plane(plane, refinement)
        x, y = meta.to_image(hx, hy)
        if (joint_mask is not None and not joint_mask[k]) or not conf > 0:
            out.append((Keypoint(x, y, 0), 0.0))
        else:
            out.append((Keypoint(x, y, 2), conf))
    return out


def decode_annotation(heatmaps: np.ndarray, meta: HeatmapMeta, refinement: str = "taylor",
                      joint_mask=None, **fields) -> PoseAnnotation:
    """Decode into a scored annotation; the score is the mean joint confidence."""
    decoded = decode(heatmaps, meta, refinement, joint_mask)
    score = float(np.mean([c for _, c in decoded])) if decoded else 0.0
    return PoseAnnotation([kp for kp, _ in decoded], score=score, **fields)
