"""Keypoint evaluation: OKS, PCKh and COCO-style AP/AR."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from omnipose.codec import PoseAnnotation

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def default_falloffs() -> list[float]:
    """The 17 COCO per-keypoint falloff constants ``k_i`` (twice the published sigmas)."""
    data = json.loads(resources.files("omnipose.data").joinpath("coco_keypoints.json").read_text())
    return [2.0 * s for s in data["sigmas"]]


def coco_keypoint_names() -> list[str]:
    data = json.loads(resources.files("omnipose.data").joinpath("coco_keypoints.json").read_text())
    return list(data["keypoints"])


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class OksConfig:
    k: tuple[float, ...] = field(default_factory=lambda: tuple(default_falloffs()))
    thresholds: tuple[float, ...] = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
    medium_range: tuple[float, float] = (32.0**2, 96.0**2)
    large_range: tuple[float, float] = (96.0**2, math.inf)
    # s^2 = (head_area_factor * head_size)^2 when a gt has no area; off unless set
    head_area_factor: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(float(x) for x in self.k))
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        if not self.k or any(not x > 0 for x in self.k):
            raise ValueError("falloff constants k_i must all be positive")
        t = self.thresholds
        if not t or any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly increasing in (0, 1], got {t}")


def _scale_sq(gt: PoseAnnotation, cfg: OksConfig) -> float:
    if gt.area is not None and gt.area > 0:
        return float(gt.area)
    if cfg.head_area_factor is not None and gt.head_size:
        return float((cfg.head_area_factor * gt.head_size) ** 2)
    raise MetricError(f"annotation {gt.id!r} has no positive area for OKS")


def oks(pred: PoseAnnotation, gt: PoseAnnotation, cfg: OksConfig) -> float:
    """Object keypoint similarity of ``pred`` against ``gt`` (area taken as s^2)."""
    if pred.num_joints != gt.num_joints or gt.num_joints != len(cfg.k):
        raise MetricError(
            f"joint count mismatch: pred {pred.num_joints}, gt {gt.num_joints}, k_i {len(cfg.k)}"
        )
    vis = gt.visibility() > 0
    if not vis.any():
        raise MetricError(f"annotation {gt.id!r} has no labeled keypoints; OKS is undefined")
    d2 = ((pred.coords() - gt.coords()) ** 2).sum(axis=1)
    k = np.asarray(cfg.k)
    e = np.exp(-d2 / (2.0 * _scale_sq(gt, cfg) * k**2))
    return float(e[vis].sum() / vis.sum())


@dataclass
class PckhResult:
    alpha: float
    per_joint: list[float]  # NaN where a joint is never labeled
    mean: float
    correct: list[int]
    labeled: list[int]


def pckh(preds: Sequence[PoseAnnotation], gts: Sequence[PoseAnnotation], alpha: float = 0.5) -> PckhResult:
    """Fraction of labeled joints within ``alpha * head_size`` (inclusive) of the truth.

    ``preds[i]`` is the prediction for ``gts[i]``.
    """
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions for {len(gts)} ground-truth instances")
    if not gts:
        return PckhResult(alpha, [], float("nan"), [], [])
    k = gts[0].num_joints
    correct, labeled = np.zeros(k, dtype=int), np.zeros(k, dtype=int)
    for p, g in zip(preds, gts):
        if g.head_size is None or not g.head_size > 0:
            raise MetricError(f"annotation {g.id!r} has no head_size")
        if p.num_joints != k or g.num_joints != k:
            raise MetricError(f"annotation {g.id!r}: joint count mismatch")
        vis = g.visibility() > 0
        dist = np.linalg.norm(p.coords() - g.coords(), axis=1)
        labeled += vis
        correct += vis & (dist <= alpha * g.head_size)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(labeled > 0, correct / np.maximum(labeled, 1), np.nan)
    mean = correct.sum() / labeled.sum() if labeled.sum() else float("nan")
    return PckhResult(alpha, per_joint.tolist(), float(mean), correct.tolist(), labeled.tolist())


JOINT_GROUPS = ("Head", "Shoulder", "Elbow", "Wrist", "Hip", "Knee", "Ankle")
_GROUP_KEYS = {
    "Head": ("head", "nose", "eye", "ear"),
    "Shoulder": ("shoulder",),
    "Elbow": ("elbow",),
    "Wrist": ("wrist",),
    "Hip": ("hip",),
    "Knee": ("knee",),
    "Ankle": ("ankle",),
}


def joint_group(name: str) -> str | None:
    low = name.lower()
    for group, keys in _GROUP_KEYS.items():
        if any(key in low for key in keys):
            return group
    return None


def pckh_groups(result: PckhResult, names: Sequence[str]) -> dict[str, float]:
    """Pool per-joint counts into the body-part columns, plus ``Mean``."""
    out = {}
    for group in JOINT_GROUPS:
        idx = [i for i, n in enumerate(names) if joint_group(n) == group]
        lab = sum(result.labeled[i] for i in idx)
        out[group] = sum(result.correct[i] for i in idx) / lab if lab else float("nan")
    out["Mean"] = result.mean
    return out


# ---------------------------------------------------------------------------
# COCO-style matching and AP


@dataclass
class ImageMatch:
    """Greedy matching of one image at one threshold."""

    pred_order: list[int]  # prediction indices, best score first
    pred_match: list[int]  # matched gt index per sorted prediction, -1 if none
    pred_ignore: list[bool]
    gt_ignore: list[bool]


def _in_range(area: float | None, rng: tuple[float, float] | None) -> bool:
    return rng is None or area is None or rng[0] <= area <= rng[1]


def score_order(preds: Sequence[PoseAnnotation]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)  # stable


def greedy_match(oks_matrix: np.ndarray, order: Sequence[int], threshold: float,
                 gt_ignore: Sequence[bool] | None = None) -> list[int]:
    """Assign predictions (visited in ``order``) to the free gt of highest OKS >= threshold.

    Non-ignored gts are preferred: an ignored gt is only taken when no regular
    gt qualifies. Ties go to the lower gt index.
    """
    n_gt = oks_matrix.shape[1] if oks_matrix.ndim == 2 else 0
    ignore = list(gt_ignore) if gt_ignore is not None else [False] * n_gt
    taken = [False] * n_gt
    result = []
    for p in order:
        best, best_val = -1, -math.inf
        for pass_ignored in (False, True):
            for g in range(n_gt):
                if taken[g] or ignore[g] != pass_ignored:
                    continue
                v = oks_matrix[p, g]
                if v >= threshold and v > best_val:
                    best, best_val = g, v
            if best >= 0:
                break
        if best >= 0:
            taken[best] = True
        result.append(best)
    return result


def interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall from score-sorted TP/FP flags."""
    if n_gt == 0:
        return float("nan"), float("nan")
    if len(tp) == 0:
        return 0.0, 0.0
    tp_c, fp_c = np.cumsum(tp), np.cumsum(fp)
    recall = tp_c / n_gt
    precision = tp_c / np.maximum(tp_c + fp_c, np.spacing(1))
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean()), float(recall[-1])


@dataclass
class EvalReport:
    pckh_alpha: float | None = None
    pckh_per_joint: list[float] = field(default_factory=list)
    pckh_groups: dict[str, float] = field(default_factory=dict)
    pckh_mean: float | None = None
    ap: float | None = None
    ap50: float | None = None
    ap75: float | None = None
    ap_m: float | None = None
    ap_l: float | None = None
    ar: float | None = None
    ap_per_threshold: list[float] = field(default_factory=list)
    ar_per_threshold: list[float] = field(default_factory=list)
    instance_oks: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return {k: clean(v) for k, v in self.__dict__.items()}


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def _accumulate(preds, gts, oks_mats, threshold, area_rng):
    scores, tps, fps, n_gt = [], [], [], 0
    for img in sorted(set(gts) | set(preds), key=str):
        p_list, g_list = preds.get(img, []), gts.get(img, [])
        g_ign = [not _in_range(g.area, area_rng) for g in g_list]
        n_gt += sum(not x for x in g_ign)
        order = score_order(p_list)
        match = greedy_match(oks_mats[img], order, threshold, g_ign) if g_list else [-1] * len(order)
        for p, m in zip(order, match):
            if m >= 0:
                ignored = g_ign[m]
            else:
                ignored = not _in_range(p_list[p].area, area_rng)
            if ignored:
                continue
            scores.append(p_list[p].score)
            tps.append(m >= 0)
            fps.append(m < 0)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    return interpolated_ap(np.asarray(tps, dtype=float)[order], np.asarray(fps, dtype=float)[order], n_gt)


def oks_matrices(preds: Mapping, gts: Mapping, cfg: OksConfig) -> dict:
    mats = {}
    for img in set(gts) | set(preds):
        p_list, g_list = preds.get(img, []), gts.get(img, [])
        m = np.zeros((len(p_list), len(g_list)))
        for j, g in enumerate(g_list):
            if not (g.visibility() > 0).any():
                m[:, j] = 0.0  # unlabeled gts can never be matched
                continue
            for i, p in enumerate(p_list):
                m[i, j] = oks(p, g, cfg)
        mats[img] = m
    return mats


def match_and_ap(preds: Mapping, gts: Mapping, cfg: OksConfig) -> EvalReport:
    """COCO-style AP/AR over OKS thresholds.

    ``preds`` and ``gts`` map image id to lists of annotations; predictions
    must carry a score. Undefined values (no gt in range) are NaN.
    """
    for img, plist in preds.items():
        for p in plist:
            if p.score is None:
                raise MetricError(f"prediction {p.id!r} on image {img!r} has no score")
    mats = oks_matrices(preds, gts, cfg)
    per_t = [_accumulate(preds, gts, mats, t, None) for t in cfg.thresholds]
    aps = [a for a, _ in per_t]
    ars = [r for _, r in per_t]

    def at(thr):
        for t, a in zip(cfg.thresholds, aps):
            if abs(t - thr) < 1e-9:
                return a
        return float("nan")

    def ranged(rng):
        return _nanmean([_accumulate(preds, gts, mats, t, rng)[0] for t in cfg.thresholds])

    diag = []
    for img in sorted(mats, key=str):
        m = mats[img]
        for i, p in enumerate(preds.get(img, [])):
            best = int(np.argmax(m[i])) if m.shape[1] else -1
            diag.append({
                "image_id": img,
                "pred_id": p.id,
                "gt_id": gts[img][best].id if best >= 0 else None,
                "oks": float(m[i, best]) if best >= 0 else None,
            })
    return EvalReport(
        ap=_nanmean(aps), ap50=at(0.5), ap75=at(0.75),
        ap_m=ranged(cfg.medium_range), ap_l=ranged(cfg.large_range),
        ar=_nanmean(ars), ap_per_threshold=aps, ar_per_threshold=ars, instance_oks=diag,
    )


def format_pckh_table(report: EvalReport) -> str:
    cols = list(JOINT_GROUPS) + ["Mean"]
    vals = [report.pckh_groups.get(c, float("nan")) for c in cols]
    head = " | ".join(f"{c:>8}" for c in cols)
    row = " | ".join(f"{'-':>8}" if math.isnan(v) else f"{100 * v:8.2f}" for v in vals)
    return f"PCKh@{report.pckh_alpha}\n{head}\n{row}"


def format_ap_table(report: EvalReport) -> str:
    cols = [("AP", report.ap), ("AP50", report.ap50), ("AP75", report.ap75),
            ("AP_M", report.ap_m), ("AP_L", report.ap_l), ("AR", report.ar)]
    head = " | ".join(f"{c:>7}" for c, _ in cols)
    row = " | ".join(f"{'-':>7}" if v is None or math.isnan(v) else f"{v:7.4f}" for _, v in cols)
    return f"{head}\n{row}"
