"""Pixel- and instance-level evaluation of probability maps and mask proposals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .inference import ProposalSet, extract_proposals, predict_scene

SIZE_BINS: Tuple[Tuple[str, float, float], ...] = (
    ("VerySmall", 0, 100),
    ("Small", 100, 400),
    ("Mid", 400, 1600),
    ("Large", 1600, 6400),
    ("VeryLarge", 6400, math.inf),
)
BIN_NAMES = tuple(b[0] for b in SIZE_BINS)
AP_VOL_THRESHOLDS = tuple(k / 10 for k in range(1, 10))
AR_THRESHOLDS = tuple(k / 100 for k in range(50, 100, 5))


def size_bin(area: int) -> str:
    for name, lo, hi in SIZE_BINS:
        if lo <= area < hi:
            return name
    raise ValueError(f"negative area {area}")


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def iou_matrix(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> np.ndarray:
    """IoU of every (prediction, ground truth) pair, shape (len(pred), len(gt))."""
    if not len(pred) or not len(gt):
        return np.zeros((len(pred), len(gt)))
    shape = np.shape(pred[0])
    if any(np.shape(m) != shape for m in list(pred) + list(gt)):
        raise ValueError("all masks must share one extent")
    p = np.stack([np.asarray(m, dtype=bool).ravel() for m in pred]).astype(np.float32)
    g = np.stack([np.asarray(m, dtype=bool).ravel() for m in gt]).astype(np.float32)
    # 0/1 products summed in float32 stay exact below 2**24 pixels
    inter = (p @ g.T).astype(np.float64)
    union = p.sum(1, dtype=np.float64)[:, None] + g.sum(1, dtype=np.float64)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _dilate(mask: np.ndarray, margin: int) -> np.ndarray:
    if margin == 0:
        return mask
    return ndimage.binary_dilation(mask, structure=np.ones((2 * margin + 1,) * 2, dtype=bool))


def relaxed_counts(pred, gt, margin: int) -> Tuple[int, int, int, int]:
    """(pred hits, pred pixels, gt hits, gt pixels) under a Chebyshev ``margin``."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    hit_p = np.count_nonzero(pred & _dilate(gt, margin))
    hit_g = np.count_nonzero(gt & _dilate(pred, margin))
    return hit_p, np.count_nonzero(pred), hit_g, np.count_nonzero(gt)


def _f1_from_counts(hit_p, n_p, hit_g, n_g) -> float:
    if n_p == 0 and n_g == 0:
        return 1.0
    precision = float(hit_p) / n_p if n_p else 0.0
    recall = float(hit_g) / n_g if n_g else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def relaxed_pixel_f1(pred, gt, margin: int = 3) -> float:
    """F1 where a pixel counts as correct if the other mask lies within ``margin`` (Chebyshev)."""
    return _f1_from_counts(*relaxed_counts(pred, gt, margin))


# -- instance matching -------------------------------------------------------


def _unpack(proposals) -> Tuple[List[np.ndarray], np.ndarray]:
    masks, scores = [], []
    for p in proposals:
        if isinstance(p, tuple):
            masks.append(p[0])
            scores.append(p[1])
        else:
            masks.append(p.mask)
            scores.append(p.score)
    return masks, np.asarray(scores, dtype=np.float64)


def instances_from_map(instance_map: np.ndarray) -> List[np.ndarray]:
    """One boolean mask per id 1..M of an instance map."""
    inst = np.asarray(instance_map)
    return [inst == i for i in range(1, int(inst.max(initial=0)) + 1)]


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep their input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class Matching:
    order: np.ndarray       # proposal indices in rank order
    tp: np.ndarray          # per ranked proposal
    gt_index: np.ndarray    # matched gt per ranked proposal, -1 if none
    gt_matched: np.ndarray  # per gt


def match_ious(ious: np.ndarray, scores: np.ndarray, iou_threshold: float) -> Matching:
    """Greedy matching on a precomputed IoU matrix (proposals x gts)."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    n_p, n_g = ious.shape
    order = rank_order(scores)
    taken = np.zeros(n_g, dtype=bool)
    tp = np.zeros(n_p, dtype=bool)
    gt_index = np.full(n_p, -1, dtype=np.int64)
    for rank, pi in enumerate(order):
        if n_g == 0:
            break
        cand = np.where(taken | (ious[pi] < iou_threshold), -1.0, ious[pi])
        j = int(np.argmax(cand))  # first maximum: lowest gt index on ties
        if cand[j] >= 0:
            taken[j] = True
            tp[rank] = True
            gt_index[rank] = j
    return Matching(order, tp, gt_index, taken)


def match_proposals(proposals, gts: Sequence[np.ndarray], iou_threshold: float = 0.5) -> Matching:
    """Score-descending greedy matching: each proposal takes the best free gt at IoU >= threshold."""
    masks, scores = _unpack(proposals)
    return match_ious(iou_matrix(masks, list(gts)), scores, iou_threshold)


def average_precision(tp_ranked: np.ndarray, n_gt: int) -> Optional[float]:
    """All-point interpolated area under the PR curve of ranked TP flags."""
    if n_gt == 0:
        return None
    tp_ranked = np.asarray(tp_ranked, dtype=bool)
    if tp_ranked.size == 0:
        return 0.0
    tp = np.cumsum(tp_ranked)
    fp = np.cumsum(~tp_ranked)
    precision = tp / (tp + fp)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


@dataclass
class _SceneEval:
    ious: np.ndarray
    scores: np.ndarray
    gt_areas: np.ndarray


def _pooled_ap(items: Sequence[_SceneEval], t: float, gt_keep=None) -> Optional[float]:
    flags, scores, n_gt = [], [], 0
    for k, it in enumerate(items):
        ious = it.ious if gt_keep is None else it.ious[:, gt_keep[k]]
        m = match_ious(ious, it.scores, t)
        flags.append(m.tp)
        scores.append(it.scores[m.order])
        n_gt += ious.shape[1]
    all_scores = np.concatenate(scores) if scores else np.zeros(0)
    all_flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    return average_precision(all_flags[rank_order(all_scores)], n_gt)


def _pooled_recall(items: Sequence[_SceneEval], t: float, gt_keep=None) -> Optional[float]:
    hit, n_gt = 0, 0
    for k, it in enumerate(items):
        ious = it.ious if gt_keep is None else it.ious[:, gt_keep[k]]
        m = match_ious(ious, it.scores, t)
        hit += int(m.gt_matched.sum())
        n_gt += ious.shape[1]
    return hit / n_gt if n_gt else None


def _mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


def _scene_eval(proposals, gts: Sequence[np.ndarray]) -> _SceneEval:
    masks, scores = _unpack(proposals)
    areas = np.array([np.count_nonzero(g) for g in gts], dtype=np.int64)
    return _SceneEval(iou_matrix(masks, list(gts)), scores, areas)


def ap_r(proposals, gts, iou_threshold: float = 0.5) -> Optional[float]:
    """AP at one IoU threshold; ``None`` when there is no ground truth."""
    return _pooled_ap([_scene_eval(proposals, gts)], iou_threshold)


def ap_vol(proposals, gts) -> Optional[float]:
    item = [_scene_eval(proposals, gts)]
    return _mean_or_none([_pooled_ap(item, t) for t in AP_VOL_THRESHOLDS])


def ar(proposals, gts) -> Optional[float]:
    """Recall averaged over IoU 0.50:0.05:0.95, using every proposal."""
    item = [_scene_eval(proposals, gts)]
    return _mean_or_none([_pooled_recall(item, t) for t in AR_THRESHOLDS])


def _bin_keep(items: Sequence[_SceneEval], name: str) -> List[np.ndarray]:
    lo, hi = next((lo, hi) for n, lo, hi in SIZE_BINS if n == name)
    return [np.nonzero((it.gt_areas >= lo) & (it.gt_areas < hi))[0] for it in items]


def ar_by_size(proposals, gts) -> Dict[str, Optional[float]]:
    """AR per size bin; gts outside a bin are removed before matching."""
    return _ar_by_size([_scene_eval(proposals, gts)])


def _ar_by_size(items: Sequence[_SceneEval]) -> Dict[str, Optional[float]]:
    out = {}
    for name in BIN_NAMES:
        keep = _bin_keep(items, name)
        out[name] = _mean_or_none([_pooled_recall(items, t, keep) for t in AR_THRESHOLDS])
    return out


# -- reports -----------------------------------------------------------------


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.4f}"


@dataclass
class MetricsReport:
    pixel_f1: float
    margin: int
    ap_r: Optional[float]
    ap_vol: Optional[float]
    ar: Optional[float]
    ar_by_size: Dict[str, Optional[float]] = field(default_factory=dict)
    n_proposals: int = 0
    gt_by_size: Dict[str, int] = field(default_factory=dict)
    threshold: float = 0.5
    iou_threshold: float = 0.5

    @property
    def n_gt(self) -> int:
        return sum(self.gt_by_size.values())

    def to_dict(self) -> dict:
        return {
            "pixel_f1": self.pixel_f1,
            "margin": self.margin,
            "ap_r": self.ap_r,
            "ap_vol": self.ap_vol,
            "ar": self.ar,
            "ar_by_size": dict(self.ar_by_size),
            "counts": {"proposals": self.n_proposals, "gt": self.n_gt, "gt_by_size": dict(self.gt_by_size)},
            "threshold": self.threshold,
            "iou_threshold": self.iou_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["pixel_f1"], d["margin"], d["ap_r"], d["ap_vol"], d["ar"], dict(d["ar_by_size"]),
            d["counts"]["proposals"], dict(d["counts"]["gt_by_size"]), d["threshold"], d["iou_threshold"],
        )

    def columns(self) -> List[Tuple[str, Optional[float]]]:
        cols = [("pixel_f1", self.pixel_f1), ("ap_r", self.ap_r), ("ap_vol", self.ap_vol), ("ar", self.ar)]
        return cols + [(f"ar_{n}", self.ar_by_size.get(n)) for n in BIN_NAMES]

    @staticmethod
    def table_header(width: int = 18) -> str:
        names = ["pixel F1", "APr", "APvol", "AR"] + [f"AR {n}" for n in BIN_NAMES]
        return f"{'model':<{width}} | " + " | ".join(f"{n:>12}" for n in names)

    def table_row(self, name: str, width: int = 18) -> str:
        return f"{name:<{width}} | " + " | ".join(f"{_fmt(v):>12}" for _, v in self.columns())

    @staticmethod
    def csv_header() -> str:
        return "model," + ",".join(n for n, _ in MetricsReport(0, 0, None, None, None).columns())

    def csv_row(self, name: str) -> str:
        return name + "," + ",".join("" if v is None else f"{v:.6f}" for _, v in self.columns())


def evaluate_proposals(
    proposal_sets: Sequence,
    pred_masks: Sequence[np.ndarray],
    gt_maps: Sequence[np.ndarray],
    margin: int = 3,
    threshold: float = 0.5,
    iou_threshold: float = 0.5,
) -> MetricsReport:
    """Pool proposals and pixel predictions over scenes into one report.

    Rankings are global across scenes; pixel counts are summed before F1.
    """
    if not (len(proposal_sets) == len(pred_masks) == len(gt_maps)):
        raise ValueError("need one proposal set, prediction mask and instance map per scene")
    counts = np.zeros(4, dtype=np.int64)
    items = []
    for props, pred, inst in zip(proposal_sets, pred_masks, gt_maps):
        counts += relaxed_counts(pred, np.asarray(inst) > 0, margin)
        items.append(_scene_eval(props, instances_from_map(inst)))
    gt_by_size = {n: int(sum(len(k) for k in _bin_keep(items, n))) for n in BIN_NAMES}
    return MetricsReport(
        pixel_f1=_f1_from_counts(*counts),
        margin=margin,
        ap_r=_pooled_ap(items, iou_threshold),
        ap_vol=_mean_or_none([_pooled_ap(items, t) for t in AP_VOL_THRESHOLDS]),
        ar=_mean_or_none([_pooled_recall(items, t) for t in AR_THRESHOLDS]),
        ar_by_size=_ar_by_size(items),
        n_proposals=int(sum(len(p) for p in proposal_sets)),
        gt_by_size=gt_by_size,
        threshold=threshold,
        iou_threshold=iou_threshold,
    )


def evaluate(
    source,
    scenes: Sequence,
    threshold: float = 0.5,
    min_area: int = 4,
    margin: int = 3,
    batch: int = 32,
) -> MetricsReport:
    """Predict (if given a model), extract proposals and score them against each scene's instances.

    ``source`` is a :class:`~dilseg.model.Model` or a list of probability maps,
    one per scene.
    """
    if isinstance(source, (list, tuple)):
        maps = [np.asarray(m) for m in source]
        if len(maps) != len(scenes):
            raise ValueError(f"{len(maps)} probability maps for {len(scenes)} scenes")
    else:
        maps = [predict_scene(source, s.image, batch=batch) for s in scenes]
    proposal_sets: List[ProposalSet] = []
    for m, s in zip(maps, scenes):
        if m.shape != s.instance_map.shape:
            raise ValueError(f"map {m.shape} does not match scene {s.scene_id} {s.instance_map.shape}")
        proposal_sets.append(extract_proposals(m, threshold, min_area, scene_id=s.scene_id))
    preds = [m >= threshold for m in maps]
    return evaluate_proposals(proposal_sets, preds, [s.instance_map for s in scenes], margin, threshold)
