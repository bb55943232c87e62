"""Whole-scene probability maps by window tiling, and mask proposals by thresholding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .autodiff.tensor import Tensor
from .model import Model, forward
from .synthdata import CENTER, EIGHT, PATCH


def tile_origins(h: int, w: int, center: int = CENTER) -> List[Tuple[int, int]]:
    """Top-left corners (in scene coordinates) of the centre tiles covering a scene."""
    ny, nx = -(-h // center), -(-w // center)
    return [(i * center, j * center) for i in range(ny) for j in range(nx)]


def predict_scene(model: Model, image, batch: int = 32, patch: int = PATCH, center: int = CENTER) -> np.ndarray:
    """Foreground probability for every scene pixel.

    The scene is reflect-padded by ``(patch - center) / 2`` (plus enough to reach
    a multiple of ``center``); each ``patch`` window contributes only its centre
    ``center x center`` block, so every pixel is written exactly once.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"scene image must be 3 x H x W, got {img.shape}")
    _, h, w = img.shape
    if h < patch or w < patch:
        raise ValueError(f"scene {h}x{w} is smaller than one {patch}x{patch} window")
    margin = (patch - center) // 2
    extra_h, extra_w = (-h) % center, (-w) % center
    padded = np.pad(img, ((0, 0), (margin, margin + extra_h), (margin, margin + extra_w)), mode="reflect")
    out = np.full((h + extra_h, w + extra_w), np.nan, dtype=np.float32)
    origins = tile_origins(h, w, center)
    for start in range(0, len(origins), batch):
        chunk = origins[start: start + batch]
        x = np.stack([padded[:, y: y + patch, xx: xx + patch] for y, xx in chunk])
        prob, _ = forward(model, x.astype(model.dtype, copy=False), center=center)
        for (y, xx), p in zip(chunk, prob.data[:, 1]):
            out[y: y + center, xx: xx + center] = p
    return out[:h, :w]


@dataclass
class Proposal:
    mask: np.ndarray
    score: float
    area: int

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        ys, xs = np.nonzero(self.mask)
        return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


@dataclass
class ProposalSet:
    proposals: List[Proposal] = field(default_factory=list)
    threshold: float = 0.5
    scene_id: str = ""

    def __len__(self) -> int:
        return len(self.proposals)

    def __iter__(self):
        return iter(self.proposals)

    def __getitem__(self, i):
        return self.proposals[i]

    @property
    def scores(self) -> np.ndarray:
        return np.array([p.score for p in self.proposals], dtype=np.float64)

    def to_json(self) -> dict:
        shape = self.proposals[0].mask.shape if self.proposals else None
        return {
            "scene": self.scene_id,
            "threshold": self.threshold,
            "size": list(shape) if shape else None,
            "proposals": [
                {"score": p.score, "area": p.area, "bbox": list(p.bbox), "rle": rle_encode(p.mask)}
                for p in self.proposals
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProposalSet":
        props = []
        for item in d["proposals"]:
            mask = rle_decode(item["rle"])
            props.append(Proposal(mask, float(item["score"]), int(item["area"])))
        return cls(props, float(d["threshold"]), d.get("scene", ""))


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, alternating background/foreground, starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    first = [0, 0] if flat.size and flat[0] else [0]
    bounds = np.concatenate([first, change, [flat.size]])
    counts = np.diff(bounds)
    return {"size": list(mask.shape), "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    size = tuple(rle["size"])
    flat = np.zeros(int(np.prod(size)), dtype=bool)
    pos, value = 0, False
    for c in rle["counts"]:
        if value:
            flat[pos: pos + c] = True
        pos += c
        value = not value
    return flat[: int(np.prod(size))].reshape(size)


def extract_proposals(prob_map, threshold: float = 0.5, min_area: int = 4, scene_id: str = "") -> ProposalSet:
    """Connected components (8-neighbourhood) of ``prob_map >= threshold``.

    Components smaller than ``min_area`` are dropped; each survivor is scored by
    its mean probability and the set is sorted by score, highest first.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    prob = np.asarray(prob_map, dtype=np.float64)
    labels, n = ndimage.label(prob >= threshold, structure=EIGHT)
    proposals = []
    if n:
        idx = np.arange(1, n + 1)
        areas = ndimage.sum_labels(np.ones_like(prob), labels, idx)
        sums = ndimage.sum_labels(prob, labels, idx)
        for lab, area, total in zip(idx, areas, sums):
            if area < min_area:
                continue
            proposals.append(Proposal(labels == lab, float(total / area), int(area)))
    proposals.sort(key=lambda p: -p.score)  # stable: ties keep raster order
    return ProposalSet(proposals, threshold, scene_id)
