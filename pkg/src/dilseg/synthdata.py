"""Synthetic crowded-small-object scenes and balanced training patches.

A scene is a 3-channel image in [0, 1] with an instance-id map (0 = background).
Objects are small rectangles, rotated rectangles and L-shaped composites packed
by rejection sampling; patches are 76x76 windows labelled on their 16x16 centre.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .io import read_ntsr, write_ntsr, write_pgm

PATCH = 76
CENTER = 16
BALANCE_BINS = ((0, 0), (1, 64), (65, 128), (129, 256))
EIGHT = np.ones((3, 3), dtype=bool)


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    extent: int = 256
    count: Tuple[int, int] = (80, 140)
    size: Tuple[int, int] = (3, 12)
    gap: int = 1
    noise: float = 0.06
    seed: int = 0
    l_fraction: float = 0.2
    rotated_fraction: float = 0.4
    max_tries: int = 400

    def __post_init__(self):
        self.count = tuple(int(v) for v in self.count)
        self.size = tuple(int(v) for v in self.size)
        if self.size[0] < 2 or self.size[1] < self.size[0]:
            raise ValueError(f"size range must satisfy 2 <= low <= high, got {self.size}")
        if self.extent < 96:
            raise ValueError(f"scene extent must be >= 96, got {self.extent}")
        if self.count[0] < 0 or self.count[1] < self.count[0]:
            raise ValueError(f"bad object count range {self.count}")
        if self.gap < 0:
            raise ValueError("gap must be >= 0")

    def with_seed(self, seed: int) -> "SceneConfig":
        d = asdict(self)
        d["seed"] = seed
        return SceneConfig(**d)


@dataclass
class Scene:
    image: np.ndarray  # 3 x H x W, float32 in [0, 1]
    instance_map: np.ndarray  # H x W, int32
    resolution_scale: int = 1
    scene_id: str = ""

    @property
    def extent(self) -> Tuple[int, int]:
        return self.instance_map.shape

    @property
    def num_instances(self) -> int:
        return int(self.instance_map.max(initial=0))

    def instance_masks(self) -> List[np.ndarray]:
        return [self.instance_map == i for i in range(1, self.num_instances + 1)]


def _rect_mask(w: int, h: int, angle: float) -> np.ndarray:
    if angle == 0.0:
        return np.ones((h, w), dtype=bool)
    r = int(math.ceil(math.hypot(w, h))) + 2
    c = r / 2.0
    yy, xx = np.mgrid[0:r, 0:r] + 0.5 - c
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * xx + sa * yy
    v = -sa * xx + ca * yy
    m = (np.abs(u) <= w / 2.0) & (np.abs(v) <= h / 2.0)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return np.zeros((0, 0), dtype=bool)
    return m[ys.min(): ys.max() + 1, xs.min(): xs.max() + 1]


def _l_mask(w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    m = np.ones((h, w), dtype=bool)
    cw = max(1, int(round(w * rng.uniform(0.4, 0.6))))
    ch = max(1, int(round(h * rng.uniform(0.4, 0.6))))
    corner = rng.integers(4)
    ys = slice(0, ch) if corner < 2 else slice(h - ch, h)
    xs = slice(0, cw) if corner % 2 == 0 else slice(w - cw, w)
    m[ys, xs] = False
    return m


def _connected(mask: np.ndarray) -> bool:
    if not mask.any():
        return False
    _, n = ndimage.label(mask, structure=EIGHT)
    return n == 1


def _object_mask(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.size
    while True:
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        roll = rng.random()
        if roll < config.l_fraction and min(w, h) >= 3:
            m = _l_mask(w, h, rng)
        elif roll < config.l_fraction + config.rotated_fraction:
            m = _rect_mask(w, h, float(rng.uniform(0.1, math.pi / 2 - 0.1)))
        else:
            m = _rect_mask(w, h, 0.0)
        if _connected(m):
            return m


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def generate_scene(config: SceneConfig, scene_id: str = "") -> Scene:
    """Deterministic scene for ``config`` (including its seed)."""
    rng = np.random.default_rng(config.seed)
    n = config.extent
    target = int(rng.integers(config.count[0], config.count[1] + 1))
    instance_map = np.zeros((n, n), dtype=np.int32)
    forbidden = np.zeros((n, n), dtype=bool)
    grow = np.ones((2 * config.gap + 1, 2 * config.gap + 1), dtype=bool)
    # objects cluster in denser neighbourhoods
    density = _smooth_field(rng, (n, n), n / 10.0)
    for obj in range(1, target + 1):
        mask = _object_mask(config, rng)
        mh, mw = mask.shape
        placed = False
        for _ in range(config.max_tries):
            y = int(rng.integers(0, n - mh + 1))
            x = int(rng.integers(0, n - mw + 1))
            if rng.random() > 0.35 + 0.65 * (density[y + mh // 2, x + mw // 2] + 1) / 2:
                continue
            window = forbidden[y: y + mh, x: x + mw]
            if (window & mask).any():
                continue
            instance_map[y: y + mh, x: x + mw][mask] = obj
            g = config.gap
            y0, x0 = max(0, y - g), max(0, x - g)
            y1, x1 = min(n, y + mh + g), min(n, x + mw + g)
            local = np.zeros((y1 - y0, x1 - x0), dtype=bool)
            local[y - y0: y - y0 + mh, x - x0: x - x0 + mw] = mask
            if g:
                local = ndimage.binary_dilation(local, structure=grow)
            forbidden[y0:y1, x0:x1] |= local
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place object {obj} of {target} after {config.max_tries} tries; "
                "lower the object count or the gap"
            )

    image = _render(instance_map, config, rng)
    return Scene(image, instance_map, 1, scene_id)


def _render(instance_map: np.ndarray, config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = instance_map.shape[0]
    base = rng.uniform(0.18, 0.32, size=3)
    image = base[:, None, None] + 0.07 * _smooth_field(rng, (3, n, n), (0, n / 16.0, n / 16.0))
    # a few straight roads, still inside the background intensity band
    for _ in range(int(rng.integers(1, 4))):
        width = int(rng.integers(2, 5))
        pos = int(rng.integers(0, n - width))
        tone = rng.uniform(0.38, 0.46)
        if rng.random() < 0.5:
            image[:, pos: pos + width, :] = tone
        else:
            image[:, :, pos: pos + width] = tone
    m = instance_map.max(initial=0)
    if m:
        roofs = rng.uniform(0.58, 0.9, size=(m + 1, 3))
        fg = instance_map > 0
        image[:, fg] = roofs[instance_map[fg]].T
    image += rng.normal(0.0, config.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _relabel(instance_map: np.ndarray) -> np.ndarray:
    """Keep the largest 8-connected piece of each id and renumber ids 1..M."""
    out = np.zeros_like(instance_map)
    next_id = 1
    for old in np.unique(instance_map):
        if old == 0:
            continue
        lab, n = ndimage.label(instance_map == old, structure=EIGHT)
        if n == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        out[lab == keep] = next_id
        next_id += 1
    return out


def downsample_scene(scene: Scene, factor: int) -> Scene:
    """Box-filter the image and majority-vote the instance map over factor x factor blocks.

    Ties in the vote go to background. Trailing rows/columns that do not fill a
    block are dropped.
    """
    if factor < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return Scene(scene.image.copy(), scene.instance_map.copy(), scene.resolution_scale, scene.scene_id)
    h, w = scene.instance_map.shape
    H, W = h // factor, w // factor
    img = scene.image[:, : H * factor, : W * factor].reshape(3, H, factor, W, factor).mean(axis=(2, 4))
    blocks = (
        scene.instance_map[: H * factor, : W * factor]
        .reshape(H, factor, W, factor)
        .transpose(0, 2, 1, 3)
        .reshape(H, W, factor * factor)
    )
    counts = (blocks[..., :, None] == blocks[..., None, :]).sum(-1)
    best = counts.max(-1, keepdims=True)
    winners = np.where(counts == best, blocks, -1)
    top = winners.max(-1)
    low = np.where(counts == best, blocks, np.iinfo(np.int32).max).min(-1)
    voted = np.where(top == low, top, 0).astype(np.int32)
    return Scene(img.astype(np.float32), _relabel(voted), scene.resolution_scale * factor, scene.scene_id)


# -- patches -----------------------------------------------------------------


def _center_counts(scene: Scene, patch: int, center: int) -> np.ndarray:
    fg = (scene.instance_map > 0).astype(np.int64)
    ii = np.pad(fg.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    h, w = fg.shape
    m = (patch - center) // 2
    ys = np.arange(0, h - patch + 1) + m
    xs = np.arange(0, w - patch + 1) + m
    y0, y1 = ys[:, None], ys[:, None] + center
    x0, x1 = xs[None, :], xs[None, :] + center
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


def balance_bin(count: int) -> int:
    for i, (lo, hi) in enumerate(BALANCE_BINS):
        if lo <= count <= hi:
            return i
    raise ValueError(f"foreground count {count} outside every balance bin")


@dataclass
class CropDraw:
    """Provenance of sampled patches: scene index, window offset, quarter turns."""

    scene: np.ndarray
    y: np.ndarray
    x: np.ndarray
    rotation: np.ndarray
    bin: np.ndarray

    def __len__(self) -> int:
        return int(self.scene.shape[0])


def draw_crops(
    scenes: Sequence[Scene], count: int, seed: int, patch: int = PATCH, center: int = CENTER
) -> CropDraw:
    """Pick crop windows uniformly across non-empty foreground-count bins.

    Every window position of every scene is a candidate; candidates are binned
    by the number of foreground pixels in their centre region.
    """
    if count < 1:
        raise ValueError("patch count must be >= 1")
    per_bin: List[List[np.ndarray]] = [[] for _ in BALANCE_BINS]
    for si, scene in enumerate(scenes):
        h, w = scene.instance_map.shape
        if h < patch or w < patch:
            continue
        counts = _center_counts(scene, patch, center)
        yy, xx = np.indices(counts.shape)
        for b, (lo, hi) in enumerate(BALANCE_BINS):
            sel = (counts >= lo) & (counts <= hi)
            if sel.any():
                per_bin[b].append(np.stack([np.full(sel.sum(), si), yy[sel], xx[sel]], axis=1))
    if not any(per_bin):
        raise ValueError(f"no scene is at least {patch} pixels per side")
    bins = [(b, np.concatenate(c)) for b, c in enumerate(per_bin) if c]
    rng = np.random.default_rng(seed)
    choice = rng.integers(len(bins), size=count)
    picks = np.empty((count, 3), dtype=np.int64)
    bin_ids = np.empty(count, dtype=np.int64)
    for j, (b, cand) in enumerate(bins):
        where = np.nonzero(choice == j)[0]
        picks[where] = cand[rng.integers(len(cand), size=where.size)]
        bin_ids[where] = b
    rotation = rng.integers(4, size=count)
    return CropDraw(picks[:, 0], picks[:, 1], picks[:, 2], rotation, bin_ids)


@dataclass
class PatchSet:
    """Lazily materialized training patches; arrays are built on request."""

    scenes: Sequence[Scene]
    draw: CropDraw
    patch: int = PATCH
    center: int = CENTER

    def __len__(self) -> int:
        return len(self.draw)

    def provenance(self, i: int) -> dict:
        d = self.draw
        return {
            "scene": int(d.scene[i]),
            "scene_id": self.scenes[int(d.scene[i])].scene_id,
            "offset": (int(d.y[i]), int(d.x[i])),
            "rotation": 90 * int(d.rotation[i]),
        }

    def batch(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        """(inputs N x 3 x P x P, one-hot labels N x 2 x C x C) for the given indices."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        p, c = self.patch, self.center
        m = (p - c) // 2
        x = np.empty((idx.size, 3, p, p), dtype=np.float32)
        y = np.empty((idx.size, 2, c, c), dtype=np.float32)
        d = self.draw
        for out, i in enumerate(idx):
            s = self.scenes[int(d.scene[i])]
            oy, ox, k = int(d.y[i]), int(d.x[i]), int(d.rotation[i])
            x[out] = np.rot90(s.image[:, oy: oy + p, ox: ox + p], k, axes=(1, 2))
            lab = np.rot90(s.instance_map[oy + m: oy + m + c, ox + m: ox + m + c] > 0, k)
            y[out, 1] = lab
            y[out, 0] = ~lab
        return x, y

    @property
    def inputs(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))[0]

    @property
    def labels(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))[1]

    def subset(self, indices) -> "PatchSet":
        idx = np.asarray(indices, dtype=np.int64)
        d = self.draw
        return PatchSet(
            self.scenes,
            CropDraw(d.scene[idx], d.y[idx], d.x[idx], d.rotation[idx], d.bin[idx]),
            self.patch,
            self.center,
        )


def sample_patches(scenes: Sequence[Scene], count: int, seed: int) -> PatchSet:
    """Balanced, rotation-augmented 76x76 patches with 16x16 centre labels."""
    return PatchSet(list(scenes), draw_crops(scenes, count, seed))


# -- datasets on disk --------------------------------------------------------


@dataclass
class Dataset:
    train: List[Scene]
    test: List[Scene]
    manifest: dict = field(default_factory=dict)


def generate_dataset(config: SceneConfig, n_train: int, n_test: int, downsample: int = 1) -> Dataset:
    """Scenes ``0..n_train-1`` for training, the next ``n_test`` for testing.

    Scene ``i`` uses seed ``config.seed ^ i``.
    """
    scenes = []
    for i in range(n_train + n_test):
        s = generate_scene(config.with_seed(config.seed ^ i), scene_id=f"scene_{i:03d}")
        if downsample > 1:
            s = downsample_scene(s, downsample)
        scenes.append(s)
    manifest = {
        "format": 1,
        "config": asdict(config),
        "downsample": downsample,
        "scenes": [
            {
                "id": s.scene_id,
                "split": "train" if i < n_train else "test",
                "seed": config.seed ^ i,
                "extent": list(s.instance_map.shape),
                "instances": s.num_instances,
                "resolution_scale": s.resolution_scale,
            }
            for i, s in enumerate(scenes)
        ],
    }
    return Dataset(scenes[:n_train], scenes[n_train:], manifest)


def save_dataset(dataset: Dataset, directory, preview: bool = False) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for scene in dataset.train + dataset.test:
        d = root / scene.scene_id
        d.mkdir(exist_ok=True)
        write_ntsr(d / "image.ntsr", scene.image)
        write_ntsr(d / "instances.ntsr", scene.instance_map.astype(np.float32))
        if preview:
            write_pgm(d / "preview.pgm", scene.image.mean(axis=0), normalize=False)
    (root / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    train, test = [], []
    for entry in manifest["scenes"]:
        d = root / entry["id"]
        scene = Scene(
            read_ntsr(d / "image.ntsr"),
            read_ntsr(d / "instances.ntsr").astype(np.int32),
            int(entry.get("resolution_scale", 1)),
            entry["id"],
        )
        (train if entry["split"] == "train" else test).append(scene)
    return Dataset(train, test, manifest)


def load_scene(path) -> Scene:
    """A scene directory (image.ntsr + optional instances.ntsr) or a bare image file."""
    p = Path(path)
    if p.is_dir():
        image = read_ntsr(p / "image.ntsr")
        inst_path = p / "instances.ntsr"
        inst = read_ntsr(inst_path).astype(np.int32) if inst_path.exists() else np.zeros(image.shape[1:], np.int32)
        return Scene(image, inst, 1, p.name)
    image = read_ntsr(p)
    return Scene(image, np.zeros(image.shape[1:], np.int32), 1, p.stem)
