"""Synthetic shape scenes with complete ground truth, and their on-disk layout."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from PIL import Image

CLASS_NAMES = ("background", "disk", "square", "triangle", "ring")
NUM_FOREGROUND = len(CLASS_NAMES) - 1
# hue centre per foreground class
CLASS_HUES = (0.0, 0.33, 0.62, 0.14)
HUE_JITTER = 0.06
OBJECT_COUNT_P = (0.5, 0.35, 0.15)
RADIUS_RANGE = (7, 16)
MIN_VISIBLE = 30


@dataclass
class SyntheticScene:
    image: np.ndarray      # [3,H,W] in [0,1], quantised to 1/255
    gt_mask: np.ndarray    # [H,W] int, 0 = background
    labels: np.ndarray     # [K] multi-hot
    scene_id: str = ""

    @property
    def label_key(self) -> tuple:
        return tuple(int(v) for v in self.labels)


def labels_from_mask(mask: np.ndarray, num_classes: int = NUM_FOREGROUND) -> np.ndarray:
    present = np.zeros(num_classes, dtype=np.int64)
    for c in np.unique(mask):
        if c > 0:
            present[c - 1] = 1
    return present


def _shape_mask(cls: int, cy: float, cx: float, r: float, angle: float, yy, xx) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if cls == 1:
        return dy * dy + dx * dx <= r * r
    if cls == 4:
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if cls == 2:
        half = 0.8 * r
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle inscribed in radius r
    verts = [(r * np.cos(a), r * np.sin(a)) for a in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6)]
    inside = np.ones_like(u, dtype=bool)
    for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.6, size=(3, 5, 5))
    base = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    ys = np.linspace(0, 4, H)
    xs = np.linspace(0, 4, W)
    y0 = np.clip(np.floor(ys).astype(int), 0, 3)
    x0 = np.clip(np.floor(xs).astype(int), 0, 3)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    smooth = (coarse[:, y0][:, :, x0] * (1 - fy) * (1 - fx)
              + coarse[:, y0 + 1][:, :, x0] * fy * (1 - fx)
              + coarse[:, y0][:, :, x0 + 1] * (1 - fy) * fx
              + coarse[:, y0 + 1][:, :, x0 + 1] * fy * fx)
    grey = smooth.mean(axis=0, keepdims=True)
    bg = 0.7 * grey + 0.3 * smooth * base
    return bg + rng.normal(0.0, 0.04, size=(3, H, W))


def _colour(rng: np.random.Generator, cls: int) -> np.ndarray:
    hue = (CLASS_HUES[cls - 1] + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    sat = rng.uniform(0.55, 0.95)
    val = rng.uniform(0.6, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def generate_scene(rng: np.random.Generator, size=(64, 64), num_classes: int = NUM_FOREGROUND,
                   scene_id: str = "") -> SyntheticScene:
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    while True:
        image = _background(rng, H, W)
        mask = np.zeros((H, W), dtype=np.int64)
        count = int(rng.choice(len(OBJECT_COUNT_P), p=OBJECT_COUNT_P)) + 1
        for _ in range(count):
            cls = int(rng.integers(1, num_classes + 1))
            r = rng.uniform(*RADIUS_RANGE)
            cy = rng.uniform(r * 0.6, H - r * 0.6)
            cx = rng.uniform(r * 0.6, W - r * 0.6)
            shape = _shape_mask(cls, cy, cx, r, rng.uniform(0, 2 * np.pi), yy, xx)
            colour = _colour(rng, cls)
            shade = 1.0 + 0.15 * ((yy - cy) / r)
            texture = colour[:, None, None] * np.clip(shade, 0.7, 1.3) + rng.normal(0.0, 0.03, (3, H, W))
            image = np.where(shape[None], texture, image)
            mask[shape] = cls
        counts = np.bincount(mask.reshape(-1), minlength=num_classes + 1)
        present = counts[1:][counts[1:] > 0]
        if present.size and present.min() >= MIN_VISIBLE:
            break
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SyntheticScene(image, mask, labels_from_mask(mask, num_classes), scene_id)


def generate_dataset(n: int, seed: int, size=(64, 64), num_classes: int = NUM_FOREGROUND) -> List[SyntheticScene]:
    """``n`` scenes, each with 1-3 objects; identical for identical seeds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, size, num_classes, scene_id=f"{i:05d}") for i in range(n)]


def split_dataset(scenes: Sequence[SyntheticScene], train_fraction: float = 0.8):
    cut = int(round(len(scenes) * train_fraction))
    return list(scenes[:cut]), list(scenes[cut:])


def class_coverage(scenes: Sequence[SyntheticScene]) -> Dict[str, float]:
    labels = np.stack([s.labels for s in scenes])
    frac = labels.mean(axis=0)
    return {CLASS_NAMES[c + 1]: float(frac[c]) for c in range(labels.shape[1])}


# -- disk layout -----------------------------------------------------------------

def save_split(scenes: Sequence[SyntheticScene], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in scenes:
        img_name, mask_name = f"{s.scene_id}.png", f"{s.scene_id}_mask.png"
        rgb = np.round(np.transpose(s.image, (1, 2, 0)) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out / img_name)
        Image.fromarray(s.gt_mask.astype(np.uint8), mode="L").save(out / mask_name)
        entries.append({"id": s.scene_id, "image": img_name, "mask": mask_name,
                        "labels": [int(v) for v in s.labels]})
    manifest = {"num_classes": len(scenes[0].labels) if scenes else NUM_FOREGROUND,
                "class_names": list(CLASS_NAMES), "scenes": entries}
    (out / "labels.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_split(split_dir, with_masks: bool = True) -> List[SyntheticScene]:
    """Read a split; ``with_masks=False`` leaves ground truth unread (training paths)."""
    root = Path(split_dir)
    manifest = json.loads((root / "labels.json").read_text(encoding="utf-8"))
    scenes = []
    for e in manifest["scenes"]:
        rgb = np.asarray(Image.open(root / e["image"]).convert("RGB"), dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(root / e["mask"]), dtype=np.int64) if with_masks else None
        scenes.append(SyntheticScene(np.transpose(rgb, (2, 0, 1)).copy(), mask,
                                     np.asarray(e["labels"], dtype=np.int64), e["id"]))
    return scenes
