"""Stage-one objectives: image, pixel and regional contrast plus the hybrid classification loss."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .sinkhorn import SinkhornConfig, emd, sinkhorn_batch
from .tensor import Tensor

logger = logging.getLogger(__name__)

MASKED = -1e30


class NoPositivePairsWarning(UserWarning):
    """No query in the batch has a positive partner; the image-level term is 0."""


class EmptyOverlapWarning(UserWarning):
    """Two crops do not overlap; the pixel-level term is 0."""


# -- image level ------------------------------------------------------------

@dataclass
class PairMask:
    positive: np.ndarray
    negative: np.ndarray


def pair_masks(labels: np.ndarray) -> PairMask:
    """Positive pairs share the exact multi-hot label; negative pairs share no class."""
    y = np.asarray(labels) > 0.5
    same = np.all(y[:, None, :] == y[None, :, :], axis=-1)
    np.fill_diagonal(same, False)
    overlap = (y[:, None, :] & y[None, :, :]).any(axis=-1)
    return PairMask(positive=same, negative=~overlap)


def imc_loss(embeddings, labels: np.ndarray, normalize: bool = True) -> Tensor:
    """Multi-positive image-level contrast.

    For each query the positive similarities are summed inside the log:
    ``-log(sum_pos e^s / (sum_pos e^s + sum_neg e^s))``. Queries without a
    positive partner are left out of the mean.
    """
    z = T.as_tensor(embeddings)
    masks = pair_masks(labels)
    valid = np.flatnonzero(masks.positive.any(axis=1))
    if valid.size == 0:
        warnings.warn("batch has no positive image pairs", NoPositivePairsWarning, stacklevel=2)
        return Tensor(0.0)
    if normalize:
        z = T.normalize(z, axis=-1)
    scores = T.matmul(z, T.transpose(z))
    pos_fill = np.where(masks.positive, 0.0, MASKED)
    all_fill = np.where(masks.positive | masks.negative, 0.0, MASKED)
    per_query = T.logsumexp(scores + all_fill, axis=1) - T.logsumexp(scores + pos_fill, axis=1)
    return T.mean(per_query[valid])


# -- pixel level ------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def intersect(self, other: "Rect") -> Optional["Rect"]:
        top, left = max(self.top, other.top), max(self.left, other.left)
        bottom, right = min(self.bottom, other.bottom), min(self.right, other.right)
        if bottom <= top or right <= left:
            return None
        return Rect(top, left, bottom - top, right - left)


@dataclass
class CropPair:
    """Two crops of one image and the maps computed from each.

    ``sam_*`` are attention-refined maps (the online branch), ``cam_*`` the raw
    activation maps (the target branch). Crop corners sit on the feature grid,
    i.e. are multiples of ``stride`` pixels.
    """

    crop_a: Rect
    crop_b: Rect
    sam_a: Tensor
    cam_a: Tensor
    sam_b: Tensor
    cam_b: Tensor
    stride: int

    @property
    def overlap(self) -> Optional[Rect]:
        return self.crop_a.intersect(self.crop_b)

    def cells(self, crop: Rect) -> Tuple[slice, slice]:
        """Feature-grid slices of ``crop``'s map covering the overlap."""
        ov = self.overlap
        s = self.stride
        r0 = (ov.top - crop.top) // s
        c0 = (ov.left - crop.left) // s
        return slice(r0, r0 + ov.height // s), slice(c0, c0 + ov.width // s)


def pixel_contrast(online, target) -> Tensor:
    """Mean negative cosine between per-cell vectors [C, ...]; ``target`` is not differentiated."""
    online = T.as_tensor(online)
    target = T.stop_gradient(target)
    c = online.shape[0]
    u = T.transpose(T.reshape(online, (c, -1)))
    v = T.transpose(T.reshape(target, (c, -1)))
    return -T.mean(T.cosine_similarity(u, v, axis=-1))


def pixc_loss(pair: CropPair) -> Tensor:
    """Symmetrised pixel contrast over the overlap of two crops."""
    ov = pair.overlap
    if ov is None or ov.height < pair.stride or ov.width < pair.stride:
        warnings.warn("crops do not overlap on the feature grid", EmptyOverlapWarning, stacklevel=2)
        return Tensor(0.0)
    ra, ca = pair.cells(pair.crop_a)
    rb, cb = pair.cells(pair.crop_b)
    a_on = T.as_tensor(pair.sam_a)[:, ra, ca]
    b_on = T.as_tensor(pair.sam_b)[:, rb, cb]
    a_tg = T.as_tensor(pair.cam_a).data[:, ra, ca]
    b_tg = T.as_tensor(pair.cam_b).data[:, rb, cb]
    return 0.5 * (pixel_contrast(a_on, b_tg) + pixel_contrast(b_on, a_tg))


# -- regional level ---------------------------------------------------------

Window = Tuple[int, int, int, int]  # row, col, height, width in feature cells


@dataclass(frozen=True)
class PatchConfig:
    grid: Tuple[int, int] = (2, 2)
    num_dynamic: int = 3


def static_windows(height: int, width: int, grid: Tuple[int, int]) -> List[Window]:
    """Non-overlapping grid of patches covering a ``height`` x ``width`` map."""
    rows, cols = grid
    if height % rows or width % cols:
        raise ValueError(f"{height}x{width} map does not split into a {rows}x{cols} grid")
    ph, pw = height // rows, width // cols
    return [(r * ph, c * pw, ph, pw) for r in range(rows) for c in range(cols)]


def sample_dynamic_windows(height: int, width: int, cfg: PatchConfig,
                           rng: np.random.Generator) -> List[Window]:
    """Random patches of one random size laid on a random stride lattice."""
    gh, gw = height // cfg.grid[0], width // cfg.grid[1]
    ph = int(rng.integers(-(-gh // 2), gh + 1))
    pw = int(rng.integers(-(-gw // 2), gw + 1))
    sh = int(rng.integers(1, ph + 1))
    sw = int(rng.integers(1, pw + 1))
    candidates = [(r, c, ph, pw)
                  for r in range(0, height - ph + 1, sh)
                  for c in range(0, width - pw + 1, sw)]
    n = min(cfg.num_dynamic, len(candidates))
    picks = rng.choice(len(candidates), size=n, replace=False)
    return [candidates[i] for i in sorted(picks)]


def marginal_weights(patch) -> Tensor:
    """Per-cell transport mass from a background-included patch [C,h,w].

    A cell's weight is its summed foreground activation (the last, background
    channel is ignored), normalised to 1; an empty patch gets uniform weights.
    """
    patch = T.as_tensor(patch)
    fg = T.sum_(patch[:-1], axis=0)
    fg = T.reshape(fg, (-1,))
    total = float(fg.data.sum())
    if total <= 0:
        n = fg.shape[0]
        return Tensor(np.full(n, 1.0 / n))
    return fg / T.sum_(fg)


def _cells(patch) -> Tensor:
    c = patch.shape[0]
    return T.transpose(T.reshape(patch, (c, -1)))


def _cut(m, w: Window):
    r, c, h, wd = w
    return m[:, r:r + h, c:c + wd]


def patch_emd(static_patch, dynamic_patch, cfg: SinkhornConfig = SinkhornConfig(), solved=None) -> Tensor:
    """EMD between two patches with cosine cost; the dynamic side is a constant."""
    dyn = T.stop_gradient(dynamic_patch)
    cost = 1.0 - T.pairwise_cosine(_cells(static_patch), _cells(dyn))
    return emd(cost, marginal_weights(static_patch), marginal_weights(dyn), cfg, solved=solved)


def _np_cost(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    ua = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), eps)
    ub = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), eps)
    return 1.0 - ua @ ub.T


def _np_weights(patch: np.ndarray) -> np.ndarray:
    fg = patch[:-1].sum(axis=0).reshape(-1)
    total = fg.sum()
    return fg / total if total > 0 else np.full(fg.size, 1.0 / fg.size)


def prc_values(static_map, dynamic_map, static: Sequence[Window], dynamic: Sequence[Window],
               cfg: SinkhornConfig = SinkhornConfig()):
    """EMD for every (static, dynamic) patch pair, without building a graph.

    Returns ``(values [A,B], plans, fixed_point_plans)`` keyed by pair.
    """
    sm = T.as_tensor(static_map).data
    dm = T.as_tensor(dynamic_map).data
    pairs = [(i, j) for i in range(len(static)) for j in range(len(dynamic))]
    groups: Dict[tuple, list] = {}
    for i, j in pairs:
        shape = (static[i][2] * static[i][3], dynamic[j][2] * dynamic[j][3])
        groups.setdefault(shape, []).append((i, j))
    values = np.zeros((len(static), len(dynamic)))
    plans, fixed = {}, {}
    for members in groups.values():
        costs, wa, wb = [], [], []
        for i, j in members:
            ps, pd = _cut(sm, static[i]), _cut(dm, dynamic[j])
            cs, cd = ps.reshape(ps.shape[0], -1).T, pd.reshape(pd.shape[0], -1).T
            costs.append(_np_cost(cs, cd))
            wa.append(_np_weights(ps))
            wb.append(_np_weights(pd))
        vals, pl, _, raw = sinkhorn_batch(np.stack(costs), np.stack(wa), np.stack(wb), cfg)
        for n, (i, j) in enumerate(members):
            values[i, j] = vals[n]
            plans[i, j] = pl[n]
            fixed[i, j] = raw[n]
    return values, plans, fixed


def prc_loss(static_map, dynamic_map, static: Sequence[Window], dynamic: Sequence[Window],
             cfg: SinkhornConfig = SinkhornConfig()) -> Tensor:
    """Minimum EMD over all static/dynamic patch pairs.

    ``static_map`` is the attention-refined background-included map; the
    ``dynamic_map`` branch is a constant. Only the minimising pair is put on
    the graph.
    """
    if not static or not dynamic:
        raise ValueError("prc_loss needs at least one static and one dynamic patch")
    values, plans, fixed = prc_values(static_map, dynamic_map, static, dynamic, cfg)
    i, j = np.unravel_index(int(np.argmin(values)), values.shape)
    static_map = T.as_tensor(static_map)
    return patch_emd(_cut(static_map, static[i]), _cut(T.as_tensor(dynamic_map).data, dynamic[j]), cfg,
                     solved=(values[i, j], plans[i, j], fixed[i, j]))


# -- classification ---------------------------------------------------------

def hcl_components(logits, labels: np.ndarray, gamma: float = 2.0) -> Dict[str, Tensor]:
    """BCE, focal and pairwise ranking terms on sigmoid multi-label logits [B,K]."""
    x = T.as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"logits {x.shape} and labels {y.shape} differ in shape")
    sp_neg = T.softplus(-x)  # -log p
    sp_pos = T.softplus(x)   # -log (1 - p)
    bce = T.mean(y * sp_neg + (1.0 - y) * sp_pos)
    p = T.sigmoid(x)
    focal = T.mean(y * T.power(1.0 - p, gamma) * sp_neg + (1.0 - y) * T.power(p, gamma) * sp_pos)
    # log(1 + sum_{pos, neg} exp(x_neg - x_pos)) per sample
    diff = T.reshape(x, (x.shape[0], 1, -1)) - T.reshape(x, (x.shape[0], -1, 1))
    valid = y[:, :, None] * (1.0 - y[:, None, :])
    fill = np.where(valid > 0, 0.0, MASKED)
    flat = T.reshape(diff + fill, (x.shape[0], -1))
    pair = T.mean(T.softplus(T.logsumexp(flat, axis=1)))
    return {"bce": bce, "focal": focal, "pair": pair}


def hcl_loss(logits, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    parts = hcl_components(logits, labels, gamma)
    return parts["bce"] + parts["focal"] + parts["pair"]


LOSS_NAMES = ("hcl", "imc", "pixc", "prc")


def mcl_loss(components: Dict[str, Tensor]) -> Tensor:
    """Unweighted sum of whichever of hcl/imc/pixc/prc are present."""
    total = Tensor(0.0)
    for name in LOSS_NAMES:
        if name in components:
            value = T.as_tensor(components[name])
            logger.debug("%s=%.6f", name, float(value.data))
            total = total + value
    return total
