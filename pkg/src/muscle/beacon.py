"""Boundary contrast for the segmentation decoder.

Boundary pixels of the predicted label map are pushed ``steps`` pixels to
either side along the quantised Sobel direction, giving an inward and an
outward point set. Similarities between the two sets on the pseudo mask
decide, per point, whether the decoder's dense similarities should be
suppressed or encouraged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
BOUNDARY_FRACTION = 0.2
LOG_FLOOR = 1e-6

# direction code k covers angle k*45 degrees, measured with rows increasing downwards
DIRECTIONS = np.array([(round(math.sin(k * math.pi / 4)), round(math.cos(k * math.pi / 4))) for k in range(8)])

Tau = Union[float, str]


@dataclass(frozen=True)
class BeaconConfig:
    lam: float = 0.05
    steps: int = 7
    k: int = 128
    tau: Tau = "mean"
    enabled: bool = True
    inward_along_gradient: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.steps < 1 or self.k < 1:
            raise ValueError(f"invalid BEACON configuration {self}")
        if not isinstance(self.tau, (int, float)) and self.tau != "mean":
            raise ValueError(f"tau must be a number or 'mean', got {self.tau!r}")

    @property
    def active(self) -> bool:
        return self.enabled and self.lam > 0


@dataclass
class OrientationMap:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray
    direction8: np.ndarray
    boundary_mask: np.ndarray


@dataclass
class BoundaryPointSets:
    phi: np.ndarray          # inward candidates [n, 2] (row, col)
    psi: np.ndarray          # outward candidates [m, 2]
    inward: np.ndarray       # sampled I [k, 2]
    outward: np.ndarray      # sampled O [k, 2]

    @property
    def empty(self) -> bool:
        return len(self.inward) == 0 or len(self.outward) == 0


@dataclass
class SignResult:
    sign_in: np.ndarray
    sign_out: np.ndarray
    tau: float
    diagnostics: Dict[str, Dict[str, int]] = field(default_factory=dict)


def _correlate3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    H, W = img.shape
    out = np.zeros((H, W))
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * padded[i:i + H, j:j + W]
    return out


def orientation_map(seg_map: np.ndarray) -> OrientationMap:
    """Sobel response of a label map, quantised to the 8-neighbourhood.

    The boundary is the top 20% of nonzero magnitudes, ties broken in
    row-major order. ``direction8`` is -1 where the magnitude is zero.
    """
    seg = np.asarray(seg_map, dtype=np.float64)
    gx = _correlate3(seg, SOBEL_X)
    gy = _correlate3(seg, SOBEL_Y)
    mag = np.hypot(gx, gy)
    nonzero = mag > 1e-12
    angle = np.arctan2(gy, gx)
    direction = np.where(nonzero, np.mod(np.rint(angle / (np.pi / 4)), 8), -1).astype(np.int64)
    boundary = np.zeros(seg.shape, dtype=bool)
    count = int(nonzero.sum())
    if count:
        take = math.ceil(BOUNDARY_FRACTION * count)
        flat = mag.reshape(-1)
        idx = np.flatnonzero(nonzero.reshape(-1))
        order = idx[np.lexsort((idx, -flat[idx]))]
        boundary.reshape(-1)[order[:take]] = True
    return OrientationMap(gx, gy, mag, direction, boundary)


def in_out_div(seg_map: np.ndarray, steps: int, inward_along_gradient: bool = True,
               orient: OrientationMap = None) -> Tuple[np.ndarray, np.ndarray]:
    """Candidate inward and outward points for every boundary pixel.

    The Sobel gradient of a label map points towards higher label values, so
    with ``inward_along_gradient`` the inward point moves along it (into the
    object for a background-0 map) and the outward point against it. Points
    that land outside the map are dropped.
    """
    seg = np.asarray(seg_map)
    orient = orient or orientation_map(seg)
    H, W = seg.shape
    pts = np.argwhere(orient.boundary_mask)
    if len(pts) == 0:
        empty = np.zeros((0, 2), dtype=np.int64)
        return empty, empty.copy()
    step = DIRECTIONS[orient.direction8[pts[:, 0], pts[:, 1]]] * steps
    sign = 1 if inward_along_gradient else -1
    inward = pts + sign * step
    outward = pts - sign * step

    def inside(p):
        return p[(p[:, 0] >= 0) & (p[:, 0] < H) & (p[:, 1] >= 0) & (p[:, 1] < W)]

    return inside(inward), inside(outward)


def sample_point_sets(seg_map: np.ndarray, cfg: BeaconConfig, rng: np.random.Generator) -> BoundaryPointSets:
    """Draw ``k`` points from each candidate set, truncating both to the smaller pool."""
    phi, psi = in_out_div(seg_map, cfg.steps, cfg.inward_along_gradient)
    n = min(cfg.k, len(phi), len(psi))
    if n == 0:
        empty = np.zeros((0, 2), dtype=np.int64)
        return BoundaryPointSets(phi, psi, empty, empty.copy())
    inward = phi[np.sort(rng.choice(len(phi), size=n, replace=False))]
    outward = psi[np.sort(rng.choice(len(psi), size=n, replace=False))]
    return BoundaryPointSets(phi, psi, inward, outward)


def similarity_matrix(set_a, set_b, stop_a: bool = False) -> Tensor:
    """Cosine similarity between every vector of ``set_a`` [k,C] and of ``set_b`` [k,C]."""
    a = T.stop_gradient(set_a) if stop_a else T.as_tensor(set_a)
    return T.pairwise_cosine(a, set_b)


def sign_fn(s_mask: np.ndarray, s_dense: np.ndarray, tau: Tau = "mean") -> SignResult:
    """Point-wise signs from mask and dense one-to-all mean similarities.

    Cases with a high mask similarity (TN, FP) get -1, the rest (TP, FN) +1.
    A mean exactly equal to ``tau`` counts as high on either side.
    """
    s_mask = np.asarray(s_mask, dtype=np.float64)
    s_dense = np.asarray(s_dense, dtype=np.float64)
    if s_mask.shape != s_dense.shape:
        raise ValueError(f"similarity matrices differ in shape: {s_mask.shape} vs {s_dense.shape}")
    threshold = float(s_mask.mean()) if tau == "mean" else float(tau)
    signs, diag = [], {}
    for name, axis in (("in", 1), ("out", 0)):
        m_high = s_mask.mean(axis=axis) >= threshold
        d_high = s_dense.mean(axis=axis) >= threshold
        cases = {
            "TP": ~m_high & ~d_high,
            "FN": ~m_high & d_high,
            "FP": m_high & ~d_high,
            "TN": m_high & d_high,
        }
        diag[name] = {k: int(v.sum()) for k, v in cases.items()}
        signs.append(np.where(m_high, -1.0, 1.0))
    return SignResult(signs[0], signs[1], threshold, diag)


def _gather(m, pts: np.ndarray):
    """Per-point channel vectors [n, C] from a [C,H,W] map."""
    return T.transpose(m[:, pts[:, 0], pts[:, 1]])


def beacon_terms(dense_in, dense_out, mask_in: np.ndarray, mask_out: np.ndarray,
                 tau: Tau = "mean") -> Tuple[Tensor, SignResult]:
    """Loss from anchored point vectors; the inward dense side is a constant."""
    s_dense = similarity_matrix(dense_in, dense_out, stop_a=True)
    s_mask = T.pairwise_cosine(mask_in, mask_out).data
    signs = sign_fn(s_mask, s_dense.data, tau)
    col_mean = T.mean(s_dense, axis=0)  # one outward point against all inward
    row_mean = T.mean(s_dense, axis=1)
    out_term = T.mean(T.log(T.maximum(col_mean * signs.sign_out, LOG_FLOOR)))
    in_term = T.mean(T.log(T.maximum(row_mean * signs.sign_in, LOG_FLOOR)))
    return out_term + in_term, signs


def beacon_loss(dense, mask: np.ndarray, sets: BoundaryPointSets, cfg: BeaconConfig) -> Tensor:
    """Boundary contrast of a dense map [C,H,W] against a soft pseudo mask [C,H,W]."""
    if sets.empty:
        return Tensor(0.0)
    dense = T.as_tensor(dense)
    mask = np.asarray(mask, dtype=np.float64)
    loss, _ = beacon_terms(_gather(dense, sets.inward), _gather(dense, sets.outward),
                           mask[:, sets.inward[:, 0], sets.inward[:, 1]].T,
                           mask[:, sets.outward[:, 0], sets.outward[:, 1]].T, cfg.tau)
    return loss


def soft_cross_entropy(dense, target: np.ndarray) -> Tensor:
    """Pixel-mean cross entropy between softmax(dense) and a soft target, channels on axis -3."""
    dense = T.as_tensor(dense)
    logp = T.log_softmax(dense, axis=-3)
    per_pixel = -T.sum_(logp * np.asarray(target, dtype=np.float64), axis=-3)
    return T.mean(per_pixel)


def seg_loss(dense, pseudo_mask: np.ndarray, cfg: BeaconConfig,
             rng: np.random.Generator = None) -> Tuple[Tensor, Dict[str, float]]:
    """Cross entropy plus ``lam`` times BEACON, for [C,H,W] or [B,C,H,W] inputs.

    With an inactive config the returned loss is the cross-entropy tensor
    itself. BEACON is averaged over the images that have boundary points.
    """
    dense = T.as_tensor(dense)
    pseudo_mask = np.asarray(pseudo_mask, dtype=np.float64)
    if dense.shape != pseudo_mask.shape:
        raise ValueError(f"dense {dense.shape} and pseudo mask {pseudo_mask.shape} differ in shape")
    ce = soft_cross_entropy(dense, pseudo_mask)
    if not cfg.active:
        return ce, {"ce": float(ce.data), "beacon": 0.0}
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = dense.ndim == 4
    items = range(dense.shape[0]) if batch else [None]
    terms = []
    for b in items:
        d = dense[b] if batch else dense
        m = pseudo_mask[b] if batch else pseudo_mask
        sets = sample_point_sets(np.argmax(d.data, axis=0), cfg, rng)
        if not sets.empty:
            terms.append(beacon_loss(d, m, sets, cfg))
    if not terms:
        return ce, {"ce": float(ce.data), "beacon": 0.0}
    bl = terms[0]
    for t in terms[1:]:
        bl = bl + t
    bl = bl / len(terms)
    return ce + cfg.lam * bl, {"ce": float(ce.data), "beacon": float(bl.data)}


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary (P5) greymap, 255 on boundary pixels."""
    mask = np.asarray(mask)
    H, W = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write((mask.astype(bool) * 255).astype(np.uint8).tobytes())


def write_points_csv(path, sets: BoundaryPointSets, signs: SignResult = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "set", "sign"])
        for name, pts, sg in (("I", sets.inward, None if signs is None else signs.sign_in),
                              ("O", sets.outward, None if signs is None else signs.sign_out)):
            for n, (r, c) in enumerate(pts):
                w.writerow([int(c), int(r), name, "" if sg is None else int(sg[n])])


def dump_diagnostics(out_dir, seg_map: np.ndarray, dense, mask: np.ndarray,
                     cfg: BeaconConfig, rng: np.random.Generator) -> None:
    """Boundary mask (PGM) and sampled points with signs (CSV) for one image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "boundary.pgm", orientation_map(seg_map).boundary_mask)
    sets = sample_point_sets(seg_map, cfg, rng)
    signs = None
    if not sets.empty:
        dense = T.as_tensor(dense).data
        s_d = T.pairwise_cosine(dense[:, sets.inward[:, 0], sets.inward[:, 1]].T,
                                dense[:, sets.outward[:, 0], sets.outward[:, 1]].T).data
        s_m = T.pairwise_cosine(mask[:, sets.inward[:, 0], sets.inward[:, 1]].T,
                                mask[:, sets.outward[:, 0], sets.outward[:, 1]].T).data
        signs = sign_fn(s_m, s_d, cfg.tau)
    write_points_csv(out / "points.csv", sets, signs)
