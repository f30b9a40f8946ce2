"""Two-stage training: contrastive encoder, pseudo-mask export, segmentation decoder.

Training entry points take images, image-level labels and pseudo masks
only; ground-truth masks are read exclusively by the evaluation helpers.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .beacon import BeaconConfig, seg_loss
from .encoder import (EncoderConfig, Params, SamParams, background_map, conv_block,
                      encoder_forward, init_encoder, sam_forward)
from .losses import (CropPair, PatchConfig, Rect, hcl_components, imc_loss, mcl_loss, pixc_loss,
                     prc_loss, sample_dynamic_windows, static_windows)
from .metrics import evaluate_boundary_f, evaluate_miou
from .optim import SGD
from .sinkhorn import SinkhornConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, components: Dict[str, float]):
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {components}")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    encoder_steps: int = 2000
    encoder_lr: float = 0.01
    decoder_steps: int = 1000
    decoder_lr: float = 0.02
    encoder_lr_mult: float = 0.1   # stage-2 fine-tuning rate relative to decoder_lr
    momentum: float = 0.9
    poly_power: float = 0.9
    clip_norm: float = 5.0
    resize: int = 64
    crop: int = 32
    scales: Tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    use_imc: bool = True
    use_pixc: bool = True
    use_prc: bool = True
    imc_normalize: bool = True
    focal_gamma: float = 2.0
    patch_grid: Tuple[int, int] = (2, 2)
    num_dynamic: int = 3
    sinkhorn_eps: float = 0.01
    sinkhorn_iters: int = 500
    finetune_encoder: bool = True
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    num_classes: int = 4
    sam_residual: bool = False
    bg_power: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if not self.crop < self.resize:
            raise ValueError(f"crop ({self.crop}) must be smaller than resize ({self.resize})")
        self.scales = tuple(float(s) for s in self.scales)
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        self.patch_grid = tuple(int(g) for g in self.patch_grid)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.widths, self.strides, self.num_classes, (self.resize, self.resize),
                             self.sam_residual)

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(eps=self.sinkhorn_eps, max_iter=self.sinkhorn_iters)

    @property
    def patches(self) -> PatchConfig:
        return PatchConfig(self.patch_grid, self.num_dynamic)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class EncoderRun:
    params: Params
    curves: List[Dict[str, float]]


@dataclass
class PseudoMask:
    soft: np.ndarray  # [C,H,W], channel 0 = background
    source_id: str = ""


# -- batching ----------------------------------------------------------------------

def label_groups(labels: np.ndarray) -> Dict[tuple, np.ndarray]:
    groups: Dict[tuple, list] = {}
    for i, row in enumerate(np.asarray(labels)):
        groups.setdefault(tuple(int(v) for v in row), []).append(i)
    return {k: np.asarray(v) for k, v in groups.items()}


def sample_batch(labels: np.ndarray, batch_size: int, rng: np.random.Generator,
                 groups: Dict[tuple, np.ndarray] = None) -> np.ndarray:
    """Draw anchors in pairs; each anchor's partner shares its label set when possible."""
    groups = groups if groups is not None else label_groups(labels)
    n = len(labels)
    out = []
    while len(out) < batch_size:
        i = int(rng.integers(n))
        out.append(i)
        if len(out) == batch_size:
            break
        peers = groups[tuple(int(v) for v in labels[i])]
        peers = peers[peers != i]
        out.append(int(rng.choice(peers)) if peers.size else int(rng.integers(n)))
    return np.asarray(out)


def grid_crop_pair(size: int, crop: int, stride: int, rng: np.random.Generator) -> Tuple[Rect, Rect]:
    """Two crops with grid-aligned corners that overlap in at least one feature cell."""
    offsets = np.arange(0, size - crop + 1, stride)
    while True:
        a = Rect(int(rng.choice(offsets)), int(rng.choice(offsets)), crop, crop)
        b = Rect(int(rng.choice(offsets)), int(rng.choice(offsets)), crop, crop)
        ov = a.intersect(b)
        if ov is not None and ov.height >= stride and ov.width >= stride:
            return a, b


def _crop(images: np.ndarray, rects: Sequence[Rect]) -> np.ndarray:
    return np.stack([img[:, r.top:r.bottom, r.left:r.right] for img, r in zip(images, rects)])


# -- stage 1 -------------------------------------------------------------------------

def encoder_step_losses(params: Params, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                        rng: np.random.Generator) -> Dict[str, Tensor]:
    """All enabled stage-one loss terms for one batch."""
    ecfg = cfg.encoder
    out = encoder_forward(images, params, ecfg)
    parts = hcl_components(out.logits, labels, cfg.focal_gamma)
    comps = {"hcl": parts["bce"] + parts["focal"] + parts["pair"]}
    if cfg.use_imc:
        z = T.mean(out.features, axis=(2, 3))
        comps["imc"] = imc_loss(z, labels, normalize=cfg.imc_normalize)
    if cfg.use_pixc or cfg.use_prc:
        stride = ecfg.output_stride
        rects = [grid_crop_pair(cfg.resize, cfg.crop, stride, rng) for _ in range(len(images))]
        ra = [r[0] for r in rects]
        rb = [r[1] for r in rects]
        both = np.concatenate([_crop(images, ra), _crop(images, rb)])
        crops = encoder_forward(both, params, ecfg, check_size=False)
        sam = sam_forward(crops.cam, SamParams.from_params(params), ecfg.sam_residual)
        B = len(images)
        pix, reg = [], []
        for b in range(B):
            sam_a, sam_b = sam[b], sam[B + b]
            cam_a, cam_b = crops.cam[b], crops.cam[B + b]
            if cfg.use_pixc:
                pair = CropPair(ra[b], rb[b], sam_a, cam_a, sam_b, cam_b, stride)
                pix.append(pixc_loss(pair))
            if cfg.use_prc:
                static_map = background_map(sam_a)
                dynamic_map = background_map(cam_b.data).data
                h, w = static_map.shape[1:]
                static = static_windows(h, w, cfg.patch_grid)
                dynamic = sample_dynamic_windows(h, w, cfg.patches, rng)
                reg.append(prc_loss(static_map, dynamic_map, static, dynamic, cfg.sinkhorn))
        if pix:
            comps["pixc"] = _mean(pix)
        if reg:
            comps["prc"] = _mean(reg)
    return comps


def _mean(values: Sequence[Tensor]) -> Tensor:
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total / len(values)


def _finite(comps: Dict[str, float]) -> bool:
    return all(math.isfinite(v) for v in comps.values())


def train_encoder(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                  params: Params = None, steps: int = None, log_path=None) -> EncoderRun:
    """Minimise the sum of enabled stage-one losses with SGD."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty training set")
    steps = cfg.encoder_steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed)
    params = params if params is not None else init_encoder(cfg.encoder, rng)
    opt = SGD(params, cfg.encoder_lr, cfg.momentum, total_steps=steps, power=cfg.poly_power,
              clip_norm=cfg.clip_norm)
    groups = label_groups(labels)
    curves = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(["step", "hcl", "imc", "pixc", "prc", "total"])
    t0 = time.perf_counter()
    try:
        for step in range(steps):
            idx = sample_batch(labels, cfg.batch_size, rng, groups)
            comps = encoder_step_losses(params, images[idx], labels[idx], cfg, rng)
            total = mcl_loss(comps)
            record = {k: float(comps[k].data) if k in comps else 0.0 for k in ("hcl", "imc", "pixc", "prc")}
            record["total"] = float(total.data)
            if not _finite(record):
                raise DivergenceError(step, record)
            opt.zero_grad()
            if total.requires_grad:
                total.backward()
            opt.step()
            curves.append(record)
            if writer:
                writer.writerow([step] + [f"{record[k]:.8g}" for k in ("hcl", "imc", "pixc", "prc", "total")])
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info("encoder step %d %s (%.1fs)", step,
                            " ".join(f"{k}={v:.4f}" for k, v in record.items()), time.perf_counter() - t0)
    finally:
        if fh:
            fh.close()
    return EncoderRun(params, curves)


def _sam_params(params: Params) -> SamParams:
    return SamParams.from_params(params)


def cam_scale(image: np.ndarray, params: Params, cfg: TrainConfig, scale: float) -> np.ndarray:
    """Attention-refined foreground maps for one image at one scale, resized to the input extent."""
    H, W = image.shape[1:]
    stride = cfg.encoder.output_stride
    size = (max(stride, int(round(H * scale / stride)) * stride), max(stride, int(round(W * scale / stride)) * stride))
    x = image if size == (H, W) else T.resize_array(image, size)
    out = encoder_forward(x, params, cfg.encoder, check_size=False)
    refined = sam_forward(out.cam.data, _sam_params(params), cfg.sam_residual).data
    return T.resize_array(refined, (H, W))


def soft_mask_from_cam(cam: np.ndarray, labels: np.ndarray, bg_power: float = 1.0) -> np.ndarray:
    """Background-included distribution [C,H,W] (channel 0 = background) from foreground maps.

    Each present class is rectified and scaled to a peak of 1, absent classes
    are zeroed; the background is one minus the per-pixel maximum.
    """
    fg = np.maximum(cam, 0.0) * (np.asarray(labels)[:, None, None] > 0)
    peak = fg.reshape(fg.shape[0], -1).max(axis=1)
    fg = fg / np.where(peak > 0, peak, 1.0)[:, None, None]
    bg = (1.0 - fg.max(axis=0, keepdims=True)) ** bg_power
    soft = np.concatenate([bg, fg])
    return soft / np.maximum(soft.sum(axis=0, keepdims=True), 1e-12)


def export_pseudo_masks(params: Params, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                        scales: Sequence[float] = None, ids: Sequence[str] = None) -> List[PseudoMask]:
    """Average background-included maps over ``scales`` and renormalise per pixel."""
    scales = tuple(cfg.scales if scales is None else scales)
    ids = ids if ids is not None else [str(i) for i in range(len(images))]
    out = []
    for img, lab, sid in zip(images, labels, ids):
        acc = None
        for s in scales:
            soft = soft_mask_from_cam(cam_scale(img, params, cfg, s), lab, cfg.bg_power)
            acc = soft if acc is None else acc + soft
        acc = acc / len(scales)
        acc = acc / acc.sum(axis=0, keepdims=True)
        out.append(PseudoMask(acc, sid))
    return out


def masks_to_labels(masks: Sequence[PseudoMask]) -> List[np.ndarray]:
    return [np.argmax(m.soft, axis=0) for m in masks]


# -- stage 2 -------------------------------------------------------------------------

DECODER_WIDTHS = (64, 32, 32)


def init_decoder(cfg: TrainConfig, rng: np.random.Generator) -> Params:
    w = cfg.widths
    c = cfg.num_classes + 1
    d0, d1, d2 = DECODER_WIDTHS
    shapes = {
        "dec0": (d0, w[-1], 3, 3),
        "dec1": (d1, d0 + w[1], 3, 3),
        "dec2": (d2, d1 + w[0], 3, 3),
    }
    params: Params = {}
    for name, shp in shapes.items():
        fan_in = shp[1] * shp[2] * shp[3]
        params[f"{name}.w"] = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shp), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(shp[0]), requires_grad=True)
    params["head.w"] = Tensor(rng.normal(0.0, math.sqrt(1.0 / d2), (c, d2, 1, 1)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(c), requires_grad=True)
    return params


def decoder_forward(stages: Sequence[Tensor], dec: Params, out_size: Tuple[int, int]) -> Tensor:
    """Dense class logits [B,C,H,W] from encoder stage features with two skip connections."""
    s0, s1, deep = stages[0], stages[1], stages[-1]
    x = conv_block(deep, dec["dec0.w"], dec["dec0.b"], 1)
    x = T.upsample_bilinear(x, s1.shape[2:])
    x = conv_block(T.concatenate([x, s1], axis=1), dec["dec1.w"], dec["dec1.b"], 1)
    x = T.upsample_bilinear(x, s0.shape[2:])
    x = conv_block(T.concatenate([x, s0], axis=1), dec["dec2.w"], dec["dec2.b"], 1)
    x = T.conv2d(x, dec["head.w"]) + T.reshape(dec["head.b"], (1, -1, 1, 1))
    return T.upsample_bilinear(x, out_size)


@dataclass
class DecoderRun:
    decoder: Params
    encoder: Params
    curves: List[Dict[str, float]]


def train_decoder(images: np.ndarray, pseudo: np.ndarray, encoder_params: Params, cfg: TrainConfig,
                  beacon_cfg: BeaconConfig, steps: int = None, log_path=None) -> DecoderRun:
    """Fit the decoder (and optionally fine-tune the encoder) to soft pseudo masks."""
    images = np.asarray(images, dtype=np.float64)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if len(images) != len(pseudo):
        raise ValueError("every training image needs a pseudo mask")
    steps = cfg.decoder_steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed + 1)
    enc = {k: Tensor(v.data.copy(), requires_grad=cfg.finetune_encoder) for k, v in encoder_params.items()
           if not k.startswith("sam.") and not k.startswith("cam.")}
    dec = init_decoder(cfg, rng)
    dec_opt = SGD(dec, cfg.decoder_lr, cfg.momentum, total_steps=steps, power=cfg.poly_power,
                  clip_norm=cfg.clip_norm)
    enc_opt = SGD(enc, cfg.decoder_lr * cfg.encoder_lr_mult, cfg.momentum, total_steps=steps,
                  power=cfg.poly_power, clip_norm=cfg.clip_norm) if cfg.finetune_encoder else None
    beacon_rng = np.random.default_rng(cfg.seed + 2)
    curves = []
    fh = open(log_path, "w", newline="", encoding="utf-8") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["step", "ce", "beacon", "total"])
    try:
        for step in range(steps):
            idx = rng.integers(0, len(images), size=cfg.batch_size)
            dense = dense_logits(images[idx], enc, dec, cfg)
            loss, parts = seg_loss(dense, pseudo[idx], beacon_cfg, beacon_rng)
            record = dict(parts, total=float(loss.data))
            if not _finite(record):
                raise DivergenceError(step, record)
            dec_opt.zero_grad()
            if enc_opt:
                enc_opt.zero_grad()
            loss.backward()
            dec_opt.step()
            if enc_opt:
                enc_opt.step()
            curves.append(record)
            if writer:
                writer.writerow([step, f"{record['ce']:.8g}", f"{record['beacon']:.8g}", f"{record['total']:.8g}"])
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info("decoder step %d %s", step, " ".join(f"{k}={v:.4f}" for k, v in record.items()))
    finally:
        if fh:
            fh.close()
    return DecoderRun(dec, enc, curves)


def dense_logits(images: np.ndarray, enc: Params, dec: Params, cfg: TrainConfig) -> Tensor:
    x = T.as_tensor(images)
    stages = []
    h = x
    for i, stride in enumerate(cfg.strides):
        h = conv_block(h, enc[f"stage{i}.w"], enc[f"stage{i}.b"], stride)
        stages.append(h)
    return decoder_forward(stages, dec, tuple(images.shape[2:]))


def predict(images: np.ndarray, enc: Params, dec: Params, cfg: TrainConfig, batch: int = 16) -> List[np.ndarray]:
    preds = []
    frozen_enc = {k: v.detach() for k, v in enc.items()}
    frozen_dec = {k: v.detach() for k, v in dec.items()}
    for i in range(0, len(images), batch):
        logits = dense_logits(np.asarray(images[i:i + batch]), frozen_enc, frozen_dec, cfg).data
        preds.extend(np.argmax(logits, axis=1))
    return preds


# -- evaluation ----------------------------------------------------------------------

def pseudo_mask_miou(masks: Sequence[PseudoMask], gt_masks: Sequence[np.ndarray], num_classes: int) -> float:
    return evaluate_miou(masks_to_labels(masks), gt_masks, num_classes + 1).miou


def segmentation_report(preds: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], num_classes: int,
                        tolerance_px: int = 2) -> Dict[str, object]:
    iou = evaluate_miou(preds, gt_masks, num_classes + 1)
    return {
        "per_class_iou": {str(k): v for k, v in iou.per_class.items()},
        "miou": iou.miou,
        "boundary_f": evaluate_boundary_f(preds, gt_masks, tolerance_px),
    }
