"""Acceptance suite: one test per criterion, each recording a PASS/FAIL verdict line."""

import functools
import itertools
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from muscle import tensor as T
from muscle.beacon import (BeaconConfig, beacon_terms, in_out_div, orientation_map, sample_point_sets,
                           seg_loss, sign_fn)
from muscle.cli import EXIT_OK, main
from muscle.data import generate_dataset, split_dataset
from muscle.encoder import EncoderConfig, SamParams, background_map, encoder_forward, init_encoder, sam_forward
from muscle.losses import CropPair, Rect, hcl_loss, imc_loss, pixc_loss, prc_loss, static_windows
from muscle.pipeline import (TrainConfig, export_pseudo_masks, predict, pseudo_mask_miou, segmentation_report,
                             train_decoder, train_encoder)
from muscle.sinkhorn import SinkhornConfig, emd, sinkhorn_emd
from muscle.tensor import Tensor

from gradcheck import check, numeric_grad, rel_error
from test_beacon import disk, half_plane
from test_tensor import BINARY, SHAPES, UNARY

FIXTURES = Path(__file__).parent / "fixtures"
SEEDS = (0, 1, 2)
HCL_ONLY = dict(use_imc=False, use_pixc=False, use_prc=False)


# -- 1. gradient integrity -----------------------------------------------------------

def _primitive_cases(rng):
    for name, op in UNARY.items():
        for shape in SHAPES:
            x = rng.normal(size=shape)
            if name == "relu":
                x = np.where(np.abs(x) < 1e-3, 0.5, x)
            yield name, op, (x,)
    for name, op in BINARY.items():
        for shape in SHAPES:
            yield name, op, (rng.normal(size=shape), rng.normal(size=shape))
    yield "matmul", T.matmul, (rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))
    yield "conv2d", lambda x, w: T.conv2d(x, w, stride=2, padding=1), \
        (rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3)))
    yield "softmax", lambda x: T.softmax(x, axis=1), (rng.normal(size=(2, 4, 3)),)
    yield "cosine_similarity", lambda u, v: T.cosine_similarity(u, v, axis=-1), \
        (rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    yield "avg_pool2d", lambda x: T.avg_pool2d(x, 2), (rng.normal(size=(1, 2, 4, 6)),)
    yield "upsample_bilinear", lambda x: T.upsample_bilinear(x, (7, 5)), (rng.normal(size=(1, 2, 3, 4)),)


def _loss_cases(rng):
    labels = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 1]])
    yield "hcl", lambda x: hcl_loss(x, labels), (rng.normal(size=(4, 3)),)
    yield "imc", lambda z: imc_loss(z, labels), (rng.normal(size=(4, 5)),)

    ca, cb = rng.normal(size=(2, 3, 4, 4))
    ra, rb = Rect(0, 0, 16, 16), Rect(4, 8, 16, 16)
    yield "pixc", lambda sa, sb: pixc_loss(CropPair(ra, rb, sa, ca, sb, cb, 4)), tuple(rng.normal(size=(2, 3, 4, 4)))

    tight = SinkhornConfig(eps=0.1, max_iter=5000, tol=1e-13)
    dm = rng.uniform(0.1, 1, size=(3, 4, 4))
    static, dynamic = static_windows(4, 4, (2, 2)), [(1, 1, 2, 2)]
    yield "prc", lambda sm: prc_loss(sm, dm, static, dynamic, tight), (rng.uniform(0.1, 1, size=(3, 4, 4)),)

    wa, wb = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
    yield "emd", lambda c: emd(c, wa, wb, tight), (rng.uniform(size=(3, 4)),)

    d_in, m_in, m_out = rng.normal(size=(6, 4)), rng.uniform(size=(6, 4)), rng.uniform(size=(6, 4))
    yield "beacon", lambda d_out: beacon_terms(d_in, d_out, m_in, m_out)[0], (rng.normal(size=(6, 4)),)

    target = rng.dirichlet(np.ones(3), size=(6, 6)).transpose(2, 0, 1)
    yield "seg_loss_ce", lambda d: seg_loss(d, target, BeaconConfig(enabled=False))[0], (rng.normal(size=(3, 6, 6)),)

    gs = [rng.normal(size=(2, 2)) for _ in range(3)]
    yield "sam", lambda m, a, b, c: sam_forward(m, SamParams(a, b, c)), (rng.normal(size=(2, 3, 3)), *gs)
    yield "background_map", background_map, (rng.normal(size=(3, 3, 4)),)

    small = EncoderConfig(widths=(3, 4), strides=(2, 1), num_classes=2, input_size=(8, 8))
    params = init_encoder(small, rng)
    for k in ("stage0.b", "stage1.b"):
        params[k] = Tensor(np.full(params[k].shape, 0.3))
    yield "encoder_logits", lambda img: encoder_forward(img, params, small).logits, (rng.uniform(size=(3, 8, 8)),)


def seg_loss_error(rng):
    """Finite differences also move the stop-gradient inward samples, so those pixels are
    compared against the cross-entropy gradient alone and the rest against the full loss."""
    mask = rng.dirichlet(np.ones(3), size=(12, 12)).transpose(2, 0, 1)
    dense = rng.normal(size=(3, 12, 12))
    dense[0, :, :6] += 3.0
    cfg = BeaconConfig(k=8, steps=2, lam=0.5)
    sets = sample_point_sets(np.argmax(dense, axis=0), cfg, np.random.default_rng(0))
    frozen, outward = np.zeros((2, 12, 12), dtype=bool)
    frozen[sets.inward[:, 0], sets.inward[:, 1]] = True
    outward[sets.outward[:, 0], sets.outward[:, 1]] = True
    both = np.broadcast_to(frozen & outward, dense.shape)  # live and frozen at once: no clean oracle

    t = Tensor(dense, requires_grad=True)
    seg_loss(t, mask, cfg, np.random.default_rng(0))[0].backward()
    ce = Tensor(dense, requires_grad=True)
    seg_loss(ce, mask, BeaconConfig(enabled=False))[0].backward()
    num = numeric_grad(lambda d: seg_loss(d, mask, cfg, np.random.default_rng(0))[0].item(), [dense], 0)
    live = ~np.broadcast_to(frozen, dense.shape)
    stopped = ~live & ~both
    return max(rel_error(t.grad[live], num[live]), rel_error(t.grad[stopped], ce.grad[stopped]))


def test_criterion_01_gradient_integrity(criterion):
    start = time.perf_counter()
    worst, counts = {}, {}
    for seed in range(3):
        rng = np.random.default_rng(seed)
        for name, op, arrays in itertools.chain(_primitive_cases(rng), _loss_cases(rng)):
            # finer step where the op contains a ReLU kink; h=1e-5 elsewhere
            h = 1e-6 if name == "encoder_logits" else 1e-5
            worst[name] = max(worst.get(name, 0.0), check(op, *arrays, h=h))
            counts[name] = counts.get(name, 0) + 1
        worst["seg_loss"] = max(worst.get("seg_loss", 0.0), seg_loss_error(rng))
        counts["seg_loss"] = counts.get("seg_loss", 0) + 1
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and min(counts.values()) >= 3 and elapsed < 120
    criterion("gradient integrity", ok,
              f"{len(worst)} ops x >=3 instances, worst rel. error {err:.2e} ({name}), {elapsed:.1f}s")
    assert ok, worst


# -- 2. transport oracle ---------------------------------------------------------------

def test_criterion_02_transport_oracle(criterion):
    frozen = json.loads((FIXTURES / "transport_oracle.json").read_text())
    cfg = SinkhornConfig(eps=frozen["eps"])
    start = time.perf_counter()
    errors = []
    for p in frozen["problems"]:
        got = sinkhorn_emd(np.array(p["cost"]), np.array(p["a"]), np.array(p["b"]), cfg).cost
        errors.append(abs(got - p["exact"]) / max(abs(p["exact"]), 1e-12))
    elapsed = time.perf_counter() - start
    ok = len(errors) == 50 and max(errors) < 0.02 and elapsed < 30
    criterion("transport oracle", ok, f"50 problems, worst rel. error {max(errors):.4f}, {elapsed:.2f}s")
    assert ok


# -- 3. sign truth table -----------------------------------------------------------------

def test_criterion_03_sign_truth_table(criterion):
    tau, high, low = 0.5, 0.9, 0.1
    failures = 0
    cases = list(itertools.product((high, low), repeat=2))  # (mask mean, dense mean)
    for (mi, di), (mo, do) in itertools.product(cases, cases):
        # row 0 carries the inward means, column 0 the outward means
        sm = np.array([[mi, mi], [2 * mo - mi, 0.5]])
        sd = np.array([[di, di], [2 * do - di, 0.5]])
        res = sign_fn(sm, sd, tau)
        # negative exactly when the mask says the pair is similar
        failures += res.sign_in[0] != (-1.0 if mi >= tau else 1.0)
        failures += res.sign_out[0] != (-1.0 if mo >= tau else 1.0)
    ok = failures == 0
    criterion("sign truth table", ok, f"16 combinations x 2 sets, {failures} mismatches")
    assert ok


# -- 4. boundary geometry -----------------------------------------------------------------

def test_criterion_04_boundary_geometry(criterion):
    seg = half_plane()
    pts = np.argwhere(orientation_map(seg).boundary_mask)
    phi, psi = in_out_div(seg, 3)
    mirror = (len(phi) == len(psi) == len(pts) and np.array_equal(phi[:, 0], psi[:, 0])
              and np.all(phi[:, 1] - pts[:, 1] == 3) and np.all(pts[:, 1] - psi[:, 1] == 3))
    dseg, c = disk(radius=20)
    phi, psi = in_out_div(dseg, 7)
    inside = lambda p: (p[:, 0] - c) ** 2 + (p[:, 1] - c) ** 2 <= 20 ** 2  # noqa: E731
    frac_in, frac_out = inside(phi).mean(), (~inside(psi)).mean()
    ok = bool(mirror) and frac_in >= 0.9 and frac_out >= 0.9
    criterion("boundary geometry", ok,
              f"half-plane mirror exact={bool(mirror)}, disk inward {frac_in:.3f} outward {frac_out:.3f}")
    assert ok


# -- 5. stop-gradient contracts --------------------------------------------------------

def test_criterion_05_stop_gradient(criterion, rng):
    leaks = {}
    maps = [Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True) for _ in range(4)]
    pixc_loss(CropPair(Rect(0, 0, 16, 16), Rect(4, 8, 16, 16), *maps, 4)).backward()
    leaks["pixc"] = any(m.grad is not None and np.any(m.grad) for m in (maps[1], maps[3]))

    sm = Tensor(rng.uniform(0.1, 1, size=(3, 4, 4)), requires_grad=True)
    dm = Tensor(rng.uniform(0.1, 1, size=(3, 4, 4)), requires_grad=True)
    prc_loss(sm, dm, static_windows(4, 4, (2, 2)), [(0, 1, 2, 2), (2, 2, 2, 2)]).backward()
    leaks["prc"] = dm.grad is not None and bool(np.any(dm.grad))

    parts = [Tensor(rng.normal(size=(5, 3)), requires_grad=True) for _ in range(4)]
    beacon_terms(*parts)[0].backward()
    leaks["beacon"] = any(p.grad is not None and np.any(p.grad) for p in (parts[0], parts[2], parts[3]))
    ok = not any(leaks.values()) and sm.grad is not None and parts[1].grad is not None
    criterion("stop-gradient contracts", ok, ", ".join(f"{k} leak={v}" for k, v in leaks.items()))
    assert ok


# -- 6-8. desk-scale training experiments --------------------------------------------------

def _stack(scenes):
    return (np.stack([s.image for s in scenes]), np.stack([s.labels for s in scenes]),
            [s.gt_mask for s in scenes])


@functools.lru_cache(maxsize=None)
def encoder_experiment(seed):
    """HCL-only and full encoders on 500 scenes; pseudo-mask mIoU at one and several scales."""
    train, val = split_dataset(generate_dataset(500, 1000 + seed))
    X, Y, G = _stack(train)
    runs = {}
    for name, flags in (("hcl", HCL_ONLY), ("full", {})):
        cfg = TrainConfig(seed=seed, log_every=0, **flags)
        start = time.perf_counter()
        run = train_encoder(X, Y, cfg)
        ms_masks = export_pseudo_masks(run.params, X, Y, cfg, cfg.scales)
        runs[name] = dict(
            params=run.params, cfg=cfg, ms_masks=ms_masks,
            ss=pseudo_mask_miou(export_pseudo_masks(run.params, X, Y, cfg, (1.0,)), G, cfg.num_classes),
            ms=pseudo_mask_miou(ms_masks, G, cfg.num_classes),
            seconds=time.perf_counter() - start)
    return dict(X=X, val=_stack(val), runs=runs)


@pytest.mark.slow
def test_criterion_06_mcl_ablation_direction(criterion):
    res = [encoder_experiment(s) for s in SEEDS]
    ss = {k: np.mean([r["runs"][k]["ss"] for r in res]) for k in ("hcl", "full")}
    ms = {k: np.mean([r["runs"][k]["ms"] for r in res]) for k in ("hcl", "full")}
    per_seed = max(r["runs"]["hcl"]["seconds"] + r["runs"]["full"]["seconds"] for r in res)
    delta = ss["full"] - ss["hcl"]
    ok = delta >= 0.02 and per_seed < 20 * 60
    criterion("MCL ablation direction", ok,
              f"single-scale mIoU HCL {ss['hcl']:.4f} -> full {ss['full']:.4f} (delta {100 * delta:+.2f} pts); "
              f"multi-scale {ms['hcl']:.4f} -> {ms['full']:.4f}; slowest seed {per_seed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_07_tta_direction(criterion):
    res = [encoder_experiment(s)["runs"]["full"] for s in SEEDS]
    margins = [r["ms"] - r["ss"] for r in res]
    ok = min(margins) >= 0
    criterion("TTA direction", ok, "multi minus single-scale per seed: " + ", ".join(f"{m:+.4f}" for m in margins))
    assert ok


@functools.lru_cache(maxsize=None)
def decoder_experiment(seed):
    exp = encoder_experiment(seed)
    full = exp["runs"]["full"]
    pseudo = np.stack([m.soft for m in full["ms_masks"]])
    Xv, _, Gv = exp["val"]
    out = {}
    start = time.perf_counter()
    for name, bcfg in (("beacon", BeaconConfig()), ("baseline", BeaconConfig(lam=0.0))):
        run = train_decoder(exp["X"], pseudo, full["params"], full["cfg"], bcfg)
        out[name] = segmentation_report(predict(Xv, run.encoder, run.decoder, full["cfg"]), Gv, 4)
    out["seconds"] = time.perf_counter() - start
    return out


@pytest.mark.slow
def test_criterion_08_beacon_direction(criterion):
    res = [decoder_experiment(s) for s in SEEDS]
    bf = {k: np.mean([r[k]["boundary_f"] for r in res]) for k in ("beacon", "baseline")}
    miou = {k: np.mean([r[k]["miou"] for r in res]) for k in ("beacon", "baseline")}
    slowest = max(r["seconds"] for r in res)
    ok = bf["beacon"] >= bf["baseline"] and miou["beacon"] >= miou["baseline"] - 0.005 and slowest < 15 * 60
    criterion("BEACON direction", ok,
              f"val boundary F {bf['baseline']:.4f} -> {bf['beacon']:.4f}, "
              f"val mIoU {miou['baseline']:.4f} -> {miou['beacon']:.4f}; slowest seed {slowest / 60:.1f} min")
    assert ok


# -- 9. mean vs fixed tau ------------------------------------------------------------------

ABLATE_TOML = """encoder_steps = 150
decoder_steps = 40
log_every = 0
"""


def test_criterion_09_tau_comparison_reported(criterion, tmp_path):
    (tmp_path / "cfg.toml").write_text(ABLATE_TOML)
    data, enc, out = tmp_path / "data", tmp_path / "enc", tmp_path / "ablate"
    assert main(["gen-data", "--n", "60", "--seed", "3", "--out", str(data)]) == EXIT_OK
    assert main(["train-encoder", "--data", str(data), "--config", str(tmp_path / "cfg.toml"),
                 "--out", str(enc)]) == EXIT_OK
    code = main(["ablate", "--suite", "beacon", "--data", str(data), "--weights", str(enc / "encoder.bin"),
                 "--config", str(tmp_path / "cfg.toml"), "--out", str(out)])
    report = json.loads((out / "ablation_beacon.json").read_text())
    rows = {r["config"]: r for r in report["rows"]}
    table = (out / "ablation_beacon.md").read_text()
    wanted = ("tau=0.5", "tau=mean (best)")
    ok = (code == EXIT_OK and all(w in rows and w in table for w in wanted)
          and all(np.isfinite(rows[w][m]) for w in wanted for m in ("miou", "boundary_f")))
    detail = ", ".join(f"{w}: mIoU {rows[w]['miou']:.4f} BF {rows[w]['boundary_f']:.4f}" for w in wanted if w in rows)
    criterion("mean vs fixed tau reported", ok, detail)
    assert ok


# -- 10. determinism ---------------------------------------------------------------------

DETERMINISM_TOML = """encoder_steps = 20
decoder_steps = 10
batch_size = 4
scales = [1.0, 2.0]
log_every = 0
"""


def _cli_run(root: Path):
    env = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}
    env.pop("MUSCLE_SEED", None)
    (root / "cfg.toml").write_text(DETERMINISM_TOML)
    steps = [["gen-data", "--n", "20", "--seed", "5", "--out", "data"],
             ["train-encoder", "--data", "data", "--config", "cfg.toml", "--out", "enc"],
             ["export-masks", "--weights", "enc/encoder.bin", "--config", "cfg.toml"],
             ["train-decoder", "--masks", "enc/masks", "--config", "cfg.toml", "--k", "16", "--out", "dec"]]
    for argv in steps:
        subprocess.run([sys.executable, "-m", "muscle", *argv], cwd=root, env=env, check=True,
                       capture_output=True)
    manifest = json.loads((root / "dec" / "manifest.json").read_text())
    for key in ("started", "finished"):
        manifest.pop(key, None)
    return manifest, (root / "dec" / "metrics.json").read_bytes()


def test_criterion_10_determinism(criterion, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    man_a, metrics_a = _cli_run(tmp_path / "a")
    man_b, metrics_b = _cli_run(tmp_path / "b")
    ok = man_a == man_b and metrics_a == metrics_b
    criterion("determinism", ok, f"manifests equal={man_a == man_b}, metric reports byte-identical={metrics_a == metrics_b}")
    assert ok
