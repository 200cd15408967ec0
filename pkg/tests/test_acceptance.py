"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 5 to 7 train full-size models on the standard synthetic benchmark
(2000 train / 400 test, 60% day). Set MMCDET_ACCEPT_CACHE to a directory to
keep the dataset and checkpoints between sessions; a cached run is reused only
when its stored config matches exactly.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE
from mmcdet import tensor as T
from mmcdet.anchors import AnchorSet, Detection
from mmcdet.attack import EPS_GRID, AttackSpec, attack_sweep, pgd_batch
from mmcdet.cli import main as cli_main
from mmcdet.config import VARIANTS, ModelConfig, TrainConfig, dump_config
from mmcdet.corruptions import GROUPS, KINDS, CorruptionSpec, corrupt, corruption_sweep
from mmcdet.data import Dataset, SampleMeta, SceneSpec, build_dataset, generate_scene
from mmcdet.evaluate import PRCurve, ScoredDetection, average_precision, evaluate, f1_at_recall, \
    match_and_score, report_from_detections
from mmcdet.losses import (LossWeights, MatchedTargets, MMCParts, detection_loss, kl_mimicry, match_anchors,
                           mmc_total, reconstruction_loss)
from mmcdet.nn import Attention, Block, Decoder, DetectHead, DetectionOutput, Detector, Encoder, \
    EncoderConfig, FeatureFusion
from mmcdet.tensor import Tensor, grad_check
from mmcdet.train import load_system, train

SEEDS = (0, 1, 2)
GRAD_TOL = 1e-3


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient correctness

def _proj(out, seed=1):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(T.mul(out, Tensor(w)))


UNARY = {
    "exp": T.exp,
    "log": lambda x: T.log(T.add_scalar(T.square(x), 0.5)),
    "sigmoid": T.sigmoid,
    "gelu": T.gelu,
    "square": T.square,
    "scale": lambda x: T.scale(x, -1.7),
    "add_scalar": lambda x: T.add_scalar(x, 0.3),
    "sum": lambda x: T.sum(x),
    "sum_axis": lambda x: T.sum(x, axis=1),
    "mean": lambda x: T.mean(x, axis=0),
    "reshape": lambda x: T.reshape(x, (-1, 2)),
    "permute": lambda x: T.permute(x, (2, 0, 1)),
    "slice": lambda x: T.slice_axis(x, 2, 1, 3),
    "softmax": T.softmax,
    "log_softmax": T.log_softmax,
    "softmax_temp": lambda x: T.softmax_temp(x, 2.0),
    "log_softmax_temp": lambda x: T.log_softmax_temp(x, 0.7),
}


def _op_cases():
    cases = []
    for seed in range(4):
        rng = np.random.default_rng(seed)
        for name, f in UNARY.items():
            cases.append((f"{name}/{seed}", lambda x, f=f: _proj(f(x)), rng.standard_normal((2, 3, 4))))
    for seed in range(3):
        rng = np.random.default_rng(10 + seed)
        for op in (T.add, T.sub, T.mul):
            small, big = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal((2, 3, 4)))
            cases.append((f"{op.__name__}/lhs", lambda x, op=op, s=small: _proj(op(x, s)),
                          rng.standard_normal((2, 3, 4))))
            cases.append((f"{op.__name__}/rhs", lambda x, op=op, b=big: _proj(op(b, x)),
                          rng.standard_normal((3, 4))))
        a, b = Tensor(rng.standard_normal((2, 3, 4))), Tensor(rng.standard_normal((4, 5)))
        cases.append(("matmul/a", lambda x, b=b: _proj(T.matmul(x, b)), rng.standard_normal((2, 3, 4))))
        cases.append(("matmul/b", lambda x, a=a: _proj(T.matmul(a, x)), rng.standard_normal((4, 5))))
        other = Tensor(rng.standard_normal((2, 2, 4)))
        cases.append(("concat", lambda x, o=other: _proj(T.concat([x, o, x], axis=1)),
                      rng.standard_normal((2, 1, 4))))
        g, be = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
        x0 = rng.standard_normal((2, 3, 5))
        cases.append(("layer_norm/x", lambda x, g=g, be=be: _proj(T.layer_norm(x, g, be)), x0))
        cases.append(("layer_norm/gamma", lambda v, x=Tensor(x0), be=be: _proj(T.layer_norm(x, v, be)), g.data))
        cases.append(("layer_norm/beta", lambda v, x=Tensor(x0), g=g: _proj(T.layer_norm(x, g, v)), be.data))
    rng = np.random.default_rng(20)
    for stride, pad in ((1, 0), (1, 1), (2, 1), (2, 0)):
        w, b, x0 = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), rng.standard_normal((2, 2, 6, 6))
        conv = lambda x, w, b, s=stride, p=pad: _proj(T.conv2d(x, w, b, s, p))  # noqa: E731
        cases.append(("conv2d/x", lambda v, w=Tensor(w), b=Tensor(b), c=conv: c(v, w, b), x0))
        cases.append(("conv2d/w", lambda v, x=Tensor(x0), b=Tensor(b), c=conv: c(x, v, b), w))
        cases.append(("conv2d/b", lambda v, x=Tensor(x0), w=Tensor(w), c=conv: c(x, w, v), b))
    for stride, pad in ((2, 1), (1, 0)):
        w, b, x0 = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3), rng.standard_normal((1, 2, 3, 3))
        conv = lambda x, w, b, s=stride, p=pad: _proj(T.conv_transpose2d(x, w, b, s, p))  # noqa: E731
        cases.append(("conv_t/x", lambda v, w=Tensor(w), b=Tensor(b), c=conv: c(v, w, b), x0))
        cases.append(("conv_t/w", lambda v, x=Tensor(x0), b=Tensor(b), c=conv: c(x, v, b), w))
        cases.append(("conv_t/b", lambda v, x=Tensor(x0), w=Tensor(w), c=conv: c(x, w, v), b))
    return cases


def _loss_case(rng, B=2, A=10, K=3):
    logits = rng.standard_normal((B, A, K + 1)) * 2
    deltas = rng.standard_normal((B, A, 4))
    labels = np.where(rng.random((B, A)) < 0.3, rng.integers(1, K + 1, (B, A)), 0)
    labels[0, 0] = 1  # at least one positive
    tdeltas = np.where(labels[..., None] > 0, rng.standard_normal((B, A, 4)), 0.0)
    return logits, deltas, MatchedTargets(labels, tdeltas)


def _loss_cases():
    cases = []
    w = LossWeights()
    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        logits, deltas, t = _loss_case(rng)
        lc, dc = Tensor(logits), Tensor(deltas)
        cases.append(("det/logits", lambda x, dc=dc, t=t: detection_loss(DetectionOutput(x, dc), t, w).total, logits))
        cases.append(("det/deltas", lambda x, lc=lc, t=t: detection_loss(DetectionOutput(lc, x), t, w).total, deltas))
        peer = rng.standard_normal(logits.shape)
        tau = float(rng.uniform(0.5, 4))
        cases.append(("kl", lambda x, p=peer, tau=tau: kl_mimicry(x, p, tau), logits))
        img = rng.random((2, 1, 4, 4))
        cases.append(("recon", lambda x, img=img: reconstruction_loss(img, x), rng.random(img.shape)))
    for seed in range(2):
        rng = np.random.default_rng(200 + seed)
        for variant in ("plain", "recon", "crossrecon"):
            for network in ("rgb", "thm"):
                logits, deltas, t = _loss_case(rng)
                peer = rng.standard_normal(logits.shape)
                img = rng.random((2, 1, 4, 4))
                rec0 = rng.random(img.shape)

                def total(lg, dl, rc, variant=variant, network=network, t=t, peer=peer, img=img):
                    parts = MMCParts(DetectionOutput(lg, dl), t, peer, img, rc)
                    return mmc_total(variant, network, parts, w)[0]

                L, D, R = Tensor(logits), Tensor(deltas), Tensor(rec0)
                cases.append((f"mmc_{variant}_{network}/logits", lambda x, f=total, D=D, R=R: f(x, D, R), logits))
                cases.append((f"mmc_{variant}_{network}/deltas", lambda x, f=total, L=L, R=R: f(L, x, R), deltas))
                if variant != "plain":
                    cases.append((f"mmc_{variant}_{network}/recon", lambda x, f=total, L=L, D=D: f(L, D, x), rec0))
    return cases


def _lift(base, seed, k=24):
    """Point z in R^k maps to base + U z; checks the gradient along k random directions."""
    U = np.random.default_rng(seed).standard_normal((k, base.size)) / np.sqrt(k)

    def lift(z):
        return T.add(Tensor(base), T.reshape(T.matmul(T.reshape(z, (1, k)), Tensor(U)), base.shape))
    return lift, np.zeros(k)


TINY = EncoderConfig(image_size=16, patch_size=2, embed_dim=8, depth=1, heads=2, in_channels=3,
                     extra_channels=(8, 8))


def _objective(mode, rgb, thm, targets, xa, xb, const, w):
    """Summed two-network collaborative loss; peers and image targets held fixed."""
    maps_r, maps_t = rgb.encoder(xa), thm.encoder(xb)
    out_r, out_t = rgb.head(maps_r), thm.head(maps_t)
    rec_r = rec_t = None
    if mode == "recon":
        rec_r, rec_t = rgb.decoder(maps_r[0]), thm.decoder(maps_t[0])
    elif mode == "crossrecon":
        rec_r, rec_t = rgb.decoder(maps_t[0]), thm.decoder(maps_r[0])
    tr, _ = mmc_total(mode, "rgb", MMCParts(out_r, targets, const["peer_t"], const["a"], rec_r), w)
    tt, _ = mmc_total(mode, "thm", MMCParts(out_t, targets, const["peer_r"], const["b"], rec_t), w)
    return T.add(tr, tt)


def _network_cases():
    cases = []
    rng = np.random.default_rng(300)
    attn, blk = Attention(8, 2, rng), Block(8, 2, rng)
    tokens = rng.standard_normal((1, 5, 8))
    cases.append(("attention", lambda x: _proj(attn(x)), tokens))
    cases.append(("block", lambda x: _proj(blk(x)), tokens))
    enc = Encoder(TINY, rng)
    lift, z = _lift(rng.random((1, 3, 16, 16)), 1)
    cases.append(("encoder", lambda v: _proj(T.concat([T.reshape(m, (1, -1)) for m in enc(lift(v))], axis=1)), z))
    anchors = AnchorSet()
    head = DetectHead(TINY.channels, anchors, 3, rng)
    maps = [Tensor(rng.standard_normal((1, 8, s, s))) for s in (8, 4, 2)]
    cases.append(("detect_head", lambda x: _proj(head([x, maps[1], maps[2]]).class_logits), maps[0].data))
    dec = Decoder(8, 3, rng, grid=8, image_size=16)
    cases.append(("decoder", lambda x: _proj(dec(x)), rng.standard_normal((1, 8, 8, 8))))
    fus = FeatureFusion((8,), rng)
    other = Tensor(rng.standard_normal((1, 8, 4, 4)))
    cases.append(("feature_fusion", lambda x: _proj(fus([x], [other])[0]), rng.standard_normal((1, 8, 4, 4))))

    w = LossWeights()
    truths = [((0.4, 0.5, 0.3, 0.4), 1), ((0.75, 0.3, 0.2, 0.25), 2)]
    targets = MatchedTargets.stack([match_anchors(anchors, truths)])
    for mode in ("plain", "recon", "crossrecon"):
        r = np.random.default_rng(400)
        dec_ch = None if mode == "plain" else 3
        rgb = Detector(TINY, anchors, 3, r, dec_ch)
        thm = Detector(TINY.with_channels(1), anchors, 3, r, None if dec_ch is None else 1)
        a, b = r.random((1, 3, 16, 16)), r.random((1, 1, 16, 16))
        with T.no_grad():
            const = {"a": a, "b": b, "peer_r": rgb(Tensor(a)).class_logits.data,
                     "peer_t": thm(Tensor(b)).class_logits.data}
        lift_a, za = _lift(a, 2)
        lift_b, zb = _lift(b, 3)
        cases.append((f"{mode}/visual_input",
                      lambda z, m=mode, rgb=rgb, thm=thm, c=const, L=lift_a:
                      _objective(m, rgb, thm, targets, L(z), Tensor(c["b"]), c, w), za))
        cases.append((f"{mode}/thermal_input",
                      lambda z, m=mode, rgb=rgb, thm=thm, c=const, L=lift_b:
                      _objective(m, rgb, thm, targets, Tensor(c["a"]), L(z), c, w), zb))
        # parameter path: the thermal patch embedding
        w0 = thm.encoder.patch.weight
        lift_w, zw = _lift(w0.data.astype(np.float64), 4)

        def through_param(z, m=mode, rgb=rgb, thm=thm, c=const, L=lift_w, w0=w0):
            thm.encoder.patch.weight = L(z)
            try:
                return _objective(m, rgb, thm, targets, Tensor(c["a"]), Tensor(c["b"]), c, w)
            finally:
                thm.encoder.patch.weight = w0
        cases.append((f"{mode}/thermal_patch_weight", through_param, zw))
    return cases


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    with T.float64_mode():  # constants and parameters in 64-bit, like the point itself
        cases = _op_cases() + _loss_cases() + _network_cases()
    errors = {name: grad_check(fn, point) for name, fn, point in cases}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    bad = [k for k, e in errors.items() if not e < GRAD_TOL]
    verdict(1, not bad and elapsed < 120,
            f"{len(cases)} cases, max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s"
            + (f"; over tolerance: {bad[:5]}" if bad else ""))


# ---------------------------------------------------------------------------
# 2. loss formulas against scalar-loop oracles

def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(2)
    w = LossWeights()
    worst = {"detection": 0.0, "kl": 0.0, "reconstruction": 0.0, "mmc_total": 0.0}

    def err(key, got, ref):
        worst[key] = max(worst[key], abs(got - ref) / max(1.0, abs(ref)))

    for _ in range(100):
        logits, deltas, t = _loss_case(rng, B=2, A=12)
        det = detection_loss(DetectionOutput(Tensor(logits), Tensor(deltas)), t, w)
        ref = oracles.detection_loss(logits, deltas, t.labels, t.deltas, w.n_cls, w.lambda_reg)
        for got, r in zip((det.total.item(), det.cls.item(), det.reg.item()), ref):
            err("detection", got, r)

        peer = rng.standard_normal(logits.shape) * rng.uniform(0.2, 5)
        tau = float(rng.uniform(0.5, 4))
        err("kl", kl_mimicry(Tensor(logits), peer, tau).item(),
            oracles.kl_mimicry(logits.reshape(-1, 4), peer.reshape(-1, 4), tau))

        img, rec = rng.random((2, 3, 6, 6)), rng.random((2, 3, 6, 6))
        err("reconstruction", reconstruction_loss(img, Tensor(rec)).item(),
            oracles.reconstruction_loss(img.tolist(), rec.tolist()))

        variant = ("plain", "recon", "crossrecon")[int(rng.integers(3))]
        network = ("rgb", "thm")[int(rng.integers(2))]
        weights = LossWeights(lambda_rgb=float(rng.uniform(0, 2)), lambda_thm=float(rng.uniform(0, 2)),
                              lambda_reg=float(rng.uniform(0.5, 2)), lambda_rec=float(rng.uniform(0, 5)),
                              lambda_crossrec_rgb=float(rng.uniform(0, 5)),
                              lambda_crossrec_thm=float(rng.uniform(0, 5)), tau=tau)
        parts = MMCParts(DetectionOutput(Tensor(logits), Tensor(deltas)), t, peer, img, Tensor(rec))
        got = mmc_total(variant, network, parts, weights)[0].item()
        d_ref = oracles.detection_loss(logits, deltas, t.labels, t.deltas, weights.n_cls, weights.lambda_reg)[0]
        lam_kl = weights.lambda_rgb if network == "rgb" else weights.lambda_thm
        lam_rec = {"plain": 0.0, "recon": weights.lambda_rec,
                   "crossrecon": weights.lambda_crossrec_rgb if network == "rgb" else weights.lambda_crossrec_thm}
        ref = (d_ref + lam_kl * oracles.kl_mimicry(logits.reshape(-1, 4), peer.reshape(-1, 4), tau)
               + lam_rec[variant] * oracles.reconstruction_loss(img.tolist(), rec.tolist()))
        err("mmc_total", got, ref)

    kl_min, self_max = np.inf, 0.0
    for _ in range(1000):
        a, b = rng.standard_normal((2, 5, 4)) * rng.uniform(0.1, 10)
        tau = float(rng.uniform(0.5, 4))
        kl_min = min(kl_min, kl_mimicry(Tensor(a), b, tau).item())
        self_max = max(self_max, abs(kl_mimicry(Tensor(a), a, tau).item()))
    ok = max(worst.values()) <= 1e-5 and kl_min >= 0 and self_max <= 1e-7
    verdict(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f"; min KL {kl_min:.2e} over 1000 pairs; max |KL(p||p)| {self_max:.1e}")


# ---------------------------------------------------------------------------
# 3. metrics

def test_criterion_3_metric_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(3000 + seed)
        dets, gts = oracles.random_detection_set(rng, n_img=int(rng.integers(1, 6)), n_det=int(rng.integers(1, 30)),
                                                 n_gt=int(rng.integers(1, 10)),
                                                 tie_levels=int(rng.integers(2, 6)) if seed % 3 == 0 else None)
        n_gt = sum(len(g) for g in gts)
        ap = average_precision(PRCurve.from_scored(match_and_score(dets, gts), n_gt))
        worst = max(worst, abs(ap - oracles.average_precision(dets, gts)))

    def curve(flags, n_gt):
        return PRCurve.from_scored([ScoredDetection(1 - k / 100, tp, 0, k) for k, tp in enumerate(flags)], n_gt)

    f_half = f1_at_recall(curve([False, True], 2))  # p = r = 0.5
    f_one = f1_at_recall(curve([True], 2))  # p = 1, r = 0.5

    rng = np.random.default_rng(4)
    metas = [SampleMeta(i, "test", "day" if i % 2 else "night", 1.0,
                        [(int(rng.integers(1, 4)), float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)), 0.2, 0.2)
                         for _ in range(int(rng.integers(1, 4)))]) for i in range(12)]
    rep = report_from_detections([[Detection(b, c, 0.9) for b, c in m.truths] for m in metas], metas, 3)
    perfect = all(rep.mAP(s) == 1.0 and rep.f1(s) == 1.0 for s in ("all", "day", "night"))
    ok = worst <= 1e-6 and abs(f_half - 0.5) <= 1e-4 and abs(f_one - 2 / 3) <= 1e-4 and perfect
    verdict(3, ok, f"max |AP - oracle| {worst:.1e} over 100 sets; F1 fixtures {f_half:.4f}, {f_one:.4f}; "
                   f"perfect predictor mAP=F1=1: {perfect}")


# ---------------------------------------------------------------------------
# 4. thermal invariance

def test_criterion_4_thermal_invariance():
    rng = np.random.default_rng(5)
    same = 0
    for k in range(100):
        seed = int(rng.integers(2**31))
        day = generate_scene(SceneSpec(seed=seed, domain="day", illumination=float(rng.uniform(0.6, 1.0))))
        night = generate_scene(SceneSpec(seed=seed, domain="night", illumination=float(rng.uniform(0.02, 0.3))))
        same += day.image_b.tobytes() == night.image_b.tobytes() and day.boxes == night.boxes
    verdict(4, same == 100, f"{same}/100 scene pairs with bit-identical thermal image")


# ---------------------------------------------------------------------------
# 5 to 7: trained models on the standard benchmark

class Bench:
    def __init__(self, root: Path):
        self.root = root
        data = root / "data"
        if (data / "manifest.tsv").exists():
            self.dataset = Dataset.load(data)
        else:
            self.dataset = build_dataset(data, 2000, 400, 0.6, seed=0)
        self.seconds: dict[tuple[str, int], float] = {}
        self._systems = {}

    def system(self, variant: str, seed: int):
        key = (variant, seed)
        if key not in self._systems:
            cfg = TrainConfig(variant=variant, seed=seed)
            run = self.root / f"{variant}-s{seed}"
            stamp = run / "seconds.txt"
            cached = (stamp.exists() and (run / "checkpoint.mmck").exists()
                      and (run / "config.ini").read_text() == dump_config(cfg))
            if cached:
                self._systems[key] = load_system(cfg, run / "checkpoint.mmck")
                self.seconds[key] = float(stamp.read_text())
            else:
                t0 = time.perf_counter()
                self._systems[key] = train(cfg, self.dataset, run).system
                self.seconds[key] = time.perf_counter() - t0
                stamp.write_text(f"{self.seconds[key]:.1f}\n")
        return self._systems[key]


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    cache = os.environ.get("MMCDET_ACCEPT_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("benchmark")
    root.mkdir(parents=True, exist_ok=True)
    return Bench(root)


@pytest.mark.slow
def test_criterion_5_mmc_vs_rgb(bench):
    maps = {"rgb": {"all": [], "night": []}, "mmc": {"all": [], "night": []}}
    eval_seconds = 0.0
    for seed in SEEDS:
        for variant in maps:
            system = bench.system(variant, seed)
            t0 = time.perf_counter()
            rep = evaluate(system, bench.dataset, ("all", "night"))
            eval_seconds += time.perf_counter() - t0
            for split in ("all", "night"):
                maps[variant][split].append(rep.mAP(split) * 100)
    mean = {v: {s: float(np.mean(x)) for s, x in d.items()} for v, d in maps.items()}
    runtime = eval_seconds + sum(bench.seconds[(v, s)] for v in maps for s in SEEDS)
    ok = (mean["mmc"]["night"] >= mean["rgb"]["night"] and mean["mmc"]["all"] >= mean["rgb"]["all"] - 0.5
          and runtime <= 45 * 60)
    verdict(5, ok, f"night mAP MMC {mean['mmc']['night']:.2f} vs RGB {mean['rgb']['night']:.2f}; "
                   f"all mAP MMC {mean['mmc']['all']:.2f} vs RGB {mean['rgb']['all']:.2f}; "
                   f"runtime {runtime / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_corruption_robustness(bench):
    noise = GROUPS["noise"]
    scores = {"rgb": [], "mmc_crossrecon": []}
    for seed in SEEDS:
        for variant in scores:
            res = corruption_sweep(bench.system(variant, seed), bench.dataset, 3, seed=0, kinds=noise,
                                   splits=("all",))
            scores[variant].extend(res[k].mAP("all") * 100 for k in noise)
    m_rgb, m_cr = float(np.mean(scores["rgb"])), float(np.mean(scores["mmc_crossrecon"]))

    images = [bench.dataset.image_a(m.id) for m in bench.dataset.split("all")[:5]]
    deterministic = all(corrupt(img, CorruptionSpec(k, s, 7)).tobytes() == corrupt(img, CorruptionSpec(k, s, 7)).tobytes()
                        for img in images[:2] for k in KINDS for s in (1, 3, 5))
    monotone = True
    for img in images:
        for k in noise:
            mse = [float(((corrupt(img, CorruptionSpec(k, s, 1)) - img) ** 2).mean()) for s in range(1, 6)]
            monotone &= all(a < b for a, b in zip(mse, mse[1:]))
    verdict(6, m_cr >= m_rgb and deterministic and monotone,
            f"noise-group mAP at severity 3: MMC+CrossRecon {m_cr:.2f} vs RGB {m_rgb:.2f}; "
            f"deterministic {deterministic}; MSE strictly increasing {monotone}")


@pytest.mark.slow
def test_criterion_7_attack(bench):
    system = bench.system("rgb", 0)
    ds = bench.dataset
    results = attack_sweep(system, ds, hidden_class=1, eps_grid=EPS_GRID, iterations=10)
    recall = [r.hidden_recall for r in results]
    rises = [b - a for a, b in zip(recall, recall[1:]) if b > a]
    shape_ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.01)

    metas = ds.split("all")[:8]
    x0 = np.stack([ds.image_a(m.id) for m in metas])
    truths = [m.truths for m in metas]
    worst = {"linf": 0.0, "range": True}

    def check(eps):
        def trace(k, x):
            worst["linf"] = max(worst["linf"], float(np.abs(x - x0).max()) - eps)
            worst["range"] &= bool(x.min() >= 0 and x.max() <= 1)
        return trace

    for eps in EPS_GRID[1:]:
        pgd_batch(system, x0, truths, AttackSpec(1, eps, iterations=10), trace=check(eps))
    exact = pgd_batch(system, x0, truths, AttackSpec(1, 0.0)).tobytes() == x0.tobytes()
    ok = shape_ok and worst["linf"] <= 1e-6 and worst["range"] and exact
    verdict(7, ok, "hidden-class recall " + " ".join(f"{r:.3f}" for r in recall)
            + f"; max excess |delta| {max(worst['linf'], 0):.1e}; in range {worst['range']}; eps=0 exact {exact}")


# ---------------------------------------------------------------------------
# 8. end-to-end determinism through the CLI

def test_criterion_8_cli_determinism(tmp_path, capsys):
    cfg = TrainConfig(model=ModelConfig(embed_dim=16, depth=1, heads=2, extra_channels=(16, 16)),
                      steps=20, batch_size=4, variant="mmc_crossrecon")
    (tmp_path / "exp.ini").write_text(dump_config(cfg))
    outputs = []
    codes = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        codes.append(cli_main(["synth", "--seed", "3", "--out", str(root / "data"), "--n-train", "40", "--n-test", "20"]))
        codes.append(cli_main(["--config", str(tmp_path / "exp.ini"), "train", "--data", str(root / "data"),
                               "--out", str(root / "run")]))
        codes.append(cli_main(["eval", "--run", str(root / "run")]))
        outputs.append({name: (root / "run" / name).read_bytes() for name in ("checkpoint.mmck", "eval.csv")})
    capsys.readouterr()
    same = {name: outputs[0][name] == outputs[1][name] for name in outputs[0]}
    verdict(8, codes == [0] * 6 and all(same.values()),
            f"exit codes {codes}; byte-identical " + ", ".join(f"{k} {v}" for k, v in same.items()))


# ---------------------------------------------------------------------------
# 9. overfit smoke

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    return build_dataset(tmp_path_factory.mktemp("overfit"), 8, 2, 0.5, seed=11)


def test_criterion_9_overfit(tiny_dataset):
    summary, ok = [], True
    for variant in VARIANTS:
        cfg = TrainConfig(variant=variant, steps=300, batch_size=4, fixed_batch=True, log_every=1)
        t0 = time.perf_counter()
        totals = train(cfg, tiny_dataset).totals()
        secs = time.perf_counter() - t0
        drop = 1 - totals[-1] / totals[0]
        ok &= drop >= 0.8 and secs < 180
        summary.append(f"{variant} {drop * 100:.0f}%/{secs:.0f}s")
    verdict(9, ok, "loss reduction/time: " + ", ".join(summary))
