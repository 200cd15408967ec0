import numpy as np
import pytest

from mmcdet.config import (VARIANTS, ModelConfig, TrainConfig, apply_override, dump_config, parse_config)
from mmcdet.data import Dataset, Sample, SceneSpec, build_dataset, generate_scene
from mmcdet.losses import LossWeights
from mmcdet.nn import ConfigError
from mmcdet.tensor import NumericError
from mmcdet.train import (LOG_COLUMNS, OptimState, adamw_step, apply_augment, augment, build_system,
                          train, write_loss_log)

SMALL = dict(embed_dim=16, depth=1, heads=2, extra_channels=(16, 16))


def small_cfg(variant, **kw):
    return TrainConfig(variant=variant, model=ModelConfig(**SMALL), **kw)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return build_dataset(tmp_path_factory.mktemp("train_ds"), 24, 8, 0.5, seed=3)


# -- optimizer ---------------------------------------------------------------

def test_zero_grad_zero_decay_is_noop():
    p = [np.array([1.0, -2.0])]
    adamw_step(p, [np.zeros(2)], OptimState.zeros_like(p), 0.1, 0.0)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_constant_grad_update_tends_to_lr_sign():
    p = [np.zeros(3)]
    st = OptimState.zeros_like(p)
    g = np.array([0.3, -5.0, 1e-3])
    for _ in range(200):
        before = p[0].copy()
        adamw_step(p, [g], st, 0.01, 0.0)
    np.testing.assert_allclose(p[0] - before, -0.01 * np.sign(g), rtol=1e-3)


def test_quadratic_descent_monotone():
    theta = [np.array([1.0])]
    st = OptimState.zeros_like(theta)
    prev = 1.0
    for _ in range(10):
        adamw_step(theta, [2 * theta[0]], st, 0.05, 0.0)
        assert abs(theta[0][0]) < prev
        prev = abs(theta[0][0])


def test_matches_reference_adam():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.5, 2.0, 10)
    theta = [rng.standard_normal(10).astype(np.float32)]
    ref = theta[0].astype(np.float64).copy()
    m = np.zeros(10)
    v = np.zeros(10)
    st = OptimState.zeros_like(theta)
    for t in range(1, 101):
        adamw_step(theta, [(2 * a * theta[0]).astype(np.float32)], st, 1e-2, 0.0)
        g = 2 * a * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(theta[0], ref, atol=1e-6 * 10)


def test_decoupled_weight_decay():
    p = [np.array([2.0])]
    adamw_step(p, [np.zeros(1)], OptimState.zeros_like(p), 0.1, 0.05)
    np.testing.assert_allclose(p[0], 2.0 - 0.1 * 0.05 * 2.0)


def test_nonfinite_grad_aborts():
    p = [np.ones(2)]
    st = OptimState.zeros_like(p)
    with pytest.raises(NumericError, match="w0"):
        adamw_step(p, [np.array([np.nan, 0.0])], st, 0.1, 0.0, names=["w0"])
    assert st.step == 0 and np.array_equal(p[0], np.ones(2))


# -- augmentation ------------------------------------------------------------

@pytest.fixture
def sample():
    return generate_scene(SceneSpec(seed=21, min_objects=3, max_objects=5))


def test_identity_augment(sample):
    out = apply_augment(sample, crop=(0.0, 0.0, 1.0, 1.0), contrast=1.0)
    assert np.array_equal(out.image_a, sample.image_a) and np.array_equal(out.image_b, sample.image_b)
    assert out.boxes == sample.boxes


def test_hue_full_turn(sample):
    out = apply_augment(sample, hue_degrees=360.0)
    np.testing.assert_allclose(out.image_a, sample.image_a, atol=1e-4)


def test_crop_left_half_box_oracle():
    img = np.zeros((3, 64, 64), np.float32)
    s = Sample(0, img, img[:1], [(1, 0.25, 0.5, 0.1, 0.2), (2, 0.8, 0.5, 0.2, 0.2)])
    out = apply_augment(s, crop=(0.0, 0.0, 0.5, 1.0))
    assert len(out.boxes) == 1
    c, cx, cy, w, h = out.boxes[0]
    assert c == 1
    assert cx == pytest.approx((0.25 - 0.0) / 0.5) and w == pytest.approx(0.2)
    assert cy == pytest.approx(0.5) and h == pytest.approx(0.2)


def test_augment_ranges(sample):
    rng = np.random.default_rng(0)
    for _ in range(30):
        out = augment(sample, rng)
        for img in (out.image_a, out.image_b):
            assert img.min() >= 0 and img.max() <= 1 and img.shape[1:] == (64, 64)
        for c, cx, cy, w, h in out.boxes:
            assert -1e-9 <= cx - w / 2 and cx + w / 2 <= 1 + 1e-9
            assert -1e-9 <= cy - h / 2 and cy + h / 2 <= 1 + 1e-9


def test_augment_leaves_thermal_photometry(sample):
    out = apply_augment(sample, contrast=1.4, saturation=0.6, hue_degrees=10)
    assert np.array_equal(out.image_b, sample.image_b)
    assert not np.array_equal(out.image_a, sample.image_a)


# -- training ----------------------------------------------------------------

def test_config_roundtrip_and_errors():
    cfg = small_cfg("mmc_recon")
    apply_override(cfg, "loss.tau=4")
    apply_override(cfg, "lr=0.001")
    text = dump_config(cfg)
    again = parse_config(text)
    assert dump_config(again) == text and again.loss.tau == 4.0 and again.lr == 0.001
    with pytest.raises(ConfigError):
        parse_config("[train]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        parse_config("variant = nope\n")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_trains(variant, dataset):
    cfg = small_cfg(variant, steps=3, batch_size=2, log_every=1)
    res = train(cfg, dataset)
    assert res.log and all(np.isfinite(r["total"]) for r in res.log)
    if variant.startswith("mmc"):
        assert {r["network"] for r in res.log} == {"rgb", "thm"}
        assert all(r["kl"] >= 0 for r in res.log)


def test_training_reproducible(dataset, tmp_path):
    cfg = small_cfg("mmc_crossrecon", steps=4, batch_size=2, log_every=1)
    r1 = train(cfg, dataset, tmp_path / "a")
    r2 = train(cfg, dataset, tmp_path / "b")
    assert r1.log == r2.log
    assert (tmp_path / "a/checkpoint.mmck").read_bytes() == (tmp_path / "b/checkpoint.mmck").read_bytes()
    assert (tmp_path / "a/loss_log.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)


def test_mmc_without_mimicry_matches_baselines(dataset):
    kw = dict(steps=4, batch_size=2, log_every=1)
    mmc = train(small_cfg("mmc", loss=LossWeights(lambda_rgb=0.0, lambda_thm=0.0), **kw), dataset).log
    rgb = train(small_cfg("rgb", **kw), dataset).log
    thm = train(small_cfg("thermal", **kw), dataset).log
    assert [r["total"] for r in mmc if r["network"] == "rgb"] == [r["total"] for r in rgb]
    assert [r["total"] for r in mmc if r["network"] == "thm"] == [r["total"] for r in thm]


def test_rgb_reads_no_thermal_bytes(dataset):
    ds = Dataset.load(dataset.root)
    train(small_cfg("rgb", steps=2, batch_size=4), ds)
    assert ds.reads["a"] > 0 and ds.reads["b"] == 0


def test_overfit_fixed_batch(dataset):
    cfg = small_cfg("rgb", steps=150, batch_size=4, fixed_batch=True, log_every=1, lr=2e-3)
    cfg.augment.enabled = False
    totals = train(cfg, dataset).totals()
    assert totals[-1] < 0.2 * totals[0]


def test_loss_log_schema(tmp_path):
    write_loss_log(tmp_path / "l.csv", [dict(step=0, variant="rgb", network="rgb", cls=1.0, reg=0.5,
                                             kl=0.0, rec=0.0, total=1.5)])
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS)


def test_forward_visual_only_for_visual_variants():
    assert build_system(small_cfg("rgb")).forward_visual is not None
    with pytest.raises(ConfigError):
        build_system(small_cfg("thermal")).forward_visual(None)
