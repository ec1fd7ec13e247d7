import numpy as np
import pytest

from spikeshield.attacks import AttackSpec, fgsm, input_gradient
from spikeshield.data import LabeledImages, synthetic_shapes
from spikeshield.errors import ConfigurationError, DimensionError, TrainingDivergedError
from spikeshield.models import ClassifierSNN, Purifier, PurifierOutput, predict
from spikeshield.nd import Tensor
from spikeshield.pipeline import (
    DetectionConfig, TrainConfig, calibrate_threshold, defended_classify, detect,
    _keep_clean, histogram_rows, linf_histogram, map_batches, noise_level_maps, train_purifier,
)


class ShiftPurifier:
    """Stand-in purifier that moves image i by ``shifts[i]`` (clipped to [0, 1])."""

    def __init__(self, shifts):
        self.shifts = np.asarray(shifts, dtype=np.float32)
        self.offset = 0

    def __call__(self, x):
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        s = self.shifts[:len(x)].reshape(-1, 1, 1, 1)
        out = np.clip(x + s, 0, 1).astype(np.float32)
        return PurifierOutput(Tensor(out), Tensor(np.zeros_like(out)))


def small_purifier(seed=0):
    return Purifier.build(width=8, widths=(8, 16), seed=seed)


def small_classifier(seed=0):
    return ClassifierSNN(widths=(8, 16), seed=seed)


def mid_images(n, seed=0):
    return np.random.default_rng(seed).uniform(0.2, 0.8, size=(n, 1, 16, 16)).astype(np.float32)


# -- noise levels --------------------------------------------------------------------------

def test_noise_level_zero():
    s, sh = noise_level_maps(np.zeros((2, 1, 4, 4)), Tensor(np.ones((2, 1, 4, 4))))
    assert not s.data.any()
    assert sh.data.sum() == 32


def test_noise_level_sign_invariance():
    n = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
    sh = Tensor(np.zeros((2, 1, 4, 4)))
    np.testing.assert_array_equal(noise_level_maps(n, sh)[0].data, noise_level_maps(-n, sh)[0].data)


def test_noise_level_shape_check():
    with pytest.raises(DimensionError):
        noise_level_maps(np.zeros((1, 1, 4, 4)), Tensor(np.zeros((1, 1, 4, 3))))


def test_noise_level_fgsm_budget():
    clf = small_classifier()
    x, y = mid_images(4), np.arange(4)
    adv = fgsm(clf, x, y, 16 / 255)
    sigma = noise_level_maps(adv.n_real, Tensor(np.zeros_like(x)))[0].data.astype(np.float64)
    active = input_gradient(clf, x, y) != 0
    np.testing.assert_allclose(sigma[active], 16 / 255, atol=1e-7)


# -- training ------------------------------------------------------------------------------

def toy_set(n=64, seed=0) -> LabeledImages:
    return synthetic_shapes(n, seed)


def test_zero_epochs_is_noop():
    p = small_purifier()
    before = [q.data.copy() for q in p.parameters()]
    curve = train_purifier(p, None, toy_set(8), TrainConfig(epochs=0, milestones=(),
                                                            attack=AttackSpec("gaussian")))
    assert curve == []
    assert all(np.array_equal(a, q.data) for a, q in zip(before, p.parameters()))


def test_classifier_stays_frozen():
    clf, p = small_classifier(), small_purifier()
    before = [q.data.tobytes() for q in clf.parameters()]
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, milestones=(1,))
    train_purifier(p, clf, toy_set(32), cfg)
    assert [q.data.tobytes() for q in clf.parameters()] == before
    assert all(q.grad is None for q in clf.parameters())


def test_training_is_deterministic():
    def run():
        cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, milestones=(),
                          attack=AttackSpec("fgsm", eps=16 / 255, random_eps=True), seed=5)
        return train_purifier(small_purifier(1), small_classifier(1), toy_set(32), cfg)

    assert run() == run()


def test_toy_training_reduces_loss():
    cfg = TrainConfig(epochs=10, batch_size=32, lr=1e-3, milestones=(),
                      attack=AttackSpec("fgsm", eps=16 / 255), seed=0)
    curve = train_purifier(small_purifier(), small_classifier(), toy_set(512), cfg)
    assert len(curve) == 10
    assert curve[-1] < curve[0]


def test_clean_fraction_swaps_whole_images():
    clf = small_classifier()
    x, y = mid_images(64), np.arange(64) % 10
    adv = fgsm(clf, x, y, 16 / 255)
    assert _keep_clean(adv, x, 0.0, 3) is adv
    mixed = _keep_clean(adv, x, 0.25, 3)
    clean = (mixed.n_real == 0).all(axis=(1, 2, 3))
    assert 0 < clean.sum() < 64
    np.testing.assert_array_equal(mixed.x_adv[clean], x[clean])
    np.testing.assert_array_equal(mixed.x_adv[~clean], adv.x_adv[~clean])
    assert not (adv.n_real == 0).all(axis=(1, 2, 3)).any()
    with pytest.raises(ConfigurationError):
        TrainConfig(clean_fraction=1.0)


def test_divergence_is_reported():
    p = small_purifier()
    p.recsnn.out.weight.data[0, 0, 0, 0] = np.nan
    cfg = TrainConfig(epochs=1, batch_size=8, milestones=(), attack=AttackSpec("gaussian"))
    with pytest.raises(TrainingDivergedError):
        train_purifier(p, None, toy_set(8), cfg)


def test_training_argument_checks():
    cfg = TrainConfig(epochs=1, milestones=())
    with pytest.raises(ConfigurationError):
        train_purifier(small_purifier(), None, toy_set(8), cfg)  # fgsm without a classifier
    with pytest.raises(ConfigurationError):
        train_purifier(small_purifier(), small_classifier(), toy_set(0), cfg)


def test_train_config_schedule():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr) == (75, 256, 1e-4)
    assert cfg.attack == AttackSpec("fgsm", eps=16 / 255)
    assert [cfg.lr_for(e) for e in (30, 31, 60, 61)] == [1e-4, 1e-5, 1e-5, 1e-6]
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=50, milestones=(30, 60))
    with pytest.raises(ConfigurationError):
        TrainConfig(milestones=(60, 30))


# -- detection -----------------------------------------------------------------------------

def test_detection_config_contract():
    with pytest.raises(ConfigurationError):
        DetectionConfig(threshold=0.0)
    with pytest.raises(ConfigurationError):
        DetectionConfig(quantile=1.0)


def test_threshold_semantics():
    x = np.full((3, 1, 4, 4), 0.5, dtype=np.float32)
    v = detect(ShiftPurifier([0.06, 0.07, 0.0]), x, DetectionConfig(0.0658))
    assert v.is_adversarial.tolist() == [False, True, False]
    assert v.routed.tolist() == ["original", "purified", "original"]
    # strict inequality: m equal to tau is clean
    tau = float(v.m[1])
    assert not detect(ShiftPurifier([0.07]), x[:1], DetectionConfig(tau)).is_adversarial[0]


def test_identity_purifier_gives_zero_distance():
    x = mid_images(3)
    v = detect(small_purifier(), x, DetectionConfig(0.01))  # zero-init heads: identity
    assert (v.m == 0).all() and not v.is_adversarial.any()


def test_huge_threshold_never_flags():
    x = np.random.default_rng(1).uniform(size=(5, 1, 4, 4)).astype(np.float32)
    v = detect(ShiftPurifier([1.0, -1.0, 0.5, -0.5, 0.9]), x, DetectionConfig(1.0))
    assert (v.m <= 1).all() and not v.is_adversarial.any()
    np.testing.assert_array_equal(v.routed_images(x), x)


def test_calibration():
    x = np.full((6, 1, 4, 4), 0.5, dtype=np.float32)
    assert calibrate_threshold(ShiftPurifier([0.1] * 6), x, 0.9) == pytest.approx(0.1, abs=1e-7)
    shifts = np.linspace(0.0, 0.3, 6)
    taus = [calibrate_threshold(ShiftPurifier(shifts), x, q) for q in (0.1, 0.5, 0.9, 0.99)]
    assert taus == sorted(taus)
    with pytest.raises(ConfigurationError):
        calibrate_threshold(ShiftPurifier([]), x[:0], 0.9)
    with pytest.raises(ConfigurationError):
        calibrate_threshold(ShiftPurifier(shifts), x, 0.0)
    # zero distances everywhere still give a positive threshold
    assert calibrate_threshold(ShiftPurifier([0.0] * 6), x, 0.5) > 0


def test_defended_modes():
    clf = small_classifier()
    x = mid_images(6, 3)
    pur = ShiftPurifier([0.0, 0.2, 0.0, 0.2, 0.0, 0.2])
    pa1, _ = defended_classify(pur, clf, x, DetectionConfig(1e-6), "always-purify")
    pa2, _ = defended_classify(pur, clf, x, DetectionConfig(0.9), "always-purify")
    np.testing.assert_array_equal(pa1, pa2)
    pr, v = defended_classify(pur, clf, x, DetectionConfig(0.1), "detect-and-route")
    flagged = v.is_adversarial
    assert flagged.tolist() == [False, True] * 3
    np.testing.assert_array_equal(pr[flagged], pa1[flagged])
    np.testing.assert_array_equal(pr[~flagged], predict(clf, x[~flagged]))
    with pytest.raises(ConfigurationError):
        defended_classify(pur, clf, x, DetectionConfig(0.1), "vote")


# -- histogram -----------------------------------------------------------------------------

def test_histogram_rows():
    rows = histogram_rows(np.array([0.0, 0.1, 0.2, 0.4]), 4)
    assert [r.count for r in rows] == [1, 1, 1, 1]
    assert rows[0].bin_low == 0 and rows[-1].bin_high == pytest.approx(0.4)
    with pytest.raises(ConfigurationError):
        histogram_rows(np.zeros(3), 1)


def test_histogram_empty_and_conservation():
    empty = LabeledImages(np.zeros((0, 1, 4, 4), np.float32), np.zeros(0, np.int64))
    rows = linf_histogram(ShiftPurifier([]), empty, None, bins=5)
    assert len(rows) == 5 and all(r.count == 0 for r in rows)
    data = toy_set(20)
    rows = linf_histogram(ShiftPurifier(np.linspace(0, 0.1, 20)), data, None, bins=7)
    assert sum(r.count for r in rows) == 20


def test_threads_do_not_change_results(monkeypatch):
    def fn(s):
        return np.arange(s.start, s.stop) ** 2

    monkeypatch.setenv("SPIKESHIELD_THREADS", "1")
    one = np.concatenate(map_batches(fn, 23, 5))
    monkeypatch.setenv("SPIKESHIELD_THREADS", "3")
    three = np.concatenate(map_batches(fn, 23, 5))
    np.testing.assert_array_equal(one, three)
    monkeypatch.setenv("SPIKESHIELD_THREADS", "many")
    with pytest.raises(ConfigurationError):
        map_batches(fn, 3, 1)
