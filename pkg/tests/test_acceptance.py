"""Acceptance criteria A1-A10. A summary line per criterion is printed at the end of the run.

A4-A8 train the desk preset (classifier plus two purifiers), which takes roughly half an
hour on one CPU core. Set SPIKESHIELD_ACCEPTANCE_DIR to keep the checkpoints between runs.
"""

from pathlib import Path

import numpy as np
import pytest

from spikeshield import nd
from spikeshield.attacks import AttackSpec, fgsm, gaussian, ifgsm, mifgsm, pgd, run_attack
from spikeshield.config import paper_preset, parse_config
from spikeshield.experiment import CSV_FILES, run_experiment
from spikeshield.losses import asymmetric_loss, charbonnier, kl_divergence, tv_regularizer
from spikeshield.models import ClassifierSNN, purify_array
from spikeshield.nd import Tensor
from spikeshield.nd.gradcheck import gradcheck
from spikeshield.optim import lr_at
from spikeshield.pipeline import psnr

GOLDEN = Path(__file__).parent / "golden"


def acceptance(cid, title):
    return pytest.mark.acceptance(cid, title)


# -- A1 ------------------------------------------------------------------------------------

def _weighted_sum(t):
    return nd.sum(t * Tensor(np.linspace(0.5, 1.5, t.size).reshape(t.shape)))


def _kinkless(x, points=(0.0, -0.5, 0.5), gap=1e-2):
    x = x.copy()
    for p in points:
        x[np.abs(x - p) < gap] = p + 2 * gap
    return x


OPS = {
    "add": (lambda a, b: (a + b) * (a + b), 2),
    "sub": (lambda a, b: (a - b) * a, 2),
    "mul": (lambda a, b: a * b * a, 2),
    "div": (lambda a, b: a / (nd.square(b) + 1.0), 2),
    "neg": (lambda a: nd.neg(a) * a, 1),
    "abs": (lambda a: nd.abs(a) * a, 1),
    "square": (lambda a: nd.square(a), 1),
    "sqrt": (lambda a: nd.sqrt(nd.square(a) + 0.5), 1),
    "log": (lambda a: nd.log(nd.square(a) + 0.1), 1),
    "exp": (lambda a: nd.exp(a * 0.3), 1),
    "clamp": (lambda a: nd.clamp(a, -0.5, 0.5) * a, 1),
    "softplus": (lambda a: nd.softplus(a) * a, 1),
    "sum": (lambda a: nd.square(nd.sum(a, axis=1)), 1),
    "mean": (lambda a: nd.square(nd.mean(a, axis=0)), 1),
    "max": (lambda a: nd.max(a, axis=1) * 2.0, 1),
    "reshape": (lambda a: nd.reshape(a, (4, 3)) * nd.reshape(a, (4, 3)), 1),
    "broadcast": (lambda a: nd.broadcast_to(nd.sum(a, axis=1, keepdims=True), (3, 4)) * a, 1),
    "getitem": (lambda a: a[1:, :2] * a[:2, 2:], 1),
    "concat": (lambda a, b: nd.concat([a, b], axis=1) * nd.concat([b, a], axis=1), 2),
    "matmul": (lambda a, b: nd.matmul(a, nd.reshape(b, (4, 3))), 2),
    "log_softmax": (lambda a: nd.log_softmax(a) * a, 1),
}


@acceptance("A1", "gradient oracle")
def test_a1_gradient_oracle(record_property):
    rng = np.random.default_rng(2024)
    worst = {}
    for name, (fn, arity) in OPS.items():
        for _ in range(20):
            args = [_kinkless(rng.normal(size=(3, 4))) for _ in range(arity)]
            if name == "max":
                args[0][:, 0] += 3.0
            worst[name] = max(worst.get(name, 0.0), gradcheck(lambda *t: _weighted_sum(fn(*t)), args))
    for _ in range(20):
        x, k, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        worst["conv2d"] = max(worst.get("conv2d", 0.0), gradcheck(
            lambda a, kk, bb: _weighted_sum(nd.conv2d(a, kk, bb, stride=1, padding=1)), [x, k, b]))
        kt, bt = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3)
        worst["transposed_conv2d"] = max(worst.get("transposed_conv2d", 0.0), gradcheck(
            lambda a, kk, bb: _weighted_sum(nd.transposed_conv2d(a, kk, bb, stride=2)), [x, kt, bt]))
        xp = rng.normal(size=(2, 2, 4, 4))
        worst["avg_pool2d"] = max(worst.get("avg_pool2d", 0.0), gradcheck(
            lambda a: _weighted_sum(nd.avg_pool2d(a, 2)), [xp]))
        xl, w, bl = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
        y = rng.integers(0, 3, size=4)
        worst["linear+cross_entropy"] = max(worst.get("linear+cross_entropy", 0.0), gradcheck(
            lambda a, ww, bb: nd.cross_entropy(nd.linear(a, ww, bb), y), [xl, w, bl]))
    for _ in range(20):
        a = rng.uniform(0.1, 0.9, size=(2, 1, 3, 3))
        b = rng.uniform(0.1, 0.9, size=(2, 1, 3, 3))
        sig = rng.uniform(0.0, 0.2, size=(2, 1, 3, 3))
        sh = sig + rng.choice([-1, 1], size=sig.shape) * rng.uniform(0.01, 0.1, size=sig.shape)
        for name, err in (("charbonnier", gradcheck(charbonnier, [a, b])),
                          ("kl_divergence", gradcheck(kl_divergence, [a, b])),
                          ("asymmetric_loss", gradcheck(lambda p: asymmetric_loss(p, Tensor(sig)), [sh])),
                          ("tv_regularizer", gradcheck(tv_regularizer, [sh]))):
            worst[name] = max(worst.get(name, 0.0), err)
    adjoint = 0.0
    for shape, kshape, stride, pad in [((2, 3, 8, 8), (4, 3, 3, 3), 1, 1),
                                       ((1, 2, 8, 8), (3, 2, 2, 2), 2, 0),
                                       ((2, 2, 9, 9), (3, 2, 3, 3), 2, 1)]:
        for _ in range(5):
            x, k = rng.normal(size=shape), rng.normal(size=kshape)
            fx = nd.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
            y = rng.normal(size=fx.shape)
            lhs = np.sum(fx * y)
            rhs = np.sum(x * nd.transposed_conv2d(Tensor(y), Tensor(k), stride=stride, padding=pad).data)
            adjoint = max(adjoint, abs(lhs - rhs) / max(1.0, abs(lhs)))
    top = max(worst, key=worst.get)
    record_property("detail", f"{len(worst)} ops, worst rel err {worst[top]:.1e} ({top}), "
                              f"adjoint {adjoint:.1e}")
    assert worst[top] < 1e-3, worst
    assert adjoint < 1e-5


# -- A2 ------------------------------------------------------------------------------------

def _t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


@acceptance("A2", "loss oracles")
def test_a2_loss_oracles(record_property):
    over = asymmetric_loss(_t([0.2]), _t([0.1]), gamma=0.3).item()
    under = asymmetric_loss(_t([0.1]), _t([0.2]), gamma=0.3).item()
    assert over == pytest.approx(0.003, abs=1e-15)
    assert under == pytest.approx(0.007, abs=1e-15)
    rng = np.random.default_rng(5)
    worst_ratio = 0.0
    for _ in range(1000):
        sigma, delta, gamma = rng.uniform(0, 1), rng.uniform(1e-3, 1), rng.uniform(0.01, 0.49)
        hi = asymmetric_loss(_t([sigma - delta]), _t([sigma]), gamma).item()
        lo = asymmetric_loss(_t([sigma + delta]), _t([sigma]), gamma).item()
        worst_ratio = max(worst_ratio, abs(hi / lo - (1 - gamma) / gamma) / ((1 - gamma) / gamma))
    assert worst_ratio < 1e-9
    assert tv_regularizer(_t(np.full((2, 1, 5, 5), 0.37))).item() == 0.0
    worst_kl = np.inf
    for _ in range(1000):
        p, q = rng.uniform(0, 1, size=(2, 1, 4, 4)), rng.uniform(0, 1, size=(2, 1, 4, 4))
        assert kl_divergence(_t(p), _t(p)).item() == pytest.approx(0.0, abs=1e-12)
        worst_kl = min(worst_kl, kl_divergence(_t(p), _t(q)).item())
    assert worst_kl >= 0
    record_property("detail", f"asymm {over:.6f}/{under:.6f}, ratio err {worst_ratio:.1e}, "
                              f"min KL {worst_kl:.2e}")


# -- A3 ------------------------------------------------------------------------------------

@acceptance("A3", "attack invariants")
def test_a3_attack_invariants(record_property):
    model = ClassifierSNN(widths=(4, 4), seed=3)
    rng = np.random.default_rng(6)
    violations = 0
    for kind in ("fgsm", "ifgsm", "mifgsm", "pgd"):
        for i in range(100):
            x = rng.uniform(size=(2, 1, 16, 16)).astype(np.float32)
            x[:, :, :2] = rng.choice([0.0, 1.0], size=(2, 1, 2, 16))
            y = rng.integers(0, 10, size=2)
            eps = float(rng.uniform(0, 0.1))
            spec = AttackSpec(kind, eps=eps, steps=None if kind == "fgsm" else 3)
            xa = run_attack(spec, model, x, y, seed=i).x_adv
            gap = np.abs(xa.astype(np.float64) - x.astype(np.float64)).max()
            violations += int(gap > eps + 1e-9) + int(xa.min() < 0 or xa.max() > 1)
    assert violations == 0
    x = rng.uniform(size=(4, 1, 16, 16)).astype(np.float32)
    y = rng.integers(0, 10, size=4)
    eps = 8 / 255
    one = fgsm(model, x, y, eps).x_adv
    assert one.tobytes() == pgd(model, x, y, eps, steps=1, step_size=eps,
                                random_start=False).x_adv.tobytes()
    assert mifgsm(model, x, y, eps, 5, 2 / 255, momentum=0.0).x_adv.tobytes() == \
        ifgsm(model, x, y, eps, 5, 2 / 255).x_adv.tobytes()
    record_property("detail", "400 batches, 0 violations, bit-exact identities hold")


# -- A4-A8: desk-scale training ------------------------------------------------------------

@acceptance("A4", "denoising efficacy")
def test_a4_denoising(gaussian_run, record_property):
    test = gaussian_run.data[2]
    noisy = gaussian(test.images, 20 / 255, seed=11).x_adv
    purified, _ = purify_array(gaussian_run.purifier, noisy)
    before, after = psnr(noisy, test.images), psnr(purified, test.images)
    record_property("detail", f"PSNR {before:.2f} -> {after:.2f} dB")
    assert after - before >= 2.0


@acceptance("A5", "robustness improvement")
def test_a5_robustness(desk_run, record_property):
    _, report, _ = desk_run
    f, p, clean = report.row("fgsm"), report.row("pgd20"), report.clean
    record_property("detail", f"clean {clean.undefended:.3f}; FGSM {f.undefended:.3f} -> "
                              f"{f.always_purify:.3f}; PGD20 defended {p.always_purify:.3f}")
    assert clean.undefended > 0.80
    assert f.always_purify - f.undefended >= 0.10
    assert abs(p.always_purify - f.always_purify) <= 0.10


@acceptance("A6", "detection")
def test_a6_detection(desk_run, record_property):
    _, report, _ = desk_run
    rate, fpr = report.row("fgsm").detection_rate, report.false_positive_rate
    record_property("detail", f"tau {report.threshold:.4f}, FGSM detection {rate:.3f}, "
                              f"clean FPR {fpr:.3f}")
    assert fpr <= 0.10
    assert rate >= 0.90


@pytest.mark.acceptance
def test_calibrated_clean_flag_rate_band(desk_run):
    # q = 0.95 on the validation split leaves roughly 5% of held-out clean images flagged
    _, report, _ = desk_run
    assert 0.02 <= report.false_positive_rate <= 0.08


@pytest.mark.acceptance
def test_pgd20_defended_beats_undefended(desk_run):
    _, report, _ = desk_run
    row = report.row("pgd20")
    assert row.undefended < row.always_purify


@acceptance("A7", "routing benefit")
def test_a7_routing(desk_run, record_property):
    _, report, _ = desk_run
    clean, adv = report.clean, report.row("fgsm")
    record_property("detail", f"clean {clean.always_purify:.3f} -> {clean.detect_and_route:.3f}; "
                              f"FGSM always {adv.always_purify:.3f} vs route "
                              f"{adv.detect_and_route:.3f}")
    assert clean.detect_and_route >= clean.always_purify
    assert abs(adv.detect_and_route - adv.always_purify) <= 0.02


@acceptance("A8", "histogram separation")
def test_a8_histogram(desk_run, record_property):
    _, _, hist = desk_run
    m = hist["m"]
    clean, attacked = float(np.median(m["clean"])), float(np.median(m["fgsm"]))
    record_property("detail", f"median m clean {clean:.4f}, FGSM {attacked:.4f}")
    assert attacked > clean
    assert sum(r.count for r in hist["tables"]["fgsm"]) == len(m["fgsm"])


# -- A9, A10 -------------------------------------------------------------------------------

@acceptance("A9", "schedule and config fidelity")
def test_a9_paper_preset_golden(record_property):
    cfg = paper_preset()
    assert cfg.dumps() == (GOLDEN / "paper_preset.cfg").read_text(encoding="utf-8")
    t = cfg.purifier_train()
    assert (t.epochs, t.batch_size) == (75, 256)
    assert [t.lr_for(e) for e in (1, 30, 31, 60, 61, 75)] == [1e-4, 1e-4, 1e-5, 1e-5, 1e-6, 1e-6]
    assert [lr_at(e, 1e-4, (30, 60)) for e in range(1, 76)] == \
        [1e-4] * 30 + [1e-5] * 30 + [1e-6] * 15
    assert (cfg.loss_asymm, cfg.loss_tv) == (0.5, 0.05)
    assert t.attack.kind == "fgsm" and t.attack.eps == 16 / 255 and not t.attack.random_eps
    assert t.clean_fraction == 0.0
    record_property("detail", "golden dump matches; lr 1e-4 -> 1e-5 @31 -> 1e-6 @61")


TINY = """\
dataset.train_count = 40
dataset.val_count = 20
dataset.test_count = 30
classifier.epochs = 2
classifier.milestones = [1]
purifier.epochs = 2
purifier.milestones = [1]
eval.attacks = [fgsm, mifgsm:3, pgd:3, gaussian]
sweep.steps = [1, 3]
sweep.eps = [4/255, 8/255]
sweep.count = 10
"""


@acceptance("A10", "end-to-end determinism")
def test_a10_determinism(tmp_path, record_property):
    cfg = parse_config(TINY)
    run_experiment(cfg, tmp_path / "one")
    run_experiment(cfg, tmp_path / "two")
    names = sorted(CSV_FILES.values()) + ["verdicts.jsonl"]
    for name in names:
        a, b = (tmp_path / "one" / name).read_bytes(), (tmp_path / "two" / name).read_bytes()
        assert a == b, name
    record_property("detail", f"{len(names)} files byte-identical")
