"""End-to-end harness: train classifier and purifier, calibrate, evaluate, report.

Each stage writes its artifacts into the output directory before the next one
starts, and later stages reload what they need from disk. That way the CLI
verbs can run one at a time and a failed stage leaves earlier results in
place.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackSpec
from .config import ExperimentConfig
from .data import LabeledImages, load_dataset
from .errors import ConfigurationError, StageError
from .models import ClassifierSNN, Purifier, load_checkpoint, predict, save_checkpoint
from .pipeline import (
    DetectionConfig, accuracy, attack_dataset, calibrate_threshold, detect, histogram_rows,
    linf_distance, train_classifier, train_purifier,
)

log = logging.getLogger(__name__)

STAGES = ("train-classifier", "train-purifier", "calibrate", "evaluate", "histogram", "sweep")

CLASSIFIER_CKPT = "classifier.ck"
PURIFIER_CKPT = "purifier.ck"
CSV_FILES = {
    "classifier_loss": "classifier_loss.csv",
    "purifier_loss": "purifier_loss.csv",
    "threshold": "threshold.csv",
    "report": "report.csv",
    "detection": "detection.csv",
    "histogram": "histogram.csv",
    "sweep": "sweep.csv",
}
VERDICTS = "verdicts.jsonl"


@dataclass(frozen=True)
class AttackRow:
    attack: str  # "clean" or the attack label
    eps: float
    count: int
    undefended: float
    always_purify: float
    detect_and_route: float
    detection_rate: float  # flagged fraction; the false-positive rate on the clean row


@dataclass
class RobustnessReport:
    config_hash: str
    seed: int
    threshold: float
    rows: list = field(default_factory=list)

    def row(self, attack: str) -> AttackRow:
        for r in self.rows:
            if r.attack == attack:
                return r
        raise KeyError(attack)

    @property
    def clean(self) -> AttackRow:
        return self.row("clean")

    @property
    def false_positive_rate(self) -> float:
        return self.clean.detection_rate


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.8f}"
    return str(v)


def write_csv(path: Path, header: list[str], rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class Experiment:
    """Holds one configuration, its output directory and lazily loaded state."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self.hash = cfg.hash()
        self._data = None
        self._classifier = None
        self._purifier = None
        self._tau = None

    # -- shared state ------------------------------------------------------------------

    def _prefix(self) -> list:
        return [self.hash, self.cfg.seed]

    def _ensure_out(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(f"# config hash {self.hash}\n" + self.cfg.dumps(),
                                             encoding="utf-8")

    @property
    def data(self) -> tuple[LabeledImages, LabeledImages, LabeledImages]:
        """(train, validation, test) splits."""
        if self._data is None:
            c = self.cfg
            total = c.dataset_train_count + c.dataset_val_count + c.dataset_test_count
            full = load_dataset(c.dataset_path, c.dataset_format, c.dataset_labels_path or None,
                                count=total, seed=c.dataset_split_seed)
            if len(full) < total:
                raise ConfigurationError(f"dataset has {len(full)} images, config asks for {total}")
            order = np.random.default_rng(c.dataset_split_seed).permutation(len(full))[:total]
            full = full.subset(order)
            train, rest = full.split(c.dataset_train_count)
            val, test = rest.split(c.dataset_val_count)
            self._data = (train, val, test)
        return self._data

    def _image_geometry(self) -> tuple[int, int, int]:
        train = self.data[0]
        _, channels, h, w = train.images.shape
        if h != w:
            raise ConfigurationError(f"images must be square, got {h}x{w}")
        return channels, h, int(train.labels.max()) + 1

    @property
    def classifier(self) -> ClassifierSNN:
        if self._classifier is None:
            self._classifier = load_checkpoint(self.out / CLASSIFIER_CKPT)
        return self._classifier

    @property
    def purifier(self) -> Purifier:
        if self._purifier is None:
            self._purifier = load_checkpoint(self.out / PURIFIER_CKPT)
        return self._purifier

    @property
    def tau(self) -> float:
        if self._tau is None:
            rows = read_csv(self.out / CSV_FILES["threshold"])
            self._tau = float(rows[0]["tau"])
        return self._tau

    def _checkpoint_extra(self) -> dict:
        return {"config_hash": self.hash, "seed": self.cfg.seed}

    # -- stages ------------------------------------------------------------------------

    def train_classifier(self) -> list[float]:
        self._ensure_out()
        channels, size, classes = self._image_geometry()
        c = self.cfg
        model = ClassifierSNN(channels, size, max(classes, 2), neuron=c.neuron(),
                              T=c.neuron_timesteps, seed=c.seed + 2)
        tc = c.classifier_train()
        curve = train_classifier(model, self.data[0], tc)
        save_checkpoint(model, self.out / CLASSIFIER_CKPT, self._checkpoint_extra())
        write_csv(self.out / CSV_FILES["classifier_loss"],
                  ["config_hash", "seed", "epoch", "lr", "loss"],
                  [self._prefix() + [e, tc.lr_for(e), loss] for e, loss in enumerate(curve, 1)])
        self._classifier = model
        return curve

    def train_purifier(self) -> list[float]:
        self._ensure_out()
        channels, _, _ = self._image_geometry()
        c = self.cfg
        purifier = Purifier.build(channels, neuron=c.neuron(), T=c.neuron_timesteps, seed=c.seed)
        tc = c.purifier_train()
        clf = None if tc.attack.kind == "gaussian" else self.classifier
        curve = train_purifier(purifier, clf, self.data[0], tc)
        save_checkpoint(purifier, self.out / PURIFIER_CKPT, self._checkpoint_extra())
        write_csv(self.out / CSV_FILES["purifier_loss"],
                  ["config_hash", "seed", "epoch", "lr", "loss"],
                  [self._prefix() + [e, tc.lr_for(e), loss] for e, loss in enumerate(curve, 1)])
        self._purifier = purifier
        return curve

    def calibrate(self) -> float:
        self._ensure_out()
        q = self.cfg.detection_quantile
        val = self.data[1]
        tau = calibrate_threshold(self.purifier, val.images, q, self.cfg.eval_batch_size)
        write_csv(self.out / CSV_FILES["threshold"],
                  ["config_hash", "seed", "quantile", "tau", "calibration_images"],
                  [self._prefix() + [q, tau, len(val)]])
        self._tau = tau
        return tau

    def _attacked(self, spec: AttackSpec | None, data: LabeledImages) -> np.ndarray:
        return attack_dataset(spec, self.classifier, data, self.cfg.seed, self.cfg.eval_batch_size)

    def evaluate(self) -> RobustnessReport:
        self._ensure_out()
        test = self.data[2]
        det = DetectionConfig(self.tau, self.cfg.detection_quantile)
        bs = self.cfg.eval_batch_size
        report = RobustnessReport(self.hash, self.cfg.seed, self.tau)
        records = []
        for spec in [None] + self.cfg.eval_specs():
            name = "clean" if spec is None else spec.label
            x = self._attacked(spec, test)
            verdict = detect(self.purifier, x, det, bs)
            undefended = predict(self.classifier, x, bs)
            purified = predict(self.classifier, verdict.purified, bs)
            routed = np.where(verdict.is_adversarial, purified, undefended)
            report.rows.append(AttackRow(
                name, 0.0 if spec is None else float(spec.eps), len(test),
                accuracy(undefended, test.labels), accuracy(purified, test.labels),
                accuracy(routed, test.labels), float(verdict.is_adversarial.mean())))
            for i in range(len(test)):
                records.append({"id": f"{name}/{i}", "m": round(float(verdict.m[i]), 8),
                                "flagged": bool(verdict.is_adversarial[i]),
                                "routed": str(verdict.routed[i]), "predicted": int(routed[i]),
                                "label": int(test.labels[i]), "config_hash": self.hash})
        head = ["config_hash", "seed", "attack", "eps", "images", "undefended_acc",
                "always_purify_acc", "detect_route_acc", "detection_rate"]
        write_csv(self.out / CSV_FILES["report"], head,
                  [self._prefix() + [r.attack, r.eps, r.count, r.undefended, r.always_purify,
                                     r.detect_and_route, r.detection_rate] for r in report.rows])
        write_csv(self.out / CSV_FILES["detection"],
                  ["config_hash", "seed", "threshold", "input", "eps", "flagged_rate"],
                  [self._prefix() + [self.tau, r.attack, r.eps, r.detection_rate]
                   for r in report.rows])
        with open(self.out / VERDICTS, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return report

    def histogram(self) -> dict[str, list]:
        """Clean and attacked distance histograms on shared bins."""
        self._ensure_out()
        test = self.data[2]
        spec = self.cfg.histogram_spec()
        m = {}
        for name, s in (("clean", None), (spec.label, spec)):
            x = self._attacked(s, test)
            verdict = detect(self.purifier, x, DetectionConfig(1.0), self.cfg.eval_batch_size)
            m[name] = verdict.m
        upper = max(float(v.max()) for v in m.values())
        tables = {k: histogram_rows(v, self.cfg.histogram_bins, upper) for k, v in m.items()}
        rows = [self._prefix() + [k, r.bin_low, r.bin_high, r.count]
                for k, table in tables.items() for r in table]
        write_csv(self.out / CSV_FILES["histogram"],
                  ["config_hash", "seed", "source", "bin_low", "bin_high", "count"], rows)
        return {"m": m, "tables": tables}

    def sweep(self) -> list[tuple]:
        self._ensure_out()
        rows = sweep_pgd(self, self.cfg.sweep_steps, self.cfg.sweep_eps)
        write_csv(self.out / CSV_FILES["sweep"],
                  ["config_hash", "seed", "steps", "eps", "variant", "accuracy"],
                  [self._prefix() + list(r) for r in rows])
        return rows

    def run_stage(self, stage: str):
        if stage not in STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}; expected one of {STAGES}")
        method = getattr(self, stage.replace("-", "_"))
        log.info("stage %s (config %s)", stage, self.hash)
        try:
            return method()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc


def sweep_pgd(exp: Experiment, steps, epsilons) -> list[tuple]:
    """Accuracy over PGD step counts x budgets, undefended and always-purify."""
    test = exp.data[2]
    sub = test.subset(slice(0, min(exp.cfg.sweep_count, len(test))))
    bs = exp.cfg.eval_batch_size
    rows = []
    for k in steps:
        for eps in epsilons:
            spec = AttackSpec("pgd", eps=float(eps), steps=int(k), step_size=exp.cfg.eval_step_size)
            x = exp._attacked(spec, sub)
            verdict = detect(exp.purifier, x, DetectionConfig(1.0), bs)
            rows.append((int(k), float(eps), "undefended",
                         accuracy(predict(exp.classifier, x, bs), sub.labels)))
            rows.append((int(k), float(eps), "defended",
                         accuracy(predict(exp.classifier, verdict.purified, bs), sub.labels)))
    return rows


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None,
                   stages=STAGES) -> tuple[RobustnessReport | None, Experiment]:
    """Run ``stages`` in order; returns the evaluation report (if evaluated) and state."""
    exp = Experiment(cfg, out)
    report = None
    for stage in stages:
        result = exp.run_stage(stage)
        if stage == "evaluate":
            report = result
    return report, exp


def linf_values(exp: Experiment, spec: AttackSpec | None) -> np.ndarray:
    """Detector distances on the test split, clean (``spec=None``) or attacked."""
    x = exp._attacked(spec, exp.data[2])
    return linf_distance(x, detect(exp.purifier, x, DetectionConfig(1.0)).purified)
