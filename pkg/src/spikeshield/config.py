"""Experiment configuration: a flat ``key = value`` text format and two presets.

Values are typed: integers, floats, fractions such as ``8/255``, ``true`` /
``false``, strings (bare or double-quoted) and bracketed lists of those.
Attack lists use ``kind`` or ``kind:steps`` tokens, e.g. ``[fgsm, pgd:20]``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .attacks import KINDS, AttackSpec
from .errors import ConfigurationError
from .losses import LossWeights
from .pipeline import DetectionConfig, TrainConfig
from .snn import MLFConfig

SECTIONS = ("dataset", "neuron", "classifier", "purifier", "loss", "eval", "detection",
            "histogram", "sweep")
# keys that do not change results and therefore stay out of the hash
UNHASHED = ("out",)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/desk"

    dataset_format: str = "builtin-synthetic"
    dataset_path: str = ""
    dataset_labels_path: str = ""
    dataset_train_count: int = 2000
    dataset_val_count: int = 250
    dataset_test_count: int = 500
    dataset_split_seed: int = 0

    neuron_levels: int = 2
    neuron_threshold: float = 1.0
    neuron_decay: float = 0.5
    neuron_surrogate_width: float = 0.5
    neuron_timesteps: int = 4

    classifier_epochs: int = 25
    classifier_batch_size: int = 32
    classifier_lr: float = 3e-3
    classifier_milestones: tuple = (18,)

    purifier_epochs: int = 25
    purifier_batch_size: int = 32
    purifier_lr: float = 1e-3
    purifier_lr_decay: float = 0.1
    purifier_milestones: tuple = (10, 20)
    purifier_attack: str = "fgsm"
    purifier_eps: float = 16 / 255
    purifier_random_eps: bool = True
    purifier_noise_std: float = 20 / 255
    purifier_clean_fraction: float = 0.25

    loss_asymm: float = 0.5
    loss_tv: float = 0.05
    loss_gamma: float = 0.3
    loss_charbonnier_eps: float = 1e-3

    eval_attacks: tuple = ("fgsm", "ifgsm:10", "mifgsm:10", "pgd:10", "pgd:20", "gaussian")
    eval_eps: float = 8 / 255
    eval_step_size: float = 2 / 255
    eval_momentum: float = 1.0
    eval_noise_std: float = 20 / 255
    eval_batch_size: int = 125

    detection_quantile: float = 0.95

    histogram_bins: int = 20
    histogram_attack: str = "fgsm"

    sweep_steps: tuple = (5, 10, 20, 50)
    sweep_eps: tuple = (1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255)
    sweep_count: int = 100

    def __post_init__(self):
        for f in fields(self):
            if isinstance(getattr(self, f.name), list):
                object.__setattr__(self, f.name, tuple(getattr(self, f.name)))
        if self.dataset_format not in ("idx", "raw-u8-tensor", "builtin-synthetic"):
            raise ConfigurationError(f"unknown dataset.format {self.dataset_format!r}")
        if self.dataset_format != "builtin-synthetic" and not Path(self.dataset_path).is_file():
            raise ConfigurationError(f"dataset.path {self.dataset_path!r} does not exist")
        if min(self.dataset_train_count, self.dataset_val_count, self.dataset_test_count) < 1:
            raise ConfigurationError("dataset counts must be positive")
        if self.histogram_bins < 2:
            raise ConfigurationError("histogram.bins must be >= 2")
        if self.sweep_count < 1 or not self.sweep_steps or not self.sweep_eps:
            raise ConfigurationError("sweep needs steps, eps values and a positive count")
        # build every derived object once so that bad values fail at load time
        self.neuron()
        self.classifier_train()
        self.purifier_train()
        self.eval_specs()
        self.histogram_spec()
        DetectionConfig(quantile=self.detection_quantile)

    # -- derived objects -------------------------------------------------------------

    def neuron(self) -> MLFConfig:
        return MLFConfig(self.neuron_levels, self.neuron_threshold, self.neuron_decay,
                         self.neuron_surrogate_width)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_asymm, self.loss_tv, self.loss_gamma,
                           self.loss_charbonnier_eps)

    def classifier_train(self) -> TrainConfig:
        return TrainConfig(self.classifier_epochs, self.classifier_batch_size, self.classifier_lr,
                           0.1, self.classifier_milestones, seed=self.seed)

    def purifier_attack_spec(self) -> AttackSpec:
        if self.purifier_attack == "gaussian":
            return AttackSpec("gaussian", noise_std=self.purifier_noise_std,
                              random_eps=self.purifier_random_eps)
        return parse_attack(self.purifier_attack, self.purifier_eps, self.eval_step_size,
                            self.eval_momentum, self.eval_noise_std,
                            random_eps=self.purifier_random_eps)

    def purifier_train(self) -> TrainConfig:
        return TrainConfig(self.purifier_epochs, self.purifier_batch_size, self.purifier_lr,
                           self.purifier_lr_decay, self.purifier_milestones,
                           self.purifier_attack_spec(), self.loss_weights(), self.seed + 1,
                           self.purifier_clean_fraction)

    def eval_specs(self) -> list[AttackSpec]:
        specs = [parse_attack(tok, self.eval_eps, self.eval_step_size, self.eval_momentum,
                              self.eval_noise_std) for tok in self.eval_attacks]
        labels = [s.label for s in specs]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate attacks in eval.attacks: {labels}")
        return specs

    def histogram_spec(self) -> AttackSpec:
        return parse_attack(self.histogram_attack, self.eval_eps, self.eval_step_size,
                            self.eval_momentum, self.eval_noise_std)

    # -- text form -------------------------------------------------------------------

    def items(self, include_unhashed: bool = True) -> list[tuple[str, object]]:
        return [(key_for(f.name), getattr(self, f.name)) for f in fields(self)
                if include_unhashed or f.name not in UNHASHED]

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def hash(self) -> str:
        """Twelve hex digits identifying every result-relevant setting."""
        text = "".join(f"{k} = {format_value(v)}\n" for k, v in self.items(False))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def key_for(name: str) -> str:
    head, _, rest = name.partition("_")
    return f"{head}.{rest}" if head in SECTIONS and rest else name


def field_for(key: str) -> str:
    return key.replace(".", "_", 1)


def parse_attack(token: str, eps: float, step_size: float, momentum: float, noise_std: float,
                 random_eps: bool = False) -> AttackSpec:
    kind, _, steps = token.partition(":")
    if kind not in KINDS:
        raise ConfigurationError(f"unknown attack token {token!r}")
    if kind == "fgsm":
        if steps:
            raise ConfigurationError("fgsm takes no step count")
        return AttackSpec("fgsm", eps=eps, random_eps=random_eps)
    if kind == "gaussian":
        return AttackSpec("gaussian", eps=eps, noise_std=noise_std, random_eps=random_eps)
    try:
        k = int(steps) if steps else None
    except ValueError as exc:
        raise ConfigurationError(f"bad step count in attack token {token!r}") from exc
    return AttackSpec(kind, eps=eps, steps=k, step_size=step_size, momentum=momentum,
                      random_eps=random_eps)


# -- value syntax ------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    if isinstance(v, float):
        # grey-level budgets such as 8/255 read better as fractions
        k = round(v * 255)
        if len(repr(v)) > 8 and k / 255 == v:
            return f"{k}/255"
        return repr(v)
    if isinstance(v, str):
        return v if v and all(c.isalnum() or c in "-_:./" for c in v) else '"' + v + '"'
    return str(v)


def parse_scalar(text: str):
    text = text.strip()
    if not text:
        raise ConfigurationError("empty value")
    if text.startswith('"'):
        if len(text) < 2 or not text.endswith('"'):
            raise ConfigurationError(f"unterminated string {text!r}")
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError):
            return text  # a path
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigurationError(f"unterminated list {text!r}")
        body = text[1:-1].strip()
        return tuple(parse_scalar(p) for p in body.split(",")) if body else ()
    return parse_scalar(text)


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key_for(name)} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key_for(name)} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key_for(name)} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, tuple):
            value = (value,)
        if default and isinstance(default[0], (int, float, str)):
            return tuple(_coerce(name, v, default[0]) for v in value)
        return value
    return str(value)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply the ``key = value`` lines in ``text`` on top of ``base`` (default: desk)."""
    base = base or desk_preset()
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        name = field_for(key)
        if name not in defaults:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[name] = _coerce(name, parse_value(value), defaults[name])
        except ConfigurationError as exc:
            raise ConfigurationError(f"line {lineno}: {exc}") from None
    return replace(base, **updates)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


# -- presets -----------------------------------------------------------------------------

def desk_preset() -> ExperimentConfig:
    return ExperimentConfig()


def paper_preset() -> ExperimentConfig:
    """Purifier schedule and loss weights at full scale on the same small data."""
    return replace(ExperimentConfig(), out="runs/paper", purifier_epochs=75,
                   purifier_batch_size=256, purifier_lr=1e-4, purifier_milestones=(30, 60),
                   purifier_random_eps=False, purifier_clean_fraction=0.0)


PRESETS = {"desk": desk_preset, "paper": paper_preset}
