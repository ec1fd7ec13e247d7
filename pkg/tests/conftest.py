"""Shared fixtures and the acceptance summary printed at the end of a run."""

import os
from dataclasses import replace
from pathlib import Path

import pytest

from spikeshield.config import desk_preset
from spikeshield.experiment import CLASSIFIER_CKPT, PURIFIER_CKPT, Experiment

ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(id, title): acceptance criterion or a check on the desk run")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        ACCEPTANCE.append((marker.args[0], marker.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        line = f"{cid:<4} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


def _run_dir(tmp_path_factory, name, cfg):
    # SPIKESHIELD_ACCEPTANCE_DIR keeps trained checkpoints between sessions
    root = os.environ.get("SPIKESHIELD_ACCEPTANCE_DIR")
    if root:
        return Path(root) / f"{name}-{cfg.hash()}"
    return tmp_path_factory.mktemp(name)


def _ensure(exp: Experiment, stage: str, artifact: str):
    if not (exp.out / artifact).exists():
        exp.run_stage(stage)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The desk preset trained end to end: (experiment, report, histogram)."""
    cfg = desk_preset()
    exp = Experiment(cfg, _run_dir(tmp_path_factory, "desk", cfg))
    _ensure(exp, "train-classifier", CLASSIFIER_CKPT)
    _ensure(exp, "train-purifier", PURIFIER_CKPT)
    exp.run_stage("calibrate")
    report = exp.run_stage("evaluate")
    hist = exp.run_stage("histogram")
    return exp, report, hist


@pytest.fixture(scope="session")
def gaussian_run(tmp_path_factory):
    """A desk-preset purifier trained on fixed-level Gaussian noise."""
    cfg = replace(desk_preset(), purifier_attack="gaussian", purifier_random_eps=False)
    exp = Experiment(cfg, _run_dir(tmp_path_factory, "gaussian", cfg))
    _ensure(exp, "train-purifier", PURIFIER_CKPT)
    return exp
