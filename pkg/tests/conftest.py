"""Shared fixtures: the trained tube suite (heavy, session-scoped) and a
small demo model pair for service / API tests."""

from __future__ import annotations

import pytest

from propaseg.harness import ExperimentConfig, fold_split, make_suite, train_fold_models

# config mirrored by the acceptance criteria; training this once serves
# A3, A4, A7, A8 and the statistical invariants in unit modules
TUBE_CFG = ExperimentConfig(
    family="curved-tube",
    count=28,
    folds=4,
    steps=4,
    seed=21,
    backbone_epochs=20,
    fusion_epochs=50,
)


@pytest.fixture(scope="session")
def tube_cfg():
    return TUBE_CFG


@pytest.fixture(scope="session")
def tube_cases(tube_cfg):
    return make_suite(tube_cfg)


@pytest.fixture(scope="session")
def tube_split(tube_cfg, tube_cases):
    return fold_split(len(tube_cases), tube_cfg.folds, 0)


@pytest.fixture(scope="session")
def tube_models(tube_cfg, tube_cases, tube_split):
    train_ids, _ = tube_split
    return train_fold_models(tube_cfg, tube_cases, train_ids, tube_cfg.tap_level)


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    from propaseg.demo import prepare_demo

    out = tmp_path_factory.mktemp("demo")
    return prepare_demo(str(out), seed=5)
