import os

# single-threaded BLAS keeps float summation order fixed between runs
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from quartznet.frontend import read_manifest
from quartznet.model import build, load_config
from quartznet.synth import make_tone_corpus
from quartznet.training import TrainRunConfig, train

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tone_corpus(tmp_path_factory):
    """10-utterance synthetic corpus; returns the manifest path."""
    return make_tone_corpus(tmp_path_factory.mktemp("tones"), n=10, seed=0)


@pytest.fixture(scope="session")
def tiny_run():
    cfg, training = load_config("tiny1x1")
    return cfg, TrainRunConfig.from_dict(training)


@pytest.fixture(scope="session")
def trained_tiny(tone_corpus, tiny_run, tmp_path_factory):
    """The tiny model after the shipped smoke recipe, plus its training result and checkpoint dir."""
    cfg, run = tiny_run
    model = build(cfg, seed=run.seed)
    out = tmp_path_factory.mktemp("tiny_ckpt")
    result = train(model, run, read_manifest(tone_corpus), log_path=out / "log.jsonl", checkpoint_dir=out)
    return model, result, out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
