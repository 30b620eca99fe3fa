"""Shared fixtures. The trained toy LM is expensive (minutes of CPU), so it is
cached under ``tests/.artifacts`` keyed by estimator parameters and corpus."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from adasplit.cli import split_corpus
from adasplit.splitlm import SplitTransformerLM, split_sequences

ROOT = Path(__file__).resolve().parents[1]
CORPUS = ROOT / "data" / "corpus.txt"
ARTIFACTS = Path(__file__).resolve().parent / ".artifacts"
HELDOUT_FRAC = 0.1


@dataclass
class LmBundle:
    estimator: SplitTransformerLM
    train_text: str
    held_text: str
    pool: np.ndarray

    @property
    def params(self):
        return self.estimator.params_

    @property
    def tokenizer(self):
        return self.estimator.tokenizer_

    @property
    def config(self):
        return self.estimator.config_


def lm_cache_path(est: SplitTransformerLM, text: str) -> Path:
    blob = json.dumps(est.get_params(), sort_keys=True).encode() + text.encode("utf-8")
    return ARTIFACTS / f"lm-{hashlib.sha256(blob).hexdigest()[:16]}.json"


@pytest.fixture(scope="session")
def corpus_text() -> str:
    return CORPUS.read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def trained_lm(corpus_text) -> LmBundle:
    """Default-config model trained exactly as ``adasplit train-lm`` does."""
    train, held = split_corpus(corpus_text, HELDOUT_FRAC)
    est = SplitTransformerLM()
    path = lm_cache_path(est, corpus_text)
    if path.exists():
        est = SplitTransformerLM.load(path)
    else:
        est.fit(train)
        ARTIFACTS.mkdir(exist_ok=True)
        est.save(path)
    pool = split_sequences(est.tokenizer_.encode(held), est.config_.context + 1)
    return LmBundle(est, train, held, pool)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
