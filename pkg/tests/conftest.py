import numpy as np
import pytest

from mistnar.data import ToyTaskSpec
from mistnar.decoding import DecodeConfig
from mistnar.experiments import build_corpus, em_scorer
from mistnar.model import EncoderModel, ModelConfig
from mistnar.training import TrainConfig, train

COPY_MODEL = ModelConfig(n_layers=2, n_heads=2, d_hidden=32, d_ffn=64, vocab_size=10,
                         max_positions=40, max_target_len=8)


@pytest.fixture(scope="session")
def copy_corpus():
    return build_corpus(ToyTaskSpec(task="copy", vocab_size=6, min_len=2, max_len=6,
                                    n_train=2000, n_valid=40, n_test=40, seed=1))


def _train_copy(corpus, strategy="single_pass", **overrides):
    """Train until every validation example is reproduced exactly."""
    cfg = TrainConfig(lr=3e-3, warmup_steps=50, batch_size=32, max_steps=4000, seed=0,
                      log_every=10**9, eval_every=200, **overrides)
    model = EncoderModel.init(COPY_MODEL, seed=0)
    score = em_scorer(corpus.pairs["valid"], DecodeConfig(strategy=strategy))
    out = train(model, corpus.pairs["train"], cfg, evaluate=score, stop_at=1.0)
    assert out["best_score"] == 1.0, out["best_score"]
    return model


@pytest.fixture(scope="session")
def copy_model(copy_corpus):
    """Copy-task model trained with per-step pseudo-target mixing."""
    return _train_copy(copy_corpus, mixing_mode="mist")


@pytest.fixture(scope="session")
def ar_copy_model(copy_corpus):
    return _train_copy(copy_corpus, "ar_greedy", objective="ar")


@pytest.fixture
def tiny_f64():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_hidden=8, d_ffn=16, vocab_size=10,
                      max_positions=32, max_target_len=8)
    return EncoderModel.init(cfg, seed=4, dtype=np.float64)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one (criterion, passed, detail) line per acceptance criterion."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
