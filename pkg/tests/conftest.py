import numpy as np
import pytest

from jointpercept.model import Model, ModelConfig
from jointpercept.recipes import toy_pretrain, toy_world
from jointpercept.tasks import TaskContext, build_vocabulary

CRITERIA = {
    1: "parameter counts at BERT-Base scale",
    2: "gradient correctness (ops and full model)",
    3: "AR-SPE causality and teacher-forced/greedy alignment",
    4: "probability contracts",
    5: "multi-task toy pre-training",
    6: "zero-shot video-text retrieval",
    7: "prompt-tuning contracts",
    8: "fine-tune mode equivalence",
    9: "optimizer and schedule units",
    10: "determinism and persistence",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(n, []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        res = _outcomes.get(n)
        if res is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(res) else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {n}: {title}")


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary(100)


@pytest.fixture(scope="session")
def toy_config(vocab):
    return ModelConfig.toy(vocab.size)


@pytest.fixture(scope="session")
def ctx(vocab, toy_config):
    return TaskContext(vocab, toy_config.tokenizer, toy_config.encoder.max_len)


@pytest.fixture
def fresh_model(vocab, toy_config):
    return Model(ModelConfig.from_dict(toy_config.to_dict()), vocab, seed=0)


@pytest.fixture(scope="session")
def world():
    return toy_world(0)


@pytest.fixture(scope="session")
def pretrained(world):
    """The 2000-step toy pre-training run, shared by every test that needs a trained model."""
    model, log, state, _ = toy_pretrain(0, 2000, world)
    return model, log, state


@pytest.fixture(scope="session")
def pretrained_model(pretrained):
    return pretrained[0]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
