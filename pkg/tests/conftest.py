import pytest

from pamlora.config import config_from_dict

# a miniature of the default benchmark that runs in well under a second
TINY = {
    "trainer": {"epochs": 2, "batch_size": 16, "lr": 0.005},
    "tasks": {"n_train_per_class": 12, "n_eval_per_class": 10},
    "model": {"hidden": [16, 16], "pretrain_epochs": 3, "pretrain_per_class": 40},
}


def tiny(method, **kw):
    return config_from_dict({"method": method, **TINY, **kw})


@pytest.fixture
def tiny_config():
    return tiny


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
