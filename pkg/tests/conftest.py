import numpy as np
import pytest
import torch


_acceptance = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def random_config(rng, D):
    from amortized_al.kernel_gp import KernelConfig

    v = rng.uniform(0.505, 1.0)
    return KernelConfig(v, rng.uniform(0.1, 1.0, size=D), 1.01 - v)


def pytest_runtest_logreport(report):
    if report.when == "call" and "acceptance" in report.keywords:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
