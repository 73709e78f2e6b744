import numpy as np
import pytest
import torch
from hypothesis import settings

from dualflow.synth import DuetDataset, GeneratorConfig, generate_clip

torch.set_num_threads(1)
settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def gen_config():
    return GeneratorConfig(n_frames=64)


@pytest.fixture(scope="session")
def clips(gen_config):
    return [generate_clip(i, gen_config) for i in range(6)]


@pytest.fixture(scope="session")
def dataset(clips):
    return DuetDataset(clips)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the capture mode."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if "test_acceptance.py" not in rep.nodeid or not name.startswith("test_c"):
                continue
            if rep.when == "call" or outcome == "error":
                info = dict(rep.user_properties).get("detail", "")
                rows[name] = ("PASS" if outcome == "passed" else "FAIL", info)
    if rows:
        terminalreporter.section("acceptance criteria")
        for name in sorted(rows):
            verdict, info = rows[name]
            number, title = name[len("test_c"):].split("_", 1)
            terminalreporter.write_line(f"criterion {int(number):2d} {verdict}  {title.replace('_', ' ')}  {info}")
