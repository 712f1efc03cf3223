import os
import sys

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(1)

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Lines collected by the acceptance suite, printed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    def report(criterion: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_backbone():
    """A briefly pretrained default-size backbone, shared across tests."""
    from tscir import toydata
    from tscir.config import BackboneConfig, ModelConfig
    from tscir.training import pretrain_backbone

    pairs = toydata.generate_pairs(256, 5)
    return pretrain_backbone(pairs, ModelConfig(), BackboneConfig(epochs=2, batch_size=64))


@pytest.fixture(scope="session")
def small_split():
    from tscir import toydata

    return toydata.make_split(3, n_pairs=96, n_triplets=96, gallery_size=64, n_queries=48)


@pytest.fixture(scope="session")
def small_stage1(small_backbone, small_split):
    from tscir.config import TrainConfig
    from tscir.training import run_stage1

    cfg = TrainConfig(stage=1, learning_rate=1e-3, epochs=2, batch_size=32)
    return run_stage1(small_backbone.checkpoint, small_split.pairs, cfg)
