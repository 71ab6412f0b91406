import numpy as np
import pytest
import torch

from dfme_od import data, models


@pytest.fixture(scope="session")
def shapes_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes")
    data.generate_shapes_dataset(data.DatasetSpec(class_count=3, side=64, count=600, seed=7), out)
    return out


@pytest.fixture
def tiny_victim():
    """Untrained 16x16 detector; deterministic and cheap."""
    torch.manual_seed(0)
    spec = models.get_spec("victim-a", channels=(8, 8), dense=16, image_side=16)
    return models.build_network(spec).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
