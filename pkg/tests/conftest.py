import pytest
import torch

from clothavatar.studio import default_camera, generate_sequence, generate_subject

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def subject():
    return generate_subject(1)


@pytest.fixture(scope="session")
def walk_clip(subject):
    """Two seconds of walking at 30 fps, 64x64."""
    return generate_sequence(subject, "walk", 30.0, 2.0, default_camera(64, 64))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
