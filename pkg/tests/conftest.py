import time

import pytest

from backpass.cli import main
from backpass.encoder import EncoderWeights
from backpass.genmodel import GenerativeModel


class Trained:
    def __init__(self, root, seconds=None):
        self.root = root
        self.seconds = seconds
        self.data = root / "data"
        self.run = root / "run"
        self.model = GenerativeModel.load(self.run / "model.ntf")
        self.encoder = EncoderWeights.load(self.run / "encoder.ntf")


def build(root):
    """gen-data then train with the default config; returns the train wall time in seconds."""
    assert main(["--seed", "0", "--threads", "1", "--out", str(root / "data"), "gen-data"]) == 0
    t0 = time.perf_counter()
    assert main(["--seed", "0", "--threads", "1", "--out", str(root / "run"), "train",
                 "--data", str(root / "data")]) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Default dataset and a full default training run, produced once via the CLI."""
    root = tmp_path_factory.mktemp("trained")
    seconds = build(root)
    return Trained(root, seconds)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
