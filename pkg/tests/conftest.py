import numpy as np
import pytest

from fcnrlstm import synthdata as sd
from fcnrlstm.data import from_labeled
from fcnrlstm.fcn import FCNConfig
from fcnrlstm.model import CountingModel, ModelConfig

TINY_SCENE = sd.SceneConfig(height=16, width=16, frames=12, lanes=2, arrival_rate=0.4,
                            car_size=(4.0, 5.0), oversize_size=(4.0, 9.0), speed_range=(1.0, 2.0))


def tiny_labeled(n=4, seed=0, scene=TINY_SCENE):
    return sd.generate_dataset(scene, n, seed)


@pytest.fixture(scope="session")
def tiny_seqs():
    return [from_labeled(s) for s in tiny_labeled()]


def tiny_counting_model(variant="FCN-rLSTM", dtype=np.float64, unroll=3, **kw):
    cfg = ModelConfig(variant=variant, height=16, width=16, fcn=FCNConfig(base_channels=2), hidden=5,
                      lstm_layers=2, unroll=unroll, **kw)
    return CountingModel(cfg, dtype=dtype)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
