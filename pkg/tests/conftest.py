import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dynsurrogate.nn import dense_model, init_params
from dynsurrogate.sampling import compute_norm_stats, dataspace, generate_dataset, normalize
from dynsurrogate.training import TrainConfig, train

DESK_TRAIN = 2**13
# desk-scale single-layer settings; see README "Desk-scale runs"
DESK_CONFIG = TrainConfig(reg_weight=1e-3, learning_rate=3e-3, batch_size=64, epochs=50, seed=0)


class Case1Data:
    def __init__(self, n_train=DESK_TRAIN, n_val=1000, n_test=1000, seed=0):
        space = dataspace(1, "displacement")
        self.space = space
        self.train_raw = generate_dataset(space, "train", seed, n_train)
        self.val_raw = generate_dataset(space, "val", seed, n_val)
        self.test_raw = generate_dataset(space, "test", seed, n_test)
        self.x_stats, self.y_stats = compute_norm_stats(self.train_raw)
        self.train = self.norm(self.train_raw)
        self.val = self.norm(self.val_raw)
        self.test = self.norm(self.test_raw)

    def norm(self, ds):
        return normalize(ds.X, self.x_stats), normalize(ds.Y, self.y_stats)


@pytest.fixture(scope="session")
def case1():
    return Case1Data()


@pytest.fixture(scope="session")
def trained_fc(case1):
    model = init_params(dense_model(101), 0)
    history = train(model, case1.train, case1.val, DESK_CONFIG)
    return model, history


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
