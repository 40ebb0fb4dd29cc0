import time

import numpy as np
import pytest

from eapgp import autodiff as ad
from eapgp.model import ModelConfig, Transformer, accuracy, load_checkpoint, save_checkpoint, train_toy
from eapgp.tasks import gen_induction, induction_stream

# acceptance results, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _reset_dtype():
    yield
    ad.set_default_dtype(np.float32)


class TrainedToy:
    def __init__(self, model, train_seconds, acc):
        self.model = model
        self.train_seconds = train_seconds
        self.accuracy = acc


@pytest.fixture(scope="session")
def trained_induction(tmp_path_factory) -> TrainedToy:
    """Default 2-layer/2-head/d32 toy trained for 2000 steps, shared by the suite."""
    start = time.perf_counter()
    model = Transformer(ModelConfig())
    train_toy(model, induction_stream(0, 64), 2000, 3e-3)
    seconds = time.perf_counter() - start
    path = save_checkpoint(model, tmp_path_factory.mktemp("ckpt") / "induction.eapg")
    acc = accuracy(model, gen_induction(999, 512))
    toy = TrainedToy(load_checkpoint(path), seconds, acc)
    toy.path = path
    return toy
