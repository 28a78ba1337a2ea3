import numpy as np
import pytest

from lipdepth.data import synthetic_cifar
from lipdepth.model import ViTConfig, build_vit
from lipdepth.rng import Rng
from lipdepth.schedule import custom_schedule, linear_schedule, no_drop_schedule
from lipdepth.train import TrainConfig, train

# depth 12 keeps the schedule arithmetic of the desk setup; everything else is shrunk
SMALL = dict(image_size=32, patch_size=8, embed_dim=16, depth=12, heads=2, mlp_ratio=2.0)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ViTConfig(**SMALL)


@pytest.fixture(scope="session")
def synthetic_split():
    r = Rng(7)
    train_set, templates = synthetic_cifar(400, r)
    test_set, _ = synthetic_cifar(200, r, templates)
    return train_set, test_set


@pytest.fixture(scope="session")
def trained_models(small_config, synthetic_split):
    """Three small models (no drop / linear 0.1 / custom 0.7) trained briefly on synthetic images."""
    train_set, test_set = synthetic_split
    out = {}
    for name, sched in [("baseline", no_drop_schedule(12)), ("linear", linear_schedule(12, 0.1)),
                        ("custom", custom_schedule(12, 0.7))]:
        init, fit = Rng(99).spawn(2)
        model = build_vit(small_config, sched, init)
        log = train(model, train_set, TrainConfig(epochs=8, batch_size=25, lr=2e-3), fit, test=test_set)
        out[name] = (model, log)
    return out


def pytest_terminal_summary(terminalreporter):
    reports = [r for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])
               if getattr(r, "when", "call") == "call" and "test_acceptance.py" in r.nodeid]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    for r in sorted(reports, key=lambda r: r.nodeid):
        name = r.nodeid.split("::")[-1]
        terminalreporter.write_line(f"{'PASS' if r.passed else 'FAIL'}  {name}")
