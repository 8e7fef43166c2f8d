import numpy as np
import pytest

from pixnet.config import RunConfig, apply_overrides
from pixnet.imagery import Band, FrameStack

SMALL = {
    "synth.width": 128,
    "synth.height": 128,
    "synth.epochs": 40,
    "synth.n_stars": 40,
    "synth.n_bright": 1,
    "synth.n_extended": 1,
    "synth.n_events": 3,
    "tiling.grid_rows": 2,
    "tiling.grid_cols": 2,
    "tiling.halo": 8,
}


def small_config(**extra) -> RunConfig:
    pairs = dict(SMALL)
    pairs.update(extra)
    return apply_overrides(RunConfig(), pairs)


def make_stack(cube, band=Band.R, valid=None, t0=0.0, cadence=1.0):
    cube = np.asarray(cube, dtype=np.float32)
    times = t0 + cadence * np.arange(cube.shape[0])
    return FrameStack.from_cube(cube, times, band, 1.0, valid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """A synthesized 128x128 campaign on disk, shared by the pipeline and CLI tests."""
    from pixnet.pipeline import synthesize

    cfg = small_config(seed=5)
    out = tmp_path_factory.mktemp("fixture")
    campaign = synthesize(cfg, out)
    return cfg, out, campaign


# criterion id -> (passed, detail), filled in by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:<4} {'PASS' if ok else 'FAIL'}  {detail}")
