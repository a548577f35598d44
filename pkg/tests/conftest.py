import numpy as np
import pytest

from roigraph import _accel


@pytest.fixture(params=_accel.available_backends())
def backend(request):
    """Run the test once per kernel backend."""
    with _accel.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


CRITERIA = pytest.StashKey[dict]()
CRITERION_TITLES = {
    1: "grouping equivalence over 1000 scenes",
    2: "grouping speedup at 180k points / 500 proposals",
    3: "FPS steps, DFVS = FPS at tiny voxels, hash collisions",
    4: "DFVS faster than FPS on a 70000-point group",
    5: "formula fixed points",
    6: "IoU against Monte-Carlo rasterization",
    7: "finite-difference gradient checks",
    8: "equivariance and invariance",
    9: "training smoke",
    10: "pool determinism",
}


@pytest.fixture
def criterion(request):
    """``record(n, passed, detail)`` stores one acceptance line for the summary."""
    def record(n, passed, detail):
        request.config.stash.setdefault(CRITERIA, {})[n] = (bool(passed), detail)
        print(f"criterion {n} {'PASS' if passed else 'FAIL'}: {CRITERION_TITLES[n]} ({detail})")
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERION_TITLES.items():
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {title}")
