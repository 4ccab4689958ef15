import numpy as np
import pytest

from keypatch.detector import Detector, NoDetectionsError
from keypatch.scenes import default_detectors, make_scene
from keypatch.types import Detection


class ScriptedDetector(Detector):
    """
    Fake detector whose box count follows a script, one entry per detect call.

    The gradient is a fixed random sign field, so every masked pixel moves
    on every step. Past the end of the script the last count repeats.
    """

    def __init__(self, counts, detector_id="scripted", shape=(64, 64), seed=0):
        self.id = detector_id
        self.threshold = 0.5
        self.counts = list(counts)
        self.calls = 0
        rng = np.random.default_rng(seed)
        self.field = rng.choice([-1.0, 1.0], size=(*shape, 3))

    def _n(self):
        return self.counts[min(self.calls, len(self.counts) - 1)]

    def detect(self, pixels, threshold=None):
        n = self._n()
        self.calls += 1
        return [Detection((i, i, i + 4, i + 4), 0.9, 0, self.id) for i in range(n)]

    def loss_gradient(self, pixels, threshold=None):
        if self._n() == 0:
            raise NoDetectionsError("scripted: nothing")
        return self.field.copy()


class FixedCountDetector(Detector):
    """Fake detector that always reports ``n`` boxes and a constant gradient."""

    def __init__(self, n, detector_id, value=1.0):
        self.id = detector_id
        self.threshold = 0.5
        self.n = n
        self.value = value

    def detect(self, pixels, threshold=None):
        return [Detection((0, 0, 2, 2), 0.9, 0, self.id) for _ in range(self.n)]

    def loss_gradient(self, pixels, threshold=None):
        if self.n == 0:
            raise NoDetectionsError("nothing")
        return np.full(np.shape(pixels), self.value)


@pytest.fixture(scope="session")
def toy_pair():
    return default_detectors()


@pytest.fixture(scope="session")
def small_scene(toy_pair):
    return make_scene(toy_pair, seed=3, size=128, n_objects=(2, 2), min_gap=30)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
