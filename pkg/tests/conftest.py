import numpy as np
import pytest

from nmrprofile.model import Cluster, Compound, PeakShape, SpectralLibrary

#: criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def one_peak_library(amplitude=1.0, center=3.0, width=1e-4 ** 1, window=None, ref_conc=100.0):
    """Library with a single one-peak compound that also serves as reference."""
    cl = Cluster("c1", (PeakShape(amplitude, 0.0, width),), center, window)
    comp = Compound("x", "X", (cl,))
    return SpectralLibrary("test", (comp,), "x", ref_conc)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
