import numpy as np
from hypothesis import strategies as st

from tclgrid.grid import FeederModel


@st.composite
def feeders(draw, max_nodes=8, r_max=0.05):
    """Random radial feeder: node j hangs off some earlier node (or the substation)."""
    n = draw(st.integers(1, max_nodes))
    parent = tuple(draw(st.integers(0, j - 1)) for j in range(1, n + 1))
    imp = st.floats(1e-3, r_max, allow_nan=False)
    r = np.array(draw(st.lists(imp, min_size=n, max_size=n)))
    x = np.array(draw(st.lists(imp, min_size=n, max_size=n)))
    return FeederModel(parent, r, x)


def light_loads(draw, n, scale=0.2):
    """Non-negative loads small enough that no tested feeder collapses."""
    frac = st.floats(0.0, 1.0, allow_nan=False)
    p = np.array(draw(st.lists(frac, min_size=n, max_size=n))) * scale / n
    q = np.array(draw(st.lists(frac, min_size=n, max_size=n))) * scale / n
    return p, q


_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
