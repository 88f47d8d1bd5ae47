import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------------------
_criteria: dict[int, list] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    detail = "; ".join(f"{v}" for k, v in item.user_properties if k == "detail")
    passed = call.excinfo is None
    _criteria.setdefault(n, []).append((passed, item.name, detail,
                                        None if passed else call.excinfo.exconly().splitlines()[0][:200]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        results = _criteria[n]
        ok = all(r[0] for r in results)
        details = " | ".join(r[2] or r[3] or r[1] for r in results if r[2] or r[3])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {details}")
