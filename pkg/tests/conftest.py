import importlib

import pytest

from nofl import _kernels_py

BACKENDS = ["python"]
try:
    importlib.import_module("nofl._kernels")
    BACKENDS.insert(0, "cython")
except ImportError:
    pass


@pytest.fixture(params=BACKENDS)
def kernels(request):
    if request.param == "cython":
        return importlib.import_module("nofl._kernels")
    return _kernels_py


@pytest.fixture
def mmc():
    """Factory for small mostly-marking heaps with one attached mutator."""
    from nofl.heap import MmcHeap

    def make(blocks=16, **kw):
        from nofl.geometry import BLOCK_FOOTPRINT
        heap = MmcHeap(blocks * BLOCK_FOOTPRINT, **kw)
        return heap, heap.attach()
    return make


_REPORT = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one pass/fail line per acceptance criterion."""
    import contextlib

    lines = request.config.stash.setdefault(_REPORT, [])

    @contextlib.contextmanager
    def check(number, text):
        detail = []
        try:
            yield detail
        except BaseException:
            lines.append((number, "FAIL", text, detail))
            print(f"criterion {number}: FAIL {text}")
            raise
        lines.append((number, "PASS", text, detail))
        print(f"criterion {number}: PASS {text}")
    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_REPORT, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, text, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {verdict} {text}")
        for extra in detail:
            terminalreporter.write_line(f"    {extra}")
