import contextlib
import time

import pytest

_RESULTS = {}


class Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.notes = number, title, []

    def note(self, text):
        self.notes.append(text)


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the summary table."""

    @contextlib.contextmanager
    def run(number, title):
        c = Criterion(number, title)
        t0 = time.time()
        try:
            yield c
        except BaseException as exc:
            _RESULTS[number] = ("FAIL", title, c.notes + [f"{type(exc).__name__}: {str(exc).splitlines()[0][:160]}"],
                                time.time() - t0)
            raise
        _RESULTS[number] = ("PASS", title, c.notes, time.time() - t0)

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, notes, secs = _RESULTS[n]
        detail = "; ".join(notes)
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title} ({secs:.1f}s){'  ' + detail if detail else ''}")
