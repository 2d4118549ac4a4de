import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one part of an acceptance criterion: ``criterion(k, part, ok, detail)``."""
    def record(k, part, ok, detail=""):
        _CRITERIA.setdefault(k, []).append((part, bool(ok), detail))
        print(f"criterion {k} [{part}] {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        parts = _CRITERIA[k]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}: {'ok' if ok else 'FAILED'} {d}".rstrip() for p, ok, d in parts)
        terminalreporter.write_line(f"CRITERION {k}: {status} | {detail}")
