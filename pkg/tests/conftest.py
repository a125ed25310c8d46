import sys
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion -> [(part, status, detail)]
_ACCEPTANCE = defaultdict(list)


@contextmanager
def _check(criterion: str, part: str):
    """Record PASS/FAIL/SKIP for one part of an acceptance criterion."""
    notes = []
    try:
        yield notes
    except pytest.skip.Exception as exc:
        _ACCEPTANCE[criterion].append((part, "SKIP", str(exc)))
        raise
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        _ACCEPTANCE[criterion].append((part, "FAIL", "; ".join(notes + [msg])))
        raise
    else:
        _ACCEPTANCE[criterion].append((part, "PASS", "; ".join(notes)))


@pytest.fixture
def criterion():
    return _check


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")

    def key(c):
        return int("".join(ch for ch in c if ch.isdigit())), c

    for c in sorted(_ACCEPTANCE, key=key):
        parts = _ACCEPTANCE[c]
        statuses = {s for _, s, _ in parts}
        overall = "FAIL" if "FAIL" in statuses else "SKIP" if statuses == {"SKIP"} else "PASS"
        bad = [f"{p}: {d}" for p, s, d in parts if s != "PASS"]
        good = [f"{p}: {d}" for p, s, d in parts if s == "PASS" and d]
        detail = " | ".join(bad) if bad else " | ".join(good)
        terminalreporter.write_line(f"criterion {c}: {overall} ({len(parts)} checks){' - ' + detail if detail else ''}")
