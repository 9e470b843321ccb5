"""Shared pytest plumbing: acceptance verdict lines echoed in the summary."""

import contextlib
import re

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture()
def verdict():
    """Factory for a context manager that records one [PASS]/[FAIL] line.

    Usage inside an acceptance test:

        with verdict(3, "context filter matches brute-force scan"):
            assert ...

    A skip inside the block records [SKIP] instead; the exception always
    propagates so pytest still reports the test normally.
    """

    @contextlib.contextmanager
    def _record(num: int, text: str):
        line = f"[FAIL] AC{num}: {text}"
        try:
            yield
        except pytest.skip.Exception:
            line = f"[SKIP] AC{num}: {text}"
            raise
        except BaseException:
            raise
        else:
            line = f"[PASS] AC{num}: {text}"
        finally:
            ACCEPTANCE_LINES.append(line)
            print(line)

    return _record


def _ac_number(line: str) -> int:
    m = re.search(r"AC(\d+)", line)
    return int(m.group(1)) if m else 99


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=_ac_number):
        terminalreporter.write_line(line)
