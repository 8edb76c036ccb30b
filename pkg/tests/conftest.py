"""Shared pytest hooks: acceptance outcomes are collected here and printed
as one line per criterion at the end of the run."""
import pytest

CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


class CriterionLog:
    def __init__(self, number: int):
        self.number = number

    def check(self, label: str, ok: bool, detail: str = "") -> bool:
        CRITERIA.setdefault(self.number, []).append((label, bool(ok), detail))
        return bool(ok)


@pytest.fixture
def criterion():
    return CriterionLog


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(CRITERIA):
        parts = CRITERIA[k]
        ok = all(p[1] for p in parts)
        failed = [f"{label} ({detail})" for label, good, detail in parts if not good]
        tail = "; ".join(failed) if failed else f"{len(parts)}/{len(parts)} checks"
        tr.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {tail}")
