"""Collects one verdict line per acceptance criterion for the terminal summary."""
from contextlib import contextmanager

RESULTS: dict[int, tuple[bool, str, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    notes: list[str] = []
    try:
        yield notes
    except BaseException:
        RESULTS[number] = (False, title, "; ".join(notes))
        raise
    RESULTS[number] = (True, title, "; ".join(notes))


def summary_lines() -> list[str]:
    lines = []
    for n in sorted(RESULTS):
        ok, title, notes = RESULTS[n]
        lines.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}" + (f" ({notes})" if notes else ""))
    return lines
