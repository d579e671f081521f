"""Shared record of acceptance outcomes, printed by the terminal summary hook."""

import contextlib
import time

RESULTS: list[tuple[str, bool, str]] = []


class Outcome:
    def __init__(self):
        self.detail = ""


@contextlib.contextmanager
def criterion(name, limit_seconds):
    """Record PASS only if the body finishes without error inside the time limit."""
    out = Outcome()
    start = time.perf_counter()
    try:
        yield out
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        detail = out.detail if reason in out.detail else f"{out.detail} [{reason}]".strip()
        RESULTS.append((name, False, f"{detail} ({elapsed:.1f} s)"))
        print(f"FAIL  {name}: {reason}")
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < limit_seconds
    line = f"{out.detail} ({elapsed:.1f} s, limit {limit_seconds:g} s)".strip()
    RESULTS.append((name, ok, line))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {line}")
    assert ok, f"{name} took {elapsed:.1f} s, limit {limit_seconds:g} s"
