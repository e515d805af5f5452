import functools

import pytest

from singleload import functional as fn
from singleload.config import HardwareConfig, builtin_models, get_model
from singleload.schedule import run_inference_schedule
from singleload.traffic import baseline_traffic, single_load_traffic

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record a one-line criterion verdict for the end-of-run summary."""
    def rec(tag: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
        _LINES.append(line)
        print(line)
        return ok
    return rec


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def run(name: str, p: int = 32):
    """(CycleReport, ScheduleTrace) for a builtin model, cached per session."""
    return run_inference_schedule(get_model(name), HardwareConfig(p_sys=p))


@functools.lru_cache(maxsize=None)
def traffic(name: str, p: int = 32):
    rep, trace = run(name, p)
    m, hw = get_model(name), HardwareConfig(p_sys=p)
    return single_load_traffic(m, hw, rep, trace.dram), baseline_traffic(m, hw, cycle_report=rep)


@functools.lru_cache(maxsize=None)
def deit_t_weights(seed: int = 0):
    m = get_model("deit-t")
    return fn.generate_weights(m, seed), fn.random_image(m, seed + 1)


MODEL_NAMES = [m.name for m in builtin_models()]
