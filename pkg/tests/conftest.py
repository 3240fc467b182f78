"""Shared trained models.

Training is the slow part of the suite, so each model is trained once per
session and reused by the trainer tests and the acceptance suite.  The
desk settings here are smaller than the library defaults: hidden widths
32/64, learning rate 1e-3 and 20 epochs per stage.
"""
import time
from dataclasses import replace

import pytest

from polarwork.codec import Architecture, NeuralCode
from polarwork.polar import CodeLayout
from polarwork.training import TrainPlan, curriculum_stage1, curriculum_stage2_init, train_alternating

DESK_ARCH = Architecture(enc_hidden=32, dec_hidden=64)
DESK_PLAN = TrainPlan(epochs=20, lr_enc=1e-3, lr_dec=1e-3, seed=0)

ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture(scope="session")
def acceptance_results():
    return ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def layout_16_8_4():
    return CodeLayout.build(16, 8, 4)


@pytest.fixture(scope="session")
def kernel_4_1():
    """(4,1,ell=4) trained with the library's desk defaults."""
    code = NeuralCode.create(CodeLayout.build(4, 1, 4), seed=0)
    start = time.perf_counter()
    _, trace = train_alternating(code, TrainPlan(seed=0))
    return code, trace, time.perf_counter() - start


@pytest.fixture(scope="session")
def curriculum_run(layout_16_8_4):
    start = time.perf_counter()
    stage1_traces = {}
    store = curriculum_stage1(4, DESK_PLAN, DESK_ARCH, seed=0, traces=stage1_traces)
    stage1_time = time.perf_counter() - start
    code = NeuralCode.create(layout_16_8_4, DESK_ARCH, seed=0)
    _, audit = curriculum_stage2_init(code, store)
    initial = code.copy()
    _, trace = train_alternating(code, DESK_PLAN)
    return {"store": store, "code": code, "initial": initial, "trace": trace, "audit": audit,
            "stage1_traces": stage1_traces, "stage1_time": stage1_time,
            "time": time.perf_counter() - start}


@pytest.fixture(scope="session")
def scratch_run(layout_16_8_4):
    code = NeuralCode.create(layout_16_8_4, DESK_ARCH, seed=0)
    start = time.perf_counter()
    _, trace = train_alternating(code, DESK_PLAN)
    return {"code": code, "trace": trace, "time": time.perf_counter() - start}


@pytest.fixture(scope="session")
def ste_run(curriculum_run):
    from polarwork.training import finetune_ste

    code = curriculum_run["code"].copy()
    _, trace = finetune_ste(code, replace(DESK_PLAN, epochs=5, seed=1))
    return {"code": code, "trace": trace}
