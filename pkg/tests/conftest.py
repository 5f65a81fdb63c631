"""Shared fixtures, the finite-difference helper and the acceptance summary."""

from __future__ import annotations

import numpy as np
import pytest

from mssit import tensor as T
from mssit.icomesh import build_hierarchy
from mssit.patching import default_patch_maps

CRITERIA = {
    1: "architecture anchor (encoder parameters within 3% of 27.5M)",
    2: "grid anchor (sequence length / window table)",
    3: "oracle equivalence (windowed vs masked global attention)",
    4: "gradient suite (ops and end-to-end tiny model)",
    5: "geometry suite (counts, manifold, resampling, gathers)",
    6: "shift efficacy (w_s=1/2 validation MSE <= w_s=0)",
    7: "overfit smoke tests (regression and segmentation)",
    8: "augmentation suite (identity, bound, orientation, frequencies)",
    9: "determinism (bit-identical checkpoints and logs)",
}

_outcomes: dict[int, list[tuple[str, str]]] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(crit, []).append((report.nodeid, report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = int(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            continue
        kinds = {o for _, o in results}
        status = "FAIL" if "failed" in kinds else "SKIP" if "skipped" in kinds else "PASS"
        tr.write_line(f"criterion {n}: {status} - {CRITERIA[n]} ({len(results)} checks)")
        for text in _notes.get(n, []):
            tr.write_line(f"    {text}")


@pytest.fixture
def note():
    """``note(n, text)`` attaches a measured value to criterion ``n`` in the summary."""

    def add(n: int, text: str) -> None:
        _notes.setdefault(n, []).append(text)

    return add


@pytest.fixture(scope="session")
def hierarchy():
    return build_hierarchy(7)


@pytest.fixture(scope="session")
def maps():
    return default_patch_maps(0.5)


@pytest.fixture(scope="session")
def maps_noshift():
    return default_patch_maps(0)


def rel_err(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(
    fn, inputs, h: float = 1e-5, n_probe: int | None = None, seed: int = 0, candidates=None, order: int = 2
):
    """Worst relative error between :func:`backward` and central differences.

    Args:
        fn: Maps the list of input tensors to a scalar tensor.
        inputs: Float64 leaf tensors with ``requires_grad=True``.
        h: Step size.
        n_probe: Check this many random entries per input (all if None).
        candidates: Optional list (one per input) of flat indices eligible
            for probing; None entries allow every index.
        order: 2 for the three-point stencil, 4 for the five-point one.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    rng = np.random.default_rng(seed)
    for x in inputs:
        x.grad = None
    T.backward(fn(inputs))

    def at(flat, i, value):
        flat[i] = value
        with T.no_grad():
            return float(fn(inputs).data)

    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        pool = np.arange(flat.size) if candidates is None or candidates[k] is None else np.asarray(candidates[k])
        idx = pool if n_probe is None or n_probe >= pool.size else rng.choice(pool, n_probe, replace=False)
        for i in idx:
            orig = flat[i]
            if order == 2:
                numeric = (at(flat, i, orig + h) - at(flat, i, orig - h)) / (2 * h)
            else:
                numeric = (
                    8 * (at(flat, i, orig + h) - at(flat, i, orig - h))
                    - (at(flat, i, orig + 2 * h) - at(flat, i, orig - 2 * h))
                ) / (12 * h)
            flat[i] = orig
            worst = max(worst, float(rel_err(analytic.reshape(-1)[i], numeric)))
    return worst
