import re
import struct
import sys

import numpy as np
import pytest


def _write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">i", 0x00000800 | array.ndim))
        f.write(struct.pack(f">{array.ndim}i", *array.shape))
        f.write(array.tobytes())


@pytest.fixture(scope="session")
def synthetic_mnist_dir(tmp_path_factory):
    """A small valid MNIST directory with random pixels and labels."""
    rng = np.random.default_rng(12345)
    d = tmp_path_factory.mktemp("mnist-synth")
    _write_idx(d / "train-images-idx3-ubyte", rng.integers(0, 256, (120, 28, 28)))
    _write_idx(d / "train-labels-idx1-ubyte", rng.integers(0, 10, 120))
    _write_idx(d / "t10k-images-idx3-ubyte", rng.integers(0, 256, (40, 28, 28)))
    _write_idx(d / "t10k-labels-idx1-ubyte", rng.integers(0, 10, 40))
    return d


_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    outcomes = {}
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            m = _CRITERION.search(getattr(report, "nodeid", ""))
            if m:
                outcomes[int(m.group(1))] = status
    if not outcomes:
        return
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    details = getattr(mod, "VERDICT_DETAILS", {}) if mod else {}
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        verdict = {"passed": "PASS", "skipped": "SKIP"}.get(outcomes[n], "FAIL")
        line = f"criterion {n}: {verdict}"
        if n in details:
            line += f" - {details[n]}"
        terminalreporter.write_line(line)
