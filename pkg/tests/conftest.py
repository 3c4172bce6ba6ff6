import numpy as np
import pytest
import torch

from rarefind.datasets import Dataset
from rarefind.segmentation import ReferenceSegmenter, segment_dataset
from rarefind.synthetic import base_dataset, novel_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def segmenter():
    return ReferenceSegmenter()


@pytest.fixture(scope="session")
def novel_small(segmenter):
    ds = novel_dataset(24, seed=11)
    images, _ = segment_dataset(segmenter, ds.images)
    return Dataset(ds.name, images)


@pytest.fixture(scope="session")
def base_small(segmenter):
    ds = base_dataset(16, seed=12)
    images, _ = segment_dataset(segmenter, ds.images)
    return Dataset(ds.name, images)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion --------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = ""
        for line in rep.capstdout.splitlines():
            if line.startswith(f"criterion {num}:") and "(" in line:
                detail = " " + line[line.index("("):]
        _CRITERIA[num] = ("PASS" if rep.passed else "FAIL", title + detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, title = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {status}: {title}")
