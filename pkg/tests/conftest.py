import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ccfusion.backbone import load_backbone  # noqa: E402
from ccfusion.toy import make_pairs  # noqa: E402

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture(scope="session")
def backbone():
    return load_backbone("deterministic", seed=0)


@pytest.fixture(scope="session")
def toy_pairs():
    return make_pairs(4, size=32, seed=0)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
    entry["seconds"] += rep.duration
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {e['title']}  ({e['seconds']:.1f}s)")
