import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gmmformer.encoders import EncoderConfig  # noqa: E402
from gmmformer.synthetic import CorpusConfig, generate_corpus  # noqa: E402

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config.addinivalue_line("markers", "slow: multi-minute training or benchmark runs")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "ran": False, "detail": [], "measured": []})
    if report.when == "call":
        entry["ran"] = True
        entry["measured"].extend(v for k, v in item.user_properties if k == "measured")
    if report.failed:
        entry["ok"] = False
        crash = getattr(report.longrepr, "reprcrash", None)
        entry["detail"].append(crash.message.splitlines()[0] if crash else "failed")
    if report.skipped and report.when in ("setup", "call"):
        entry["ran"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if not e["ok"] else "NOT RUN")
        line = f"criterion {n:>2} {status}: {e['title']}"
        notes = e["detail"][:1] + e["measured"]
        if notes:
            line += "  (" + "; ".join(str(x)[:200] for x in notes) + ")"
        tr.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    return EncoderConfig(d_word=6, d_in=5, dim=8, n_heads=4, clip_len=8, max_frames=16, max_words=10)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = CorpusConfig(n_videos=12, frames_range=(10, 30), moments_range=(1, 3), d_in=5, d_word=6, seed=3)
    return generate_corpus(cfg)
