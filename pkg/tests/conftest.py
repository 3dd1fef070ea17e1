import numpy as np
import pytest
import torch

from usskit.data import DEFAULT_CLASSES, synthesize_clip
from usskit.query_embed import TaggerConfig, train_tagger
from usskit.sed_anchor import extract_segment, mine_anchor, oracle_sed


@pytest.fixture(scope="session")
def tagger_clips():
    """16 ten-second clips per default class, synthesised at the pipeline rate."""
    rng = np.random.default_rng(2024)
    return [synthesize_clip(cls, k, rng, 10.0, 8000)
            for k, cls in enumerate(DEFAULT_CLASSES) for _ in range(16)]


@pytest.fixture(scope="session")
def trained_tagger(tagger_clips):
    torch.manual_seed(0)
    return train_tagger(tagger_clips, 30, TaggerConfig())


@pytest.fixture(scope="session")
def anchor_pool(tagger_clips):
    """Mined 2 s anchors (pipeline rate) from the first four classes."""
    pool = []
    for clip in tagger_clips:
        if clip.label < 4:
            anchor = mine_anchor(oracle_sed(clip, 6), clip.label)
            pool.append(extract_segment(clip, anchor))
    return pool


# -- acceptance summary ----------------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        if not report.passed and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:200]
        _criteria[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    width = max(len(n) for n in _criteria)
    for name, (status, detail) in _criteria.items():
        terminalreporter.write_line(f"{status:4}  {name:<{width}}  {detail}")
