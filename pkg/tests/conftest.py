import numpy as np
import pytest

from songssl import synth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """Six short synthetic songs; cheap enough for unit tests."""
    grammar = synth.default_grammar()
    grammar.song_len = (6, 10)
    return synth.gen_corpus(6, grammar=grammar, seed=7)


TINY_CONFIG = """\
model: {hidden: 16, lstm_hidden: 16}
synth: {n_recordings: 6}
osc: {num_prototypes: 16}
mae: {epochs: 1, warmup_epochs: 0.5, hold_epochs: 0, batch_size: 4, crop_window_s: 1.0}
osc_plan: {epochs: 1, warmup_epochs: 0.5, hold_epochs: 0, batch_size: 4, crop_window_s: 1.0}
train: {epochs: 2, warmup_epochs: 1, batch_size: 4, crop_window_s: 2.0}
semi_plan: {epochs: 1, warmup_epochs: 0.5, batch_size: 4, crop_window_s: 2.0}
semi: {confidence_threshold: 0.2}
analysis: {n_components: 8, gmm_n_init: 1}
"""


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


# ----------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the run
# ----------------------------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "Sinkhorn marginals",
    2: "Gini regularizer",
    3: "loss gradient checks",
    4: "EMA algebra",
    5: "MAE mask statistics",
    6: "shape and parameter fidelity",
    7: "metrics oracle",
    8: "capacity check",
    9: "end-to-end directional check",
    10: "OSC anti-collapse",
    11: "clustering pipeline",
    12: "determinism",
}
_acceptance_results: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance_results.setdefault(mark.args[0], []).append((report.outcome, round(report.duration, 1)))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        results = _acceptance_results.get(n)
        if not results:
            continue
        ok = all(o == "passed" for o, _ in results)
        secs = sum(d for _, d in results)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title} ({secs:.1f}s)")
