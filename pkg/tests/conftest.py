import numpy as np
import pytest

from accent_forge.tvm import accumulate_stats
from accent_forge.ubm import UbmModel, frame_posteriors


def tvm_oracle_data(seed, n_components=4, dim=5, rank=3, n_utts=500, frames=400,
                    spread=8.0, v_scale=0.5):
    """Utterances drawn from ``M(s) = M0 + V* y(s)`` with well-separated components.

    Returns ``(ubm, stats, v_true)``; statistics use alignments under the
    generating UBM so the only unknown is V.
    """
    rng = np.random.default_rng(seed)
    C, F = n_components, dim
    ubm = UbmModel(np.full(C, 1.0 / C), rng.normal(0.0, spread, (C, F)), np.ones((C, F)))
    v_true = rng.normal(0.0, v_scale, (C * F, rank))
    stats = []
    for i in range(n_utts):
        y = rng.standard_normal(rank)
        shifted = ubm.means + (v_true @ y).reshape(C, F)
        comp = rng.integers(0, C, frames)
        x = shifted[comp] + rng.standard_normal((frames, F))
        stats.append(accumulate_stats(ubm, x, frame_posteriors(ubm, x), f"u{i}"))
    return ubm, stats, v_true


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def _report(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion:>2}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
