import numpy as np
import pytest

from feedbackopt.simcli import RunConfig, run

_RESULTS = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects ``(criterion, label, ok, detail)`` lines for the terminal summary."""
    def add(num, label, ok, detail=""):
        _RESULTS.append((num, label, bool(ok), detail))
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, label, ok, detail in sorted(_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {label}: {detail}")


@pytest.fixture(scope="session")
def ieee9_runs(tmp_path_factory):
    """The three 100 s IEEE9 runs, as ``{mode: (summary, columns)}``."""
    d = tmp_path_factory.mktemp("ieee9")
    out = {}
    for mode in ("none", "soft", "approximate"):
        path = d / f"{mode}.csv"
        _, summary = run(RunConfig(case="ieee9", mode=mode, csv=str(path)))
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        out[mode] = (summary, {h: data[:, k] for k, h in enumerate(header)})
    return out
