import json
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from sfespline import cli
from sfespline.duopoly_ls import CollocationGrid, assemble, solve_family
from sfespline.equilibrium import paste, search_t
from sfespline.market import CostSpec, DemandSpec, Firm, Market
from sfespline.splines import KnotVector, SplineBasis

CONFIGS = Path(cli.__file__).parent / "configs"
BUNDLED = ["example1", "example2", "example3_coarse", "example3_pointwise", "example3_fine"]


def duopoly_market(caps=(80.0, 75.0), eps_max=210.0):
    return Market(
        (Firm("firm1", CostSpec(10.0), caps[0]), Firm("firm2", CostSpec(15.0), caps[1])),
        DemandSpec(0.0, 3.0),
        0.0,
        eps_max,
    )


def three_firm_market():
    return Market(
        (
            Firm("firm1", CostSpec(5.0, 0.8), 11.0),
            Firm("firm2", CostSpec(8.0, 1.2), 8.0),
            Firm("firm3", CostSpec(12.0, 2.3), 55.0),
        ),
        DemandSpec(0.0, 0.5),
        0.0,
        110.0,
    )


@pytest.fixture(scope="session")
def ex1_market():
    return duopoly_market()


@pytest.fixture(scope="session")
def ex3_market():
    return three_firm_market()


@pytest.fixture(scope="session")
def ex1_setup(ex1_market):
    basis = SplineBasis.natural_cubic(KnotVector.uniform(5, 77, 9))
    grid = CollocationGrid.uniform(16, 65, 0.5)
    system = assemble(ex1_market, basis, grid)
    fam = solve_family(system, basis=basis, costs=ex1_market.c)
    return basis, grid, system, fam


@pytest.fixture(scope="session")
def ex1_equilibrium(ex1_market, ex1_setup):
    basis, grid, _, fam = ex1_setup
    res = search_t(fam, ex1_market, basis)
    return paste(fam, res, ex1_market, basis, collocation=grid)


class BundledRuns:
    """Runs each bundled config through ``sfespline solve`` twice, on demand.

    Each run is ``(exit code, output dir, report dict, seconds)``.
    """

    def __init__(self, root: Path):
        self.root = root
        self.cache = {}

    def __call__(self, name: str):
        if name not in self.cache:
            out = []
            for k in (1, 2):
                d = self.root / f"{name}_{k}"
                start = time.perf_counter()
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    code = cli.main(["solve", "--config", str(CONFIGS / f"{name}.json"),
                                     "--out", str(d), "--seed", "0"])
                elapsed = time.perf_counter() - start
                out.append((code, d, json.loads((d / "report.json").read_text()), elapsed))
            self.cache[name] = out
        return self.cache[name]


@pytest.fixture(scope="session")
def bundled(tmp_path_factory):
    return BundledRuns(tmp_path_factory.mktemp("bundled"))


def read_curves(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return data[:, 0], data[:, 1:]


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": 0, "failed": []})
    if rep.passed:
        entry["passed"] += 1
    else:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if not e["failed"] else "FAIL"
        total = e["passed"] + len(e["failed"])
        line = f"criterion {number:2d} {status}  {e['title']} ({e['passed']}/{total} checks)"
        if e["failed"]:
            line += "  failed: " + ", ".join(e["failed"])
        terminalreporter.write_line(line)
