import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rladmm.netdata import load_case  # noqa: E402

DATA = Path(__file__).resolve().parents[1] / "src" / "rladmm" / "data"


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


def case_path(name: str) -> Path:
    return DATA / f"{name}.m"


TINY_CASE = """\
function mpc = tiny3
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	2	0	0	0	0	1	1	0	230	1	1.1	0.9;
	3	1	60	20	0	5	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	150	0	0	0	0	0	0	0	0	0	0	0	0;
	2	0	0	100	-100	1	100	1	100	10	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	150	150	150	0	0	1	-360	360;
	2	3	0.02	0.15	0.02	120	120	120	0	0	1	-360	360;
	1	3	0.015	0.12	0.0	0	0	0	0	0	1	-360	360;
	1	3	0.015	0.12	0.0	0	0	0	0	0	0	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.02	10	0;
	2	0	0	3	0.03	12	0;
];
"""


@pytest.fixture(scope="session")
def tiny():
    from rladmm.netdata import parse_matpower
    return parse_matpower(TINY_CASE)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS.values():
            terminalreporter.write_line(line)
