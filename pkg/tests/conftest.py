import pytest

from fmr.transport import run_spmd

BACKENDS = ["in_process", "tcp"]

# criterion id -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def spmd():
    """``spmd(fn, n, backend="in_process")`` -> per-rank results."""

    def run(fn, n, backend="in_process", **kw):
        kw.setdefault("collective_timeout", 30.0)
        return run_spmd(fn, n, backend, **kw)

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0])):
        status, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{status:<4} criterion {name} -- {detail}")
