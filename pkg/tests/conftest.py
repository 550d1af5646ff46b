import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def hdl64():
    from bevkit import builtin_sensor

    return builtin_sensor("hdl64e")


@pytest.fixture(scope="session")
def vlp16():
    from bevkit import builtin_sensor

    return builtin_sensor("vlp16")
