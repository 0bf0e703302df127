import pytest

from splitleak.lab.corpus import generate_lines, news_spec
from splitleak.minilm import encode_batch


@pytest.fixture(scope="session")
def news_corpus():
    return encode_batch(generate_lines(news_spec(200, seed=5)).surface, 16)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
