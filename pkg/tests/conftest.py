import json
from pathlib import Path

import pytest

import toy_fixture

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def toy_script() -> dict:
    return json.loads((FIXTURES / "toy" / "script.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def toy_bench():
    return toy_fixture.bench()


@pytest.fixture
def toy_ports(toy_script):
    return toy_fixture.scripted_ports(toy_script)


def make_item(qid="q1", language="EN", key="A", category="Basic", subtype="anatomy", stem=None):
    from clara.core_model import QuestionItem

    return QuestionItem(qid, language, category, subtype, stem or f"Stem of {qid} in {language}?",
                        {"A": "one", "B": "two", "C": "three", "D": "four"}, key)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_line(request):
    """Call with (number, title, ok, detail); the line is printed in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        request.config.stash[_ACCEPTANCE].append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
