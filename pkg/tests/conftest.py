import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion.

    Usage: ``criterion(n, title)`` once at the start of a test, then
    ``criterion.note(text)`` for the measured values. The line is printed
    live and repeated in the terminal summary.
    """
    state = {}

    def start(number, title):
        state["key"] = (number, title)
        _CRITERIA.setdefault((number, title), {"ok": True, "notes": []})

    def note(text):
        _CRITERIA[state["key"]]["notes"].append(text)

    start.note = note
    yield start
    if "key" in state:
        rep = getattr(request.node, "rep_call", None)
        entry = _CRITERIA[state["key"]]
        entry["ok"] = entry["ok"] and rep is not None and rep.passed
        print(_line(state["key"], entry))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def _line(key, entry):
    number, title = key
    verdict = "PASS" if entry["ok"] else "FAIL"
    detail = "; ".join(entry["notes"])
    return f"criterion {number:>2} {verdict}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_line(key, _CRITERIA[key]))
