from __future__ import annotations

import re

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_makereport(item, call):
    m = re.match(r"test_criterion_(\d+)_(\w+)", item.name)
    if not m or call.when != "call":
        return
    n = int(m.group(1))
    outcome = "PASS" if call.excinfo is None else "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _ACCEPTANCE[n] = (m.group(2).replace("_", " "), outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, outcome, detail = _ACCEPTANCE[n]
        line = f"criterion {n:2d} {outcome}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
