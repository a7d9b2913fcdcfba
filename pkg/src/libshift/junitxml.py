"""JUnit-XML test report parsing.

Consumes the XML the runner shim writes (pytest's xunit1 family): a
``testsuites``/``testsuite`` root with ``testcase`` elements carrying
``classname``/``name`` (and, with pytest, a ``file`` attribute), plus
child ``failure``/``error``/``skipped`` elements.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

from .errors import RunnerCrashed
from .jobspec import Outcome

# When a testcase carries several child verdicts, the most severe wins.
_CHILD_SEVERITY = {"error": 3, "failure": 2, "skipped": 1}
_CHILD_OUTCOME = {
    "error": Outcome.ERROR,
    "failure": Outcome.FAIL,
    "skipped": Outcome.SKIPPED,
}


def parse_junit_xml(text: str) -> dict[str, Outcome]:
    """Map test ids (``path::name``) to outcomes from a JUnit XML document."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise RunnerCrashed(f"test report is not well-formed XML: {exc}") from exc

    outcomes: dict[str, Outcome] = {}
    for case in root.iter("testcase"):
        location = case.get("file") or case.get("classname") or ""
        name = case.get("name") or ""
        test_id = f"{location}::{name}" if location else name
        verdict = Outcome.PASS
        severity = 0
        for child in case:
            rank = _CHILD_SEVERITY.get(child.tag, 0)
            if rank > severity:
                severity = rank
                verdict = _CHILD_OUTCOME[child.tag]
        outcomes[test_id] = verdict
    return outcomes


def parse_junit_file(path: Path) -> dict[str, Outcome]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RunnerCrashed(f"cannot read test report {path}: {exc}") from exc
    return parse_junit_xml(text)
