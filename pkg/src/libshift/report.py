"""Grading a migration against the project's own tests.

Correctness of a stage is the fraction of baseline-passing tests that
still pass after that stage, kept as an exact rational. Changed-line
counts (MigLOC) split the total migration effort between the automated
pipeline and the developer's manual follow-up edits.
"""

from __future__ import annotations

import difflib
import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

from .errors import NoBaselinePassingTests, ZeroTotal
from .jobspec import MigrationSpec, Outcome, Stage, TestReport

SCHEMA_VERSION = 1


class MigrationStatus(enum.Enum):
    CORRECT = "correct"
    PARTIALLY_CORRECT = "partially_correct"
    INCORRECT = "incorrect"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class StageCorrectness:
    stage: Stage
    baseline_passing: int
    still_passing: int
    correctness: Fraction
    inherited: bool = False

    def as_percent(self) -> str:
        return f"{float(self.correctness) * 100:.2f}%"


def compare_reports(premig: TestReport, post: TestReport) -> StageCorrectness:
    """Correctness of a post-migration report against the baseline.

    Only tests that passed before the migration count; a baseline test
    missing from the post report counts as not passing, and tests new in
    the post report are ignored.
    """
    baseline = premig.passing_ids()
    if not baseline:
        raise NoBaselinePassingTests(
            "the baseline report has no passing tests; correctness is undefined"
        )
    still = sum(1 for test_id in baseline if post.outcomes.get(test_id) is Outcome.PASS)
    return StageCorrectness(
        stage=post.stage,
        baseline_passing=len(baseline),
        still_passing=still,
        correctness=Fraction(still, len(baseline)),
    )


def inherit_correctness(previous: StageCorrectness, stage: Stage) -> StageCorrectness:
    """Echo the previous stage's numbers for a stage that was inapplicable."""
    return StageCorrectness(
        stage=stage,
        baseline_passing=previous.baseline_passing,
        still_passing=previous.still_passing,
        correctness=previous.correctness,
        inherited=True,
    )


def determine_status(final: StageCorrectness) -> MigrationStatus:
    if final.correctness == 1:
        return MigrationStatus.CORRECT
    if final.correctness == 0:
        return MigrationStatus.INCORRECT
    return MigrationStatus.PARTIALLY_CORRECT


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for line in a:
        current = [0]
        append = current.append
        for j, other in enumerate(b, 1):
            if line == other:
                append(previous[j - 1] + 1)
            else:
                left = current[j - 1]
                up = previous[j]
                append(left if left >= up else up)
        previous = current
    return previous[-1]


# Above this many DP cells the exact count falls back to a
# direction-canonicalized difflib diff to stay both fast and symmetric.
_LCS_CELL_BUDGET = 4_000_000


def _changed_lines(before: str, after: str) -> int:
    a = before.splitlines()
    b = after.splitlines()
    if len(a) * len(b) <= _LCS_CELL_BUDGET:
        matched = _lcs_length(a, b)
    else:
        first, second = sorted((a, b))
        matcher = difflib.SequenceMatcher(None, first, second, autojunk=False)
        matched = sum(i2 - i1 for tag, i1, i2, _, _ in matcher.get_opcodes()
                      if tag == "equal")
    return (len(a) - matched) + (len(b) - matched)


def count_mig_loc(before: Mapping[str, str], after: Mapping[str, str]) -> int:
    """Total changed lines between two project snapshots: the sum over all
    files of removed plus added lines in the minimal line diff. A file
    missing on one side counts with all of its lines."""
    return sum(
        _changed_lines(before.get(path, ""), after.get(path, ""))
        for path in sorted(set(before) | set(after))
    )


def compute_effort(migloc_auto: int, migloc_manual: int) -> tuple[Fraction, Fraction]:
    """Split the migration effort: each side's share of the changed lines."""
    total = migloc_auto + migloc_manual
    if total <= 0:
        raise ZeroTotal("no changed lines on either side; effort split is undefined")
    return Fraction(migloc_auto, total), Fraction(migloc_manual, total)


@dataclass
class MigrationRunReport:
    """The persisted outcome of one pipeline run."""

    spec: MigrationSpec
    selected_files: list[str]
    per_stage: list[StageCorrectness]
    status: MigrationStatus
    migloc_auto: int
    migloc_manual: int | None = None
    effort_auto: Fraction | None = None
    effort_manual: Fraction | None = None
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "spec": self.spec.echo(),
            "selected_files": list(self.selected_files),
            "per_stage": [
                {
                    "stage": entry.stage.value,
                    "baseline_passing": entry.baseline_passing,
                    "still_passing": entry.still_passing,
                    "correctness": entry.as_percent(),
                    "correctness_ratio": [
                        entry.correctness.numerator,
                        entry.correctness.denominator,
                    ],
                    "inherited": entry.inherited,
                }
                for entry in self.per_stage
            ],
            "status": self.status.value,
            "migloc_auto": self.migloc_auto,
            "migloc_manual": self.migloc_manual,
            "effort_auto": None if self.effort_auto is None else float(self.effort_auto),
            "effort_manual": None if self.effort_manual is None else float(self.effort_manual),
            "warnings": list(self.warnings),
        }

    def write(self, path: Path) -> None:
        path.write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
