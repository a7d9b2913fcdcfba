"""Shared domain types: the migration job description and test reports."""

from __future__ import annotations

import enum
import re
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ValidationError


class Stage(enum.Enum):
    """Pipeline stages at which a test report can be captured."""

    PREMIG = "premig"
    LLMMIG = "llmmig"
    MERGE = "merge"
    ASYNC = "async"
    MANUAL = "manual"

    def __str__(self) -> str:
        return self.value


class Outcome(enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    ERROR = "error"
    SKIPPED = "skipped"

    def __str__(self) -> str:
        return self.value


def canonical_package_name(name: str) -> str:
    """Normalize a distribution name: case-insensitive, `-`/`_`/`.` equivalent."""
    return re.sub(r"[-_.]+", "-", name).lower()


@dataclass
class MigrationSpec:
    """Full user input describing one migration job."""

    project_root: Path
    source_lib: str
    target_lib: str
    target_version: str
    requirements_files: list[Path]
    model_id: str
    api_base_url: str
    out_dir: Path
    python_version: str | None = None

    def validate(self) -> None:
        """Check the documented invariants; raise ValidationError on the first hit."""
        if not self.project_root.is_dir():
            raise ValidationError(f"project root is not a directory: {self.project_root}")
        if not self.requirements_files:
            raise ValidationError("at least one requirements file is required")
        for path in self.requirements_files:
            if not path.is_file():
                raise ValidationError(f"requirements file does not exist: {path}")
        if not self.source_lib or not self.target_lib:
            raise ValidationError("source and target library names must be non-empty")
        if canonical_package_name(self.source_lib) == canonical_package_name(self.target_lib):
            raise ValidationError(
                f"source and target libraries are the same package: {self.source_lib!r}"
            )
        if not self.target_version:
            raise ValidationError("target library version must be non-empty")
        if not self.model_id or not self.api_base_url:
            raise ValidationError("model id and API base URL must be non-empty")

    def echo(self) -> dict:
        """JSON-safe snapshot of the job inputs, embedded in run reports."""
        return {
            "project_root": str(self.project_root),
            "source_lib": self.source_lib,
            "target_lib": self.target_lib,
            "target_version": self.target_version,
            "python_version": self.python_version,
            "requirements_files": [str(p) for p in self.requirements_files],
            "model_id": self.model_id,
            "api_base_url": self.api_base_url,
            "out_dir": str(self.out_dir),
        }


@dataclass(frozen=True)
class TestReport:
    """Outcome of one full test-suite run at a given stage.

    The outcomes mapping is wrapped read-only at construction; reports are
    immutable once a stage completes.
    """

    stage: Stage
    outcomes: Mapping[str, Outcome]
    wall_time_s: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcomes", types.MappingProxyType(dict(self.outcomes)))
        if self.wall_time_s < 0:
            raise ValidationError("wall_time_s must be non-negative")

    def passing_ids(self) -> frozenset[str]:
        return frozenset(t for t, o in self.outcomes.items() if o is Outcome.PASS)

    def counts(self) -> dict[str, int]:
        tally = {o.value: 0 for o in Outcome}
        for outcome in self.outcomes.values():
            tally[outcome.value] += 1
        return tally


@dataclass
class ProjectOverrides:
    """Per-project knobs read from ``<out_dir>/project.toml``.

    Absent file means all defaults: the standard shim invocation, no extra
    runner arguments, no extra environment variables.
    """

    command: list[str] | None = None
    args: list[str] = field(default_factory=list)
    timeout_s: int | None = None
    env: dict[str, str] = field(default_factory=dict)
