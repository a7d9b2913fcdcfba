"""Detect code the model silently dropped and put it back.

Models often omit parts of a file that did not need migration. The diff
between the original and the migrated file exposes those omissions as
removal-heavy hunks; classified "skipped" hunks get their removed lines
reinserted at the position the diff localized them to, last hunk first
so earlier insertions cannot shift later offsets.
"""

from __future__ import annotations

import difflib
import enum
import logging
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .discovery import ImportNameSet, scan_imports
from .errors import InsertOutOfRange, SyntaxUnparsable

log = logging.getLogger("libshift")

# Classification bands, found by the tuning described in the merge rules:
# small hunks are never skipped code; medium ones must be pure removals;
# large ones must be at least 90% removals.
SMALL_MAX_REMOVALS = 9
MEDIUM_MAX_REMOVALS = 19
LARGE_REMOVAL_RATIO = 0.90


class Verdict(enum.Enum):
    SKIPPED = "skipped"
    NOT_SKIPPED = "not_skipped"


class Reason(enum.Enum):
    SMALL = "small"
    HAS_ADDITIONS_OR_SOURCE_API = "has_additions_or_source_api"
    BELOW_90PCT_REMOVAL = "below_90pct_removal"
    CLASSIFIED_SKIPPED = "classified_skipped"


@dataclass(frozen=True)
class HunkClass:
    verdict: Verdict
    reason: Reason


@dataclass(frozen=True)
class DiffHunk:
    """One contiguous difference: lines removed from the original and/or
    lines added in the migrated file, with 1-based anchor lines."""

    old_start: int
    old_lines: tuple[str, ...]
    new_start: int
    new_lines: tuple[str, ...]

    @property
    def removals(self) -> int:
        return len(self.old_lines)

    @property
    def additions(self) -> int:
        return len(self.new_lines)


def _lines(text: str) -> list[str]:
    return text.splitlines(keepends=True)


def diff_files(original: str, migrated: str) -> list[DiffHunk]:
    """Line-based minimal-edit hunks between the two texts."""
    a, b = _lines(original), _lines(migrated)
    matcher = difflib.SequenceMatcher(None, a, b, autojunk=False)
    hunks = []
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag == "equal":
            continue
        hunks.append(DiffHunk(
            old_start=i1 + 1,
            old_lines=tuple(a[i1:i2]),
            new_start=j1 + 1,
            new_lines=tuple(b[j1:j2]),
        ))
    return hunks


_IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def source_token_set(original: str, names: ImportNameSet, *, path: str = "<string>") -> frozenset[str]:
    """Tokens that mark a line as source-API-related: the import names plus
    every local name the original file binds to one of them."""
    tokens = set(names.import_names)
    try:
        for hit in scan_imports(original, names, path=path):
            tokens.add(hit.bound_name)
    except SyntaxUnparsable:
        pass  # keep the bare import names; original files normally parse
    return frozenset(tokens)


def _references_source(lines: Iterable[str], tokens: frozenset[str]) -> bool:
    return any(
        token in tokens
        for line in lines
        for token in _IDENTIFIER.findall(line)
    )


def classify_hunk(
    hunk: DiffHunk,
    source_names: ImportNameSet,
    extra_tokens: frozenset[str] = frozenset(),
) -> HunkClass:
    """Three-band skipped-code rule over (removals, additions, API usage).

    0-9 removals: never skipped. 10-19: skipped only with zero additions
    and no source-API reference. 20+: skipped only when removals make up
    at least 90% of the changed lines (exactly 90% qualifies) and no
    source-API reference appears.
    """
    r, a = hunk.removals, hunk.additions
    if r <= SMALL_MAX_REMOVALS:
        return HunkClass(Verdict.NOT_SKIPPED, Reason.SMALL)
    tokens = frozenset(source_names.import_names) | extra_tokens
    refs_source = _references_source(hunk.old_lines, tokens)
    if r <= MEDIUM_MAX_REMOVALS:
        if a > 0 or refs_source:
            return HunkClass(Verdict.NOT_SKIPPED, Reason.HAS_ADDITIONS_OR_SOURCE_API)
        return HunkClass(Verdict.SKIPPED, Reason.CLASSIFIED_SKIPPED)
    # integer compare: r/(r+a) >= 0.90  <=>  10*r >= 9*(r+a)
    if 10 * r < 9 * (r + a):
        return HunkClass(Verdict.NOT_SKIPPED, Reason.BELOW_90PCT_REMOVAL)
    if refs_source:
        return HunkClass(Verdict.NOT_SKIPPED, Reason.HAS_ADDITIONS_OR_SOURCE_API)
    return HunkClass(Verdict.SKIPPED, Reason.CLASSIFIED_SKIPPED)


def merge_skipped(
    original: str,
    migrated: str,
    hunks: Sequence[tuple[DiffHunk, HunkClass]],
) -> str:
    """Reinsert every skipped hunk's removed lines into the migrated text.

    Insertion is anchored at the hunk's position in the migrated file and
    applied in reverse document order; lines already in the migrated text
    are never touched (insert-only).
    """
    lines = _lines(migrated)
    skipped = [h for h, c in hunks if c.verdict is Verdict.SKIPPED]
    for hunk in sorted(skipped, key=lambda h: h.new_start, reverse=True):
        position = hunk.new_start - 1
        if position < 0:
            raise InsertOutOfRange(f"hunk anchored before line 1: {hunk.new_start}")
        if position > len(lines):
            log.warning(
                "[merge] hunk anchor %d beyond migrated end (%d lines); appending",
                hunk.new_start, len(lines),
            )
            position = len(lines)
        lines[position:position] = list(hunk.old_lines)

    # Inserting at EOF after a line with no terminator must not glue lines.
    for i in range(len(lines) - 1):
        if not lines[i].endswith(("\n", "\r")):
            lines[i] += "\n"
    return "".join(lines)
