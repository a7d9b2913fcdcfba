"""CallGrind-format profile parsing and serialization.

The supported grammar subset is what the runner shim emits and what
profilers like pprofile produce: `key: value` header lines, position
directives `fl=`/`fn=` for the current function and `cfl=`/`cfi=`/`cfn=`
for a pending callee, `calls=<count> <target-pos>` followed by a cost
line whose first field is the call-site line, and name compression
`(N)` references. `fl`/`fi`/`fe` and their `c*` variants share one
compression table; `fn`/`cfn` share another, mirroring the format spec.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

from .errors import MalformedProfile


@dataclass(frozen=True)
class CallRecord:
    """One observed call: caller and callee identity plus the call site."""

    caller_file: str
    caller_function: str
    callee_file: str
    callee_function: str
    call_line: int
    callee_line: int = 0
    count: int = 1


_HEADER_RE = re.compile(r"^(\w+):")
_POSITION_RE = re.compile(
    r"^(?P<keyword>c?(?:ob|fl|fi|fe|fn))=\s*(?:\((?P<ref>\d+)\))?\s*(?P<name>.*)$"
)
_COST_RE = re.compile(r"^(\*|[+-]?\d+)(\s+\d+)*\s*$")
_CALLS_RE = re.compile(r"^calls=\s*(?P<count>\d+)\s+(?P<target>\*|[+-]?\d+)\s*$")

# keyword -> (compression table, is_callee)
_KEYWORDS = {
    "ob": ("ob", False), "fl": ("fl", False), "fi": ("fl", False), "fe": ("fl", False),
    "fn": ("fn", False),
    "cob": ("ob", True), "cfl": ("fl", True), "cfi": ("fl", True), "cfe": ("fl", True),
    "cfn": ("fn", True),
}


def parse_callgrind(profile_text: str) -> list[CallRecord]:
    """Extract one CallRecord per `calls=` group, expanding compressed names."""
    names: dict[tuple[str, str], str] = {}
    current_file = ""
    current_function = ""
    callee_file: str | None = None
    callee_function: str | None = None
    pending_calls: tuple[int, int] | None = None  # (count, target line)
    last_position = 0
    records: list[CallRecord] = []

    def resolve(keyword: str, ref: str | None, name: str, line_no: int) -> str:
        table, _ = _KEYWORDS[keyword]
        if ref is None:
            return name
        if name:
            names[(table, ref)] = name
            return name
        try:
            return names[(table, ref)]
        except KeyError:
            raise MalformedProfile(line_no, f"undefined name reference ({ref}) for {keyword}=")

    def position_value(token: str, line_no: int) -> int:
        nonlocal last_position
        if token == "*":
            value = last_position
        elif token[0] in "+-":
            value = last_position + int(token)
        else:
            value = int(token)
        if value < 0:
            raise MalformedProfile(line_no, f"negative position {token!r}")
        last_position = value
        return value

    for line_no, raw in enumerate(profile_text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue

        position = _POSITION_RE.match(line)
        if position:
            if pending_calls is not None:
                raise MalformedProfile(line_no, "calls= directive not followed by a cost line")
            keyword = position.group("keyword")
            name = resolve(keyword, position.group("ref"), position.group("name").strip(), line_no)
            table, is_callee = _KEYWORDS[keyword]
            if table == "ob":
                continue  # object files are accepted but not part of the record model
            if is_callee:
                if table == "fl":
                    callee_file = name
                else:
                    callee_function = name
            else:
                if table == "fl":
                    current_file = name
                else:
                    current_function = name
                    last_position = 0
            continue

        calls = _CALLS_RE.match(line)
        if calls:
            if pending_calls is not None:
                raise MalformedProfile(line_no, "calls= directive not followed by a cost line")
            if callee_function is None:
                raise MalformedProfile(line_no, "calls= without a preceding cfn=")
            target = calls.group("target")
            target_line = 0 if target == "*" else int(target.lstrip("+"))
            if target_line < 0:
                raise MalformedProfile(line_no, f"negative call target position {target!r}")
            pending_calls = (int(calls.group("count")), target_line)
            continue

        cost = _COST_RE.match(line)
        if cost:
            if not current_file and not current_function:
                raise MalformedProfile(line_no, "cost line before any fl=/fn= directive")
            site = position_value(cost.group(1), line_no)
            if pending_calls is not None:
                count, target_line = pending_calls
                records.append(CallRecord(
                    caller_file=current_file,
                    caller_function=current_function,
                    callee_file=callee_file if callee_file is not None else current_file,
                    callee_function=callee_function or "",
                    call_line=site,
                    callee_line=target_line,
                    count=count,
                ))
                pending_calls = None
                callee_file = None
                callee_function = None
            continue

        if _HEADER_RE.match(line):
            # header keys (version, creator, events, positions, summary, ...)
            # are legal before, between, and after body sections
            continue

        raise MalformedProfile(line_no, f"unrecognized line {raw!r}")

    if pending_calls is not None:
        raise MalformedProfile(
            profile_text.count("\n") + 1, "calls= directive at end of input"
        )
    return records


def serialize_records(records: Iterable[CallRecord]) -> str:
    """Render records back to CallGrind text (uncompressed, order-preserving).

    parse_callgrind(serialize_records(records)) == list(records).
    """
    lines = [
        "# callgrind format",
        "version: 1",
        "creator: libshift",
        "positions: line",
        "events: calls",
        "",
    ]
    current: tuple[str, str] | None = None
    for record in records:
        caller = (record.caller_file, record.caller_function)
        if caller != current:
            lines.append(f"fl={record.caller_file}")
            lines.append(f"fn={record.caller_function}")
            current = caller
        if record.callee_file != record.caller_file:
            lines.append(f"cfl={record.callee_file}")
        lines.append(f"cfn={record.callee_function}")
        lines.append(f"calls={record.count} {record.callee_line}")
        lines.append(f"{record.call_line} {record.count}")
    return "\n".join(lines) + "\n"
