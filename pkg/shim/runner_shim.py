"""In-venv test runner shim.

Runs the host project's test suite once with pytest, writing a JUnit-XML
report, and optionally traces every Python-level call to produce a
CallGrind-format profile (directives: fl/fn for the caller, cfl/cfn and
calls= for each outgoing call, one cost line carrying the call-site
line). Designed to be vendored as a single file into a virtual
environment's site-packages and invoked as ``python -m runner_shim``.

Qualified names follow the runtime convention (``Class.method``,
``outer.<locals>.inner``), reconstructed from each file's syntax tree so
they are stable across interpreter versions.

Exit codes:
  0 all tests passed          3 internal or usage error
  1 some tests failed         4 no tests collected
  2 run interrupted           5 profiler failure (report still written)
"""

from __future__ import annotations

import argparse
import ast
import os
import sys
from pathlib import Path

EXIT_NO_TESTS = 4
EXIT_PROFILER_FAILURE = 5

EMPTY_REPORT = (
    '<?xml version="1.0" encoding="utf-8"?>\n'
    '<testsuites><testsuite name="pytest" tests="0" errors="0" failures="0" '
    'skipped="0"/></testsuites>\n'
)


class CallTracer:
    """Aggregates (caller code, call line, callee code) counts via
    sys.setprofile. Only Python-level calls are recorded."""

    def __init__(self):
        self.counts = {}
        self._own_file = __file__

    def _trace(self, frame, event, arg):
        if event != "call":
            return
        caller = frame.f_back
        if caller is None:
            return
        callee_code = frame.f_code
        caller_code = caller.f_code
        if caller_code.co_filename == self._own_file:
            return
        key = (caller_code, caller.f_lineno, callee_code)
        self.counts[key] = self.counts.get(key, 0) + 1

    def start(self):
        sys.setprofile(self._trace)

    def stop(self):
        sys.setprofile(None)


class QualnameResolver:
    """Maps a code object to its qualified name by parsing its source file.

    A function's code object anchors at its first decorator line when
    decorated, at the ``def`` line otherwise; both anchors are indexed.
    Unparsable or synthetic files fall back to the bare code name.
    """

    def __init__(self):
        self._by_file = {}

    def resolve(self, code) -> str:
        filename = code.co_filename
        if code.co_name == "<module>":
            return "<module>"
        table = self._by_file.get(filename)
        if table is None:
            table = self._index_file(filename)
            self._by_file[filename] = table
        return table.get((code.co_firstlineno, code.co_name), code.co_name)

    @staticmethod
    def _index_file(filename: str) -> dict:
        if filename.startswith("<"):
            return {}
        try:
            tree = ast.parse(Path(filename).read_text(encoding="utf-8"))
        except (OSError, SyntaxError, ValueError):
            return {}
        table = {}

        def visit(node, prefix):
            for child in ast.iter_child_nodes(node):
                if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef)):
                    qualified = prefix + child.name
                    anchors = {child.lineno}
                    if child.decorator_list:
                        anchors.add(child.decorator_list[0].lineno)
                    for line in anchors:
                        table[(line, child.name)] = qualified
                    visit(child, qualified + ".<locals>.")
                elif isinstance(child, ast.Lambda):
                    table[(child.lineno, "<lambda>")] = prefix + "<lambda>"
                    visit(child, prefix)
                elif isinstance(child, ast.ClassDef):
                    visit(child, prefix + child.name + ".")
                else:
                    visit(child, prefix)

        visit(tree, "")
        return table


def normalize_code_path(filename: str) -> str:
    """Absolutize real paths against the run directory; interpreter
    sentinels like ``<frozen importlib._bootstrap>`` pass through."""
    if filename.startswith("<"):
        return filename
    return os.path.abspath(filename)


def write_callgrind(counts: dict, output: Path) -> None:
    resolver = QualnameResolver()
    lines = [
        "# callgrind format",
        "version: 1",
        "creator: runner-shim",
        "positions: line",
        "events: calls",
        "",
    ]

    def sort_key(item):
        (caller_code, call_line, callee_code), _ = item
        return (caller_code.co_filename, caller_code.co_firstlineno,
                call_line, callee_code.co_filename, callee_code.co_firstlineno)

    current = None
    for (caller_code, call_line, callee_code), count in sorted(
        counts.items(), key=sort_key
    ):
        caller_file = normalize_code_path(caller_code.co_filename)
        callee_file = normalize_code_path(callee_code.co_filename)
        caller = (caller_file, resolver.resolve(caller_code))
        if caller != current:
            lines.append(f"fl={caller[0]}")
            lines.append(f"fn={caller[1]}")
            current = caller
        if callee_file != caller_file:
            lines.append(f"cfl={callee_file}")
        lines.append(f"cfn={resolver.resolve(callee_code)}")
        lines.append(f"calls={count} {callee_code.co_firstlineno}")
        lines.append(f"{call_line} {count}")
    output.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_pytest(report: Path, extra_args: list) -> int:
    import pytest

    args = [
        "-q",
        "-p", "no:cacheprovider",
        "-o", "junit_family=xunit1",
        f"--junit-xml={report}",
        *extra_args,
    ]
    return int(pytest.main(args))


def shim_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="runner-shim",
        description="Run the project test suite once; write JUnit XML and "
                    "optionally a CallGrind-format call profile.",
    )
    parser.add_argument("--report", required=True, type=Path,
                        help="JUnit XML output path")
    parser.add_argument("--profile", type=Path,
                        help="CallGrind profile output path")
    parser.add_argument("extra", nargs="*",
                        help="arguments after -- are passed to the test runner")
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--" in argv:
        separator = argv.index("--")
        argv, extra = argv[:separator], argv[separator + 1:]
    else:
        extra = []
    args = parser.parse_args(argv)
    extra = [*args.extra, *extra]

    args.report.parent.mkdir(parents=True, exist_ok=True)
    tracer = CallTracer() if args.profile else None
    profiler_failed = False

    if tracer:
        tracer.start()
    try:
        status = run_pytest(args.report, extra)
    finally:
        if tracer:
            tracer.stop()

    if tracer:
        try:
            args.profile.parent.mkdir(parents=True, exist_ok=True)
            write_callgrind(tracer.counts, args.profile)
        except Exception as exc:  # report must still be usable
            print(f"runner-shim: profiler failure: {exc}", file=sys.stderr)
            profiler_failed = True

    if not args.report.exists():
        args.report.write_text(EMPTY_REPORT, encoding="utf-8")

    if profiler_failed:
        return EXIT_PROFILER_FAILURE
    # pytest: 0 ok, 1 failures, 2 interrupted, 3 internal, 4 usage, 5 none
    if status == 5:
        return EXIT_NO_TESTS
    if status == 4:
        return 3
    return status


def main() -> None:
    sys.exit(shim_main())


if __name__ == "__main__":
    main()
