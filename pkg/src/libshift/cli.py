"""Command-line entry point.

``run`` drives the full pipeline; ``graph``, ``hunks``, and ``grade``
expose the discovery, merge-classification, and grading primitives for
debugging. Exit codes: 0 success, 2 validation error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import date
from pathlib import Path

from . import merge
from .callgrind import parse_callgrind
from .discovery import (
    ImportNameSet,
    build_call_graph,
    classify_owner,
    scan_imports,
    select_migration_files,
)
from .errors import LibshiftError, StageError, ValidationError
from .jobspec import MigrationSpec, Stage, TestReport
from .junitxml import parse_junit_file
from .llm import EndpointConfig
from .pipeline import PipelineOptions, run_migration
from .prep import EnvHandle
from .report import compare_reports

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE_FAILURE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="libshift",
        description="Migrate a Python project from one library to an analogous one.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full migration pipeline")
    run.add_argument("--project", type=Path, help="project root directory")
    run.add_argument("--source-lib", help="distribution name of the library to replace")
    run.add_argument("--target-lib", help="distribution name of the replacement library")
    run.add_argument("--target-version", help="version of the target library to install")
    run.add_argument("--python-version", help='interpreter version, e.g. "3.11"')
    run.add_argument("--requirements", type=Path, action="append", default=[],
                     help="requirements file; repeatable, installed in order")
    run.add_argument("--model", help="model id sent to the endpoint")
    run.add_argument("--api-base", help="OpenAI-compatible endpoint base URL")
    run.add_argument("--api-key-env", default="OPENAI_API_KEY",
                     help="environment variable holding the bearer credential")
    run.add_argument("--out-dir", type=Path, help="artifact directory (venv, runs)")
    run.add_argument("--parallel", type=int, default=4,
                     help="max concurrent migration requests")
    run.add_argument("--manual-fixed", type=Path,
                     help="snapshot of the project after manual fixes, for effort metrics")
    run.add_argument("--shim", type=Path,
                     help="path to the runner shim file to vendor into the venv")
    run.add_argument("--reference-date", type=date.fromisoformat,
                     help="date used to resolve undeclared versions (default: today)")
    run.add_argument("--config", type=Path,
                     help="key-value config file; flags override its values")
    run.set_defaults(func=_cmd_run)

    graph = sub.add_parser("graph", help="print an ownership-classified call graph")
    graph.add_argument("--project", type=Path, required=True)
    graph.add_argument("--profile", type=Path, required=True,
                       help="CallGrind-format profile file")
    graph.add_argument("--site-packages", type=Path, required=True,
                       help="site-packages directory of the provisioned venv")
    graph.add_argument("--source-import-names", required=True,
                       help="comma-separated import names of the source library")
    graph.set_defaults(func=_cmd_graph)

    hunks = sub.add_parser("hunks", help="print hunk classifications for a file pair")
    hunks.add_argument("original", type=Path)
    hunks.add_argument("migrated", type=Path)
    hunks.add_argument("--source-import-names", default="",
                       help="comma-separated import names of the source library")
    hunks.set_defaults(func=_cmd_hunks)

    grade = sub.add_parser("grade", help="print correctness of a post-stage report")
    grade.add_argument("premig", type=Path, help="baseline JUnit XML")
    grade.add_argument("post", type=Path, help="post-stage JUnit XML")
    grade.set_defaults(func=_cmd_grade)
    return parser


def _load_config(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("["):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: cannot parse config line {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip().strip("\"'")
    return values


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args.config) if args.config else {}

    def pick(name: str, flag_value, convert=lambda v: v):
        if flag_value not in (None, [], ""):
            return flag_value
        if name in config:
            return convert(config[name])
        return flag_value

    requirements = args.requirements or [
        Path(p) for p in config.get("requirements", "").split(",") if p
    ]
    spec = MigrationSpec(
        project_root=pick("project", args.project, Path) or _missing("--project"),
        source_lib=pick("source_lib", args.source_lib) or _missing("--source-lib"),
        target_lib=pick("target_lib", args.target_lib) or _missing("--target-lib"),
        target_version=pick("target_version", args.target_version)
        or _missing("--target-version"),
        python_version=pick("python_version", args.python_version),
        requirements_files=requirements or _missing("--requirements"),
        model_id=pick("model", args.model) or _missing("--model"),
        api_base_url=pick("api_base", args.api_base) or _missing("--api-base"),
        out_dir=pick("out_dir", args.out_dir, Path) or _missing("--out-dir"),
    )
    options = PipelineOptions(
        endpoint=EndpointConfig(
            base_url=spec.api_base_url,
            model_id=spec.model_id,
            api_key_env=pick("api_key_env", args.api_key_env),
        ),
        parallel=int(pick("parallel", args.parallel)),
        shim_source=pick("shim", args.shim, Path),
        manual_fixed=pick("manual_fixed", args.manual_fixed, Path),
        reference_date=args.reference_date,
    )
    report = run_migration(spec, options)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _missing(flag: str):
    raise ValidationError(f"{flag} is required (flag or config file)")


def _cmd_graph(args: argparse.Namespace) -> int:
    names = ImportNameSet(
        library="source",
        import_names=frozenset(
            n.strip() for n in args.source_import_names.split(",") if n.strip()
        ),
    )
    if not names.import_names:
        raise ValidationError("--source-import-names must name at least one module")
    env = EnvHandle(
        venv_path=args.site_packages.parent,
        interpreter_version="unknown",
        site_packages_path=args.site_packages,
    )
    records = parse_callgrind(args.profile.read_text(encoding="utf-8"))
    libraries = {name: names for name in names.import_names}
    graph = build_call_graph(
        records, lambda f: classify_owner(f, args.project, env, libraries)
    )

    print("functions:")
    for node in sorted(graph.nodes, key=lambda n: (n.file, n.qualified_name)):
        owner = node.owner.kind
        if node.owner.import_name:
            owner += f"({node.owner.import_name})"
        print(f"  {node.file} :: {node.qualified_name} [{owner}]")
    print("calls:")
    for edge in graph.edges:
        print(f"  {edge.caller.qualified_name} -> {edge.callee.qualified_name} "
              f"(line {edge.line})")

    selected = select_migration_files(args.project, graph, names)
    static_hits = set()
    for relative in selected:
        path = args.project / relative
        try:
            if scan_imports(path.read_text(encoding="utf-8"), names, path=str(path)):
                static_hits.add(relative)
        except LibshiftError:
            pass
    print("files requiring migration:")
    for relative in selected:
        kinds = []
        if relative in static_hits:
            kinds.append("static")
        if relative not in static_hits or _has_dynamic_use(graph, args.project, relative, names):
            kinds.append("dynamic")
        print(f"  {relative.as_posix()} [{', '.join(kinds)}]")
    return EXIT_OK


def _has_dynamic_use(graph, project: Path, relative: Path, names: ImportNameSet) -> bool:
    root = project.resolve()
    for edge in graph.edges:
        if edge.caller.owner.kind != "project" or edge.callee.owner.kind != "library":
            continue
        if edge.callee.owner.import_name not in names.import_names:
            continue
        try:
            if Path(edge.caller.file).resolve().relative_to(root) == relative:
                return True
        except (ValueError, OSError):
            continue
    return False


def _cmd_hunks(args: argparse.Namespace) -> int:
    names = ImportNameSet(
        library="source",
        import_names=frozenset(
            n.strip() for n in args.source_import_names.split(",") if n.strip()
        ),
    )
    original = args.original.read_text(encoding="utf-8")
    migrated = args.migrated.read_text(encoding="utf-8")
    tokens = merge.source_token_set(original, names) if names.import_names else frozenset()
    rows = []
    for hunk in merge.diff_files(original, migrated):
        hunk_class = merge.classify_hunk(hunk, names, tokens)
        rows.append({
            "old_start": hunk.old_start,
            "removals": hunk.removals,
            "new_start": hunk.new_start,
            "additions": hunk.additions,
            "verdict": hunk_class.verdict.value,
            "reason": hunk_class.reason.value,
        })
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def _cmd_grade(args: argparse.Namespace) -> int:
    premig = TestReport(stage=Stage.PREMIG, outcomes=parse_junit_file(args.premig))
    post = TestReport(stage=Stage.LLMMIG, outcomes=parse_junit_file(args.post))
    result = compare_reports(premig, post)
    print(result.as_percent())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    except LibshiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
