"""Finding the files that need migration.

Two complementary signals: static import scanning over the project's
sources, and a run-time call graph built from a CallGrind-format profile
whose functions are classified by owner (project / system / library).
A file needs migration when it imports the source library or when one of
its functions was observed calling into the source library at run time.
"""

from __future__ import annotations

import ast
import zipfile
from dataclasses import dataclass, field
from pathlib import Path, PurePath
from typing import Callable, Iterable, Mapping

from .callgrind import CallRecord
from .errors import MalformedArchive, NoImportNames, SyntaxUnparsable
from .prep import EnvHandle

OwnerKind = str  # "project" | "system" | "library"


@dataclass(frozen=True)
class ImportNameSet:
    """Top-level importable module names a distribution provides.

    The distribution name and the import name often differ (install
    `pyyaml`, write `import yaml`), and one distribution can expose
    several import names.
    """

    library: str
    import_names: frozenset[str]


@dataclass(frozen=True)
class Owner:
    kind: OwnerKind
    import_name: str = ""

    def __post_init__(self) -> None:
        if self.kind == "library" and not self.import_name:
            raise ValueError("library owner requires an import name")


PROJECT = Owner("project")
SYSTEM = Owner("system")


@dataclass(frozen=True)
class FunctionRef:
    """A function node: identified by (file, qualified name) within a run."""

    file: str
    qualified_name: str
    owner: Owner = field(compare=False)


@dataclass(frozen=True)
class CallEdge:
    caller: FunctionRef
    callee: FunctionRef
    line: int


@dataclass(frozen=True)
class CallGraph:
    nodes: frozenset[FunctionRef]
    edges: tuple[CallEdge, ...]


@dataclass(frozen=True)
class ImportHit:
    """One import statement binding a source-library module in a file."""

    module: str     # full dotted module as written
    bound_name: str  # the local name the statement binds
    line: int


# --- import name resolution ----------------------------------------------


def _filter_private(names: set[str]) -> frozenset[str]:
    # Leading-underscore top-level modules (C-extension companions like
    # _yaml) are implementation details, not public import names. Keep
    # them only when nothing else exists.
    public = {n for n in names if not n.startswith("_")}
    return frozenset(public or names)


def resolve_import_names(library: str, package_archive: Path) -> ImportNameSet:
    """Derive the top-level import names from a wheel archive.

    Prefers the metadata directory's top-level record; falls back to the
    top-level packages and modules present in the payload.
    """
    try:
        archive = zipfile.ZipFile(package_archive)
    except (OSError, zipfile.BadZipFile) as exc:
        raise MalformedArchive(f"{package_archive}: {exc}") from exc

    with archive:
        entries = archive.namelist()
        dist_info = {PurePath(e).parts[0] for e in entries
                     if PurePath(e).parts[0].endswith(".dist-info")}
        if not dist_info:
            raise MalformedArchive(f"{package_archive}: no .dist-info metadata directory")

        names: set[str] = set()
        for info_dir in dist_info:
            record = f"{info_dir}/top_level.txt"
            if record in entries:
                text = archive.read(record).decode("utf-8")
                names.update(line.strip() for line in text.splitlines() if line.strip())
        if not names:
            for entry in entries:
                parts = PurePath(entry).parts
                head = parts[0]
                if head.endswith((".dist-info", ".data")):
                    continue
                if len(parts) > 1 and f"{head}/__init__.py" in entries:
                    names.add(head)
                elif len(parts) == 1 and head.endswith(".py"):
                    names.add(head[:-3])

    names = {n for n in names if n.isidentifier()}
    if not names:
        raise NoImportNames(f"{package_archive} declares no importable modules")
    return ImportNameSet(library=library, import_names=_filter_private(names))


def import_names_from_env(env: EnvHandle, library: str) -> ImportNameSet:
    """Derive import names from the library's installed metadata in the venv."""
    normalized = library.lower().replace("-", "_")
    for info_dir in sorted(env.site_packages_path.glob("*.dist-info")):
        stem = info_dir.name[: -len(".dist-info")]
        dist = stem.rsplit("-", 1)[0].lower()
        if dist != normalized:
            continue
        names: set[str] = set()
        top_level = info_dir / "top_level.txt"
        if top_level.is_file():
            names = {line.strip() for line in top_level.read_text().splitlines()
                     if line.strip()}
        if not names:
            record = info_dir / "RECORD"
            if record.is_file():
                for line in record.read_text().splitlines():
                    path = line.split(",", 1)[0]
                    head = PurePath(path).parts[0] if path else ""
                    if head.endswith((".dist-info", ".data")) or head.startswith(".."):
                        continue
                    if head.endswith(".py"):
                        names.add(head[:-3])
                    elif "/" in path or "\\" in path:
                        names.add(head)
        names = {n for n in names if n.isidentifier()}
        if names:
            return ImportNameSet(library=library, import_names=_filter_private(names))
    raise NoImportNames(f"{library} is not installed in {env.site_packages_path}")


# --- static import scanning ------------------------------------------------


def scan_imports(source: str, names: ImportNameSet, *, path: str = "<string>") -> frozenset[ImportHit]:
    """Find every import statement whose top-level module is a source name.

    Imports anywhere in the file count, including ones nested in
    functions or conditionals.
    """
    try:
        tree = ast.parse(source)
    except (SyntaxError, ValueError) as exc:
        raise SyntaxUnparsable(path, str(exc)) from exc

    hits: set[ImportHit] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for alias in node.names:
                top = alias.name.split(".")[0]
                if top in names.import_names:
                    bound = alias.asname or alias.name.split(".")[0]
                    hits.add(ImportHit(alias.name, bound, node.lineno))
        elif isinstance(node, ast.ImportFrom):
            if node.level:  # relative import, never a third-party library
                continue
            module = node.module or ""
            top = module.split(".")[0]
            if top in names.import_names:
                for alias in node.names:
                    bound = alias.asname or alias.name
                    hits.add(ImportHit(module, bound, node.lineno))
    return frozenset(hits)


# --- ownership classification ----------------------------------------------


def classify_owner(
    file: str,
    project_root: Path,
    env: EnvHandle,
    libraries: Mapping[str, ImportNameSet] | None = None,
) -> Owner:
    """Total classification of where a function's file lives.

    Angle-bracketed sentinels (``<frozen os>``, ``<string>``) are runtime
    internals; site-packages paths belong to the library named by the
    first path segment below site-packages; project paths are the
    project's own; everything else is treated as system. Site-packages
    wins over the project root so a venv nested inside the project never
    claims library code.
    """
    text = file.strip()
    if text.startswith("<") and text.endswith(">"):
        return SYSTEM
    path = Path(text)
    site = env.site_packages_path
    try:
        below_site = path.resolve().relative_to(site.resolve())
    except (ValueError, OSError):
        below_site = None
    if below_site is not None and below_site.parts:
        head = below_site.parts[0]
        segment = head[:-3] if head.endswith(".py") else head
        if segment:
            return Owner("library", segment)
    try:
        path.resolve().relative_to(project_root.resolve())
        return PROJECT
    except (ValueError, OSError):
        return SYSTEM


# --- call graph --------------------------------------------------------------


def build_call_graph(
    records: Iterable[CallRecord],
    classifier: Callable[[str], Owner],
) -> CallGraph:
    """Deduplicate record endpoints into classified nodes and keep every
    call edge with its call-site line."""
    nodes: dict[tuple[str, str], FunctionRef] = {}

    def node(file: str, qualified_name: str) -> FunctionRef:
        key = (file, qualified_name)
        if key not in nodes:
            nodes[key] = FunctionRef(file, qualified_name, classifier(file))
        return nodes[key]

    edges = tuple(
        CallEdge(
            caller=node(r.caller_file, r.caller_function),
            callee=node(r.callee_file, r.callee_function),
            line=r.call_line,
        )
        for r in records
    )
    return CallGraph(nodes=frozenset(nodes.values()), edges=edges)


# --- migration file selection -------------------------------------------------

_TEST_DIR_NAMES = {"tests", "test"}


def is_test_path(path: PurePath) -> bool:
    """Conventional test-discovery match: test_*/*_test files or tests/ dirs."""
    if any(part in _TEST_DIR_NAMES for part in path.parts[:-1]):
        return True
    stem = path.stem
    return stem.startswith("test_") or stem.endswith("_test") or stem == "test"


def iter_project_sources(project_root: Path) -> list[Path]:
    """All tracked-looking Python files under the project, venvs excluded."""
    skip_dirs = {".git", ".hg", ".venv", "venv", "__pycache__", ".libshift",
                 "node_modules", ".tox", ".eggs"}
    found = []
    for path in sorted(project_root.rglob("*.py")):
        relative = path.relative_to(project_root)
        if any(part in skip_dirs for part in relative.parts):
            continue
        found.append(path)
    return found


def select_migration_files(
    project_root: Path,
    graph: CallGraph,
    source_names: ImportNameSet,
) -> list[Path]:
    """Union of files with a static source-library import and files whose
    project-owned functions call into the source library at run time.

    Test files are excluded (they are the grading oracle) but their graph
    nodes remain available to later passes. Result is project-relative
    and lexicographically ordered.
    """
    selected: set[Path] = set()

    for path in iter_project_sources(project_root):
        relative = path.relative_to(project_root)
        if is_test_path(relative):
            continue
        try:
            hits = scan_imports(path.read_text(encoding="utf-8"), source_names,
                                path=str(path))
        except SyntaxUnparsable:
            continue  # reported by caller-level logging; dynamic branch still applies
        if hits:
            selected.add(relative)

    root = project_root.resolve()
    for edge in graph.edges:
        if edge.caller.owner.kind != "project":
            continue
        if edge.callee.owner.kind != "library":
            continue
        if edge.callee.owner.import_name not in source_names.import_names:
            continue
        try:
            relative = Path(edge.caller.file).resolve().relative_to(root)
        except (ValueError, OSError):
            continue
        if not is_test_path(relative):
            selected.add(relative)

    return sorted(selected, key=lambda p: p.as_posix())
