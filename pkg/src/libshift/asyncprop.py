"""Async/await propagation.

When a migration turns a synchronous function asynchronous, every
transitive project caller must become async and every call site must be
awaited, or previously passing tests break. This module detects the
functions the model made async, closes the requirement over the run-time
call graph, and rewrites the affected files by splicing text at exact
syntax-tree positions so untouched bytes stay untouched.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from pathlib import PurePath
from typing import Iterable, Mapping

from .discovery import CallGraph, FunctionRef, is_test_path
from .errors import SyntaxUnparsable

TEST_DECORATOR = "pytest.mark.asyncio"
TEST_SUPPORT_IMPORT = "import pytest"


@dataclass(frozen=True)
class AsyncPlan:
    """What must change: functions needing the async keyword and call
    sites needing the await keyword, closed over transitive callers."""

    asynced: frozenset[FunctionRef]
    to_async: frozenset[FunctionRef]
    to_await: frozenset[tuple[str, int, FunctionRef]]  # (file, line, callee)

    def is_empty(self) -> bool:
        return not (self.asynced or self.to_async or self.to_await)


@dataclass
class AsyncRewriteResult:
    files: dict[str, str]
    warnings: list[str] = field(default_factory=list)
    needs_async_test_support: bool = False


# --- qualified names ----------------------------------------------------------

def function_index(tree: ast.Module) -> dict[str, ast.FunctionDef | ast.AsyncFunctionDef]:
    """Map each function definition to its qualified name, using the
    runtime convention: ``Class.method``, ``outer.<locals>.inner``."""
    index: dict[str, ast.FunctionDef | ast.AsyncFunctionDef] = {}

    def visit(node: ast.AST, prefix: str) -> None:
        for child in ast.iter_child_nodes(node):
            if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef)):
                qualified = prefix + child.name
                index[qualified] = child
                visit(child, qualified + ".<locals>.")
            elif isinstance(child, ast.ClassDef):
                visit(child, prefix + child.name + ".")
            else:
                visit(child, prefix)

    visit(tree, "")
    return index


def _parse(source: str, path: str) -> ast.Module:
    try:
        return ast.parse(source)
    except (SyntaxError, ValueError) as exc:
        raise SyntaxUnparsable(path, str(exc)) from exc


def find_asynced_functions(before: str, after: str, *, path: str = "<string>") -> frozenset[str]:
    """Qualified names that were synchronous before migration and are
    asynchronous after it. Functions that only exist in the migrated
    version were introduced by the model and have no outside callers, so
    they never count."""
    before_defs = function_index(_parse(before, path))
    after_defs = function_index(_parse(after, path))
    return frozenset(
        name
        for name, node in after_defs.items()
        if isinstance(node, ast.AsyncFunctionDef)
        and name in before_defs
        and not isinstance(before_defs[name], ast.AsyncFunctionDef)
    )


# --- plan computation ----------------------------------------------------------

def compute_async_plan(asynced: Iterable[FunctionRef], graph: CallGraph) -> AsyncPlan:
    """Close the async requirement over transitive project-owned callers
    and collect every project call site of an async-becoming function."""
    asynced = frozenset(asynced)
    async_keys = {(f.file, f.qualified_name) for f in asynced}
    to_async: dict[tuple[str, str], FunctionRef] = {}

    changed = True
    while changed:
        changed = False
        for edge in graph.edges:
            callee_key = (edge.callee.file, edge.callee.qualified_name)
            if callee_key not in async_keys and callee_key not in to_async:
                continue
            caller_key = (edge.caller.file, edge.caller.qualified_name)
            if edge.caller.owner.kind != "project":
                continue
            if caller_key in async_keys or caller_key in to_async:
                continue
            to_async[caller_key] = edge.caller
            changed = True

    members = async_keys | to_async.keys()
    to_await = frozenset(
        (edge.caller.file, edge.line, edge.callee)
        for edge in graph.edges
        if edge.caller.owner.kind == "project"
        and (edge.callee.file, edge.callee.qualified_name) in members
    )
    return AsyncPlan(asynced, frozenset(to_async.values()), to_await)


# --- concrete-syntax splicing ---------------------------------------------------

# Ties at one offset apply lowest-priority last, which lands its text first.
_PRIO_IMPORT = 0
_PRIO_DECORATOR = 1
_PRIO_KEYWORD = 2
_PRIO_CLOSE_PAREN = 3


@dataclass(frozen=True)
class _Splice:
    offset: int
    text: str
    priority: int


class _SourceMap:
    """Translate AST (line, utf-8 byte column) positions to character offsets."""

    def __init__(self, text: str):
        self.lines = text.splitlines(keepends=True)
        self.starts = [0]
        for line in self.lines:
            self.starts.append(self.starts[-1] + len(line))

    def offset(self, lineno: int, byte_col: int) -> int:
        line = self.lines[lineno - 1]
        chars = len(line.encode("utf-8")[:byte_col].decode("utf-8"))
        return self.starts[lineno - 1] + chars

    def line_start(self, lineno: int) -> int:
        return self.starts[lineno - 1]

    def indent_of(self, lineno: int) -> str:
        line = self.lines[lineno - 1]
        return line[: len(line) - len(line.lstrip())]


def _apply_splices(text: str, splices: list[_Splice]) -> str:
    for splice in sorted(splices, key=lambda s: (s.offset, s.priority), reverse=True):
        text = text[: splice.offset] + splice.text + text[splice.offset :]
    return text


def _parent_map(tree: ast.AST) -> dict[int, ast.AST]:
    return {
        id(child): parent
        for parent in ast.walk(tree)
        for child in ast.iter_child_nodes(parent)
    }


def _enclosing_function(node: ast.AST, parents: Mapping[int, ast.AST]):
    current = parents.get(id(node))
    while current is not None:
        if isinstance(current, (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda)):
            return current
        current = parents.get(id(current))
    return None


def _terminal(qualified_name: str) -> str:
    return qualified_name.split(".")[-1]


def _call_name(call: ast.Call) -> str | None:
    func = call.func
    if isinstance(func, ast.Name):
        return func.id
    if isinstance(func, ast.Attribute):
        return func.attr
    return None


def _needs_parens(call: ast.Call, parents: Mapping[int, ast.AST]) -> bool:
    # `await f().g` parses as `await (f().g)`; chained access needs
    # the await isolated: `(await f()).g`.
    parent = parents.get(id(call))
    if isinstance(parent, ast.Attribute) and parent.value is call:
        return True
    if isinstance(parent, ast.Subscript) and parent.value is call:
        return True
    if isinstance(parent, ast.Call) and parent.func is call:
        return True
    return False


def _has_asyncio_decorator(node: ast.FunctionDef | ast.AsyncFunctionDef) -> bool:
    for decorator in node.decorator_list:
        try:
            rendered = ast.unparse(decorator)
        except Exception:  # pragma: no cover - unparse is total on parsed trees
            continue
        if rendered in (TEST_DECORATOR, TEST_DECORATOR + "()"):
            return True
    return False


def _binds_pytest(tree: ast.Module) -> bool:
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for alias in node.names:
                if alias.name == "pytest" and alias.asname in (None, "pytest"):
                    return True
    return False


def _import_insert_line(tree: ast.Module) -> int:
    """First line after the docstring and ``__future__`` imports."""
    lineno = 1
    for statement in tree.body:
        is_docstring = (
            isinstance(statement, ast.Expr)
            and isinstance(statement.value, ast.Constant)
            and isinstance(statement.value.value, str)
        )
        is_future = isinstance(statement, ast.ImportFrom) and statement.module == "__future__"
        if is_docstring or is_future:
            lineno = (statement.end_lineno or statement.lineno) + 1
            continue
        return statement.lineno
    return lineno


def _is_test_function(ref: FunctionRef) -> bool:
    return _terminal(ref.qualified_name).startswith("test") and is_test_path(
        PurePath(ref.file)
    )


def apply_async_plan(
    files: Mapping[str, str],
    plan: AsyncPlan,
) -> AsyncRewriteResult:
    """Rewrite the given sources per the plan.

    Adds the async keyword to to-async definitions not already async,
    the await keyword to to-await calls not already awaited, and the
    asyncio test decorator to async-becoming test functions, scheduling
    the async test support package for installation. Everything else is
    preserved byte-for-byte; unresolvable targets become warnings.
    """
    result = AsyncRewriteResult(files=dict(files))
    for path, source in files.items():
        try:
            rewritten = _rewrite_file(path, source, plan, result)
        except SyntaxUnparsable as exc:
            result.warnings.append(f"{path}: skipped, not parsable ({exc})")
            continue
        result.files[path] = rewritten
    return result


def _rewrite_file(path: str, source: str, plan: AsyncPlan, result: AsyncRewriteResult) -> str:
    tree = _parse(source, path)
    parents = _parent_map(tree)
    index = function_index(tree)
    sources = _SourceMap(source)
    splices: list[_Splice] = []
    decorated = False

    for ref in sorted(plan.to_async, key=lambda r: r.qualified_name):
        if ref.file != path:
            continue
        node = index.get(ref.qualified_name)
        if node is None:
            result.warnings.append(
                f"{path}: function {ref.qualified_name!r} not found for async keyword"
            )
            continue
        if isinstance(node, ast.AsyncFunctionDef):
            continue  # already asynchronous
        splices.append(_Splice(
            offset=sources.offset(node.lineno, node.col_offset),
            text="async ",
            priority=_PRIO_KEYWORD,
        ))

    calls_by_line: dict[int, list[ast.Call]] = {}
    for node in ast.walk(tree):
        if isinstance(node, ast.Call):
            calls_by_line.setdefault(node.lineno, []).append(node)

    for file, line, callee in sorted(plan.to_await, key=lambda t: (t[1], t[2].qualified_name)):
        if file != path:
            continue
        wanted = _terminal(callee.qualified_name)
        matches = [c for c in calls_by_line.get(line, []) if _call_name(c) == wanted]
        if not matches:
            matches = [
                c for c in ast.walk(tree)
                if isinstance(c, ast.Call)
                and _call_name(c) == wanted
                and c.lineno <= line <= (c.end_lineno or c.lineno)
            ]
        if not matches:
            result.warnings.append(
                f"{path}:{line}: call to {wanted!r} not found for await keyword"
            )
            continue
        if len(matches) > 1:
            result.warnings.append(
                f"{path}:{line}: {len(matches)} calls to {wanted!r} on one line; awaiting all"
            )
        for call in matches:
            parent = parents.get(id(call))
            if isinstance(parent, ast.Await):
                continue  # already awaited
            enclosing = _enclosing_function(call, parents)
            if enclosing is None:
                result.warnings.append(
                    f"{path}:{line}: module-level call to {wanted!r} cannot be awaited"
                )
                continue
            if isinstance(enclosing, ast.Lambda):
                result.warnings.append(
                    f"{path}:{line}: call to {wanted!r} inside a lambda cannot be awaited"
                )
                continue
            start = sources.offset(call.lineno, call.col_offset)
            if _needs_parens(call, parents):
                end = sources.offset(call.end_lineno, call.end_col_offset)
                splices.append(_Splice(end, ")", _PRIO_CLOSE_PAREN))
                splices.append(_Splice(start, "(await ", _PRIO_KEYWORD))
            else:
                splices.append(_Splice(start, "await ", _PRIO_KEYWORD))

    for ref in sorted(plan.asynced | plan.to_async, key=lambda r: r.qualified_name):
        if ref.file != path or not _is_test_function(ref):
            continue
        node = index.get(ref.qualified_name)
        if node is None:
            continue  # already warned above if it was a to-async target
        result.needs_async_test_support = True
        if _has_asyncio_decorator(node):
            continue
        splices.append(_Splice(
            offset=sources.line_start(node.lineno),
            text=f"{sources.indent_of(node.lineno)}@{TEST_DECORATOR}\n",
            priority=_PRIO_DECORATOR,
        ))
        decorated = True

    if decorated and not _binds_pytest(tree):
        splices.append(_Splice(
            offset=sources.line_start(_import_insert_line(tree)),
            text=TEST_SUPPORT_IMPORT + "\n",
            priority=_PRIO_IMPORT,
        ))

    if not splices:
        return source
    rewritten = _apply_splices(source, splices)
    try:
        ast.parse(rewritten)
    except SyntaxError as exc:
        result.warnings.append(
            f"{path}: rewrite would break the file ({exc}); leaving it unchanged"
        )
        return source
    return rewritten
