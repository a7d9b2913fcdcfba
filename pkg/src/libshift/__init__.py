"""libshift: LLM-assisted migration of a Python project from one library
to an analogous one, with call-graph discovery, deterministic repair
passes, and test-based grading."""

from .asyncprop import AsyncPlan, apply_async_plan, compute_async_plan, find_asynced_functions
from .callgrind import CallRecord, parse_callgrind, serialize_records
from .discovery import (
    CallGraph,
    FunctionRef,
    ImportNameSet,
    Owner,
    build_call_graph,
    classify_owner,
    import_names_from_env,
    resolve_import_names,
    scan_imports,
    select_migration_files,
)
from .jobspec import MigrationSpec, Outcome, Stage, TestReport
from .llm import (
    EndpointConfig,
    FileCheckpoint,
    MigrationPrompt,
    apply_migrated_files,
    build_prompt,
    extract_code,
    request_migration,
    restore_checkpoint,
)
from .merge import DiffHunk, HunkClass, Verdict, classify_hunk, diff_files, merge_skipped
from .pipeline import PipelineOptions, RunManifest, run_migration
from .prep import (
    EnvHandle,
    provision_environment,
    resolve_dependency_version,
    resolve_python_version,
    run_tests,
)
from .report import (
    MigrationRunReport,
    MigrationStatus,
    StageCorrectness,
    compare_reports,
    compute_effort,
    count_mig_loc,
    determine_status,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
