"""End-to-end orchestration: prep, discovery, model migration, the two
repair passes, and grading, with every intermediate artifact persisted
under ``<out_dir>/<run_id>/``.

The post-processing passes run only when the preceding stage left some
baseline test failing and the pass is actually applicable (skipped hunks
exist / asynced functions were detected).
"""

from __future__ import annotations

import ast
import concurrent.futures
import datetime as _dt
import json
import logging
import uuid
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from . import asyncprop, merge
from .callgrind import parse_callgrind
from .discovery import (
    CallGraph,
    FunctionRef,
    ImportNameSet,
    Owner,
    build_call_graph,
    classify_owner,
    import_names_from_env,
    iter_project_sources,
    select_migration_files,
)
from .errors import (
    ContextOverflow,
    EmptyResponse,
    InstallFailed,
    LibshiftError,
    NoBaselinePassingTests,
    NoCodeBlock,
    RateLimited,
    StageError,
)
from .jobspec import MigrationSpec, Stage, TestReport, canonical_package_name
from .llm import (
    EndpointConfig,
    FileCheckpoint,
    apply_migrated_files,
    build_prompt,
    extract_code,
    request_migration,
    save_checkpoint,
)
from .prep import (
    ASYNC_TEST_SUPPORT_PACKAGE,
    EnvHandle,
    install_package,
    load_project_overrides,
    provision_environment,
    run_tests,
)
from .report import (
    MigrationRunReport,
    StageCorrectness,
    compare_reports,
    compute_effort,
    count_mig_loc,
    determine_status,
    inherit_correctness,
)

log = logging.getLogger("libshift")

# Model-response failures that leave one file unmigrated instead of
# aborting the whole job.
_SOFT_REQUEST_ERRORS = (ContextOverflow, NoCodeBlock, EmptyResponse, RateLimited)


@dataclass
class PipelineOptions:
    endpoint: EndpointConfig
    parallel: int = 4
    shim_source: Path | None = None
    manual_fixed: Path | None = None
    reference_date: date | None = None
    test_timeout_s: int | None = None


@dataclass
class RunManifest:
    """Where everything a run produced lives; written even on failure."""

    run_id: str
    created_at: str
    stage_timestamps: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    exit_status: str = "running"

    def mark(self, stage: str) -> None:
        self.stage_timestamps[stage] = _utc_now()

    def write(self, path: Path) -> None:
        payload = {
            "run_id": self.run_id,
            "created_at": self.created_at,
            "stage_timestamps": self.stage_timestamps,
            "artifacts": self.artifacts,
            "exit_status": self.exit_status,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def new_run_id() -> str:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%d-%H%M%S")
    return f"{stamp}-{uuid.uuid4().hex[:8]}"


def run_migration(
    spec: MigrationSpec,
    options: PipelineOptions,
    *,
    env: EnvHandle | None = None,
) -> MigrationRunReport:
    """Run the whole migration pipeline for one job.

    A pre-provisioned environment can be injected to skip provisioning
    (the environment must already contain the runner shim and the
    project's dependencies).
    """
    spec.validate()
    run_id = new_run_id()
    run_dir = spec.out_dir / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(run_id=run_id, created_at=_utc_now())
    manifest.artifacts["run_dir"] = str(run_dir)
    stage_name = "prep"
    try:
        report = _run_stages(spec, options, env, run_dir, manifest)
        manifest.exit_status = "ok"
        return report
    except StageError as exc:
        manifest.exit_status = f"failed:{exc.stage}"
        raise
    except LibshiftError as exc:
        manifest.exit_status = f"failed:{stage_name}"
        raise StageError(stage_name, exc) from exc
    finally:
        manifest.write(run_dir / "manifest.json")


def _stage(manifest: RunManifest, name: str):
    log.info("[%s] starting", name)
    manifest.mark(name)


def _fail(stage: str, exc: Exception) -> StageError:
    log.error("[%s] failed: %s", stage, exc)
    return StageError(stage, exc)


def _run_stages(
    spec: MigrationSpec,
    options: PipelineOptions,
    env: EnvHandle | None,
    run_dir: Path,
    manifest: RunManifest,
) -> MigrationRunReport:
    project_root = spec.project_root
    warnings: list[str] = []
    reports_dir = run_dir / "reports"
    overrides = load_project_overrides(spec.out_dir)
    if options.test_timeout_s and not overrides.timeout_s:
        overrides.timeout_s = options.test_timeout_s

    # --- prep: environment + baseline test run (profiled) -------------
    _stage(manifest, "prep")
    try:
        if env is None:
            env = provision_environment(
                spec,
                shim_source=options.shim_source,
                reference_date=options.reference_date,
            )
            manifest.artifacts["venv"] = str(env.venv_path)
        premig_report, profile_path = run_tests(
            env, project_root, Stage.PREMIG, with_profiling=True,
            artifact_dir=reports_dir, overrides=overrides,
        )
        if not premig_report.passing_ids():
            raise NoBaselinePassingTests(
                "no test passes before migration; the suite cannot grade this job"
            )
    except StageError:
        raise
    except Exception as exc:
        raise _fail("prep", exc) from exc
    manifest.artifacts["premig_report"] = str(reports_dir / "premig.xml")
    manifest.artifacts["premig_profile"] = str(profile_path)

    # --- discovery: what needs migration -------------------------------
    _stage(manifest, "discovery")
    try:
        source_names = import_names_from_env(env, spec.source_lib)
        records = parse_callgrind(Path(profile_path).read_text(encoding="utf-8"))
        libraries = {name: source_names for name in source_names.import_names}

        def classifier(file: str) -> Owner:
            return classify_owner(file, project_root, env, libraries)

        graph = build_call_graph(records, classifier)
        selected = select_migration_files(project_root, graph, source_names)
        warnings.extend(_unparsable_file_warnings(project_root))
    except Exception as exc:
        raise _fail("discovery", exc) from exc
    log.info("[discovery] %d file(s) require migration: %s",
             len(selected), ", ".join(p.as_posix() for p in selected))

    if not selected:
        warnings.append("no files require migration; project left untouched")
        report = MigrationRunReport(
            spec=spec, selected_files=[], per_stage=[],
            status=determine_status(_trivial_correct(premig_report)),
            migloc_auto=0, warnings=warnings,
        )
        report.write(run_dir / "run_report.json")
        manifest.artifacts["run_report"] = str(run_dir / "run_report.json")
        return report

    # --- llm migration round -------------------------------------------
    _stage(manifest, "llmmig")
    per_stage: list[StageCorrectness] = []
    try:
        source_version = _source_version(spec, env)
        migrated, request_warnings = _request_all(
            spec, options, run_dir, project_root, selected, source_version
        )
        warnings.extend(request_warnings)
        llm_checkpoint = apply_migrated_files(project_root, migrated, Stage.LLMMIG)
        save_checkpoint(llm_checkpoint, run_dir / "checkpoints" / "llmmig")
        llm_report, _ = run_tests(env, project_root, Stage.LLMMIG,
                                  artifact_dir=reports_dir, overrides=overrides)
        per_stage.append(compare_reports(premig_report, llm_report))
    except StageError:
        raise
    except Exception as exc:
        raise _fail("llmmig", exc) from exc
    manifest.artifacts["llmmig_report"] = str(reports_dir / "llmmig.xml")
    manifest.artifacts["checkpoint_llmmig"] = str(run_dir / "checkpoints" / "llmmig")

    # --- post-processing round ------------------------------------------
    if per_stage[-1].correctness < 1:
        entry = _merge_stage(
            spec, env, run_dir, manifest, project_root, overrides, reports_dir,
            source_names, llm_checkpoint, premig_report, per_stage[-1], warnings,
        )
        per_stage.append(entry)

    if per_stage[-1].correctness < 1:
        entry = _async_stage(
            spec, env, run_dir, manifest, project_root, overrides, reports_dir,
            graph, llm_checkpoint, premig_report, per_stage[-1], warnings,
        )
        per_stage.append(entry)

    # --- grading ----------------------------------------------------------
    _stage(manifest, "report")
    premig_files, final_files = _snapshots(project_root, run_dir)
    migloc_auto = count_mig_loc(premig_files, final_files)
    migloc_manual = None
    effort_auto = effort_manual = None
    if options.manual_fixed is not None:
        manual_files = {
            path: _read_or(options.manual_fixed / path, final_files[path])
            for path in final_files
        }
        migloc_manual = count_mig_loc(final_files, manual_files)
        if migloc_auto + migloc_manual > 0:
            effort_auto, effort_manual = compute_effort(migloc_auto, migloc_manual)
        else:
            warnings.append("no changed lines in either phase; effort split undefined")

    report = MigrationRunReport(
        spec=spec,
        selected_files=[p.as_posix() for p in selected],
        per_stage=per_stage,
        status=determine_status(per_stage[-1]),
        migloc_auto=migloc_auto,
        migloc_manual=migloc_manual,
        effort_auto=effort_auto,
        effort_manual=effort_manual,
        warnings=warnings,
    )
    report.write(run_dir / "run_report.json")
    manifest.artifacts["run_report"] = str(run_dir / "run_report.json")
    log.info("[report] status=%s correctness=%s", report.status,
             per_stage[-1].as_percent())
    return report


def _trivial_correct(premig_report: TestReport) -> StageCorrectness:
    return compare_reports(premig_report, premig_report)


def _read_or(path: Path, fallback: str) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError:
        return fallback


def _unparsable_file_warnings(project_root: Path) -> list[str]:
    found = []
    for path in iter_project_sources(project_root):
        try:
            ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, ValueError) as exc:
            found.append(
                f"{path.relative_to(project_root).as_posix()}: "
                f"not parsable, static scan skipped ({exc})"
            )
    return found


def _source_version(spec: MigrationSpec, env: EnvHandle) -> str:
    """Installed version of the source lib, else its requirements pin,
    else the literal "unknown"."""
    key = canonical_package_name(spec.source_lib)
    for name, version in env.installed_packages.items():
        if canonical_package_name(name) == key:
            return version
    for requirements in spec.requirements_files:
        try:
            lines = requirements.read_text(encoding="utf-8").splitlines()
        except OSError:
            continue
        for raw in lines:
            line = raw.split("#")[0].strip()
            if "==" in line:
                name, _, version = line.partition("==")
                if canonical_package_name(name.strip()) == key:
                    return version.strip()
    return "unknown"


def _request_all(
    spec: MigrationSpec,
    options: PipelineOptions,
    run_dir: Path,
    project_root: Path,
    selected: list[Path],
    source_version: str,
) -> tuple[dict[str, str], list[str]]:
    """Prompt the endpoint for every selected file with bounded parallelism.

    Files whose request fails in a model-shaped way (token overflow, no
    code block, empty or rate-limited response) are left unmigrated and
    flagged; results are committed in deterministic file order.
    """
    prompts_dir = run_dir / "prompts"
    responses_dir = run_dir / "responses"
    outcomes: dict[str, tuple[str | None, str | None]] = {}

    def migrate_one(relative: Path) -> tuple[str | None, str | None]:
        code = (project_root / relative).read_text(encoding="utf-8")
        prompt = build_prompt(spec, source_version, code)
        _write_artifact(prompts_dir / f"{relative.as_posix()}.txt", prompt.rendered)
        try:
            response = request_migration(options.endpoint, prompt)
        except _SOFT_REQUEST_ERRORS as exc:
            return None, f"{relative.as_posix()}: response failure, file left unmigrated ({exc})"
        _write_artifact(responses_dir / f"{relative.as_posix()}.txt", response)
        try:
            return extract_code(response), None
        except NoCodeBlock as exc:
            return None, f"{relative.as_posix()}: response failure, file left unmigrated ({exc})"

    workers = max(1, options.parallel)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {relative: pool.submit(migrate_one, relative) for relative in selected}
        for relative, future in futures.items():
            outcomes[relative.as_posix()] = future.result()

    migrated: dict[str, str] = {}
    warnings: list[str] = []
    for key in sorted(outcomes):
        text, warning = outcomes[key]
        if warning:
            warnings.append(warning)
        elif text is not None:
            migrated[key] = text
    return migrated, warnings


def _write_artifact(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _merge_stage(
    spec: MigrationSpec,
    env: EnvHandle,
    run_dir: Path,
    manifest: RunManifest,
    project_root: Path,
    overrides,
    reports_dir: Path,
    source_names: ImportNameSet,
    llm_checkpoint: FileCheckpoint,
    premig_report: TestReport,
    previous: StageCorrectness,
    warnings: list[str],
) -> StageCorrectness:
    """Reinsert model-skipped code, then re-run the tests if anything merged."""
    _stage(manifest, "merge")
    try:
        merged: dict[str, str] = {}
        hunks_dir = run_dir / "hunks"
        for relative in sorted(llm_checkpoint.files):
            original = llm_checkpoint.files[relative]
            if original is None:
                continue
            current = (project_root / relative).read_text(encoding="utf-8")
            hunks = merge.diff_files(original, current)
            tokens = merge.source_token_set(original, source_names, path=relative)
            classified = [(h, merge.classify_hunk(h, source_names, tokens)) for h in hunks]
            _write_artifact(
                hunks_dir / f"{relative}.json",
                json.dumps([_hunk_debug(h, c) for h, c in classified], indent=2) + "\n",
            )
            if any(c.verdict is merge.Verdict.SKIPPED for _, c in classified):
                merged[relative] = merge.merge_skipped(original, current, classified)
        manifest.artifacts["hunks"] = str(hunks_dir)

        if not merged:
            log.info("[merge] no skipped code detected; stage not applicable")
            return inherit_correctness(previous, Stage.MERGE)

        checkpoint = apply_migrated_files(project_root, merged, Stage.MERGE)
        save_checkpoint(checkpoint, run_dir / "checkpoints" / "merge")
        manifest.artifacts["checkpoint_merge"] = str(run_dir / "checkpoints" / "merge")
        merge_report, _ = run_tests(env, project_root, Stage.MERGE,
                                    artifact_dir=reports_dir, overrides=overrides)
        manifest.artifacts["merge_report"] = str(reports_dir / "merge.xml")
        return compare_reports(premig_report, merge_report)
    except StageError:
        raise
    except Exception as exc:
        raise _fail("merge", exc) from exc


def _hunk_debug(hunk: merge.DiffHunk, hunk_class: merge.HunkClass) -> dict:
    return {
        "old_start": hunk.old_start,
        "removals": hunk.removals,
        "new_start": hunk.new_start,
        "additions": hunk.additions,
        "verdict": hunk_class.verdict.value,
        "reason": hunk_class.reason.value,
    }


def _async_stage(
    spec: MigrationSpec,
    env: EnvHandle,
    run_dir: Path,
    manifest: RunManifest,
    project_root: Path,
    overrides,
    reports_dir: Path,
    graph: CallGraph,
    llm_checkpoint: FileCheckpoint,
    premig_report: TestReport,
    previous: StageCorrectness,
    warnings: list[str],
) -> StageCorrectness:
    """Propagate model-introduced asyncness through the call graph, then
    re-run the tests if any function was asynced."""
    _stage(manifest, "async")
    try:
        root = project_root.resolve()
        asynced: set[FunctionRef] = set()
        nodes = {(n.file, n.qualified_name): n for n in graph.nodes}
        for relative in sorted(llm_checkpoint.files):
            before = llm_checkpoint.files[relative]
            if before is None:
                continue
            after = (project_root / relative).read_text(encoding="utf-8")
            try:
                names = asyncprop.find_asynced_functions(before, after, path=relative)
            except Exception as exc:
                warnings.append(f"{relative}: async detection skipped ({exc})")
                continue
            file_key = str((root / relative))
            for qualified in names:
                asynced.add(nodes.get(
                    (file_key, qualified),
                    FunctionRef(file_key, qualified, Owner("project")),
                ))

        if not asynced:
            log.info("[async] no asynced functions detected; stage not applicable")
            return inherit_correctness(previous, Stage.ASYNC)

        plan = asyncprop.compute_async_plan(asynced, graph)
        target_files = {ref.file for ref in plan.to_async}
        target_files |= {file for file, _, _ in plan.to_await}
        target_files |= {ref.file for ref in plan.asynced}
        sources = {}
        for file in sorted(target_files):
            path = Path(file)
            if path.is_file():
                sources[file] = path.read_text(encoding="utf-8")
        result = asyncprop.apply_async_plan(sources, plan)
        warnings.extend(sorted(result.warnings))

        changed = {}
        for file, text in result.files.items():
            if text == sources[file]:
                continue
            try:
                relative = str(Path(file).resolve().relative_to(root))
            except ValueError:
                warnings.append(f"{file}: outside the project root, not rewritten")
                continue
            changed[relative] = text
        if result.needs_async_test_support:
            try:
                install_package(env, ASYNC_TEST_SUPPORT_PACKAGE)
            except InstallFailed as exc:
                warnings.append(
                    f"could not install {ASYNC_TEST_SUPPORT_PACKAGE} "
                    f"into the environment ({exc})"
                )
        if changed:
            checkpoint = apply_migrated_files(project_root, changed, Stage.ASYNC)
            save_checkpoint(checkpoint, run_dir / "checkpoints" / "async")
            manifest.artifacts["checkpoint_async"] = str(run_dir / "checkpoints" / "async")
        async_report, _ = run_tests(env, project_root, Stage.ASYNC,
                                    artifact_dir=reports_dir, overrides=overrides)
        manifest.artifacts["async_report"] = str(reports_dir / "async.xml")
        return compare_reports(premig_report, async_report)
    except StageError:
        raise
    except Exception as exc:
        raise _fail("async", exc) from exc


def _snapshots(project_root: Path, run_dir: Path) -> tuple[dict[str, str], dict[str, str]]:
    """(pre-migration texts, current texts) for every file any stage touched.

    The earliest checkpoint that recorded a file holds its pre-migration
    bytes; later checkpoints only add files first touched by their stage.
    """
    premig: dict[str, str] = {}
    for stage in ("llmmig", "merge", "async"):
        index_path = run_dir / "checkpoints" / stage / "checkpoint.json"
        if not index_path.is_file():
            continue
        index = json.loads(index_path.read_text(encoding="utf-8"))
        for relative, existed in index["files"].items():
            if relative in premig:
                continue
            if existed:
                saved = run_dir / "checkpoints" / stage / relative
                premig[relative] = saved.read_text(encoding="utf-8")
            else:
                premig[relative] = ""
    final = {
        relative: _read_or(project_root / relative, "")
        for relative in premig
    }
    return premig, final
