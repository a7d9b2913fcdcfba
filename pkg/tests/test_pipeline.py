"""End-to-end pipeline runs against an injected environment (a real
pip-less venv carrying a scripted shim) and a scripted chat endpoint.

Three scenarios mirror the pipeline's gating decisions: a clean
migration (no post-processing), a migration that dropped a helper
(merge runs), and a migration that made a function async (async
propagation runs).
"""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import pytest

from libshift.errors import StageError
from libshift.jobspec import MigrationSpec, Stage
from libshift.llm import EndpointConfig
from libshift.pipeline import PipelineOptions, run_migration
from libshift.report import MigrationStatus

from conftest import (
    fenced,
    make_fake_env,
    routed_script,
    scripted_shim,
    shim_call_count,
)

DATA = Path(__file__).parent / "data"


def write_project(root: Path, files: dict[str, str]) -> None:
    for relative, text in files.items():
        path = root / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def make_spec(tmp_path: Path, mock, *, source="toml", target="tomlkit") -> MigrationSpec:
    requirements = tmp_path / "requirements.txt"
    requirements.write_text(f"{source}==0.10.2\n")
    return MigrationSpec(
        project_root=tmp_path / "project",
        source_lib=source,
        target_lib=target,
        target_version="0.12.0",
        requirements_files=[requirements],
        model_id="test-model",
        api_base_url=mock.base_url,
        out_dir=tmp_path / "out",
    )


def options_for(mock) -> PipelineOptions:
    return PipelineOptions(
        endpoint=EndpointConfig(base_url=mock.base_url, model_id="test-model",
                                backoff_s=0.01, timeout_s=30),
        parallel=2,
    )


CONFIG_ORIGINAL = (
    "import toml\n"
    "\n"
    "\n"
    "def load_config(text):\n"
    "    return toml.loads(text)\n"
)

CONFIG_MIGRATED = (
    "import tomlkit\n"
    "\n"
    "\n"
    "def load_config(text):\n"
    "    return tomlkit.loads(text)\n"
)

CONFIG_TEST = (
    "from config import load_config\n"
    "\n"
    "\n"
    "def test_load_config():\n"
    "    assert load_config('x = 1')['x'] == 1\n"
)


def profile_for(project: Path, site: Path) -> str:
    return (
        "version: 1\ncreator: shim\npositions: line\nevents: calls\n\n"
        f"fl={project}/tests/test_config.py\n"
        "fn=test_load_config\n"
        f"cfl={project}/config.py\n"
        "cfn=load_config\n"
        "calls=1 4\n"
        "5 1\n"
        f"\nfl={project}/config.py\n"
        "fn=load_config\n"
        f"cfl={site}/toml/__init__.py\n"
        "cfn=loads\n"
        "calls=1 1\n"
        "5 1\n"
    )


@pytest.fixture
def clean_scenario(tmp_path, mock_llm):
    """Scenario A: the model migrates correctly on the first try."""
    project = tmp_path / "project"
    write_project(project, {
        "config.py": CONFIG_ORIGINAL,
        "tests/test_config.py": CONFIG_TEST,
    })
    checks = [
        ("tests/test_config.py", "test_load_config", "has('config.py', 'load_config')"),
        ("tests/test_config.py", "test_roundtrip", "has('config.py', 'def load_config')"),
    ]
    env = make_fake_env(
        tmp_path, scripted_shim(checks, "PLACEHOLDER"),
        dists=[("toml", "0.10.2", ["toml"])],
    )
    shim_path = env.site_packages_path / "runner_shim.py"
    shim_path.write_text(
        shim_path.read_text().replace(
            "'PLACEHOLDER'", repr(profile_for(project, env.site_packages_path))
        )
    )
    mock = mock_llm(routed_script({"import toml": fenced(CONFIG_MIGRATED)}))
    return make_spec(tmp_path, mock), options_for(mock), env, mock


class TestCleanMigration:
    def test_fully_correct_no_post_processing(self, clean_scenario):
        spec, options, env, mock = clean_scenario
        report = run_migration(spec, options, env=env)
        assert report.status is MigrationStatus.CORRECT
        assert report.selected_files == ["config.py"]
        assert [e.stage for e in report.per_stage] == [Stage.LLMMIG]
        assert report.per_stage[0].correctness == 1
        assert shim_call_count(env) == 2  # premig + llmmig only
        assert (spec.project_root / "config.py").read_text() == CONFIG_MIGRATED

    def test_artifacts_are_persisted(self, clean_scenario):
        spec, options, env, mock = clean_scenario
        run_migration(spec, options, env=env)
        (run_dir,) = [p for p in spec.out_dir.iterdir() if p.is_dir() and p.name != "venv"]
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["exit_status"] == "ok"
        for artifact in manifest["artifacts"].values():
            assert Path(artifact).exists()
        assert (run_dir / "prompts" / "config.py.txt").is_file()
        assert (run_dir / "responses" / "config.py.txt").is_file()
        assert (run_dir / "checkpoints" / "llmmig" / "config.py").read_text() == CONFIG_ORIGINAL
        report = json.loads((run_dir / "run_report.json").read_text())
        assert report["schema_version"] == 1
        # import line and loads() line replaced: 2 removed + 2 added
        assert report["migloc_auto"] == 4

    def test_prompt_carries_versions_and_code(self, clean_scenario):
        spec, options, env, mock = clean_scenario
        run_migration(spec, options, env=env)
        (payload,) = mock.requests
        prompt = payload["messages"][0]["content"]
        assert "currently uses the library toml version 0.10.2" in prompt
        assert "library tomlkit version 0.12.0 instead" in prompt
        assert CONFIG_ORIGINAL.rstrip("\n") in prompt


UTIL_HELPER_LINES = "".join(
    f"    value_{i} = {i}\n" for i in range(13)
)

UTIL_ORIGINAL = (
    "import toml\n"
    "\n"
    "\n"
    "def render(data):\n"
    "    return toml.dumps(data)\n"
    "\n"
    "\n"
    "FORMAT = 'v1'\n"
    "\n"
    "\n"
    "def helper_block():\n"
    + UTIL_HELPER_LINES
    + "    return value_12\n"
)

# The model migrates render() but silently drops helper_block entirely;
# the untouched FORMAT constant separates the edit from the omission.
UTIL_SKIPPED = (
    "import tomlkit\n"
    "\n"
    "\n"
    "def render(data):\n"
    "    return tomlkit.dumps(data)\n"
    "\n"
    "\n"
    "FORMAT = 'v1'\n"
)

UTIL_TEST = (
    "import util\n"
    "\n"
    "\n"
    "def test_render():\n"
    "    assert util.render({'a': 1})\n"
    "\n"
    "\n"
    "def test_helper():\n"
    "    assert util.helper_block() == 12\n"
)


@pytest.fixture
def skipping_scenario(tmp_path, mock_llm):
    """Scenario B: the model drops a 15-line helper; merge restores it."""
    project = tmp_path / "project"
    write_project(project, {
        "util.py": UTIL_ORIGINAL,
        "tests/test_util.py": UTIL_TEST,
    })
    checks = [
        ("tests/test_util.py", "test_render", "has('util.py', 'def render')"),
        ("tests/test_util.py", "test_helper", "has('util.py', 'def helper_block')"),
    ]
    env = make_fake_env(
        tmp_path, scripted_shim(checks, "PLACEHOLDER"),
        dists=[("toml", "0.10.2", ["toml"])],
    )
    shim_path = env.site_packages_path / "runner_shim.py"
    profile = (
        "version: 1\npositions: line\nevents: calls\n\n"
        f"fl={project}/util.py\nfn=render\n"
        f"cfl={env.site_packages_path}/toml/__init__.py\ncfn=dumps\n"
        "calls=1 1\n5 1\n"
    )
    shim_path.write_text(shim_path.read_text().replace("'PLACEHOLDER'", repr(profile)))
    mock = mock_llm(routed_script({"import toml": fenced(UTIL_SKIPPED)}))
    return make_spec(tmp_path, mock), options_for(mock), env, mock


class TestMergeStage:
    def test_merge_restores_dropped_helper_and_improves(self, skipping_scenario):
        spec, options, env, mock = skipping_scenario
        report = run_migration(spec, options, env=env)
        stages = [e.stage for e in report.per_stage]
        assert stages[:2] == [Stage.LLMMIG, Stage.MERGE]
        llm_entry, merge_entry = report.per_stage[0], report.per_stage[1]
        assert llm_entry.correctness < 1
        assert merge_entry.correctness > llm_entry.correctness
        assert merge_entry.correctness == 1
        assert not merge_entry.inherited
        merged = (spec.project_root / "util.py").read_text()
        assert "def helper_block" in merged and "tomlkit.dumps" in merged
        assert report.status is MigrationStatus.CORRECT
        assert shim_call_count(env) == 3  # premig, llmmig, merge

    def test_hunk_debug_artifacts_written(self, skipping_scenario):
        spec, options, env, mock = skipping_scenario
        run_migration(spec, options, env=env)
        (run_dir,) = [p for p in spec.out_dir.iterdir() if p.is_dir() and p.name != "venv"]
        rows = json.loads((run_dir / "hunks" / "util.py.json").read_text())
        assert any(row["verdict"] == "skipped" for row in rows)


SERVICE_ORIGINAL = (DATA / "async_example" / "service_premig.py").read_text()
SERVICE_ASYNC = (DATA / "async_example" / "service_llmmig.py").read_text()
SERVICE_TEST = (DATA / "async_example" / "service_test_premig.py").read_text()
SERVICE_TEST_EXPECTED = (DATA / "async_example" / "service_test_asynced.py").read_text()


@pytest.fixture
def async_scenario(tmp_path, mock_llm):
    """Scenario C: the model converts fetch_data to async; propagation
    must await the call and decorate the test before the suite passes."""
    project = tmp_path / "project"
    write_project(project, {
        "service.py": SERVICE_ORIGINAL,
        "service_test.py": SERVICE_TEST,
    })
    # the test passes while caller and callee agree on sync-ness
    checks = [
        ("service_test.py", "test_fetch_data",
         "has('service.py', 'async def fetch_data') == "
         "has('service_test.py', 'await fetch_data')"),
    ]
    env = make_fake_env(
        tmp_path, scripted_shim(checks, "PLACEHOLDER"),
        dists=[("requests", "2.31.0", ["requests"])],
    )
    profile = (
        "version: 1\npositions: line\nevents: calls\n\n"
        f"fl={project}/service_test.py\nfn=test_fetch_data\n"
        f"cfl={project}/service.py\ncfn=fetch_data\n"
        "calls=1 4\n7 1\n"
        f"\nfl={project}/service.py\nfn=fetch_data\n"
        f"cfl={env.site_packages_path}/requests/api.py\ncfn=get\n"
        "calls=1 1\n5 1\n"
    )
    shim_path = env.site_packages_path / "runner_shim.py"
    shim_path.write_text(shim_path.read_text().replace("'PLACEHOLDER'", repr(profile)))
    mock = mock_llm(routed_script({"import requests": fenced(SERVICE_ASYNC)}))
    spec = make_spec(tmp_path, mock, source="requests", target="aiohttp")
    return spec, options_for(mock), env, mock


class TestAsyncStage:
    def test_propagation_reaches_full_correctness(self, async_scenario):
        spec, options, env, mock = async_scenario
        report = run_migration(spec, options, env=env)
        stages = [e.stage for e in report.per_stage]
        assert stages == [Stage.LLMMIG, Stage.MERGE, Stage.ASYNC]
        llm_entry, merge_entry, async_entry = report.per_stage
        assert llm_entry.correctness == 0
        assert merge_entry.inherited  # nothing skipped, stage not applicable
        assert async_entry.correctness == 1
        assert report.status is MigrationStatus.CORRECT
        rewritten = (spec.project_root / "service_test.py").read_text()
        assert rewritten == SERVICE_TEST_EXPECTED
        # fake env has no pip: the support install is downgraded to a warning
        assert any("pytest-asyncio" in w for w in report.warnings)

    def test_runs_four_suites(self, async_scenario):
        spec, options, env, mock = async_scenario
        run_migration(spec, options, env=env)
        assert shim_call_count(env) == 3  # premig, llmmig, async (merge inapplicable)


class TestDeterminism:
    def normalize(self, report_path: Path) -> str:
        return report_path.read_text()

    def test_two_runs_byte_identical_reports(self, tmp_path, mock_llm):
        project = tmp_path / "project"
        write_project(project, {
            "config.py": CONFIG_ORIGINAL,
            "tests/test_config.py": CONFIG_TEST,
        })
        checks = [
            ("tests/test_config.py", "test_load_config", "has('config.py', 'load_config')"),
        ]
        env = make_fake_env(tmp_path, scripted_shim(checks, "version: 1\n"),
                            dists=[("toml", "0.10.2", ["toml"])])
        mock = mock_llm(routed_script({"import toml": fenced(CONFIG_MIGRATED)}))
        spec = make_spec(tmp_path, mock)
        options = options_for(mock)

        first = run_migration(spec, options, env=env)
        first_bytes = self._report_bytes(spec.out_dir)
        # restore the project for the second run
        write_project(project, {"config.py": CONFIG_ORIGINAL})
        for run_dir in [p for p in spec.out_dir.iterdir() if p.is_dir()]:
            import shutil

            shutil.rmtree(run_dir)
        second = run_migration(spec, options, env=env)
        second_bytes = self._report_bytes(spec.out_dir)
        assert first_bytes == second_bytes
        assert first.to_json_dict() == second.to_json_dict()

    def _report_bytes(self, out_dir: Path) -> bytes:
        (run_dir,) = [p for p in out_dir.iterdir() if p.is_dir() and p.name != "venv"]
        return (run_dir / "run_report.json").read_bytes()


class TestFailureModes:
    def test_response_without_code_block_flags_file(self, tmp_path, mock_llm):
        project = tmp_path / "project"
        write_project(project, {
            "config.py": CONFIG_ORIGINAL,
            "tests/test_config.py": CONFIG_TEST,
        })
        checks = [
            ("tests/test_config.py", "test_load_config", "has('config.py', 'load_config')"),
        ]
        env = make_fake_env(tmp_path, scripted_shim(checks, "version: 1\n"),
                            dists=[("toml", "0.10.2", ["toml"])])
        mock = mock_llm(routed_script({"import toml": "I am unable to help with that."}))
        spec = make_spec(tmp_path, mock)
        report = run_migration(spec, options_for(mock), env=env)
        assert any("config.py" in w and "unmigrated" in w for w in report.warnings)
        assert (spec.project_root / "config.py").read_text() == CONFIG_ORIGINAL

    def test_no_baseline_passing_tests_fails_in_prep(self, tmp_path, mock_llm):
        project = tmp_path / "project"
        write_project(project, {
            "config.py": CONFIG_ORIGINAL,
            "tests/test_config.py": CONFIG_TEST,
        })
        checks = [
            ("tests/test_config.py", "test_load_config", "has('config.py', 'NEVER_PRESENT')"),
        ]
        env = make_fake_env(tmp_path, scripted_shim(checks, "version: 1\n"),
                            dists=[("toml", "0.10.2", ["toml"])])
        mock = mock_llm(routed_script({}))
        spec = make_spec(tmp_path, mock)
        with pytest.raises(StageError) as exc_info:
            run_migration(spec, options_for(mock), env=env)
        assert exc_info.value.stage == "prep"
        (run_dir,) = [p for p in spec.out_dir.iterdir() if p.is_dir() and p.name != "venv"]
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["exit_status"] == "failed:prep"

    def test_manual_fixed_snapshot_yields_effort_split(self, clean_scenario, tmp_path):
        spec, options, env, mock = clean_scenario
        manual_root = tmp_path / "manual"
        manual_root.mkdir()
        manual_text = CONFIG_MIGRATED.replace(
            "return tomlkit.loads(text)", "return dict(tomlkit.loads(text))"
        )
        (manual_root / "config.py").write_text(manual_text)
        options.manual_fixed = manual_root
        report = run_migration(spec, options, env=env)
        assert report.migloc_auto == 4
        assert report.migloc_manual == 2
        assert report.effort_auto == Fraction(2, 3)
        assert report.effort_manual == Fraction(1, 3)
        assert report.effort_auto + report.effort_manual == 1


REAL_CONFIG = (
    "import toml\n"
    "\n"
    "\n"
    "def load_config(text):\n"
    "    return toml.loads(text)\n"
    "\n"
    "\n"
    "def render_config(data):\n"
    "    return toml.dumps(data)\n"
)

REAL_CONFIG_MIGRATED = (
    "import tomlkit\n"
    "\n"
    "\n"
    "def load_config(text):\n"
    "    return tomlkit.loads(text)\n"
    "\n"
    "\n"
    "def render_config(data):\n"
    "    return tomlkit.dumps(data)\n"
)

REAL_TEST = (
    "from config import load_config, render_config\n"
    "\n"
    "\n"
    "def test_load():\n"
    "    assert load_config('x = 1')['x'] == 1\n"
    "\n"
    "\n"
    "def test_render():\n"
    "    assert 'x = 1' in render_config({'x': 1})\n"
)


@pytest.mark.integration
class TestFullStack:
    """Everything real except the model: venv provisioning through pip,
    the real runner shim, real pytest runs, a scripted endpoint."""

    def test_real_toml_to_tomlkit_migration(self, tmp_path, mock_llm, monkeypatch):
        from conftest import WORKING_INDEX

        monkeypatch.setenv("PIP_INDEX_URL", WORKING_INDEX)
        project = tmp_path / "project"
        write_project(project, {
            "config.py": REAL_CONFIG,
            "conftest.py": "import sys\nsys.path.insert(0, '.')\n",
            "tests/test_config.py": REAL_TEST,
        })
        requirements = tmp_path / "requirements.txt"
        requirements.write_text("toml==0.10.2\n")
        mock = mock_llm(routed_script({"import toml": fenced(REAL_CONFIG_MIGRATED)}))
        spec = MigrationSpec(
            project_root=project,
            source_lib="toml",
            target_lib="tomlkit",
            target_version="0.12.5",
            requirements_files=[requirements],
            model_id="test-model",
            api_base_url=mock.base_url,
            out_dir=tmp_path / "out",
            python_version=f"{__import__('sys').version_info.major}."
                           f"{__import__('sys').version_info.minor}",
        )
        options = options_for(mock)
        options.shim_source = Path(__file__).parent.parent / "shim" / "runner_shim.py"

        report = run_migration(spec, options)

        assert report.status is MigrationStatus.CORRECT
        assert report.selected_files == ["config.py"]
        assert [e.stage for e in report.per_stage] == [Stage.LLMMIG]
        assert (project / "config.py").read_text() == REAL_CONFIG_MIGRATED
        # the prompt carried the installed source version from the venv
        (payload,) = mock.requests
        assert "toml version 0.10.2" in payload["messages"][0]["content"]
