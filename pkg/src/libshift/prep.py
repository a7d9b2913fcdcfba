"""Environment preparation: interpreter/dependency resolution, venv
provisioning, and test execution through the in-venv runner shim.

The resolvers are pure given their release tables; provisioning and test
runs shell out to the provisioned interpreter and never import anything
from inside the target environment.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from datetime import date
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from packaging.specifiers import InvalidSpecifier, SpecifierSet
from packaging.version import InvalidVersion, Version

from .errors import (
    InstallFailed,
    InterpreterMissing,
    NoTestsCollected,
    NoVersionAvailable,
    PackageNotFound,
    RunnerCrashed,
    ValidationError,
)
from .jobspec import MigrationSpec, Outcome, ProjectOverrides, Stage, TestReport
from .junitxml import parse_junit_file

log = logging.getLogger("libshift")

SHIM_MODULE = "runner_shim"
SHIM_SUPPORT_PACKAGES = ("pytest",)
ASYNC_TEST_SUPPORT_PACKAGE = "pytest-asyncio"
DEFAULT_RUN_TIMEOUT_S = 15 * 60


# --- version resolution ------------------------------------------------------

def _as_date(value: date | str) -> date:
    return value if isinstance(value, date) else date.fromisoformat(value)


def bundled_python_releases() -> dict[str, date]:
    """Release dates of CPython minor versions, shipped as static data."""
    raw = resources.files("libshift.data").joinpath("python_releases.json").read_text()
    return {version: date.fromisoformat(day) for version, day in json.loads(raw).items()}


def resolve_python_version(
    declared: str | None,
    reference_date: date,
    release_table: Mapping[str, date | str] | None = None,
) -> str:
    """Pick the interpreter version: the declared one, else the latest minor
    version released on or before the reference date."""
    if declared:
        return declared
    table = release_table if release_table is not None else bundled_python_releases()
    if not table:
        raise NoVersionAvailable("empty interpreter release table")
    candidates = [(v, _as_date(d)) for v, d in table.items() if _as_date(d) <= reference_date]
    if not candidates:
        raise NoVersionAvailable(
            f"no interpreter release on or before {reference_date.isoformat()}"
        )
    return max(candidates, key=lambda pair: pair[1])[0]


class ReleaseHistory(Protocol):
    """Source of package release histories (live registry or snapshot)."""

    def releases(self, package: str) -> Mapping[str, date]:
        """Version string -> release date. Raises PackageNotFound."""
        ...


@dataclass
class StaticReleaseHistory:
    """In-memory release history, used for tests and offline snapshots."""

    table: Mapping[str, Mapping[str, date | str]]

    def releases(self, package: str) -> Mapping[str, date]:
        key = package.lower()
        for name, history in self.table.items():
            if name.lower() == key:
                return {v: _as_date(d) for v, d in history.items()}
        raise PackageNotFound(package)


@dataclass
class PyPIReleaseHistory:
    """Live registry lookups through the JSON API."""

    base_url: str = "https://pypi.org/pypi"
    timeout_s: float = 30.0

    def releases(self, package: str) -> Mapping[str, date]:
        import requests

        url = f"{self.base_url.rstrip('/')}/{package}/json"
        try:
            response = requests.get(url, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise PackageNotFound(f"{package}: registry unreachable ({exc})") from exc
        if response.status_code == 404:
            raise PackageNotFound(package)
        response.raise_for_status()
        history: dict[str, date] = {}
        for version, files in response.json().get("releases", {}).items():
            stamps = [f.get("upload_time", "")[:10] for f in files if f.get("upload_time")]
            if stamps:
                history[version] = date.fromisoformat(min(stamps))
        return history


_EXACT_PIN = re.compile(r"^\s*==\s*([^\s,;]+)\s*$")


def resolve_dependency_version(
    package: str,
    declared: str | None,
    reference_date: date,
    registry: ReleaseHistory,
) -> str:
    """Resolve a dependency version: an exact pin wins, otherwise the latest
    release dated on or before the reference date (pre-releases skipped)."""
    if declared:
        pin = _EXACT_PIN.match(declared)
        if pin:
            return pin.group(1)
    history = registry.releases(package)

    def parsed(version: str) -> Version | None:
        try:
            return Version(version)
        except InvalidVersion:
            return None

    candidates = {
        v: d for v, d in history.items()
        if d <= reference_date and (pv := parsed(v)) is not None and not pv.is_prerelease
    }
    if declared:
        try:
            spec = SpecifierSet(declared)
        except InvalidSpecifier as exc:
            raise ValidationError(f"bad version specifier {declared!r} for {package}") from exc
        candidates = {v: d for v, d in candidates.items() if v in spec}
    if not candidates:
        raise NoVersionAvailable(
            f"no release of {package} matching {declared or 'any version'} "
            f"on or before {reference_date.isoformat()}"
        )
    return max(candidates, key=lambda v: (candidates[v], Version(v)))


# --- virtual environment -----------------------------------------------------

@dataclass
class EnvHandle:
    """A provisioned virtual environment the pipeline can run tests in."""

    venv_path: Path
    interpreter_version: str
    site_packages_path: Path
    installed_packages: dict[str, str] = field(default_factory=dict)

    @property
    def python_path(self) -> Path:
        windows = self.venv_path / "Scripts" / "python.exe"
        return windows if windows.exists() else self.venv_path / "bin" / "python"


def find_interpreter(version: str) -> Path:
    """Locate a host interpreter for a minor version like "3.10"."""
    current = f"{sys.version_info.major}.{sys.version_info.minor}"
    if version == current:
        return Path(sys.executable)
    located = shutil.which(f"python{version}")
    if located:
        return Path(located)
    raise InterpreterMissing(f"python{version} is not installed on this host")


def _run(cmd: Sequence[str], *, timeout: int, cwd: Path | None = None,
         env: Mapping[str, str] | None = None) -> subprocess.CompletedProcess:
    return subprocess.run(
        list(cmd), capture_output=True, text=True, timeout=timeout,
        cwd=str(cwd) if cwd else None, env=dict(env) if env is not None else None,
    )


_MISSING_DIST = re.compile(r"No matching distribution found for (\S+)")


def _pip_install(python: Path, args: Sequence[str], label: str, timeout: int) -> None:
    proc = _run([str(python), "-m", "pip", "install", "--no-input", *args], timeout=timeout)
    if proc.returncode != 0:
        output = proc.stdout + proc.stderr
        match = _MISSING_DIST.search(output)
        raise InstallFailed(match.group(1) if match else label, output)


def install_package(env: EnvHandle, requirement: str, *, timeout: int = 600) -> None:
    """Install one requirement specifier into the environment."""
    _pip_install(env.python_path, [requirement], requirement, timeout)
    env.installed_packages.update(_installed_packages(env.python_path))


def _installed_packages(python: Path) -> dict[str, str]:
    proc = _run([str(python), "-m", "pip", "list", "--format=json"], timeout=120)
    if proc.returncode != 0:
        return {}
    return {entry["name"].lower(): entry["version"] for entry in json.loads(proc.stdout)}


def _site_packages(python: Path) -> Path:
    proc = _run(
        [str(python), "-c", "import sysconfig; print(sysconfig.get_paths()['purelib'])"],
        timeout=60,
    )
    if proc.returncode != 0:
        raise InstallFailed("site-packages probe", proc.stdout + proc.stderr)
    return Path(proc.stdout.strip())


def provision_environment(
    spec: MigrationSpec,
    *,
    shim_source: Path | None = None,
    reference_date: date | None = None,
    install_timeout_s: int = 900,
) -> EnvHandle:
    """Create the venv under out_dir, install the project requirements in
    listed order, the target library at its pinned version, and the shim
    support packages; copy the runner shim in when a source file is given.

    Re-running against an existing venv reuses it; pip installs are
    idempotent, so the observable installed set is stable.
    """
    version = resolve_python_version(
        spec.python_version, reference_date or date.today()
    )
    interpreter = find_interpreter(version)

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    venv_path = spec.out_dir / "venv"
    if not (venv_path / "pyvenv.cfg").exists():
        proc = _run([str(interpreter), "-m", "venv", str(venv_path)], timeout=300)
        if proc.returncode != 0:
            raise InstallFailed("venv creation", proc.stdout + proc.stderr)
    python = EnvHandle(venv_path, version, Path(".")).python_path

    for requirements in spec.requirements_files:
        _pip_install(python, ["-r", str(requirements)], str(requirements), install_timeout_s)
    _pip_install(
        python,
        [f"{spec.target_lib}=={spec.target_version}"],
        spec.target_lib,
        install_timeout_s,
    )
    for support in SHIM_SUPPORT_PACKAGES:
        _pip_install(python, [support], support, install_timeout_s)

    site_packages = _site_packages(python)
    if shim_source is not None:
        shutil.copyfile(shim_source, site_packages / f"{SHIM_MODULE}.py")

    installed = _installed_packages(python)
    target_key = spec.target_lib.lower().replace("_", "-")
    found = installed.get(target_key) or installed.get(spec.target_lib.lower())
    if found != spec.target_version:
        raise InstallFailed(
            spec.target_lib,
            f"expected {spec.target_version}, environment reports {found!r}",
        )

    proc = _run([str(python), "--version"], timeout=60)
    reported = proc.stdout.strip().split()[-1] if proc.returncode == 0 else version
    return EnvHandle(venv_path, reported, site_packages, installed)


# --- project overrides -------------------------------------------------------

def load_project_overrides(out_dir: Path) -> ProjectOverrides:
    """Read ``<out_dir>/project.toml`` if present (custom test command,
    extra runner args, timeout, environment variables)."""
    path = out_dir / "project.toml"
    if not path.is_file():
        return ProjectOverrides()
    overrides = ProjectOverrides()
    section = ""
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: cannot parse line {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        parsed = _parse_toml_value(value.strip(), where=f"{path}:{key}")
        if section == "env":
            overrides.env[key] = str(parsed)
        elif section in ("", "tests"):
            if key == "command":
                overrides.command = [str(v) for v in _as_list(parsed)]
            elif key == "args":
                overrides.args = [str(v) for v in _as_list(parsed)]
            elif key == "timeout_s":
                overrides.timeout_s = int(parsed)  # type: ignore[arg-type]
            else:
                raise ValidationError(f"{path}: unknown key {key!r} in [tests]")
        else:
            raise ValidationError(f"{path}: unknown section [{section}]")
    return overrides


def _parse_toml_value(text: str, *, where: str) -> str | int | list:
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_toml_value(part.strip(), where=where) for part in inner.split(",")]
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    raise ValidationError(f"{where}: cannot parse value {text!r}")


def _as_list(value) -> list:
    if not isinstance(value, list):
        raise ValidationError(f"expected a list, got {value!r}")
    return value


# --- test execution ----------------------------------------------------------

def run_tests(
    env: EnvHandle,
    project_root: Path,
    stage: Stage,
    with_profiling: bool = False,
    *,
    artifact_dir: Path | None = None,
    overrides: ProjectOverrides | None = None,
    timeout_s: int = DEFAULT_RUN_TIMEOUT_S,
) -> tuple[TestReport, Path | None]:
    """Run the project's test suite once through the in-venv shim.

    The shim writes a JUnit-XML report (parsed into a TestReport) and,
    with profiling on, a CallGrind-format profile whose path is returned.
    Project sources are never modified by a run.
    """
    overrides = overrides or ProjectOverrides()
    artifact_dir = artifact_dir or (project_root / ".libshift")
    artifact_dir.mkdir(parents=True, exist_ok=True)
    report_path = artifact_dir / f"{stage}.xml"
    profile_path = artifact_dir / f"{stage}.callgrind" if with_profiling else None
    if report_path.exists():
        report_path.unlink()

    if overrides.command:
        substitutions = {
            "{report}": str(report_path),
            "{profile}": str(profile_path or ""),
            "{project}": str(project_root),
        }
        cmd = [_substitute(token, substitutions) for token in overrides.command]
    else:
        cmd = [str(env.python_path), "-m", SHIM_MODULE, "--report", str(report_path)]
        if profile_path is not None:
            cmd += ["--profile", str(profile_path)]
        if overrides.args:
            cmd += ["--", *overrides.args]

    run_env = dict(os.environ)
    run_env["PYTHONDONTWRITEBYTECODE"] = "1"
    run_env.update(overrides.env)

    started = time.monotonic()
    try:
        proc = _run(cmd, timeout=overrides.timeout_s or timeout_s,
                    cwd=project_root, env=run_env)
    except subprocess.TimeoutExpired as exc:
        raise RunnerCrashed(f"test run timed out after {exc.timeout:.0f}s") from exc
    wall_time = time.monotonic() - started

    if not report_path.exists():
        raise RunnerCrashed(
            "runner exited without a report "
            f"(exit {proc.returncode}): {proc.stdout[-2000:]}{proc.stderr[-2000:]}"
        )
    outcomes = parse_junit_file(report_path)
    if proc.returncode == 4 or not outcomes:
        raise NoTestsCollected(f"no tests collected in {project_root}")
    log.info("[%s] %s", stage, _summary(outcomes, wall_time))
    return TestReport(stage=stage, outcomes=outcomes, wall_time_s=wall_time), profile_path


def _substitute(token: str, table: Mapping[str, str]) -> str:
    for placeholder, value in table.items():
        token = token.replace(placeholder, value)
    return token


def _summary(outcomes: Mapping[str, Outcome], wall_time: float) -> str:
    tally: dict[str, int] = {}
    for outcome in outcomes.values():
        tally[outcome.value] = tally.get(outcome.value, 0) + 1
    parts = ", ".join(f"{n} {label}" for label, n in sorted(tally.items()))
    return f"{len(outcomes)} tests ({parts}) in {wall_time:.1f}s"
