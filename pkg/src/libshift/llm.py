"""Model-backed file migration: prompt construction, the chat-completion
request, code extraction from the response, and checkpointed application
of migrated files to the project tree."""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import requests

from .errors import (
    ContextOverflow,
    EmptyResponse,
    EndpointUnreachable,
    NoCodeBlock,
    RateLimited,
    ValidationError,
    WriteFailed,
)
from .jobspec import MigrationSpec, Stage

log = logging.getLogger("libshift")

PROMPT_TEMPLATE = """\
The following Python code currently uses the library {source_lib} version {source_version}.
Migrate this code to use the library {target_lib} version {target_version} instead.

**Instructions:**
1. **Explain the Changes**: Begin the output with a brief explanation of the specific changes you made to migrate from "{source_lib}" to "{target_lib}".
2. **Provide the Modified Code**: After the explanation, present the modified code. Provide the entire code after migration even if only a part of it is changed.

**Important Guidelines**:
- Only make changes directly related to migrating between "{source_lib}" and "{target_lib}".
- Do not refactor, reformat, optimize, or alter the original coding style.
- The code given to you is part of a larger application. Do not change the names of classes, functions, or variables, because it can break the application.

Original code:
{code}"""

_PLACEHOLDER = re.compile(r"\{(source_lib|source_version|target_lib|target_version|code)\}")


@dataclass(frozen=True)
class MigrationPrompt:
    source_lib: str
    source_version: str
    target_lib: str
    target_version: str
    code: str
    rendered: str


def build_prompt(spec: MigrationSpec, source_version: str, code: str) -> MigrationPrompt:
    """Render the migration prompt for one file's source text."""
    if not code:
        raise ValidationError("cannot build a prompt for empty code")
    if not spec.source_lib or not spec.target_lib:
        raise ValidationError("source and target library names must be non-empty")
    if not source_version or not spec.target_version:
        raise ValidationError("source and target versions must be non-empty")
    rendered = PROMPT_TEMPLATE.format(
        source_lib=spec.source_lib,
        source_version=source_version,
        target_lib=spec.target_lib,
        target_version=spec.target_version,
        code=code,
    )
    if _PLACEHOLDER.search(rendered.replace(code, "")):
        raise ValidationError("prompt template left a placeholder unresolved")
    return MigrationPrompt(
        source_lib=spec.source_lib,
        source_version=source_version,
        target_lib=spec.target_lib,
        target_version=spec.target_version,
        code=code,
        rendered=rendered,
    )


@dataclass(frozen=True)
class EndpointConfig:
    """An OpenAI-compatible chat-completions endpoint."""

    base_url: str
    model_id: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 300.0
    max_retries: int = 4
    backoff_s: float = 1.0


_TOKEN_LIMIT_CODES = {"context_length_exceeded", "max_tokens_exceeded"}
_TOKEN_LIMIT_TEXT = re.compile(r"(context|token).{0,40}(length|limit|window)", re.IGNORECASE)


def _is_token_limit_error(payload: dict) -> bool:
    error = payload.get("error") or {}
    if isinstance(error, dict):
        if error.get("code") in _TOKEN_LIMIT_CODES:
            return True
        message = str(error.get("message", ""))
    else:
        message = str(error)
    return bool(_TOKEN_LIMIT_TEXT.search(message))


def request_migration(endpoint: EndpointConfig, prompt: MigrationPrompt) -> str:
    """Send one zero-temperature chat completion and return the assistant text.

    Transient failures (HTTP 429 and 5xx) are retried with exponential
    backoff up to the configured cap; reported token-limit errors map to
    ContextOverflow.
    """
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(endpoint.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = {
        "model": endpoint.model_id,
        "messages": [{"role": "user", "content": prompt.rendered}],
        "temperature": 0,
    }

    last_status = None
    for attempt in range(endpoint.max_retries + 1):
        if attempt:
            time.sleep(endpoint.backoff_s * 2 ** (attempt - 1))
        try:
            response = requests.post(url, json=payload, headers=headers,
                                     timeout=endpoint.timeout_s)
        except requests.RequestException as exc:
            raise EndpointUnreachable(f"{url}: {exc}") from exc

        last_status = response.status_code
        if response.status_code == 429 or response.status_code >= 500:
            log.warning("[llm] HTTP %d from endpoint, attempt %d/%d",
                        response.status_code, attempt + 1, endpoint.max_retries + 1)
            continue
        if response.status_code >= 400:
            try:
                body = response.json()
            except ValueError:
                body = {"error": response.text}
            if _is_token_limit_error(body):
                raise ContextOverflow(f"endpoint reported a token-limit error: {body}")
            raise EndpointUnreachable(
                f"endpoint answered HTTP {response.status_code}: {response.text[:500]}"
            )
        try:
            body = response.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise EmptyResponse(f"malformed completion payload: {exc}") from exc
        if not content:
            raise EmptyResponse("assistant returned no text")
        return content

    if last_status == 429:
        raise RateLimited(f"still rate-limited after {endpoint.max_retries} retries")
    raise EndpointUnreachable(
        f"endpoint kept failing with HTTP {last_status} after {endpoint.max_retries} retries"
    )


_FENCE_OPEN = re.compile(r"^\s{0,3}```+\s*([^\s`]*)")
_FENCE_CLOSE = re.compile(r"^\s{0,3}```+\s*$")


def extract_code(response: str) -> str:
    """Pull the migrated source out of the assistant text: the largest
    python-tagged fenced block, or the largest untagged block when no
    python-tagged block exists. Explanation prose is discarded."""
    blocks: list[tuple[str, str]] = []  # (tag, body)
    tag: str | None = None
    body: list[str] = []
    # split on "\n" only: carriage returns and unicode separators are
    # content and must survive into the extracted source
    for line in response.split("\n"):
        if tag is None:
            opened = _FENCE_OPEN.match(line)
            if opened:
                tag = opened.group(1).lower()
                body = []
            continue
        if _FENCE_CLOSE.match(line):
            blocks.append((tag, "\n".join(body)))
            tag = None
            continue
        body.append(line)
    if tag is not None and body:
        if body[-1] == "":
            body.pop()  # artifact of the text's final newline, not a line
        blocks.append((tag, "\n".join(body)))  # unterminated fence: take the rest

    python = [b for t, b in blocks if t in ("python", "py", "python3")]
    untagged = [b for t, b in blocks if t == ""]
    candidates = python or untagged
    if not candidates:
        raise NoCodeBlock("response contains no usable fenced code block")
    return max(candidates, key=len)


@dataclass
class FileCheckpoint:
    """Previous contents of every file a stage overwrote.

    A value of None marks a file that did not exist before the stage;
    restoring removes it.
    """

    stage: Stage
    files: dict[str, str | None] = field(default_factory=dict)


def apply_migrated_files(
    project_root: Path,
    migrated: Mapping[str, str],
    stage: Stage = Stage.LLMMIG,
    *,
    allow_new: bool = False,
) -> FileCheckpoint:
    """Atomically write migrated contents over the project files, keeping
    each file's previous text in the returned checkpoint."""
    checkpoint = FileCheckpoint(stage=stage)
    for relative in sorted(migrated):
        target = project_root / relative
        if not target.is_file() and not allow_new:
            raise WriteFailed(str(target), "file does not exist under the project root")

    for relative in sorted(migrated):
        target = project_root / relative
        previous = target.read_text(encoding="utf-8") if target.is_file() else None
        text = migrated[relative]
        if text and not text.endswith("\n"):
            text += "\n"
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, temp_name = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(text)
            os.replace(temp_name, target)
        except OSError as exc:
            raise WriteFailed(str(target), str(exc)) from exc
        checkpoint.files[relative] = previous
    return checkpoint


def restore_checkpoint(project_root: Path, checkpoint: FileCheckpoint) -> None:
    """Put every file recorded in the checkpoint back to its previous bytes."""
    for relative, previous in checkpoint.files.items():
        target = project_root / relative
        if previous is None:
            target.unlink(missing_ok=True)
        else:
            target.write_text(previous, encoding="utf-8")


def save_checkpoint(checkpoint: FileCheckpoint, directory: Path) -> None:
    """Persist a checkpoint as plain files plus an index for auditability."""
    directory.mkdir(parents=True, exist_ok=True)
    index = {"stage": checkpoint.stage.value, "files": {}}
    for relative, previous in checkpoint.files.items():
        index["files"][relative] = previous is not None
        if previous is not None:
            destination = directory / relative
            destination.parent.mkdir(parents=True, exist_ok=True)
            destination.write_text(previous, encoding="utf-8")
    (directory / "checkpoint.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
