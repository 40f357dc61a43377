"""Shared fixtures: record builders and local git repositories."""

from __future__ import annotations

import subprocess
from datetime import datetime, timezone
from pathlib import Path

import pytest

from sorryforge.model import (
    DebugInfo,
    RecordMetadata,
    RepoCoordinates,
    SorryRecord,
    SourceLocation,
    compute_id,
    hash_email,
)

UTC = timezone.utc


def ts(year: int, month: int = 1, day: int = 1, hour: int = 0) -> datetime:
    return datetime(year, month, day, hour, tzinfo=UTC)


def make_record(
    remote: str = "https://example.org/r.git",
    branch: str = "main",
    commit: str = "a" * 40,
    lean_version: str = "v4.24.0",
    path: str = "A.lean",
    start_line: int = 1,
    start_column: int = 23,
    end_line: int = 1,
    end_column: int = 28,
    goal: str = "⊢ True",
    url: str = "https://example.org/r/blob/a/A.lean#L1",
    email: str = "dev@example.org",
    blame_date: datetime | None = None,
    inclusion_date: datetime | None = None,
) -> SorryRecord:
    blame = blame_date or ts(2025, 6, 1)
    inclusion = inclusion_date or ts(2025, 7, 1)
    provisional = SorryRecord(
        repo=RepoCoordinates(remote=remote, branch=branch, commit=commit, lean_version=lean_version),
        location=SourceLocation(
            path=path,
            start_line=start_line,
            start_column=start_column,
            end_line=end_line,
            end_column=end_column,
        ),
        debug_info=DebugInfo(goal=goal, url=url),
        metadata=RecordMetadata(
            blame_email_hash=hash_email(email),
            blame_date=blame,
            inclusion_date=inclusion,
        ),
        id="",
    )
    return SorryRecord(
        repo=provisional.repo,
        location=provisional.location,
        debug_info=provisional.debug_info,
        metadata=provisional.metadata,
        id=compute_id(provisional),
    )


def git(args: list[str], cwd: Path, date: str = "2025-06-01T12:00:00Z", email: str = "dev@example.org") -> str:
    env = {
        "GIT_AUTHOR_NAME": "Dev",
        "GIT_AUTHOR_EMAIL": email,
        "GIT_AUTHOR_DATE": date,
        "GIT_COMMITTER_NAME": "Dev",
        "GIT_COMMITTER_EMAIL": email,
        "GIT_COMMITTER_DATE": date,
        "HOME": str(cwd),
        "PATH": "/usr/bin:/bin:/usr/local/bin",
    }
    proc = subprocess.run(
        ["git", "-c", "init.defaultBranch=main", "-c", "protocol.file.allow=always", *args],
        cwd=cwd,
        env=env,
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise AssertionError(f"git {' '.join(args)} failed: {proc.stderr}")
    return proc.stdout.strip()


def make_git_repo(
    root: Path,
    files: dict[str, str],
    toolchain: str = "leanprover/lean4:v4.24.0",
    date: str = "2025-06-01T12:00:00Z",
    email: str = "dev@example.org",
) -> str:
    """Initialize a repo with one commit on main; returns the commit hash."""
    root.mkdir(parents=True, exist_ok=True)
    git(["init", "-q"], cwd=root)
    contents = {"lean-toolchain": toolchain + "\n", **files}
    for name, text in contents.items():
        target = root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
    git(["add", "-A"], cwd=root)
    git(["commit", "-q", "-m", "initial"], cwd=root, date=date, email=email)
    return git(["rev-parse", "HEAD"], cwd=root)


def commit_files(
    root: Path,
    files: dict[str, str],
    message: str = "update",
    date: str = "2025-06-02T12:00:00Z",
    email: str = "dev@example.org",
) -> str:
    for name, text in files.items():
        target = root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
    git(["add", "-A"], cwd=root)
    git(["commit", "-q", "-m", message], cwd=root, date=date, email=email)
    return git(["rev-parse", "HEAD"], cwd=root)


@pytest.fixture()
def cache_dir(tmp_path: Path) -> Path:
    return tmp_path / "cache"
