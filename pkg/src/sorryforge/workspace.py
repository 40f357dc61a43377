"""Workspace preparation and builds for checked-out repositories.

Checkouts are cached under ``<cache>/<sha256(remote)>/<commit>/`` with a
metadata file beside the tree (never inside it, so checkouts stay
byte-identical to the commit). Population holds a per-key file lock so
concurrent preparers cannot race; a cache hit touches neither the network
nor the checkout.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

from filelock import FileLock

from .errors import SorryForgeError
from .model import RepoCoordinates

__all__ = [
    "CACHE_ENV_VAR",
    "CloneFailedError",
    "CheckoutFailedError",
    "ToolchainMissingError",
    "BuildTimeoutError",
    "BuildStatus",
    "Workspace",
    "cache_root",
    "prepare_workspace",
    "build_workspace",
    "run_git",
]

CACHE_ENV_VAR = "SORRYFORGE_CACHE_DIR"
DEFAULT_BUILD_COMMAND: tuple[str, ...] = ("lake", "build")
DEFAULT_BUILD_TIMEOUT_S = 3600.0
_TOOLCHAIN_FILE = "lean-toolchain"
_META_SUFFIX = ".meta.json"


class CloneFailedError(SorryForgeError):
    pass


class CheckoutFailedError(SorryForgeError):
    pass


class ToolchainMissingError(SorryForgeError):
    pass


class BuildTimeoutError(SorryForgeError):
    pass


class BuildStatus(str, Enum):
    UNBUILT = "unbuilt"
    BUILT = "built"
    FAILED = "failed"


@dataclass(frozen=True)
class Workspace:
    root: Path
    coords: RepoCoordinates
    toolchain: str
    build_status: BuildStatus = BuildStatus.UNBUILT
    build_messages: tuple[str, ...] = ()

    @property
    def is_built(self) -> bool:
        return self.build_status is BuildStatus.BUILT


def cache_root(cache_dir: str | Path | None = None) -> Path:
    """Resolve the cache directory; the env var overrides the argument."""
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    if cache_dir is not None:
        return Path(cache_dir)
    return Path.home() / ".cache" / "sorryforge"


def run_git(args: list[str], cwd: Path | None = None, check: bool = True) -> subprocess.CompletedProcess[str]:
    """Run git with captured output; raises SorryForgeError on failure."""
    proc = subprocess.run(
        ["git", *args],
        cwd=cwd,
        capture_output=True,
        text=True,
        errors="replace",
    )
    if check and proc.returncode != 0:
        raise SorryForgeError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
    return proc


def _parse_toolchain(content: str) -> str:
    # Toolchain files read "<origin>:<tag>"; only the tag is recorded.
    tag = content.strip()
    if ":" in tag:
        tag = tag.rsplit(":", 1)[1]
    return tag


def _workspace_paths(coords: RepoCoordinates, cache_dir: str | Path | None) -> tuple[Path, Path, Path]:
    base = cache_root(cache_dir) / hashlib.sha256(coords.remote.encode("utf-8")).hexdigest()
    root = base / coords.commit
    meta = base / f"{coords.commit}{_META_SUFFIX}"
    lock = base / f"{coords.commit}.lock"
    return root, meta, lock


def _write_meta(meta_path: Path, toolchain: str, build_status: BuildStatus) -> None:
    payload = {"toolchain": toolchain, "build_status": build_status.value}
    meta_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def prepare_workspace(coords: RepoCoordinates, cache_dir: str | Path | None = None) -> Workspace:
    """Clone-and-checkout the pinned commit, or reuse the cached tree.

    The toolchain tag is read from the project's toolchain file and
    recorded on both the workspace and its coordinates. Failed
    populations are removed so a retry starts clean.
    """
    root, meta_path, lock_path = _workspace_paths(coords, cache_dir)
    root.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(lock_path)):
        if meta_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            toolchain = meta["toolchain"]
            status = BuildStatus(meta.get("build_status", "unbuilt"))
            return Workspace(
                root=root,
                coords=replace(coords, lean_version=toolchain),
                toolchain=toolchain,
                build_status=status,
            )

        if root.exists():
            shutil.rmtree(root)
        clone = run_git(["clone", coords.remote, str(root)], check=False)
        if clone.returncode != 0:
            raise CloneFailedError(f"clone of {coords.remote} failed: {clone.stderr.strip()}")
        checkout = run_git(["checkout", "--detach", coords.commit], cwd=root, check=False)
        if checkout.returncode != 0:
            shutil.rmtree(root, ignore_errors=True)
            raise CheckoutFailedError(
                f"checkout of {coords.commit} in {coords.remote} failed: {checkout.stderr.strip()}"
            )
        toolchain_file = root / _TOOLCHAIN_FILE
        if not toolchain_file.exists():
            shutil.rmtree(root, ignore_errors=True)
            raise ToolchainMissingError(f"{coords.remote}@{coords.commit} has no {_TOOLCHAIN_FILE}")
        toolchain = _parse_toolchain(toolchain_file.read_text(encoding="utf-8"))
        _write_meta(meta_path, toolchain, BuildStatus.UNBUILT)
        return Workspace(
            root=root,
            coords=replace(coords, lean_version=toolchain),
            toolchain=toolchain,
        )


def build_workspace(
    workspace: Workspace,
    command: tuple[str, ...] = DEFAULT_BUILD_COMMAND,
    timeout_s: float = DEFAULT_BUILD_TIMEOUT_S,
) -> Workspace:
    """Run the project build; idempotent once built (no subprocess)."""
    if workspace.is_built:
        return workspace
    try:
        proc = subprocess.run(
            list(command),
            cwd=workspace.root,
            capture_output=True,
            text=True,
            errors="replace",
            timeout=timeout_s,
        )
    except subprocess.TimeoutExpired as exc:
        raise BuildTimeoutError(f"build exceeded {timeout_s:.0f}s in {workspace.root}") from exc
    except OSError as exc:
        return replace(workspace, build_status=BuildStatus.FAILED, build_messages=(str(exc),))
    if proc.returncode != 0:
        output = [line for line in (proc.stdout + "\n" + proc.stderr).splitlines() if line.strip()]
        return replace(workspace, build_status=BuildStatus.FAILED, build_messages=tuple(output))
    built = replace(workspace, build_status=BuildStatus.BUILT, build_messages=())
    _persist_build_status(built)
    return built


def _persist_build_status(workspace: Workspace) -> None:
    meta_path = workspace.root.parent / f"{workspace.root.name}{_META_SUFFIX}"
    if meta_path.exists():
        _write_meta(meta_path, workspace.toolchain, workspace.build_status)
