"""Index sorry obligations out of repository checkouts.

The pipeline per repository: resolve branch heads, then per leaf commit
prepare and build a workspace, lexically scan tracked Lean files for
standalone ``sorry`` tokens, confirm each hit against the prover REPL
(goal text and prop-ness), attach blame metadata, and finally keep only
prop-valued goals deduplicated per remote.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import SorryForgeError
from .model import (
    GoalState,
    RepoCoordinates,
    SorryRecord,
    SourceLocation,
    hash_email,
    new_record,
    normalize_goal,
)
from .registry import RepoListing
from .repl import (
    Backend,
    RealBackend,
    ReplRequest,
    ReplSession,
    check_file,
    open_session,
)
from .workspace import (
    BuildStatus,
    Workspace,
    build_workspace,
    prepare_workspace,
    run_git,
    DEFAULT_BUILD_COMMAND,
    DEFAULT_BUILD_TIMEOUT_S,
)

__all__ = [
    "GitQueryFailedError",
    "BlameFailedError",
    "NoMatchingSorryError",
    "ElaborationFailedError",
    "ScanHit",
    "LeafCommit",
    "BlameInfo",
    "IndexStats",
    "IndexerConfig",
    "scan_for_sorries",
    "enumerate_leaf_commits",
    "blame_metadata",
    "extract_goal",
    "deduplicate",
    "index_repository",
    "index_listings",
    "PROP_PROBE_TACTIC",
]

logger = logging.getLogger(__name__)

# Elaborates iff the goal's expected type is a proposition: the helper's
# implicit argument lives in Prop, so unification fails on Type-valued goals.
PROP_PROBE_TACTIC = "exact _root_.Classical.byContradiction sorry"

_SORRY = "sorry"


class GitQueryFailedError(SorryForgeError):
    pass


class BlameFailedError(SorryForgeError):
    pass


class NoMatchingSorryError(SorryForgeError):
    pass


class ElaborationFailedError(SorryForgeError):
    pass


@dataclass(frozen=True, slots=True)
class ScanHit:
    location: SourceLocation
    token: str = _SORRY


@dataclass(frozen=True, slots=True)
class LeafCommit:
    branch: str
    commit: str
    committed_at: datetime


@dataclass(frozen=True, slots=True)
class BlameInfo:
    email_hash: str
    date: datetime


def _is_ident_char(ch: str) -> bool:
    return ch.isalnum() or ch in "_'"


def scan_for_sorries(source: str, path: str = "") -> list[ScanHit]:
    """Locate standalone ``sorry`` tokens outside comments and strings.

    Line comments (``--`` to end of line), nested block comments
    (``/- ... -/``, doc comments included), string literals with escapes,
    and simple char literals are skipped. Lines are 1-based, columns are
    0-based and count code points. A token is standalone when it does not
    extend an identifier on the left and no identifier character follows,
    so ``sorryAx``, ``mysorry``, ``sorry'`` and ``sorry₁`` never match.
    A lone prime on the left does not block (identifiers cannot begin
    with ``'``), so ``'sorry`` contains a match.
    """
    hits: list[ScanHit] = []
    i = 0
    line = 1
    col = 0
    n = len(source)
    state = "code"
    depth = 0
    ident_start: tuple[int, int, int] | None = None

    def advance(count: int = 1) -> None:
        nonlocal i, line, col
        for _ in range(count):
            if source[i] == "\n":
                line += 1
                col = 0
            else:
                col += 1
            i += 1

    def close_ident() -> None:
        nonlocal ident_start
        if ident_start is None:
            return
        begin_i, begin_line, begin_col = ident_start
        ident_start = None
        if source[begin_i:i] == _SORRY:
            hits.append(
                ScanHit(
                    location=SourceLocation(
                        path=path,
                        start_line=begin_line,
                        start_column=begin_col,
                        end_line=line,
                        end_column=col,
                    )
                )
            )

    while i < n:
        ch = source[i]
        if state == "code":
            if ident_start is not None:
                if _is_ident_char(ch):
                    advance()
                    continue
                close_ident()
            if ch == "-" and source.startswith("--", i):
                state = "line_comment"
                advance(2)
                continue
            if ch == "/" and source.startswith("/-", i):
                state = "block_comment"
                depth = 1
                advance(2)
                continue
            if ch == '"':
                state = "string"
                advance()
                continue
            if ch == "'":
                # Char literal only when the quote does not extend an
                # identifier (that case is consumed by the ident branch).
                if i + 2 < n and source[i + 1] == "\\" and i + 3 < n and source[i + 3] == "'":
                    advance(4)
                elif i + 2 < n and source[i + 2] == "'" and source[i + 1] != "'":
                    advance(3)
                else:
                    advance()
                continue
            if _is_ident_char(ch):
                ident_start = (i, line, col)
                advance()
                continue
            advance()
        elif state == "line_comment":
            if ch == "\n":
                state = "code"
            advance()
        elif state == "block_comment":
            if source.startswith("-/", i):
                depth -= 1
                if depth == 0:
                    state = "code"
                advance(2)
            elif source.startswith("/-", i):
                depth += 1
                advance(2)
            else:
                advance()
        else:  # string
            if ch == "\\" and i + 1 < n:
                advance(2)
            elif ch == '"':
                state = "code"
                advance()
            else:
                advance()
    close_ident()
    return hits


def enumerate_leaf_commits(workspace: Workspace) -> list[LeafCommit]:
    """One entry per remote branch head, ordered by branch name."""
    proc = run_git(
        [
            "for-each-ref",
            "--format=%(refname)%09%(objectname)%09%(committerdate:unix)",
            "refs/remotes/origin",
        ],
        cwd=workspace.root,
        check=False,
    )
    if proc.returncode != 0:
        raise GitQueryFailedError(f"for-each-ref failed: {proc.stderr.strip()}")
    leaves: list[LeafCommit] = []
    for raw in proc.stdout.splitlines():
        refname, _, rest = raw.partition("\t")
        commit, _, stamp = rest.partition("\t")
        if refname == "refs/remotes/origin/HEAD" or not commit:
            continue
        branch = refname.removeprefix("refs/remotes/origin/")
        leaves.append(
            LeafCommit(
                branch=branch,
                commit=commit,
                committed_at=datetime.fromtimestamp(int(stamp), tz=timezone.utc),
            )
        )
    leaves.sort(key=lambda leaf: leaf.branch)
    return leaves


def blame_metadata(workspace: Workspace, location: SourceLocation) -> BlameInfo:
    """Author of the sorry line per git blame, email hashed, date in UTC."""
    proc = run_git(
        [
            "blame",
            "--line-porcelain",
            "-L",
            f"{location.start_line},{location.start_line}",
            workspace.coords.commit,
            "--",
            location.path,
        ],
        cwd=workspace.root,
        check=False,
    )
    if proc.returncode != 0:
        raise BlameFailedError(
            f"blame failed for {location.path}:{location.start_line}: {proc.stderr.strip()}"
        )
    email: str | None = None
    stamp: int | None = None
    for raw in proc.stdout.splitlines():
        if raw.startswith("author-mail "):
            email = raw.removeprefix("author-mail ").strip().strip("<>")
        elif raw.startswith("author-time "):
            stamp = int(raw.removeprefix("author-time ").strip())
    if email is None or stamp is None:
        raise BlameFailedError(f"blame output missing author data for {location.path}")
    return BlameInfo(
        email_hash=hash_email(email),
        date=datetime.fromtimestamp(stamp, tz=timezone.utc),
    )


def _probe_is_prop(session: ReplSession, proof_state: int, timeout_s: float) -> bool:
    reply = session.raw_request({"tactic": PROP_PROBE_TACTIC, "proofState": proof_state}, timeout_s)
    if "message" in reply:
        return False
    for message in reply.get("messages", []):
        if isinstance(message, Mapping) and message.get("severity") == "error":
            return False
    return True


def extract_goal(
    session: ReplSession,
    workspace: Workspace,
    hit: ScanHit,
    file: str,
    timeout_s: float = 300.0,
) -> GoalState:
    """Elaborate the file and return the hit's goal text and prop-ness.

    The REPL's reported sorries are matched to the hit by exact start
    position. When the response does not state prop-ness, a follow-up
    tactic probe on the proof state decides it.
    """
    text = (workspace.root / file).read_text(encoding="utf-8")
    response = check_file(session, ReplRequest(cmd=text), timeout_s)
    errors = response.error_messages()
    if errors:
        raise ElaborationFailedError(f"{file} failed to elaborate: {errors[0]}")
    for entry in response.sorries:
        if entry.location.start() == hit.location.start():
            if entry.is_prop is not None:
                return GoalState(pretty=entry.goal, is_prop=entry.is_prop)
            return GoalState(
                pretty=entry.goal,
                is_prop=_probe_is_prop(session, entry.proof_state, timeout_s),
            )
    raise NoMatchingSorryError(
        f"no reported sorry at {file}:{hit.location.start_line}:{hit.location.start_column}"
    )


def deduplicate(records: Iterable[SorryRecord]) -> list[SorryRecord]:
    """Collapse records sharing (remote, normalized goal).

    The survivor has the maximal blame date, ties broken by maximal
    inclusion date then minimal id. Output is ordered by remote
    ascending, blame date descending, id ascending.
    """
    best: dict[tuple[str, str], SorryRecord] = {}
    for record in records:
        key = (record.repo.remote, normalize_goal(record.debug_info.goal))
        current = best.get(key)
        if current is None:
            best[key] = record
            continue
        candidate_rank = (record.metadata.blame_date, record.metadata.inclusion_date)
        current_rank = (current.metadata.blame_date, current.metadata.inclusion_date)
        if candidate_rank > current_rank or (candidate_rank == current_rank and record.id < current.id):
            best[key] = record
    return sorted(
        best.values(),
        key=lambda r: (r.repo.remote, _descending(r.metadata.blame_date), r.id),
    )


def _descending(value: datetime) -> float:
    return -value.timestamp()


@dataclass
class IndexStats:
    """Drop counters for one indexing run, plus the emitted record count."""

    records: int = 0
    build_failure: int = 0
    elaboration_failure: int = 0
    non_prop: int = 0
    no_match: int = 0
    duplicate: int = 0

    def as_json(self) -> dict[str, Any]:
        return {
            "records": self.records,
            "drops": {
                "build_failure": self.build_failure,
                "elaboration_failure": self.elaboration_failure,
                "non_prop": self.non_prop,
                "no_match": self.no_match,
                "duplicate": self.duplicate,
            },
        }

    def merge(self, other: "IndexStats") -> None:
        self.records += other.records
        self.build_failure += other.build_failure
        self.elaboration_failure += other.elaboration_failure
        self.non_prop += other.non_prop
        self.no_match += other.no_match
        self.duplicate += other.duplicate


@dataclass(frozen=True)
class IndexerConfig:
    cache_dir: str | None = None
    build_command: tuple[str, ...] = DEFAULT_BUILD_COMMAND
    build_timeout_s: float = DEFAULT_BUILD_TIMEOUT_S
    repl_timeout_s: float = 300.0
    inclusion_date: datetime | None = None
    backends: Mapping[str, Backend] = field(default_factory=dict)
    default_backend: Backend = RealBackend()

    def backend_for(self, remote: str) -> Backend:
        return self.backends.get(remote, self.default_backend)


def _resolve_remote_head(remote: str) -> tuple[str, str]:
    """Default branch name and its tip commit, via ls-remote."""
    proc = run_git(["ls-remote", "--symref", remote, "HEAD"], check=False)
    if proc.returncode != 0:
        raise GitQueryFailedError(f"ls-remote failed for {remote}: {proc.stderr.strip()}")
    branch = "main"
    commit = ""
    for raw in proc.stdout.splitlines():
        if raw.startswith("ref: "):
            branch = raw.split()[1].removeprefix("refs/heads/")
        elif raw.strip().endswith("HEAD"):
            commit = raw.split()[0]
    if not commit:
        raise GitQueryFailedError(f"no HEAD commit reported for {remote}")
    return branch, commit


def _blob_url(remote: str, commit: str, path: str, line: int) -> str:
    base = remote[:-4] if remote.endswith(".git") else remote
    return f"{base.rstrip('/')}/blob/{commit}/{path}#L{line}"


def _tracked_lean_files(workspace: Workspace) -> list[str]:
    proc = run_git(["ls-files", "*.lean"], cwd=workspace.root, check=False)
    if proc.returncode != 0:
        raise GitQueryFailedError(f"ls-files failed: {proc.stderr.strip()}")
    return [line for line in proc.stdout.splitlines() if line]


def index_repository(
    listing: RepoListing,
    config: IndexerConfig,
) -> tuple[list[SorryRecord], IndexStats]:
    """Index every leaf commit of one repository.

    Returns the deduplicated records plus drop statistics. Workspace
    errors propagate; the caller isolates per-repository failures.
    """
    stats = IndexStats()
    inclusion_date = config.inclusion_date or datetime.now(tz=timezone.utc).replace(microsecond=0)
    default_branch, head = _resolve_remote_head(listing.remote)
    bootstrap = RepoCoordinates(
        remote=listing.remote,
        branch=default_branch,
        commit=head,
        lean_version="unknown",
    )
    base_workspace = prepare_workspace(bootstrap, config.cache_dir)
    records: list[SorryRecord] = []
    for leaf in enumerate_leaf_commits(base_workspace):
        coords = replace(bootstrap, branch=leaf.branch, commit=leaf.commit)
        workspace = prepare_workspace(coords, config.cache_dir)
        workspace = build_workspace(workspace, config.build_command, config.build_timeout_s)
        if workspace.build_status is not BuildStatus.BUILT:
            stats.build_failure += 1
            logger.warning("build failed for %s@%s", listing.remote, leaf.commit[:12])
            continue
        session = open_session(workspace, config.backend_for(listing.remote))
        try:
            records.extend(_index_workspace(session, workspace, stats, inclusion_date, config))
        finally:
            session.close()
    before = len(records)
    records = deduplicate(records)
    stats.duplicate += before - len(records)
    stats.records = len(records)
    return records, stats


def _index_workspace(
    session: ReplSession,
    workspace: Workspace,
    stats: IndexStats,
    inclusion_date: datetime,
    config: IndexerConfig,
) -> list[SorryRecord]:
    records: list[SorryRecord] = []
    for file in _tracked_lean_files(workspace):
        text = (workspace.root / file).read_text(encoding="utf-8")
        hits = scan_for_sorries(text, path=file)
        if not hits:
            continue
        for hit in hits:
            try:
                goal = extract_goal(session, workspace, hit, file, config.repl_timeout_s)
            except NoMatchingSorryError:
                stats.no_match += 1
                continue
            except ElaborationFailedError:
                stats.elaboration_failure += 1
                break  # remaining hits in this file cannot elaborate either
            if not goal.is_prop:
                stats.non_prop += 1
                continue
            blame = blame_metadata(workspace, hit.location)
            records.append(
                new_record(
                    repo=workspace.coords,
                    location=hit.location,
                    goal=goal.pretty,
                    url=_blob_url(
                        workspace.coords.remote,
                        workspace.coords.commit,
                        file,
                        hit.location.start_line,
                    ),
                    blame_email_hash=blame.email_hash,
                    blame_date=blame.date,
                    inclusion_date=inclusion_date,
                )
            )
    return records


def index_listings(
    listings: Sequence[RepoListing],
    config: IndexerConfig,
    workers: int = 4,
) -> tuple[list[SorryRecord], dict[str, IndexStats], dict[str, str]]:
    """Index many repositories; one repository's failure never aborts the batch."""
    results: dict[str, tuple[list[SorryRecord], IndexStats]] = {}
    failures: dict[str, str] = {}

    def run(listing: RepoListing) -> None:
        try:
            results[listing.remote] = index_repository(listing, config)
        except (SorryForgeError, OSError) as exc:
            failures[listing.remote] = str(exc)
            logger.error("indexing failed for %s: %s", listing.remote, exc)

    if workers <= 1 or len(listings) <= 1:
        for listing in listings:
            run(listing)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, listings))

    records: list[SorryRecord] = []
    stats: dict[str, IndexStats] = {}
    for listing in listings:
        if listing.remote in results:
            repo_records, repo_stats = results[listing.remote]
            records.extend(repo_records)
            stats[listing.remote] = repo_stats
    return records, stats, failures
