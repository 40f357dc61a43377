"""Core data model: records, goals, verdicts, snapshots.

A sorry record pins one unresolved proof obligation to an exact commit,
file position, and goal. Identity is content-addressed: the SHA-256 of a
canonical JSON serialization restricted to the fields that survive
re-indexing (remote, commit, path, start position, goal text). Everything
else (branch, end position, url, blame metadata) is context and excluded
so the same obligation observed twice hashes identically.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Callable, Iterable, Mapping

from .errors import SorryForgeError

__all__ = [
    "UTC",
    "CANONICAL_ID_FIELDS",
    "MissingFieldError",
    "SchemaError",
    "RepoCoordinates",
    "SourceLocation",
    "GoalState",
    "DebugInfo",
    "RecordMetadata",
    "SorryRecord",
    "RepoCategory",
    "ProofProposal",
    "VerdictStatus",
    "VerificationVerdict",
    "SnapshotManifest",
    "DatasetSnapshot",
    "parse_timestamp",
    "format_timestamp",
    "canonical_json",
    "compute_id",
    "normalize_goal",
    "validate_record",
    "hash_email",
    "new_record",
    "record_to_json",
    "record_from_json",
]

UTC = timezone.utc

# Fields hashed into a record's id, expressed as dotted paths.
CANONICAL_ID_FIELDS = (
    "repo.remote",
    "repo.commit",
    "location.path",
    "location.start_line",
    "location.start_column",
    "debug_info.goal",
)

_HEX40 = re.compile(r"[0-9a-f]{40}\Z")
_HEX64 = re.compile(r"[0-9a-f]{64}\Z")
_WHITESPACE_RUN = re.compile(r"[ \t\n\r]+")


class MissingFieldError(SorryForgeError):
    """A field required by the canonical serialization is absent."""


class SchemaError(SorryForgeError):
    """A serialized record or database does not match the schema."""


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime.

    Accepts a trailing ``Z`` or a numeric offset; naive inputs are taken
    as UTC. Sub-second precision is discarded: the canonical form is
    seconds-precision UTC.
    """
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise SchemaError(f"invalid timestamp: {text!r}") from exc
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=UTC)
    return parsed.astimezone(UTC).replace(microsecond=0)


def format_timestamp(value: datetime) -> str:
    """Render an aware datetime as seconds-precision RFC 3339 UTC."""
    if value.tzinfo is None:
        value = value.replace(tzinfo=UTC)
    return value.astimezone(UTC).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


def _jsonable(value: Any) -> Any:
    if isinstance(value, datetime):
        return format_timestamp(value)
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    return value


def canonical_json(value: Any) -> str:
    """Serialize to canonical JSON: sorted keys, compact, raw UTF-8."""
    return json.dumps(_jsonable(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True, slots=True)
class RepoCoordinates:
    """Where a record lives: remote URL, branch, commit, toolchain tag."""

    remote: str
    branch: str
    commit: str
    lean_version: str


@dataclass(frozen=True, slots=True)
class SourceLocation:
    """A half-open span in a file: 1-based lines, 0-based columns."""

    path: str
    start_line: int
    start_column: int
    end_line: int
    end_column: int

    def start(self) -> tuple[int, int]:
        return (self.start_line, self.start_column)

    def end(self) -> tuple[int, int]:
        return (self.end_line, self.end_column)


@dataclass(frozen=True, slots=True)
class GoalState:
    """Pretty-printed goal plus whether its expected type is a Prop."""

    pretty: str
    is_prop: bool


@dataclass(frozen=True, slots=True)
class DebugInfo:
    goal: str
    url: str


@dataclass(frozen=True, slots=True)
class RecordMetadata:
    blame_email_hash: str
    blame_date: datetime
    inclusion_date: datetime


@dataclass(frozen=True, slots=True)
class SorryRecord:
    repo: RepoCoordinates
    location: SourceLocation
    debug_info: DebugInfo
    metadata: RecordMetadata
    id: str


class RepoCategory(str, Enum):
    PEDAGOGICAL = "Pedagogical"
    TOOLING = "Tooling"
    BENCHMARK = "Benchmark"
    LIBRARY = "Library"
    FORMALIZATION = "Formalization"


@dataclass(frozen=True, slots=True)
class ProofProposal:
    """Replacement text for one sorry token."""

    sorry_id: str
    text: str
    origin: str
    iteration: int


class VerdictStatus(str, Enum):
    ACCEPTED = "Accepted"
    BUILD_FAILURE = "BuildFailure"
    SORRY_COUNT_UNCHANGED = "SorryCountUnchanged"
    SORRY_COUNT_OVER_DECREASED = "SorryCountOverDecreased"
    OTHER_GOAL_CHANGED = "OtherGoalChanged"
    FORBIDDEN_AXIOM = "ForbiddenAxiom"
    TIMEOUT = "Timeout"
    ENVIRONMENT_ERROR = "EnvironmentError"


@dataclass(frozen=True)
class VerificationVerdict:
    status: VerdictStatus
    messages: tuple[str, ...] = ()
    elapsed_ms: int = 0

    @property
    def accepted(self) -> bool:
        return self.status is VerdictStatus.ACCEPTED


def hash_email(email: str) -> str:
    """SHA-256 of the trimmed, lowercased author email."""
    return hashlib.sha256(email.strip().lower().encode("utf-8")).hexdigest()


def normalize_goal(text: str) -> str:
    """Normalization used as the dedup equality key.

    Unicode NFC, then every maximal whitespace run collapses to one
    space, then leading/trailing whitespace is stripped. Idempotent.
    """
    return _WHITESPACE_RUN.sub(" ", unicodedata.normalize("NFC", text)).strip()


def compute_id(record: SorryRecord) -> str:
    """Content-addressed identity over the canonical field set.

    Any ``id`` already on the record is ignored. Raises
    :class:`MissingFieldError` when a canonical field is absent.
    """
    values = {
        "repo.remote": record.repo.remote,
        "repo.commit": record.repo.commit,
        "location.path": record.location.path,
        "location.start_line": record.location.start_line,
        "location.start_column": record.location.start_column,
        "debug_info.goal": record.debug_info.goal,
    }
    for name, value in values.items():
        if value is None:
            raise MissingFieldError(f"canonical field missing: {name}")
    payload = {
        "repo": {"remote": values["repo.remote"], "commit": values["repo.commit"]},
        "location": {
            "path": values["location.path"],
            "start_line": values["location.start_line"],
            "start_column": values["location.start_column"],
        },
        "debug_info": {"goal": values["debug_info.goal"]},
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def new_record(
    repo: RepoCoordinates,
    location: SourceLocation,
    goal: str,
    url: str,
    blame_email_hash: str,
    blame_date: datetime,
    inclusion_date: datetime,
) -> SorryRecord:
    """Build a record and stamp its content-addressed id."""
    provisional = SorryRecord(
        repo=repo,
        location=location,
        debug_info=DebugInfo(goal=goal, url=url),
        metadata=RecordMetadata(
            blame_email_hash=blame_email_hash,
            blame_date=blame_date,
            inclusion_date=inclusion_date,
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


def _aware(value: datetime) -> bool:
    return value.tzinfo is not None


def validate_record(record: SorryRecord) -> list[str]:
    """Return invariant violations; an empty list means the record is valid."""
    violations: list[str] = []
    commit = record.repo.commit
    if len(commit) != 40:
        violations.append("commit: wrong length")
    elif not _HEX40.match(commit):
        violations.append("commit: not lowercase hex")
    if not record.repo.remote:
        violations.append("remote: empty")
    if not record.repo.lean_version:
        violations.append("lean_version: empty")

    loc = record.location
    if not loc.path:
        violations.append("path: empty")
    else:
        if loc.path.startswith("/"):
            violations.append("path: absolute path")
        if ".." in loc.path.split("/"):
            violations.append("path: parent traversal")
    if loc.start_line < 1:
        violations.append("start_line: must be at least 1")
    if loc.start_column < 0:
        violations.append("start_column: negative")
    if loc.start() >= loc.end():
        violations.append("location: start must precede end")

    if not record.debug_info.goal:
        violations.append("goal: empty")

    meta = record.metadata
    if not _HEX64.match(meta.blame_email_hash or ""):
        violations.append("blame_email_hash: not a 64-hex digest")
    if not _aware(meta.blame_date):
        violations.append("blame_date: missing timezone")
    if not _aware(meta.inclusion_date):
        violations.append("inclusion_date: missing timezone")
    if _aware(meta.blame_date) and _aware(meta.inclusion_date) and meta.blame_date > meta.inclusion_date:
        violations.append("blame_date: later than inclusion_date")

    if not _HEX64.match(record.id or ""):
        violations.append("id: not a 64-hex digest")
    else:
        try:
            expected = compute_id(record)
        except MissingFieldError:
            violations.append("id: canonical field missing")
        else:
            if record.id != expected:
                violations.append("id: digest mismatch")
    return violations


def record_to_json(record: SorryRecord) -> dict[str, Any]:
    """Serialize a record into its exchange schema."""
    return {
        "repo": {
            "remote": record.repo.remote,
            "branch": record.repo.branch,
            "commit": record.repo.commit,
            "lean_version": record.repo.lean_version,
        },
        "location": {
            "path": record.location.path,
            "start_line": record.location.start_line,
            "start_column": record.location.start_column,
            "end_line": record.location.end_line,
            "end_column": record.location.end_column,
        },
        "debug_info": {
            "goal": record.debug_info.goal,
            "url": record.debug_info.url,
        },
        "metadata": {
            "blame_email_hash": record.metadata.blame_email_hash,
            "blame_date": format_timestamp(record.metadata.blame_date),
            "inclusion_date": format_timestamp(record.metadata.inclusion_date),
        },
        "id": record.id,
    }


def _require(obj: Mapping[str, Any], key: str, section: str) -> Any:
    if not isinstance(obj, Mapping) or key not in obj:
        raise SchemaError(f"{section}.{key}: missing")
    return obj[key]


def record_from_json(obj: Mapping[str, Any]) -> SorryRecord:
    """Parse the exchange schema back into a record. Structural only."""
    repo = _require(obj, "repo", "record")
    location = _require(obj, "location", "record")
    debug = _require(obj, "debug_info", "record")
    meta = _require(obj, "metadata", "record")
    return SorryRecord(
        repo=RepoCoordinates(
            remote=_require(repo, "remote", "repo"),
            branch=_require(repo, "branch", "repo"),
            commit=_require(repo, "commit", "repo"),
            lean_version=_require(repo, "lean_version", "repo"),
        ),
        location=SourceLocation(
            path=_require(location, "path", "location"),
            start_line=_require(location, "start_line", "location"),
            start_column=_require(location, "start_column", "location"),
            end_line=_require(location, "end_line", "location"),
            end_column=_require(location, "end_column", "location"),
        ),
        debug_info=DebugInfo(
            goal=_require(debug, "goal", "debug_info"),
            url=_require(debug, "url", "debug_info"),
        ),
        metadata=RecordMetadata(
            blame_email_hash=_require(meta, "blame_email_hash", "metadata"),
            blame_date=parse_timestamp(_require(meta, "blame_date", "metadata")),
            inclusion_date=parse_timestamp(_require(meta, "inclusion_date", "metadata")),
        ),
        id=_require(obj, "id", "record"),
    )


@dataclass(frozen=True)
class SnapshotManifest:
    """Per-repo and per-category record counts for a snapshot."""

    repo_counts: dict[str, int] = field(default_factory=dict)
    category_counts: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetSnapshot:
    """An ordered, deduplicated record collection with a cutoff."""

    name: str
    cutoff: datetime
    records: tuple[SorryRecord, ...]
    manifest: SnapshotManifest

    @staticmethod
    def build(
        name: str,
        cutoff: datetime,
        records: Iterable[SorryRecord],
        category_of: Callable[[str], RepoCategory] | None = None,
    ) -> "DatasetSnapshot":
        ordered = tuple(records)
        repo_counts: dict[str, int] = {}
        category_counts: dict[str, int] = {}
        for record in ordered:
            remote = record.repo.remote
            repo_counts[remote] = repo_counts.get(remote, 0) + 1
            if category_of is not None:
                label = category_of(remote).value
                category_counts[label] = category_counts.get(label, 0) + 1
        return DatasetSnapshot(
            name=name,
            cutoff=cutoff,
            records=ordered,
            manifest=SnapshotManifest(repo_counts=repo_counts, category_counts=category_counts),
        )

    def validate(self) -> list[str]:
        violations: list[str] = []
        seen: set[str] = set()
        for record in self.records:
            if record.id in seen:
                violations.append(f"id: duplicate {record.id}")
            seen.add(record.id)
            if record.metadata.inclusion_date > self.cutoff:
                violations.append(f"inclusion_date: after cutoff for {record.id}")
        if sum(self.manifest.repo_counts.values()) != len(self.records):
            violations.append("manifest: repo counts do not sum to record count")
        if self.manifest.category_counts and sum(self.manifest.category_counts.values()) != len(self.records):
            violations.append("manifest: category counts do not sum to record count")
        return violations
