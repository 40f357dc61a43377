"""Splice-and-check verification of proof proposals.

A proposal replaces exactly one ``sorry`` token. Acceptance requires, in
fixed precedence order: the spliced file elaborates without errors, the
sorry count drops by exactly one, every remaining goal matches the
baseline multiset minus the target, and no forbidden axiom appears in the
affected declaration. The baseline is recomputed from the unmodified file
in the same session on every call, so verification never trusts stale
index data.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from time import monotonic
from typing import Any, Iterable, Sequence

from .errors import SorryForgeError
from .model import (
    ProofProposal,
    SorryRecord,
    SourceLocation,
    VerdictStatus,
    VerificationVerdict,
    normalize_goal,
)
from .repl import (
    ProtocolError,
    ReplRequest,
    ReplResponse,
    ReplSession,
    ReplTimeoutError,
    ScriptExhaustedError,
    ScriptMismatchError,
    SessionDeadError,
    SpawnFailedError,
    check_file,
    DEFAULT_REPL_TIMEOUT_S,
)
from .workspace import Workspace

__all__ = [
    "SpanMismatchError",
    "VerificationEnvironmentError",
    "SpliceResult",
    "splice_proposal",
    "verify_proposal",
    "verdict_json",
    "DEFAULT_FORBIDDEN_AXIOMS",
]

DEFAULT_FORBIDDEN_AXIOMS: tuple[str, ...] = ("sorryAx",)

_SORRY = "sorry"

_SESSION_FAILURES = (SessionDeadError, ProtocolError, ScriptExhaustedError, ScriptMismatchError, SpawnFailedError)

_DECL_HEADER = re.compile(
    r"^\s*(?:@\[[^\]]*\]\s*)?"
    r"(?:private\s+|protected\s+|noncomputable\s+|partial\s+|unsafe\s+|nonrec\s+|scoped\s+|local\s+)*"
    r"(?:theorem|lemma|def|abbrev|instance|opaque)\s+"
    r"([^\s:(\[{⦃⟨]+)"
)


class SpanMismatchError(SorryForgeError):
    """The location does not point at a sorry token; the record is stale."""


class VerificationEnvironmentError(SorryForgeError):
    """The session or workspace failed; no verdict could be produced."""


@dataclass(frozen=True)
class SpliceResult:
    text: str
    replaced_span: SourceLocation


def _offset_of(lines: list[str], line: int, column: int) -> int:
    # Columns count code points; line lengths here include no newline.
    return sum(len(text) + 1 for text in lines[: line - 1]) + column


def splice_proposal(source: str, location: SourceLocation, proposal: str) -> SpliceResult:
    """Replace the sorry token at ``location`` with the proposal text.

    Continuation lines of a multi-line proposal are prefixed with the
    sorry's start-column indentation so nested tactic blocks keep their
    shape. Every byte outside the replaced span is preserved exactly.
    """
    lines = source.split("\n")
    if location.start_line < 1 or location.start_line > len(lines) or location.end_line > len(lines):
        raise SpanMismatchError(
            f"location {location.start_line}:{location.start_column} outside file of {len(lines)} lines"
        )
    begin = _offset_of(lines, location.start_line, location.start_column)
    end = _offset_of(lines, location.end_line, location.end_column)
    spanned = source[begin:end]
    if spanned != _SORRY:
        raise SpanMismatchError(f"span at {location.start_line}:{location.start_column} reads {spanned!r}")
    indent = " " * location.start_column
    pieces = proposal.split("\n")
    replacement = pieces[0] + "".join(f"\n{indent}{piece}" for piece in pieces[1:])
    return SpliceResult(text=source[:begin] + replacement + source[end:], replaced_span=location)


def _enclosing_declaration_name(source: str, location: SourceLocation) -> str | None:
    """Lexical scan upward for the declaration header covering the splice."""
    lines = source.split("\n")
    for index in range(min(location.start_line, len(lines)) - 1, -1, -1):
        match = _DECL_HEADER.match(lines[index])
        if match:
            return match.group(1)
    return None


def _count_verdict(n_before: int, n_after: int, elapsed_ms: int) -> VerificationVerdict:
    status = (
        VerdictStatus.SORRY_COUNT_UNCHANGED
        if n_after >= n_before
        else VerdictStatus.SORRY_COUNT_OVER_DECREASED
    )
    return VerificationVerdict(
        status=status,
        messages=(f"sorry count went from {n_before} to {n_after}, expected {n_before - 1}",),
        elapsed_ms=elapsed_ms,
    )


def _multiset_diff(expected: Counter[str], actual: Counter[str]) -> list[str]:
    notes: list[str] = []
    for goal, count in (actual - expected).items():
        notes.append(f"unexpected goal (x{count}): {goal}")
    for goal, count in (expected - actual).items():
        notes.append(f"missing goal (x{count}): {goal}")
    return notes


def _forbidden_hits(texts: Iterable[str], forbidden: Sequence[str]) -> list[str]:
    hits: list[str] = []
    for text in texts:
        for axiom in forbidden:
            if re.search(rf"(?<![A-Za-z0-9_.']){re.escape(axiom)}(?![A-Za-z0-9_'])", text):
                hits.append(text)
                break
    return hits


def verify_proposal(
    session: ReplSession,
    workspace: Workspace,
    record: SorryRecord,
    proposal: ProofProposal,
    timeout_s: float = DEFAULT_REPL_TIMEOUT_S,
    forbidden_axioms: Sequence[str] = DEFAULT_FORBIDDEN_AXIOMS,
) -> VerificationVerdict:
    """Verify one proposal against one record.

    Returns Timeout verdicts for REPL timeouts; raises
    :class:`VerificationEnvironmentError` when the session or workspace
    itself fails. The workspace tree is never modified.
    """
    started = monotonic()

    def elapsed() -> int:
        return int((monotonic() - started) * 1000)

    path = workspace.root / record.location.path
    try:
        original = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise VerificationEnvironmentError(f"cannot read {path}: {exc}") from exc

    try:
        baseline = check_file(session, ReplRequest(cmd=original), timeout_s)
    except ReplTimeoutError:
        return VerificationVerdict(VerdictStatus.TIMEOUT, ("baseline elaboration timed out",), elapsed())
    except _SESSION_FAILURES as exc:
        raise VerificationEnvironmentError(f"baseline elaboration failed: {exc}") from exc
    baseline_errors = baseline.error_messages()
    if baseline_errors:
        raise VerificationEnvironmentError(f"baseline file does not elaborate: {baseline_errors[0]}")

    target = next(
        (entry for entry in baseline.sorries if entry.location.start() == record.location.start()),
        None,
    )
    if target is None:
        raise VerificationEnvironmentError(
            f"no baseline sorry at {record.location.path}:{record.location.start_line}"
            f":{record.location.start_column}"
        )

    spliced = splice_proposal(original, record.location, proposal.text)
    try:
        outcome = check_file(session, ReplRequest(cmd=spliced.text), timeout_s)
    except ReplTimeoutError:
        return VerificationVerdict(VerdictStatus.TIMEOUT, ("spliced elaboration timed out",), elapsed())
    except _SESSION_FAILURES as exc:
        raise VerificationEnvironmentError(f"spliced elaboration failed: {exc}") from exc

    errors = outcome.error_messages()
    if errors:
        return VerificationVerdict(VerdictStatus.BUILD_FAILURE, tuple(errors), elapsed())

    n_before = len(baseline.sorries)
    n_after = len(outcome.sorries)
    if n_after != n_before - 1:
        return _count_verdict(n_before, n_after, elapsed())

    expected = Counter(normalize_goal(entry.goal) for entry in baseline.sorries)
    expected[normalize_goal(target.goal)] -= 1
    expected = +expected
    actual = Counter(normalize_goal(entry.goal) for entry in outcome.sorries)
    if actual != expected:
        return VerificationVerdict(
            VerdictStatus.OTHER_GOAL_CHANGED,
            tuple(_multiset_diff(expected, actual)),
            elapsed(),
        )

    axiom_messages = _query_axioms(session, spliced.text, record.location, outcome, timeout_s)
    forbidden = _forbidden_hits(axiom_messages, forbidden_axioms)
    if forbidden:
        return VerificationVerdict(VerdictStatus.FORBIDDEN_AXIOM, tuple(forbidden), elapsed())

    diagnostics = tuple(m.data for m in outcome.messages)
    return VerificationVerdict(VerdictStatus.ACCEPTED, diagnostics, elapsed())


def _query_axioms(
    session: ReplSession,
    spliced_text: str,
    location: SourceLocation,
    outcome: ReplResponse,
    timeout_s: float,
) -> list[str]:
    """Axiom report for the declaration overlapping the splice.

    Anonymous declarations cannot be queried by name; the check is then
    skipped and contributes no messages.
    """
    name = _enclosing_declaration_name(spliced_text, location)
    if name is None:
        return []
    try:
        report = check_file(
            session,
            ReplRequest(cmd=f"#print axioms {name}", env=outcome.env),
            timeout_s,
        )
    except ReplTimeoutError as exc:
        raise VerificationEnvironmentError(f"axiom query timed out for {name}") from exc
    except _SESSION_FAILURES as exc:
        raise VerificationEnvironmentError(f"axiom query failed for {name}: {exc}") from exc
    return [m.data for m in report.messages]


def verdict_json(proposal: ProofProposal, verdict: VerificationVerdict) -> dict[str, Any]:
    """Canonical serialized verdict; the unit record evaluation consumes."""
    return {
        "sorry_id": proposal.sorry_id,
        "origin": proposal.origin,
        "iteration": proposal.iteration,
        "status": verdict.status.value,
        "messages": list(verdict.messages),
        "elapsed_ms": verdict.elapsed_ms,
    }
