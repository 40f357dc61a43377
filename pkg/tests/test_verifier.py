"""Verifier: splicing, the verdict ladder, and environment failures."""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from sorryforge.model import ProofProposal, RepoCoordinates, VerdictStatus
from sorryforge.repl import MockSession, ReplTimeoutError
from sorryforge.verifier import (
    SpanMismatchError,
    VerificationEnvironmentError,
    splice_proposal,
    verdict_json,
    verify_proposal,
)
from sorryforge.workspace import BuildStatus, Workspace

from conftest import make_record

SOURCE = "theorem a : True := by sorry\ntheorem b : 1 = 1 := by sorry\n"

BASELINE = {
    "env": 0,
    "sorries": [
        {"pos": {"line": 1, "column": 23}, "endPos": {"line": 1, "column": 28}, "goal": "⊢ True", "proofState": 0},
        {"pos": {"line": 2, "column": 24}, "endPos": {"line": 2, "column": 29}, "goal": "⊢ 1 = 1", "proofState": 1},
    ],
}

REMAINING_SORRY = [{"pos": {"line": 2, "column": 24}, "goal": "⊢ 1 = 1", "proofState": 2}]


def entry(expect: str | None, response: dict) -> dict:
    made: dict = {"response": response}
    if expect is not None:
        made["expect_substring"] = expect
    return made


def baseline_entry() -> dict:
    return entry("theorem a : True := by sorry", BASELINE)


def spliced_ok_entry() -> dict:
    return entry("trivial", {"env": 1, "sorries": REMAINING_SORRY})


def axiom_entry(report: str = "'a' depends on axioms: [propext]") -> dict:
    return entry(
        "#print axioms a",
        {"env": 2, "messages": [{"severity": "info", "pos": {"line": 1, "column": 0}, "data": report}]},
    )


def make_workspace(tmp_path: Path, text: str = SOURCE, path: str = "A.lean") -> Workspace:
    (tmp_path / path).write_text(text, encoding="utf-8")
    return Workspace(
        root=tmp_path,
        coords=RepoCoordinates(
            remote="https://example.org/r.git", branch="main", commit="a" * 40, lean_version="v4.24.0"
        ),
        toolchain="v4.24.0",
        build_status=BuildStatus.BUILT,
    )


def proposal(text: str = "trivial", iteration: int = 0) -> ProofProposal:
    return ProofProposal(sorry_id=make_record().id, text=text, origin="test", iteration=iteration)


class TimeoutSession(MockSession):
    """Answers from the script until the Nth exchange, which times out."""

    def __init__(self, entries: list[dict], fail_on_call: int) -> None:
        super().__init__(entries)
        self._calls = 0
        self._fail_on_call = fail_on_call

    def _exchange(self, line: str, timeout_s: float) -> str:
        self._calls += 1
        if self._calls >= self._fail_on_call:
            raise ReplTimeoutError("simulated timeout")
        return super()._exchange(line, timeout_s)


class TestSplice:
    def test_direct_substitution(self):
        record = make_record()
        result = splice_proposal(SOURCE, record.location, "trivial")
        assert result.text == "theorem a : True := by trivial\ntheorem b : 1 = 1 := by sorry\n"
        assert result.replaced_span == record.location

    def test_multiline_continuation_indent(self):
        source = "theorem a : True := by sorry\n"
        record = make_record()
        result = splice_proposal(source, record.location, "constructor\n· rfl")
        assert result.text == "theorem a : True := by constructor\n" + " " * 23 + "· rfl\n"

    def test_unicode_columns_count_code_points(self):
        source = "example : α ∧ β := by sorry\n"
        record = make_record(start_column=22, end_column=27)
        result = splice_proposal(source, record.location, "exact ⟨ha, hb⟩")
        assert result.text == "example : α ∧ β := by exact ⟨ha, hb⟩\n"

    def test_stale_span_rejected(self):
        record = make_record(start_column=0, end_column=5)
        with pytest.raises(SpanMismatchError, match="theor"):
            splice_proposal(SOURCE, record.location, "trivial")

    def test_line_out_of_range(self):
        record = make_record(start_line=99, end_line=99)
        with pytest.raises(SpanMismatchError):
            splice_proposal(SOURCE, record.location, "trivial")


class TestVerdictLadder:
    def test_accepted(self, tmp_path):
        ws = make_workspace(tmp_path)
        session = MockSession([baseline_entry(), spliced_ok_entry(), axiom_entry()])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.ACCEPTED
        assert verdict.accepted
        assert verdict.messages == ()
        assert verdict.elapsed_ms >= 0
        assert session.remaining == 0

    def test_accepted_carries_diagnostics(self, tmp_path):
        ws = make_workspace(tmp_path)
        info = {"severity": "info", "pos": {"line": 1, "column": 0}, "data": "declaration uses 'trivial'"}
        session = MockSession(
            [baseline_entry(), entry("trivial", {"env": 1, "messages": [info], "sorries": REMAINING_SORRY}), axiom_entry()]
        )
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.ACCEPTED
        assert verdict.messages == ("declaration uses 'trivial'",)

    def test_build_failure(self, tmp_path):
        ws = make_workspace(tmp_path)
        error = {"severity": "error", "pos": {"line": 1, "column": 23}, "data": "unknown tactic"}
        session = MockSession([baseline_entry(), entry("trivial", {"env": 1, "messages": [error]})])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.BUILD_FAILURE
        assert verdict.messages == ("unknown tactic",)

    def test_build_failure_precedes_count_check(self, tmp_path):
        # Errors plus an unchanged sorry count must still read BuildFailure.
        ws = make_workspace(tmp_path)
        error = {"severity": "error", "pos": {"line": 1, "column": 23}, "data": "type mismatch"}
        session = MockSession(
            [baseline_entry(), entry("trivial", {"env": 1, "messages": [error], "sorries": BASELINE["sorries"]})]
        )
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.BUILD_FAILURE

    def test_sorry_count_unchanged(self, tmp_path):
        ws = make_workspace(tmp_path)
        session = MockSession([baseline_entry(), entry(None, {"env": 1, "sorries": BASELINE["sorries"]})])
        verdict = verify_proposal(session, ws, make_record(), proposal("sorry"))
        assert verdict.status is VerdictStatus.SORRY_COUNT_UNCHANGED
        assert verdict.messages == ("sorry count went from 2 to 2, expected 1",)

    def test_sorry_count_over_decreased(self, tmp_path):
        ws = make_workspace(tmp_path)
        session = MockSession([baseline_entry(), entry("trivial", {"env": 1, "sorries": []})])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.SORRY_COUNT_OVER_DECREASED
        assert verdict.messages == ("sorry count went from 2 to 0, expected 1",)

    def test_count_check_precedes_goal_comparison(self, tmp_path):
        # Unchanged count with mutated goals is a count verdict, not a goal one.
        ws = make_workspace(tmp_path)
        mutated = [
            {"pos": {"line": 1, "column": 23}, "goal": "⊢ False", "proofState": 5},
            {"pos": {"line": 2, "column": 24}, "goal": "⊢ 2 = 2", "proofState": 6},
        ]
        session = MockSession([baseline_entry(), entry(None, {"env": 1, "sorries": mutated})])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.SORRY_COUNT_UNCHANGED

    def test_other_goal_changed(self, tmp_path):
        ws = make_workspace(tmp_path)
        mutated = [{"pos": {"line": 2, "column": 24}, "goal": "⊢ 2 = 2", "proofState": 5}]
        session = MockSession([baseline_entry(), entry("trivial", {"env": 1, "sorries": mutated})])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.OTHER_GOAL_CHANGED
        assert sorted(verdict.messages) == [
            "missing goal (x1): ⊢ 1 = 1",
            "unexpected goal (x1): ⊢ 2 = 2",
        ]
        # No axiom query was issued: the script held no entry for one.
        assert session.remaining == 0

    def test_goal_comparison_uses_normalization(self, tmp_path):
        # Whitespace-only drift in the remaining goal is not a change.
        ws = make_workspace(tmp_path)
        drifted = [{"pos": {"line": 2, "column": 24}, "goal": "⊢  1 = 1\n", "proofState": 2}]
        session = MockSession([baseline_entry(), entry("trivial", {"env": 1, "sorries": drifted}), axiom_entry()])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.ACCEPTED

    def test_forbidden_axiom(self, tmp_path):
        ws = make_workspace(tmp_path)
        report = "'a' depends on axioms: [sorryAx]"
        session = MockSession([baseline_entry(), spliced_ok_entry(), axiom_entry(report)])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.FORBIDDEN_AXIOM
        assert verdict.messages == (report,)

    @pytest.mark.parametrize(
        "report",
        [
            "'a' depends on axioms: [Foo.sorryAx]",  # namespaced: different axiom
            "'a' depends on axioms: [sorryAx2]",  # identifier continues
            "'a' depends on axioms: [mysorryAx]",  # identifier precedes
        ],
    )
    def test_forbidden_axiom_is_word_bounded(self, tmp_path, report):
        ws = make_workspace(tmp_path)
        session = MockSession([baseline_entry(), spliced_ok_entry(), axiom_entry(report)])
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.ACCEPTED

    def test_custom_forbidden_list(self, tmp_path):
        ws = make_workspace(tmp_path)
        report = "'a' depends on axioms: [Classical.choice]"
        session = MockSession([baseline_entry(), spliced_ok_entry(), axiom_entry(report)])
        verdict = verify_proposal(
            session, ws, make_record(), proposal(), forbidden_axioms=("Classical.choice",)
        )
        assert verdict.status is VerdictStatus.FORBIDDEN_AXIOM

    def test_anonymous_declaration_skips_axiom_query(self, tmp_path):
        source = "example : True := by sorry\n"
        ws = make_workspace(tmp_path, text=source)
        record = make_record(start_column=21, end_column=26)
        lone = {"pos": {"line": 1, "column": 21}, "goal": "⊢ True", "proofState": 0}
        session = MockSession(
            [entry("example", {"env": 0, "sorries": [lone]}), entry("trivial", {"env": 1, "sorries": []})]
        )
        verdict = verify_proposal(session, ws, record, proposal())
        assert verdict.status is VerdictStatus.ACCEPTED
        assert session.remaining == 0

    def test_timeout_during_baseline(self, tmp_path):
        ws = make_workspace(tmp_path)
        session = TimeoutSession([], fail_on_call=1)
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.TIMEOUT
        assert verdict.messages == ("baseline elaboration timed out",)

    def test_timeout_during_spliced_check(self, tmp_path):
        ws = make_workspace(tmp_path)
        session = TimeoutSession([baseline_entry()], fail_on_call=2)
        verdict = verify_proposal(session, ws, make_record(), proposal())
        assert verdict.status is VerdictStatus.TIMEOUT
        assert verdict.messages == ("spliced elaboration timed out",)


class TestEnvironmentFailures:
    def test_baseline_errors_raise(self, tmp_path):
        ws = make_workspace(tmp_path)
        error = {"severity": "error", "pos": {"line": 1, "column": 0}, "data": "missing import"}
        session = MockSession([entry(None, {"env": 0, "messages": [error]})])
        with pytest.raises(VerificationEnvironmentError, match="does not elaborate"):
            verify_proposal(session, ws, make_record(), proposal())

    def test_missing_baseline_target_raises(self, tmp_path):
        ws = make_workspace(tmp_path)
        elsewhere = {"pos": {"line": 2, "column": 24}, "goal": "⊢ 1 = 1", "proofState": 1}
        session = MockSession([entry(None, {"env": 0, "sorries": [elsewhere]})])
        with pytest.raises(VerificationEnvironmentError, match="no baseline sorry at A.lean:1:23"):
            verify_proposal(session, ws, make_record(), proposal())

    def test_dead_session_raises(self, tmp_path):
        ws = make_workspace(tmp_path)
        with pytest.raises(VerificationEnvironmentError, match="baseline elaboration failed"):
            verify_proposal(MockSession([]), ws, make_record(), proposal())

    def test_axiom_query_timeout_raises(self, tmp_path):
        ws = make_workspace(tmp_path)
        session = TimeoutSession([baseline_entry(), spliced_ok_entry()], fail_on_call=3)
        with pytest.raises(VerificationEnvironmentError, match="axiom query timed out for a"):
            verify_proposal(session, ws, make_record(), proposal())

    def test_axiom_query_session_failure_raises(self, tmp_path):
        ws = make_workspace(tmp_path)
        session = MockSession([baseline_entry(), spliced_ok_entry()])
        with pytest.raises(VerificationEnvironmentError, match="axiom query failed for a"):
            verify_proposal(session, ws, make_record(), proposal())

    def test_missing_file_raises(self, tmp_path):
        ws = make_workspace(tmp_path)
        record = make_record(path="B.lean")
        with pytest.raises(VerificationEnvironmentError, match="cannot read"):
            verify_proposal(MockSession([]), ws, record, proposal())


class TestHygiene:
    def test_workspace_never_mutated(self, tmp_path):
        ws = make_workspace(tmp_path)
        before_bytes = (tmp_path / "A.lean").read_bytes()
        before_listing = sorted(os.listdir(tmp_path))
        session = MockSession([baseline_entry(), spliced_ok_entry(), axiom_entry()])
        verify_proposal(session, ws, make_record(), proposal())
        assert (tmp_path / "A.lean").read_bytes() == before_bytes
        assert sorted(os.listdir(tmp_path)) == before_listing

    def test_verification_is_repeatable(self, tmp_path):
        ws = make_workspace(tmp_path)
        outcomes = []
        for _ in range(2):
            session = MockSession([baseline_entry(), spliced_ok_entry(), axiom_entry()])
            verdict = verify_proposal(session, ws, make_record(), proposal())
            outcomes.append((verdict.status, verdict.messages))
        assert outcomes[0] == outcomes[1]


class TestVerdictJson:
    def test_exact_key_set_and_values(self):
        from sorryforge.model import VerificationVerdict

        prop = proposal(iteration=3)
        verdict = VerificationVerdict(VerdictStatus.ACCEPTED, ("note",), 17)
        payload = verdict_json(prop, verdict)
        assert set(payload) == {"sorry_id", "origin", "iteration", "status", "messages", "elapsed_ms"}
        assert payload["sorry_id"] == prop.sorry_id
        assert payload["origin"] == "test"
        assert payload["iteration"] == 3
        assert payload["status"] == "Accepted"
        assert payload["messages"] == ["note"]
        assert payload["elapsed_ms"] == 17
