"""Evaluation harness: slice selection, prover runs, resumable results.

A run visits every (task, prover) pair exactly once. Results append to
one NDJSON file per prover keyed by (sorry_id, prover_id), so an
interrupted run resumes from its log without repeating completed pairs.
Failures are isolated per pair and recorded as unsolved with a
diagnostic.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

from .errors import SorryForgeError
from .indexer import deduplicate  # noqa: F401  (re-exported for pipeline callers)
from .llm import ChatClient, HttpChatClient, ScriptedChatClient
from .model import (
    DatasetSnapshot,
    ProofProposal,
    RepoCategory,
    SorryRecord,
    VerdictStatus,
    VerificationVerdict,
    format_timestamp,
)
from .provers import (
    AttemptRecord,
    ProverTask,
    SearchFn,
    TokenCount,
    VerifyFn,
    agentic_loop,
    load_default_tactics,
    sample_llm,
    self_correct_loop,
    tactic_prover,
    DEFAULT_CONTEXT_WINDOW,
    DEFAULT_MAX_ITER,
    DEFAULT_MAX_TOOL_ROUNDS,
    DEFAULT_SAMPLE_COUNT,
)
from .registry import load_category_rules, RepoListing, assign_category
from .repl import Backend, MockBackend, RealBackend, ReplSession, open_session
from .verifier import (
    DEFAULT_FORBIDDEN_AXIOMS,
    verdict_json,
    verify_proposal,
)
from .workspace import (
    Workspace,
    build_workspace,
    prepare_workspace,
    DEFAULT_BUILD_COMMAND,
)

__all__ = [
    "ProverSpec",
    "Prover",
    "RunRecord",
    "TaskEnvironment",
    "WorkspaceTaskEnvironment",
    "select_test_slice",
    "run_evaluation",
    "run_record_to_json",
    "run_record_from_json",
    "attempt_to_json",
    "attempt_from_json",
    "build_provers",
    "build_backend",
    "category_resolver",
    "load_run_records",
    "RUNS_SUBDIR",
    "MANIFEST_NAME",
]

logger = logging.getLogger(__name__)

RUNS_SUBDIR = "runs"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ProverSpec:
    """Identity, display, and metrics metadata for one prover."""

    prover_id: str
    label: str
    group: str = "deterministic"
    pass_k: int | None = None
    kind: str = ""

    def as_json(self) -> dict[str, Any]:
        return {
            "prover_id": self.prover_id,
            "label": self.label,
            "group": self.group,
            "pass_k": self.pass_k,
            "kind": self.kind,
        }

    @staticmethod
    def from_json(obj: Mapping[str, Any]) -> "ProverSpec":
        return ProverSpec(
            prover_id=str(obj["prover_id"]),
            label=str(obj.get("label") or obj["prover_id"]),
            group=str(obj.get("group", "deterministic")),
            pass_k=obj.get("pass_k"),
            kind=str(obj.get("kind", "")),
        )


@dataclass(frozen=True)
class Prover:
    spec: ProverSpec
    run: Callable[[ProverTask, VerifyFn], list[AttemptRecord]]


@dataclass(frozen=True)
class RunRecord:
    """One (task, prover) outcome."""

    sorry_id: str
    prover_id: str
    category: str
    attempts: tuple[AttemptRecord, ...]
    solved: bool
    error: str | None = None


def attempt_to_json(attempt: AttemptRecord) -> dict[str, Any]:
    obj = verdict_json(attempt.proposal, attempt.verdict)
    obj["text"] = attempt.proposal.text
    obj["tokens"] = {"prompt": attempt.tokens.prompt, "completion": attempt.tokens.completion}
    obj["wall_ms"] = attempt.wall_ms
    return obj


def attempt_from_json(obj: Mapping[str, Any]) -> AttemptRecord:
    tokens = obj.get("tokens", {})
    return AttemptRecord(
        proposal=ProofProposal(
            sorry_id=str(obj["sorry_id"]),
            text=str(obj["text"]),
            origin=str(obj["origin"]),
            iteration=int(obj["iteration"]),
        ),
        verdict=VerificationVerdict(
            status=VerdictStatus(obj["status"]),
            messages=tuple(obj.get("messages", [])),
            elapsed_ms=int(obj.get("elapsed_ms", 0)),
        ),
        tokens=TokenCount(int(tokens.get("prompt", 0)), int(tokens.get("completion", 0))),
        wall_ms=int(obj.get("wall_ms", 0)),
    )


def run_record_to_json(run: RunRecord) -> dict[str, Any]:
    return {
        "sorry_id": run.sorry_id,
        "prover_id": run.prover_id,
        "category": run.category,
        "solved": run.solved,
        "error": run.error,
        "attempts": [attempt_to_json(attempt) for attempt in run.attempts],
    }


def run_record_from_json(obj: Mapping[str, Any]) -> RunRecord:
    return RunRecord(
        sorry_id=str(obj["sorry_id"]),
        prover_id=str(obj["prover_id"]),
        category=str(obj.get("category", "")),
        attempts=tuple(attempt_from_json(entry) for entry in obj.get("attempts", [])),
        solved=bool(obj["solved"]),
        error=obj.get("error"),
    )


def select_test_slice(snapshot: DatasetSnapshot, n: int) -> DatasetSnapshot:
    """Newest-first round-robin over repositories.

    Within each repository records sort by blame date descending (ties by
    id ascending); repositories cycle in remote order, skipping exhausted
    ones, until n records are chosen or the snapshot runs out.
    """
    queues: dict[str, list[SorryRecord]] = {}
    for record in snapshot.records:
        queues.setdefault(record.repo.remote, []).append(record)
    for remote in queues:
        queues[remote].sort(key=lambda r: (-r.metadata.blame_date.timestamp(), r.id))
    remotes = sorted(queues)
    chosen: list[SorryRecord] = []
    cursors = {remote: 0 for remote in remotes}
    while len(chosen) < n:
        progressed = False
        for remote in remotes:
            if len(chosen) >= n:
                break
            cursor = cursors[remote]
            if cursor < len(queues[remote]):
                chosen.append(queues[remote][cursor])
                cursors[remote] = cursor + 1
                progressed = True
        if not progressed:
            break
    return DatasetSnapshot.build(snapshot.name, snapshot.cutoff, chosen)


class TaskEnvironment(Protocol):
    """Provides the task view and verify callable for a record."""

    def open_task(self, record: SorryRecord) -> tuple[ProverTask, VerifyFn]:
        ...

    def close(self) -> None:
        ...


class WorkspaceTaskEnvironment:
    """Tasks backed by cached workspaces and one session per checkout.

    Verification serializes per workspace, so multiple workers are safe
    as long as they touch different repositories.
    """

    def __init__(
        self,
        cache_dir: str | None = None,
        backends: Mapping[str, Backend] | None = None,
        default_backend: Backend | None = None,
        build_command: tuple[str, ...] = DEFAULT_BUILD_COMMAND,
        build_timeout_s: float = 3600.0,
        repl_timeout_s: float = 300.0,
        forbidden_axioms: Sequence[str] = DEFAULT_FORBIDDEN_AXIOMS,
        context_window: int = DEFAULT_CONTEXT_WINDOW,
    ) -> None:
        self._cache_dir = cache_dir
        self._backends = dict(backends or {})
        self._default_backend = default_backend or RealBackend()
        self._build_command = build_command
        self._build_timeout_s = build_timeout_s
        self._repl_timeout_s = repl_timeout_s
        self._forbidden_axioms = tuple(forbidden_axioms)
        self._context_window = context_window
        self._lock = threading.Lock()
        self._sessions: dict[tuple[str, str], tuple[Workspace, ReplSession, threading.Lock]] = {}

    def _backend_for(self, remote: str) -> Backend:
        return self._backends.get(remote, self._default_backend)

    def _session_for(self, record: SorryRecord) -> tuple[Workspace, ReplSession, threading.Lock]:
        key = (record.repo.remote, record.repo.commit)
        with self._lock:
            if key not in self._sessions:
                workspace = prepare_workspace(record.repo, self._cache_dir)
                workspace = build_workspace(workspace, self._build_command, self._build_timeout_s)
                session = open_session(workspace, self._backend_for(record.repo.remote))
                self._sessions[key] = (workspace, session, threading.Lock())
            return self._sessions[key]

    def open_task(self, record: SorryRecord) -> tuple[ProverTask, VerifyFn]:
        workspace, session, lock = self._session_for(record)
        file_text = (workspace.root / record.location.path).read_text(encoding="utf-8")
        task = ProverTask(record=record, file_text=file_text, context_window=self._context_window)

        def verify(proposal: ProofProposal) -> VerificationVerdict:
            with lock:
                return verify_proposal(
                    session,
                    workspace,
                    record,
                    proposal,
                    timeout_s=self._repl_timeout_s,
                    forbidden_axioms=self._forbidden_axioms,
                )

        return task, verify

    def close(self) -> None:
        with self._lock:
            for _, session, _ in self._sessions.values():
                session.close()
            self._sessions.clear()


def category_resolver(rules_path: str | Path | None = None) -> Callable[[str], RepoCategory]:
    """Category of a remote via the rules file (defaults shipped)."""
    rules = load_category_rules(rules_path)

    def resolve(remote: str) -> RepoCategory:
        return assign_category(
            RepoListing(
                name="",
                remote=remote,
                license_id="",
                last_update=datetime.now(tz=timezone.utc),
                is_public=True,
            ),
            rules,
        )

    return resolve


def load_run_records(out_dir: str | Path) -> list[RunRecord]:
    """All persisted run records under the output directory."""
    runs_dir = Path(out_dir) / RUNS_SUBDIR
    records: list[RunRecord] = []
    if not runs_dir.is_dir():
        return records
    for path in sorted(runs_dir.glob("*.ndjson")):
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(run_record_from_json(json.loads(line)))
    return records


def _write_manifest(out_dir: Path, snapshot: DatasetSnapshot, provers: Sequence[Prover], workers: int) -> None:
    manifest = {
        "slice": snapshot.name,
        "cutoff": format_timestamp(snapshot.cutoff),
        "tasks": len(snapshot.records),
        "provers": [prover.spec.as_json() for prover in provers],
        "seeds": None,
        "workers": workers,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def run_evaluation(
    snapshot: DatasetSnapshot,
    provers: Sequence[Prover],
    environment: TaskEnvironment,
    out_dir: str | Path,
    workers: int = 1,
    category_of: Callable[[str], RepoCategory] | None = None,
) -> list[RunRecord]:
    """Run every (task, prover) pair once, appending results incrementally.

    Pairs already present in the NDJSON logs are not re-run. The returned
    list covers the full cross product in slice-then-prover order.
    """
    out_path = Path(out_dir)
    runs_dir = out_path / RUNS_SUBDIR
    runs_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_path, snapshot, provers, workers)
    resolve_category = category_of or category_resolver()

    done: dict[tuple[str, str], RunRecord] = {
        (record.sorry_id, record.prover_id): record for record in load_run_records(out_path)
    }
    pending = [
        (record, prover)
        for record in snapshot.records
        for prover in provers
        if (record.id, prover.spec.prover_id) not in done
    ]

    def run_pair(pair: tuple[SorryRecord, Prover]) -> RunRecord:
        record, prover = pair
        category = resolve_category(record.repo.remote).value
        try:
            task, verify = environment.open_task(record)
            attempts = prover.run(task, verify)
        except (SorryForgeError, OSError) as exc:
            logger.warning("pair (%s, %s) failed: %s", record.id[:12], prover.spec.prover_id, exc)
            return RunRecord(
                sorry_id=record.id,
                prover_id=prover.spec.prover_id,
                category=category,
                attempts=(),
                solved=False,
                error=str(exc),
            )
        return RunRecord(
            sorry_id=record.id,
            prover_id=prover.spec.prover_id,
            category=category,
            attempts=tuple(attempts),
            solved=any(attempt.verdict.accepted for attempt in attempts),
        )

    if pending:
        if workers <= 1:
            outcomes = map(run_pair, pending)
        else:
            pool = ThreadPoolExecutor(max_workers=workers)
            outcomes = pool.map(run_pair, pending)
        try:
            for outcome in outcomes:
                done[(outcome.sorry_id, outcome.prover_id)] = outcome
                log_path = runs_dir / f"{outcome.prover_id}.ndjson"
                with log_path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(run_record_to_json(outcome), ensure_ascii=False, sort_keys=True) + "\n")
        finally:
            if workers > 1:
                pool.shutdown(wait=True)

    return [
        done[(record.id, prover.spec.prover_id)]
        for record in snapshot.records
        for prover in provers
        if (record.id, prover.spec.prover_id) in done
    ]


def _build_client(config: Mapping[str, Any], base_dir: Path) -> ChatClient:
    kind = config.get("kind", "scripted")
    if kind == "scripted":
        return ScriptedChatClient.from_file(
            base_dir / str(config["path"]),
            model_id=str(config.get("model", "scripted")),
        )
    if kind == "http":
        return HttpChatClient(
            endpoint=str(config["endpoint"]),
            model_id=str(config.get("model", "")),
            timeout_s=float(config.get("timeout_s", 120.0)),
        )
    raise ValueError(f"unknown client kind: {kind}")


def _build_tools(config: Mapping[str, Any], base_dir: Path) -> dict[str, SearchFn]:
    tools: dict[str, SearchFn] = {}
    for name, tool_config in config.items():
        kind = tool_config.get("kind", "scripted")
        if kind != "scripted":
            raise ValueError(f"unknown tool kind for {name}: {kind}")
        if "path" in tool_config:
            table = json.loads((base_dir / str(tool_config["path"])).read_text(encoding="utf-8"))
        else:
            table = tool_config.get("results", {})

        def search(query: str, table: Mapping[str, Any] = table) -> list[dict[str, str]]:
            return list(table.get(query, table.get("*", [])))

        tools[name] = search
    if "search" not in tools:
        tools["search"] = lambda query: []
    return tools


def build_provers(config: Mapping[str, Any], base_dir: str | Path) -> list[Prover]:
    """Construct provers from a config document ({"provers": [...]})."""
    base = Path(base_dir)
    provers: list[Prover] = []
    for entry in config.get("provers", []):
        kind = str(entry.get("kind", "tactic"))
        prover_id = str(entry["id"])
        label = str(entry.get("label", prover_id))
        group = str(entry.get("group", "deterministic"))
        origin = str(entry.get("origin", prover_id))
        if kind == "tactic":
            tactics = [str(t) for t in entry.get("tactics", load_default_tactics())]
            spec = ProverSpec(prover_id=prover_id, label=label, group=group, kind=kind)

            def run_tactic(task: ProverTask, verify: VerifyFn, tactics: list[str] = tactics, origin: str = origin) -> list[AttemptRecord]:
                return tactic_prover(task, tactics, verify, origin=origin)

            provers.append(Prover(spec=spec, run=run_tactic))
        elif kind == "sample":
            n = int(entry.get("n", DEFAULT_SAMPLE_COUNT))
            client = _build_client(entry.get("client", {}), base)
            spec = ProverSpec(prover_id=prover_id, label=label, group=group, pass_k=n, kind=kind)

            def run_sample(task: ProverTask, verify: VerifyFn, client: ChatClient = client, n: int = n, origin: str = origin) -> list[AttemptRecord]:
                return sample_llm(task, client, verify, n=n, origin=origin)

            provers.append(Prover(spec=spec, run=run_sample))
        elif kind == "self_correct":
            max_iter = int(entry.get("max_iter", DEFAULT_MAX_ITER))
            client = _build_client(entry.get("client", {}), base)
            spec = ProverSpec(prover_id=prover_id, label=label, group=group, kind=kind)

            def run_self_correct(task: ProverTask, verify: VerifyFn, client: ChatClient = client, max_iter: int = max_iter, origin: str = origin) -> list[AttemptRecord]:
                return self_correct_loop(task, client, verify, max_iter=max_iter, origin=origin)

            provers.append(Prover(spec=spec, run=run_self_correct))
        elif kind == "agentic":
            max_iter = int(entry.get("max_iter", DEFAULT_MAX_ITER))
            max_tool_rounds = int(entry.get("max_tool_rounds", DEFAULT_MAX_TOOL_ROUNDS))
            client = _build_client(entry.get("client", {}), base)
            tools = _build_tools(entry.get("tools", {}), base)
            spec = ProverSpec(prover_id=prover_id, label=label, group=group, kind=kind)

            def run_agentic(
                task: ProverTask,
                verify: VerifyFn,
                client: ChatClient = client,
                tools: dict[str, SearchFn] = tools,
                max_iter: int = max_iter,
                max_tool_rounds: int = max_tool_rounds,
                origin: str = origin,
            ) -> list[AttemptRecord]:
                return agentic_loop(
                    task,
                    client,
                    tools,
                    verify,
                    max_iter=max_iter,
                    max_tool_rounds=max_tool_rounds,
                    origin=origin,
                )

            provers.append(Prover(spec=spec, run=run_agentic))
        else:
            raise ValueError(f"unknown prover kind: {kind}")
    return provers


def build_backend(config: Mapping[str, Any], base_dir: str | Path) -> tuple[dict[str, Backend], Backend]:
    """Backends per remote plus the default, from an environment config."""
    base = Path(base_dir)
    kind = str(config.get("kind", "real"))
    if kind == "real":
        command = tuple(str(part) for part in config.get("command", ("repl",)))
        return {}, RealBackend(command=command)
    if kind != "mock":
        raise ValueError(f"unknown backend kind: {kind}")
    backends: dict[str, Backend] = {}
    for remote, script in dict(config.get("scripts", {})).items():
        backends[remote] = MockBackend(script=base / str(script))
    if "script" in config:
        return backends, MockBackend(script=base / str(config["script"]))
    if backends:
        # Any per-remote script serves as the default for unlisted remotes.
        return backends, next(iter(backends.values()))
    raise ValueError("mock backend requires script or scripts")
