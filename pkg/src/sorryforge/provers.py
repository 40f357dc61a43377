"""Prover strategies: deterministic tactics, sampling, and feedback loops.

Every strategy consumes a task (record plus file context) and a verify
callable, and produces attempt records pairing each proposal with its
verdict and token cost. The sequential strategies stop at the first
accepted proposal; plain sampling verifies every sample so any-of-k
metrics stay well defined.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from time import monotonic
from typing import Callable, Mapping, Sequence

from .llm import ChatClient, ClientError, SamplingParams
from .model import ProofProposal, SorryRecord, VerificationVerdict

__all__ = [
    "ProverTask",
    "TokenCount",
    "AttemptRecord",
    "LlmExchange",
    "VerifyFn",
    "SearchFn",
    "DEFAULT_CONTEXT_WINDOW",
    "DEFAULT_MAX_ITER",
    "DEFAULT_MAX_TOOL_ROUNDS",
    "DEFAULT_SAMPLE_COUNT",
    "load_default_tactics",
    "build_prompt",
    "extract_proposal",
    "parse_tool_call",
    "tactic_prover",
    "sample_llm",
    "self_correct_loop",
    "agentic_loop",
]

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_WINDOW = 20_000
DEFAULT_SAMPLE_COUNT = 32
DEFAULT_MAX_ITER = 16
DEFAULT_MAX_TOOL_ROUNDS = 5
TRUNCATION_MARKER = "[...truncated...]"

SAMPLING_TEMPERATURE = 1.0
LOOP_TEMPERATURE = 0.7

_SYSTEM_PROMPT = (
    "You are completing one unfinished Lean proof. The file below contains a "
    "sorry placeholder at the indicated position. Reply with replacement text "
    "for that sorry token only, inside a single fenced code block. Do not "
    "modify anything else in the file, do not add imports, and do not "
    "introduce new declarations."
)

_TOOL_PROMPT = (
    "Before answering you may call tools. To call one, reply with a single "
    'line containing only a JSON object such as {"tool": "search", "query": '
    '"..."}. Tool results will be appended to the conversation. When you are '
    "ready, reply with the replacement text in a single fenced code block."
)

_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)

VerifyFn = Callable[[ProofProposal], VerificationVerdict]
SearchFn = Callable[[str], list[dict[str, str]]]


@dataclass(frozen=True)
class ProverTask:
    """One obligation to attempt: the record plus its file context."""

    record: SorryRecord
    file_text: str
    context_window: int = DEFAULT_CONTEXT_WINDOW


@dataclass(frozen=True, slots=True)
class TokenCount:
    prompt: int = 0
    completion: int = 0

    def plus(self, prompt: int, completion: int) -> "TokenCount":
        return TokenCount(self.prompt + prompt, self.completion + completion)

    @property
    def total(self) -> int:
        return self.prompt + self.completion


@dataclass(frozen=True)
class AttemptRecord:
    proposal: ProofProposal
    verdict: VerificationVerdict
    tokens: TokenCount = TokenCount()
    wall_ms: int = 0


@dataclass
class LlmExchange:
    """A chat transcript; the first message is always the system message."""

    messages: list[dict[str, str]]
    model_id: str = ""
    sampling: SamplingParams = SamplingParams()

    def append(self, role: str, content: str) -> None:
        self.messages.append({"role": role, "content": content})


def load_default_tactics(path: str | Path | None = None) -> list[str]:
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = resources.files("sorryforge.data").joinpath("tactics.json").read_text(encoding="utf-8")
    entries = json.loads(text)
    return [str(entry) for entry in entries]


def _line_offsets(text: str) -> list[int]:
    offsets = [0]
    for index, ch in enumerate(text):
        if ch == "\n":
            offsets.append(index + 1)
    return offsets


def _windowed_file(task: ProverTask) -> str:
    """File text cut to the context window, centered on the sorry.

    The line holding the sorry is always included whole; cut ends get
    truncation markers.
    """
    text = task.file_text
    budget = task.context_window
    if len(text) <= budget:
        return text
    offsets = _line_offsets(text)
    loc = task.record.location
    line_index = min(loc.start_line - 1, len(offsets) - 1)
    center = offsets[line_index] + loc.start_column
    lo = center - budget // 2
    hi = center + budget // 2
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > len(text):
        lo -= hi - len(text)
        hi = len(text)
    lo = max(lo, 0)
    line_start = offsets[line_index]
    line_end = offsets[line_index + 1] - 1 if line_index + 1 < len(offsets) else len(text)
    lo = min(lo, line_start)
    hi = max(hi, line_end)
    snippet = text[lo:hi]
    if lo > 0:
        snippet = f"{TRUNCATION_MARKER}\n{snippet}"
    if hi < len(text):
        snippet = f"{snippet}\n{TRUNCATION_MARKER}"
    return snippet


def build_prompt(task: ProverTask, model_id: str = "", sampling: SamplingParams | None = None) -> LlmExchange:
    """Seed transcript: system contract plus the task context.

    The goal text appears verbatim; the file is truncated symmetrically
    around the sorry to the task's context window.
    """
    record = task.record
    user = (
        f"Repository: {record.repo.remote}\n"
        f"File: {record.location.path}\n"
        f"Sorry at line {record.location.start_line}, column {record.location.start_column}\n"
        f"Goal:\n{record.debug_info.goal}\n\n"
        f"File contents:\n{_windowed_file(task)}"
    )
    return LlmExchange(
        messages=[
            {"role": "system", "content": _SYSTEM_PROMPT},
            {"role": "user", "content": user},
        ],
        model_id=model_id,
        sampling=sampling or SamplingParams(temperature=SAMPLING_TEMPERATURE),
    )


def extract_proposal(completion: str) -> str:
    """First fenced code block, else the whole completion stripped."""
    match = _FENCE.search(completion)
    if match:
        return match.group(1).strip("\n")
    return completion.strip()


@dataclass(frozen=True)
class ToolCall:
    name: str
    query: str
    error: str | None = None


def parse_tool_call(completion: str) -> ToolCall | None:
    """Find a tool call: a single JSON object alone on its line.

    Returns a ToolCall with ``error`` set when the line looks like a tool
    call but cannot be used as one.
    """
    for raw in completion.splitlines():
        line = raw.strip()
        if not (line.startswith("{") and '"tool"' in line):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            return ToolCall(name="", query="", error=f"malformed tool call: {line[:200]}")
        if not isinstance(obj, dict):
            continue
        name = obj.get("tool")
        query = obj.get("query")
        if not isinstance(name, str) or not isinstance(query, str):
            return ToolCall(name="", query="", error=f"tool call missing tool/query strings: {line[:200]}")
        return ToolCall(name=name, query=query)
    return None


def _feedback_message(verdict: VerificationVerdict) -> str:
    details = "\n".join(verdict.messages)
    body = f"The proposal was rejected: {verdict.status.value}."
    if details:
        body += f"\nVerifier output:\n{details}"
    body += "\nProvide a corrected replacement in a single fenced code block."
    return body


def tactic_prover(
    task: ProverTask,
    tactics: Sequence[str],
    verify: VerifyFn,
    origin: str = "tactics",
) -> list[AttemptRecord]:
    """Try each tactic in the configured order, stopping at the first accept.

    Deterministic and token-free; verifier environment errors propagate.
    """
    attempts: list[AttemptRecord] = []
    for iteration, tactic in enumerate(tactics):
        proposal = ProofProposal(sorry_id=task.record.id, text=tactic, origin=origin, iteration=iteration)
        started = monotonic()
        verdict = verify(proposal)
        attempts.append(
            AttemptRecord(
                proposal=proposal,
                verdict=verdict,
                tokens=TokenCount(),
                wall_ms=int((monotonic() - started) * 1000),
            )
        )
        if verdict.accepted:
            break
    return attempts


def sample_llm(
    task: ProverTask,
    client: ChatClient,
    verify: VerifyFn,
    n: int = DEFAULT_SAMPLE_COUNT,
    origin: str = "sample",
) -> list[AttemptRecord]:
    """Draw n independent samples from the same seed prompt; verify them all.

    A client error loses that sample but never aborts the remaining ones.
    """
    seed = build_prompt(task, model_id=getattr(client, "model_id", ""))
    attempts: list[AttemptRecord] = []
    for iteration in range(n):
        started = monotonic()
        try:
            completion = client.complete(seed.messages, seed.sampling)
        except ClientError as exc:
            logger.warning("sample %d failed for %s: %s", iteration, task.record.id[:12], exc)
            continue
        text = extract_proposal(completion.content)
        if not text:
            logger.warning("sample %d empty for %s", iteration, task.record.id[:12])
            continue
        proposal = ProofProposal(sorry_id=task.record.id, text=text, origin=origin, iteration=iteration)
        verdict = verify(proposal)
        attempts.append(
            AttemptRecord(
                proposal=proposal,
                verdict=verdict,
                tokens=TokenCount(completion.prompt_tokens, completion.completion_tokens),
                wall_ms=int((monotonic() - started) * 1000),
            )
        )
    return attempts


def self_correct_loop(
    task: ProverTask,
    client: ChatClient,
    verify: VerifyFn,
    max_iter: int = DEFAULT_MAX_ITER,
    origin: str = "self_correct",
) -> list[AttemptRecord]:
    """Resample with the verifier's feedback until accepted or exhausted.

    After each rejection the verdict status and messages are appended to
    the transcript verbatim. A client error aborts the loop but preserves
    the attempts made so far.
    """
    exchange = build_prompt(
        task,
        model_id=getattr(client, "model_id", ""),
        sampling=SamplingParams(temperature=LOOP_TEMPERATURE),
    )
    attempts: list[AttemptRecord] = []
    for iteration in range(max_iter):
        started = monotonic()
        try:
            completion = client.complete(exchange.messages, exchange.sampling)
        except ClientError as exc:
            logger.warning("self-correct aborted for %s: %s", task.record.id[:12], exc)
            break
        exchange.append("assistant", completion.content)
        text = extract_proposal(completion.content)
        if not text:
            exchange.append("user", "The reply was empty. Provide the replacement in a fenced code block.")
            continue
        proposal = ProofProposal(sorry_id=task.record.id, text=text, origin=origin, iteration=iteration)
        verdict = verify(proposal)
        attempts.append(
            AttemptRecord(
                proposal=proposal,
                verdict=verdict,
                tokens=TokenCount(completion.prompt_tokens, completion.completion_tokens),
                wall_ms=int((monotonic() - started) * 1000),
            )
        )
        if verdict.accepted:
            break
        exchange.append("user", _feedback_message(verdict))
    return attempts


def agentic_loop(
    task: ProverTask,
    client: ChatClient,
    tools: Mapping[str, SearchFn],
    verify: VerifyFn,
    max_iter: int = DEFAULT_MAX_ITER,
    max_tool_rounds: int = DEFAULT_MAX_TOOL_ROUNDS,
    origin: str = "agentic",
) -> list[AttemptRecord]:
    """Self-correction with tool use.

    Within each iteration the model may call tools up to
    ``max_tool_rounds`` times; the next call is refused and the model must
    propose. With no tool calls this degenerates to the self-correct loop.
    """
    if "search" not in tools:
        raise ValueError("tools must provide a search tool")
    exchange = build_prompt(
        task,
        model_id=getattr(client, "model_id", ""),
        sampling=SamplingParams(temperature=LOOP_TEMPERATURE),
    )
    exchange.messages[0]["content"] += f"\n\n{_TOOL_PROMPT}"
    attempts: list[AttemptRecord] = []
    for iteration in range(max_iter):
        started = monotonic()
        tokens = TokenCount()
        rounds = 0
        completion_text: str | None = None
        aborted = False
        while completion_text is None:
            try:
                completion = client.complete(exchange.messages, exchange.sampling)
            except ClientError as exc:
                logger.warning("agentic loop aborted for %s: %s", task.record.id[:12], exc)
                aborted = True
                break
            tokens = tokens.plus(completion.prompt_tokens, completion.completion_tokens)
            exchange.append("assistant", completion.content)
            call = parse_tool_call(completion.content)
            if call is None:
                completion_text = completion.content
                break
            if rounds >= max_tool_rounds:
                # Refused: budget exhausted; the next reply is the proposal.
                exchange.append(
                    "user",
                    f"Tool budget exhausted after {max_tool_rounds} calls. "
                    "Reply now with the replacement text in a single fenced code block.",
                )
                try:
                    final = client.complete(exchange.messages, exchange.sampling)
                except ClientError as exc:
                    logger.warning("agentic loop aborted for %s: %s", task.record.id[:12], exc)
                    aborted = True
                    break
                tokens = tokens.plus(final.prompt_tokens, final.completion_tokens)
                exchange.append("assistant", final.content)
                completion_text = final.content
                break
            rounds += 1
            exchange.append("tool", _run_tool(tools, call))
        if aborted:
            break
        assert completion_text is not None
        text = extract_proposal(completion_text)
        if not text:
            exchange.append("user", "The reply was empty. Provide the replacement in a fenced code block.")
            continue
        proposal = ProofProposal(sorry_id=task.record.id, text=text, origin=origin, iteration=iteration)
        verdict = verify(proposal)
        attempts.append(
            AttemptRecord(
                proposal=proposal,
                verdict=verdict,
                tokens=tokens,
                wall_ms=int((monotonic() - started) * 1000),
            )
        )
        if verdict.accepted:
            break
        exchange.append("user", _feedback_message(verdict))
    return attempts


def _run_tool(tools: Mapping[str, SearchFn], call: ToolCall) -> str:
    if call.error:
        return json.dumps({"error": call.error}, ensure_ascii=False)
    tool = tools.get(call.name)
    if tool is None:
        return json.dumps({"error": f"unknown tool: {call.name}"}, ensure_ascii=False)
    try:
        results = tool(call.query)
    except Exception as exc:  # tool misbehavior is feedback, not a crash
        return json.dumps({"error": f"tool {call.name} failed: {exc}"}, ensure_ascii=False)
    return json.dumps({"results": results}, ensure_ascii=False)
