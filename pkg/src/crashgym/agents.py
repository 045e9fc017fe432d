"""Repair agents and the feedback-retry controller.

Two agents share one function-wise protocol: the model names candidate
functions, receives their definitions, and returns patched definitions in
fenced blocks; the system synthesizes a single clean diff. The Simple agent
gets a bug-type-specific exemplar patch up front; the Exploration agent
instead requests definitions on demand. A kGym-style raw-diff baseline mode
exists behind a flag to reproduce the bad-patch comparison.

All protocol markers are exact strings: ``CANDIDATE FUNCTIONS:``,
``FUNCTION: <name>`` fence headers, ``GET <name>``, ``PATCH``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from crashgym.crash import parse_report, signature
from crashgym.dataset import BugRecord, BugType
from crashgym.functions import (
    CandidatePatch,
    FunctionDef,
    FunctionEdit,
    NotFound,
    SourceTree,
    locate_function,
    synthesize_patch,
)
from crashgym.gym.executors import patch_digest
from crashgym.gym.jobs import (
    BuildJob,
    BuildOutcome,
    BuildOutcomeKind,
    ReproAggregate,
    ReproJob,
    ReproOutcome,
    encode_baseline_signature,
)
from crashgym.llm import ChatMessage, Gateway, GenerationParams, Usage, system, user
from crashgym.localization import LocalizationContext, build_context

CANDIDATES_MARKER = "CANDIDATE FUNCTIONS:"
PATCH_MARKER = "PATCH"
GET_MARKER = "GET "
FAILURE_LOG_TAIL = 4_000
MAX_CANDIDATES = 5


class AgentError(Exception):
    pass


class ProtocolViolation(AgentError):
    """Model output that does not follow the reply format; the offending
    turn is preserved for the attempt log."""

    def __init__(self, message: str, turn: str):
        super().__init__(message)
        self.turn = turn


class RoundsExhausted(AgentError):
    pass


class AgentKind(str, Enum):
    SIMPLE = "simple"
    EXPLORATION = "exploration"


@dataclass
class AgentConfig:
    model: str
    kind: AgentKind = AgentKind.SIMPLE
    use_bic: bool = True
    max_attempts: int = 3  # total attempts including the first
    exploration_rounds: int = 10
    context_budget: int = 24_000
    stack_candidates: int = 10
    raw_diff_baseline: bool = False
    params: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.exploration_rounds < 1:
            raise ValueError("exploration_rounds must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        if "kind" in d:
            d["kind"] = AgentKind(d["kind"])
        if "params" in d:
            d["params"] = GenerationParams(**d["params"])
        return cls(**d)

    def name(self) -> str:
        if self.raw_diff_baseline:
            return "raw-diff"
        base = self.kind.value
        if self.kind is AgentKind.SIMPLE and not self.use_bic:
            base += "-nobic"
        if self.max_attempts > 1:
            base += "+feedback"
        return base


@dataclass
class AttemptLog:
    attempt_index: int  # 1-based
    patch: CandidatePatch | None
    build: BuildOutcome | None
    repro: ReproOutcome | None
    failure_summary: str | None
    usage: Usage
    opening_prompt: str = ""
    error: str | None = None

    @property
    def solved(self) -> bool:
        return self.repro is not None and self.repro.aggregate is ReproAggregate.PASS


# ---------------------------------------------------------------------------
# prompt assets and reply parsing
# ---------------------------------------------------------------------------

_EXEMPLAR_FILES = {
    BugType.OOB: "exemplar_oob.txt",
    BugType.UAF: "exemplar_uaf.txt",
    BugType.NPD: "exemplar_npd.txt",
}


def exemplar_for(bug_type: BugType) -> str:
    name = _EXEMPLAR_FILES.get(bug_type, "exemplar_oob.txt")
    return resources.files("crashgym").joinpath(f"assets/{name}").read_text()


_FUNC_BLOCK_RE = re.compile(
    r"^FUNCTION:[ \t]*([A-Za-z_]\w*)[ \t]*\n```[a-z]*\n(.*?)\n```",
    re.M | re.S,
)
_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")


def parse_candidates(reply: str) -> list[str]:
    lines = reply.splitlines()
    try:
        start = next(i for i, l in enumerate(lines) if l.strip() == CANDIDATES_MARKER)
    except StopIteration:
        raise ProtocolViolation(f"reply lacks the {CANDIDATES_MARKER!r} marker", reply)
    names = []
    for line in lines[start + 1 :]:
        token = line.strip().strip("`-* ")
        if not token:
            break
        if _NAME_RE.match(token) and token not in names:
            names.append(token)
    if not names:
        raise ProtocolViolation("no function names follow the marker", reply)
    return names


def parse_function_blocks(reply: str) -> list[tuple[str, str]]:
    return [(m.group(1), m.group(2) + "\n") for m in _FUNC_BLOCK_RE.finditer(reply)]


def parse_gets(reply: str) -> list[str]:
    names = []
    for line in reply.splitlines():
        line = line.strip()
        if line.startswith(GET_MARKER):
            token = line[len(GET_MARKER) :].strip()
            if _NAME_RE.match(token) and token not in names:
                names.append(token)
    return names


def _definition_turn(resolved: list[FunctionDef], notices: list[str]) -> str:
    parts = ["== FUNCTION DEFINITIONS =="]
    for d in resolved:
        parts.append(f"FUNCTION: {d.name} ({d.file})")
        parts.append("```")
        parts.append(d.text.rstrip("\n"))
        parts.append("```")
        parts.append("")
    for notice in notices:
        parts.append(f"NOTICE: {notice}")
    return "\n".join(parts).rstrip("\n") + "\n"


_PATCH_FORMAT_INSTRUCTIONS = (
    "Return the patched definitions. For each function you change emit exactly:\n"
    "FUNCTION: <name>\n"
    "```\n"
    "<the entire new definition>\n"
    "```\n"
    "Rewrite whole definitions; do not emit diffs."
)


# ---------------------------------------------------------------------------
# function resolution shared by both agents
# ---------------------------------------------------------------------------


def _resolve(
    tree: SourceTree, ctx: LocalizationContext, names: list[str]
) -> tuple[list[FunctionDef], list[str]]:
    resolved: list[FunctionDef] = []
    notices: list[str] = []
    for name in names:
        try:
            defs = locate_function(tree, name, ctx.file_hint(name))
        except NotFound:
            notices.append(f"no definition found for '{name}'; skipped")
            continue
        resolved.append(defs[0])
    if not resolved:
        raise NotFound(names[-1] if names else "?")
    return resolved, notices


def _edits_from_blocks(
    blocks: list[tuple[str, str]], resolved: list[FunctionDef], reply: str
) -> list[FunctionEdit]:
    by_name = {d.name: d for d in resolved}
    edits = []
    for name, body in blocks:
        target = by_name.get(name)
        if target is None:
            continue  # model patched a function it was never given
        try:
            edits.append(FunctionEdit(target, body))
        except ValueError as exc:
            raise ProtocolViolation(f"replacement for {name} rejected: {exc}", reply)
    if not edits:
        raise ProtocolViolation("no usable FUNCTION blocks in reply", reply)
    return edits


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

_SYSTEM_PROMPT = (
    "You repair Linux kernel memory-safety bugs by rewriting whole function "
    "definitions. Follow the requested reply format exactly; no prose outside it."
)

_TYPE_LABEL = {
    BugType.OOB: "out-of-bounds",
    BugType.UAF: "use-after-free",
    BugType.NPD: "null-pointer-dereference",
    BugType.OTHER: "memory-safety",
}


def _opening_prompt(
    ctx: LocalizationContext,
    failure_note: str | None,
    exemplar: str | None,
    instructions: str,
) -> str:
    parts = []
    if failure_note:
        parts.append("== PREVIOUS ATTEMPT ==")
        parts.append(failure_note)
        parts.append("")
    parts.append(ctx.render().rstrip("\n"))
    if exemplar is not None:
        parts.append("")
        parts.append(f"== EXAMPLE PATCH ({_TYPE_LABEL[ctx.bug_type]}) ==")
        parts.append(exemplar.rstrip("\n"))
    parts.append("")
    parts.append("== INSTRUCTIONS ==")
    parts.append(instructions)
    return "\n".join(parts) + "\n"


def run_simple_agent(
    record: BugRecord,
    ctx: LocalizationContext,
    llm: Gateway,
    tree: SourceTree,
    config: AgentConfig,
    failure_note: str | None = None,
) -> tuple[CandidatePatch, str]:
    """Three-step protocol: candidates -> definitions -> patched definitions.

    Returns the synthesized patch plus the opening prompt (kept in the
    attempt log so retries are auditable).
    """
    instructions = (
        f"Reply with the line '{CANDIDATES_MARKER}' followed by one function "
        f"name per line (at most {MAX_CANDIDATES}). Prefer functions from the "
        "call stack candidates."
    )
    opening = _opening_prompt(ctx, failure_note, exemplar_for(ctx.bug_type), instructions)
    convo: list[ChatMessage] = [system(_SYSTEM_PROMPT), user(opening)]

    reply, _ = llm.chat(config.model, convo, config.params, bug_id=record.bug_id)
    names = parse_candidates(reply.content)[:MAX_CANDIDATES]
    resolved, notices = _resolve(tree, ctx, names)

    convo.append(reply)
    convo.append(user(_definition_turn(resolved, notices) + "\n" + _PATCH_FORMAT_INSTRUCTIONS))
    reply2, _ = llm.chat(config.model, convo, config.params, bug_id=record.bug_id)
    blocks = parse_function_blocks(reply2.content)
    if not blocks:
        raise ProtocolViolation("reply carries no FUNCTION blocks", reply2.content)
    edits = _edits_from_blocks(blocks, resolved, reply2.content)
    return synthesize_patch(tree, record.parent_commit, edits), opening


def run_exploration_agent(
    record: BugRecord,
    ctx: LocalizationContext,
    llm: Gateway,
    tree: SourceTree,
    config: AgentConfig,
    failure_note: str | None = None,
) -> tuple[CandidatePatch, str]:
    """Iterative loop: GET turns answered with definitions (cached), ending in
    a PATCH turn in the Simple-agent fenced format. No bug-type exemplar."""
    instructions = (
        "Explore, then patch. Each reply must be either\n"
        f"  {GET_MARKER}<function>        (one per line, requesting definitions)\n"
        f"or a final line '{PATCH_MARKER}' followed by the patched definitions:\n"
        "FUNCTION: <name>\n"
        "```\n"
        "<the entire new definition>\n"
        "```\n"
        f"You have at most {config.exploration_rounds} replies."
    )
    opening = _opening_prompt(ctx, failure_note, None, instructions)
    convo: list[ChatMessage] = [system(_SYSTEM_PROMPT), user(opening)]
    cache: dict[str, FunctionDef | None] = {}

    for _ in range(config.exploration_rounds):
        reply, _ = llm.chat(config.model, convo, config.params, bug_id=record.bug_id)
        convo.append(reply)
        lines = [l.strip() for l in reply.content.splitlines()]
        if PATCH_MARKER in lines:
            blocks = parse_function_blocks(reply.content)
            resolved = [d for d in cache.values() if d is not None]
            if not resolved:
                # patching without exploring first: resolve the named functions
                resolved, _notices = _resolve(tree, ctx, [name for name, _ in blocks])
            edits = _edits_from_blocks(blocks, resolved, reply.content)
            return synthesize_patch(tree, record.parent_commit, edits), opening

        gets = parse_gets(reply.content)
        if not gets:
            raise ProtocolViolation(
                f"reply is neither {GET_MARKER.strip()} lines nor a {PATCH_MARKER} turn",
                reply.content,
            )
        resolved_now: list[FunctionDef] = []
        notices: list[str] = []
        for name in gets:
            if name not in cache:
                try:
                    cache[name] = locate_function(tree, name, ctx.file_hint(name))[0]
                except NotFound:
                    cache[name] = None
            if cache[name] is None:
                notices.append(f"no definition found for '{name}'; skipped")
            else:
                resolved_now.append(cache[name])
        convo.append(user(_definition_turn(resolved_now, notices)))
    raise RoundsExhausted(f"no {PATCH_MARKER} turn within {config.exploration_rounds} rounds")


_DIFF_FENCE_RE = re.compile(r"```(?:diff)?\n(.*?)\n```", re.S)


def run_raw_diff_agent(
    record: BugRecord,
    ctx: LocalizationContext,
    llm: Gateway,
    tree: SourceTree,
    config: AgentConfig,
    failure_note: str | None = None,
) -> tuple[CandidatePatch, str]:
    """kGym-style baseline: send whole files, accept a raw unified diff back.

    The reply diff is NOT validated here; downstream dry-run application
    classifies the bad ones. This mode exists to reproduce the raw-diff
    bad-patch comparison.
    """
    files = []
    for _, file in ctx.stack_candidates:
        if file and file not in files and tree.exists(file):
            files.append(file)
        if len(files) == 2:
            break
    parts = []
    for rel in files:
        parts.append(f"== FILE {rel} ==")
        parts.append(tree.read(rel))
    file_blob = "\n".join(parts)
    instructions = (
        "Reply with one unified diff (a/ b/ path prefixes, @@ hunks) that "
        "fixes the crash in the files shown above."
    )
    opening = _opening_prompt(ctx, failure_note, None, file_blob + "\n\n" + instructions)
    convo = [system(_SYSTEM_PROMPT), user(opening)]
    reply, _ = llm.chat(config.model, convo, config.params, bug_id=record.bug_id)
    m = _DIFF_FENCE_RE.search(reply.content)
    diff = m.group(1) + "\n" if m else reply.content
    if "---" not in diff or "+++" not in diff:
        raise ProtocolViolation("reply contains no unified diff", reply.content)
    return CandidatePatch(record.parent_commit, [], diff), opening


_AGENT_RUNNERS = {
    AgentKind.SIMPLE: run_simple_agent,
    AgentKind.EXPLORATION: run_exploration_agent,
}


def summarize_failure(
    outcome: BuildOutcome | ReproOutcome,
    llm: Gateway,
    model: str,
    params: GenerationParams | None = None,
    log_text: str = "",
    bug_id: str = "",
) -> str:
    """One LLM call over the truncated failure log; returns a short summary
    tagged with the failure class."""
    if isinstance(outcome, BuildOutcome):
        tag = outcome.kind.value
        body = log_text or outcome.detail or ""
    else:
        tag = outcome.aggregate.value
        crash = next((r.report for r in outcome.per_vm if r.report), "")
        if crash:
            body = (log_text + "\n" + crash) if log_text else crash
        else:
            body = log_text
    tail = body[-FAILURE_LOG_TAIL:]
    prompt = (
        f"A kernel repair attempt failed with outcome class '{tag}'.\n"
        "Summarize why in at most two sentences, naming the failing symbol "
        "or crash title if one is present.\n\n== FAILURE LOG ==\n"
        + (tail if tail.strip() else "(no log output)")
    )
    reply, _ = llm.chat(model, [user(prompt)], params or GenerationParams(), bug_id=bug_id)
    return f"[{tag}] {reply.content.strip()}"


def repair_loop(
    config: AgentConfig,
    record: BugRecord,
    gym,
    llm: Gateway,
    tree: SourceTree,
    *,
    source: str = "kernel.git",
    vm_count: int = 26,
    repro_timeout: int = 600,
    build_timeout: int = 3600,
    cores: int = 8,
    transcripts_dir: str | Path | None = None,
) -> list[AttemptLog]:
    """Up to max_attempts of agent run -> build -> reproduce, stopping at the
    first Pass; each failure is summarized and fed into the next attempt's
    opening prompt. Always returns the attempt logs, never raises on agent
    or job failures."""
    report = parse_report(record.crash_report)
    baseline = signature(report, k=3)
    ctx = build_context(
        record,
        report,
        record.bic_diff if config.use_bic else None,
        budget=config.context_budget,
        k=config.stack_candidates,
    )
    runner = (
        run_raw_diff_agent if config.raw_diff_baseline else _AGENT_RUNNERS[config.kind]
    )

    logs: list[AttemptLog] = []
    failure_note: str | None = None
    for attempt in range(1, config.max_attempts + 1):
        if transcripts_dir is not None:
            path = Path(transcripts_dir)
            path.mkdir(parents=True, exist_ok=True)
            llm.transcript_path = path / f"attempt-{attempt}.txt"
        before = llm.total_usage

        patch: CandidatePatch | None = None
        build: BuildOutcome | None = None
        repro: ReproOutcome | None = None
        error: str | None = None
        opening = ""
        try:
            patch, opening = runner(record, ctx, llm, tree, config, failure_note)
        except (ProtocolViolation, NotFound, RoundsExhausted) as exc:
            error = f"{type(exc).__name__}: {exc}"

        build_log = ""
        if patch is not None:
            digest = patch_digest(patch.diff)
            build_job = BuildJob(
                patch=patch.diff,
                commit=record.parent_commit,
                source=source,
                config=record.kernel_config,
                compiler=record.compiler_hint,
                cores=cores,
                timeout=build_timeout,
                metadata={"bug_id": record.bug_id, "patch_digest": digest},
            )
            job = gym.wait(gym.submit(build_job))
            build = job.result
            build_log = gym.logs(job.id).decode(errors="replace") if hasattr(gym, "logs") else ""
            if build is None:
                build = BuildOutcome.infra_error("build job failed without outcome")
            if build.kind is BuildOutcomeKind.SUCCESS:
                repro_job = ReproJob(
                    image=build.image,
                    reproducers=record.reproducers(),
                    vm_count=vm_count,
                    timeout=repro_timeout,
                    metadata={
                        "bug_id": record.bug_id,
                        "patch_digest": digest,
                        "baseline_signature": encode_baseline_signature(baseline),
                    },
                )
                job = gym.wait(gym.submit(repro_job))
                repro = job.result

        usage = Usage(
            llm.total_usage.prompt_tokens - before.prompt_tokens,
            llm.total_usage.completion_tokens - before.completion_tokens,
        )
        solved = repro is not None and repro.aggregate is ReproAggregate.PASS
        failure_summary: str | None = None
        if not solved and attempt < config.max_attempts:
            if error is not None:
                failure_note = f"[agent-error] {error}"
            else:
                failed_outcome = repro if repro is not None else build
                failure_note = summarize_failure(
                    failed_outcome,
                    llm,
                    config.model,
                    config.params,
                    log_text=build_log if repro is None else "",
                    bug_id=record.bug_id,
                )
            failure_summary = failure_note
        logs.append(
            AttemptLog(
                attempt_index=attempt,
                patch=patch,
                build=build,
                repro=repro,
                failure_summary=failure_summary,
                usage=usage,
                opening_prompt=opening,
                error=error,
            )
        )
        if solved:
            break
    return logs
