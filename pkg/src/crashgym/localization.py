"""Non-oracle localization context: call-stack candidates plus bug-inducing
commit evidence, rendered under a hard character budget.

Rendering is deterministic byte-for-byte. Over budget, whole BIC hunks are
dropped from the end first (partial hunks would mislead the model about edit
boundaries), then trailing stack candidates, then the crash-report excerpt.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from crashgym.crash import CrashReport, is_sanitizer_frame
from crashgym.dataset import BugRecord, BugType

DEFAULT_STACK_CANDIDATES = 10
DEFAULT_CHAR_BUDGET = 24_000

CRASH_HEADER = "== CRASH REPORT =="
STACK_HEADER = "== CALL STACK CANDIDATES =="
BIC_HEADER = "== BUG-INDUCING COMMIT =="


class MalformedDiff(Exception):
    pass


_HUNK_RE = re.compile(r"^@@ -\d+(?:,\d+)? \+\d+(?:,\d+)? @@(?:[ ]?(?P<annot>.*))?$")


def _function_from_annotation(annotation: str) -> str:
    """Function name out of a hunk-context annotation like
    'static int foo(struct x *y)'; empty when the annotation names none."""
    m = re.search(r"([A-Za-z_]\w*)\s*\(", annotation)
    return m.group(1) if m else ""


def touched_functions(diff: str) -> list[tuple[str, str]]:
    """(file, function) per hunk of a unified diff, deduplicated in order.

    Files come from '+++' headers with one path component stripped; functions
    from the annotation git appends after the hunk range. Hunks without an
    annotation contribute an empty function name.
    """
    if not diff.strip():
        return []
    out: list[tuple[str, str]] = []
    current_file: str | None = None
    saw_header = False
    for line in diff.splitlines():
        if line.startswith("+++ "):
            path = line[4:].split("\t")[0].strip()
            current_file = path[2:] if path.startswith(("a/", "b/")) else path
            saw_header = True
            continue
        if line.startswith("@@"):
            m = _HUNK_RE.match(line)
            if m is None:
                raise MalformedDiff(f"unparseable hunk header: {line!r}")
            if current_file is None:
                raise MalformedDiff("hunk header before any '+++' file header")
            pair = (current_file, _function_from_annotation(m.group("annot") or ""))
            if pair not in out:
                out.append(pair)
    if not saw_header:
        raise MalformedDiff("no '+++' file header in diff")
    return out


def stack_candidates(report: CrashReport, k: int) -> list[tuple[str, str | None]]:
    """Top patch candidates from the report's stacks.

    Access, alloc, and free stacks concatenate in that order, sanitizer
    runtime frames are skipped, duplicates keep their first position, and the
    list truncates to k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seen = set()
    out: list[tuple[str, str | None]] = []
    for stack in (report.access_stack, report.alloc_stack, report.free_stack):
        for frame in stack or []:
            if is_sanitizer_frame(frame) or frame.function in seen:
                continue
            seen.add(frame.function)
            out.append((frame.function, frame.file))
            if len(out) == k:
                return out
    return out


@dataclass
class LocalizationContext:
    stack_candidates: list[tuple[str, str | None]]
    bug_type: BugType
    char_budget: int
    bic_diff: str | None = None
    bic_functions: list[tuple[str, str]] = field(default_factory=list)
    bic_commit: str | None = None
    report_excerpt: str = ""
    rendered: str = ""

    def render(self) -> str:
        return self.rendered

    def file_hint(self, function: str) -> str | None:
        for name, file in self.stack_candidates:
            if name == function and file:
                return file
        for file, name in self.bic_functions:
            if name == function:
                return file
        return None


def _render(
    excerpt: str,
    candidates: list[tuple[str, str | None]],
    bic_commit: str | None,
    bic_diff: str | None,
) -> str:
    parts = [CRASH_HEADER, excerpt.rstrip("\n"), "", STACK_HEADER]
    for i, (func, file) in enumerate(candidates, 1):
        where = f" ({file})" if file else ""
        parts.append(f"{i:2d}. {func}{where}")
    if bic_diff is not None:
        parts.append("")
        parts.append(BIC_HEADER)
        if bic_commit:
            parts.append(f"commit {bic_commit}")
        parts.append(bic_diff.rstrip("\n"))
    return "\n".join(parts) + "\n"


def _split_hunks(diff: str) -> list[tuple[list[str], list[list[str]]]]:
    """Per-file (header_lines, hunks) where each hunk is its own line list."""
    files: list[tuple[list[str], list[list[str]]]] = []
    header: list[str] | None = None
    hunks: list[list[str]] | None = None
    for line in diff.splitlines():
        if line.startswith("--- "):
            header = [line]
            hunks = []
            files.append((header, hunks))
            continue
        if header is not None and line.startswith("+++ ") and len(header) == 1:
            header.append(line)
            continue
        if line.startswith("@@") and hunks is not None:
            hunks.append([line])
            continue
        if hunks:
            hunks[-1].append(line)
    return files


def _reassemble(files: list[tuple[list[str], list[list[str]]]], keep: int) -> str | None:
    """Diff text with only the first `keep` hunks overall; None if keep is 0."""
    if keep <= 0:
        return None
    parts: list[str] = []
    remaining = keep
    for header, hunks in files:
        if remaining <= 0:
            break
        take = hunks[:remaining]
        remaining -= len(take)
        if take:
            parts.extend(header)
            for hunk in take:
                parts.extend(hunk)
    return "\n".join(parts) + "\n" if parts else None


def build_context(
    record: BugRecord,
    report: CrashReport,
    bic_diff: str | None,
    budget: int = DEFAULT_CHAR_BUDGET,
    k: int = DEFAULT_STACK_CANDIDATES,
) -> LocalizationContext:
    """Assemble the context fed to repair agents.

    With bic_diff=None the output carries no BIC evidence at all and is
    independent of record.bic (the no-BIC ablation). Rendering never exceeds
    budget and always keeps at least one stack candidate.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    candidates = stack_candidates(report, k)
    if not candidates:
        raise ValueError("report yields no stack candidates")

    bic_functions: list[tuple[str, str]] = []
    commit = None
    if bic_diff is not None:
        bic_functions = touched_functions(bic_diff)
        if not bic_functions:
            bic_diff = None  # trivial diff: treat as no BIC evidence
        else:
            commit = record.bic

    excerpt = report.raw
    files = _split_hunks(bic_diff) if bic_diff else []
    n_hunks = sum(len(hunks) for _, hunks in files)

    rendered = _render(excerpt, candidates, commit, bic_diff)
    # drop whole BIC hunks from the end
    while len(rendered) > budget and n_hunks > 0:
        n_hunks -= 1
        trimmed = _reassemble(files, n_hunks)
        rendered = _render(excerpt, candidates, commit if trimmed else None, trimmed)
        if trimmed is None:
            bic_diff = None
            bic_functions = []
            commit = None
        else:
            bic_diff = trimmed
    # then trailing stack candidates, keeping at least one
    while len(rendered) > budget and len(candidates) > 1:
        candidates = candidates[:-1]
        rendered = _render(excerpt, candidates, commit, bic_diff)
    # then crash-report lines from the end, keeping the title line
    excerpt_lines = excerpt.splitlines()
    while len(rendered) > budget and len(excerpt_lines) > 1:
        excerpt_lines = excerpt_lines[:-1]
        excerpt = "\n".join(excerpt_lines) + "\n"
        rendered = _render(excerpt, candidates, commit, bic_diff)
    if len(rendered) > budget:
        rendered = rendered[:budget]

    return LocalizationContext(
        stack_candidates=candidates,
        bug_type=record.bug_type,
        char_budget=budget,
        bic_diff=bic_diff,
        bic_functions=bic_functions,
        bic_commit=commit,
        report_excerpt=excerpt,
        rendered=rendered,
    )
