"""Parse KASAN-style sanitizer crash reports and compare crashes by signature.

A report is parsed into a title plus up to three stacks (access, alloc, free).
Signatures normalize away addresses/pids so two runs of the same crash
compare equal while different bugs stay distinct.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum


class CrashParseError(Exception):
    pass


class NoSanitizerHeader(CrashParseError):
    """No recognizable sanitizer/bug header line in the input text."""


class EmptyAccessStack(CrashParseError):
    """A KASAN report must carry at least one access-stack frame."""


class Sanitizer(Enum):
    KASAN = "kasan"
    OTHER = "other"


@dataclass(frozen=True)
class StackFrame:
    function: str
    file: str | None = None
    line: int | None = None
    offset: str | None = None
    inlined: bool = False

    def __post_init__(self):
        if not self.function:
            raise ValueError("frame function must be non-empty")
        if self.line is not None and self.file is None:
            raise ValueError("frame line requires a file")


@dataclass
class CrashReport:
    title: str
    sanitizer: Sanitizer
    access_stack: list[StackFrame]
    alloc_stack: list[StackFrame] | None
    free_stack: list[StackFrame] | None
    raw: str


@dataclass(frozen=True)
class CrashSignature:
    normalized_title: str
    top_frames: tuple[str, ...]


# `sym+0x1a/0x2b file.c:123 [inline]` with offset and file:line each optional,
# but at least one of them present (bare words would match hexdump lines).
_FRAME_RE = re.compile(
    r"^\s+(?P<sym>[A-Za-z_$][\w$.\[\]-]*)"
    r"(?:(?P<off>\+0x[0-9a-f]+/0x[0-9a-f]+)|(?:\s+(?P<file>[\w./-]+):(?P<line>\d+)))"
    r"(?:\s+(?P<file2>[\w./-]+):(?P<line2>\d+))?"
    r"(?:\s+(?P<inline>\[inline\]))?\s*$"
)

_KASAN_HEADER_RE = re.compile(
    r"^(?:\[[^\]]*\]\s*)?BUG: KASAN: (?P<klass>[a-z0-9_-]+) in (?P<func>[\w.]+)"
)
_ACCESS_RE = re.compile(r"^(?:\[[^\]]*\]\s*)?(?P<dir>Read|Write) of size \d+ at addr")

# Best-effort headers for non-KASAN splats; we keep the line as the title.
_OTHER_HEADER_RES = (
    re.compile(r"^(?:\[[^\]]*\]\s*)?(BUG: .+)$"),
    re.compile(r"^(?:\[[^\]]*\]\s*)?(WARNING: .+)$"),
    re.compile(r"^(?:\[[^\]]*\]\s*)?(general protection fault.*)$"),
    re.compile(r"^(?:\[[^\]]*\]\s*)?(Oops: .+)$"),
    re.compile(r"^(?:\[[^\]]*\]\s*)?((?:KCSAN|UBSAN|KMSAN): .+)$"),
)

_ALLOC_MARKER = re.compile(r"^(?:\[[^\]]*\]\s*)?Allocated by task \d+:")
_FREE_MARKER = re.compile(r"^(?:\[[^\]]*\]\s*)?Freed by task \d+:")
_TRACE_MARKER = re.compile(r"^(?:\[[^\]]*\]\s*)?Call Trace:")

# Compiler-generated symbol suffixes that vary between builds of one function.
_SYM_SUFFIX_RE = re.compile(r"\.(?:cold|constprop|isra|part)(?:\.[\w.]*)?$|\.\d+$")

# Frames belonging to the sanitizer runtime or generic report plumbing; they
# sit atop every report and carry no localization signal.
_NOISE_FUNC_PREFIXES = ("kasan_", "__kasan", "__asan", "check_memory_region")
_NOISE_FUNCS = {
    "dump_stack",
    "__dump_stack",
    "dump_stack_lvl",
    "show_stack",
    "print_report",
    "print_address_description",
    "save_stack",
    "set_track",
    "panic",
}
_NOISE_FILE_PREFIXES = ("mm/kasan/", "lib/dump_stack", "kernel/panic")


def _clean_symbol(sym: str) -> str:
    return _SYM_SUFFIX_RE.sub("", sym)


def is_sanitizer_frame(frame: StackFrame) -> bool:
    """True for frames inside the sanitizer runtime / report plumbing."""
    fn = frame.function
    if fn in _NOISE_FUNCS or fn.startswith(_NOISE_FUNC_PREFIXES):
        return True
    if frame.file and frame.file.startswith(_NOISE_FILE_PREFIXES):
        return True
    return False


def _parse_frame(line: str) -> StackFrame | None:
    m = _FRAME_RE.match(line)
    if m is None:
        return None
    file = m.group("file") or m.group("file2")
    line_no = m.group("line") or m.group("line2")
    return StackFrame(
        function=_clean_symbol(m.group("sym")),
        file=file,
        line=int(line_no) if line_no else None,
        offset=m.group("off"),
        inlined=m.group("inline") is not None,
    )


def parse_report(text: str) -> CrashReport:
    """Parse raw sanitizer report text into a structured CrashReport.

    The raw input is preserved byte-identically in ``.raw``. Raises
    NoSanitizerHeader when no recognizable header exists and EmptyAccessStack
    for a KASAN report without any access-stack frames.
    """
    if not text:
        raise NoSanitizerHeader("empty report text")

    lines = text.splitlines()

    header_idx = None
    kasan = None
    other_title = None
    for i, line in enumerate(lines):
        m = _KASAN_HEADER_RE.match(line)
        if m:
            header_idx, kasan = i, m
            break
        for other_re in _OTHER_HEADER_RES:
            mo = other_re.match(line)
            if mo:
                header_idx, other_title = i, mo.group(1).strip()
                break
        if header_idx is not None:
            break
    if header_idx is None:
        raise NoSanitizerHeader("no sanitizer header line found")

    access_dir = None
    for line in lines[header_idx:]:
        m = _ACCESS_RE.match(line)
        if m:
            access_dir = m.group("dir")
            break

    # Split the report body into stacks. Frame lines accumulate into the
    # section opened by the most recent marker; any non-frame line closes
    # the current section.
    access: list[StackFrame] = []
    alloc: list[StackFrame] | None = None
    free: list[StackFrame] | None = None
    section: list[StackFrame] | None = None
    seen_trace = any(_TRACE_MARKER.match(line) for line in lines)
    for line in lines[header_idx:]:
        if line.strip() in ("<TASK>", "</TASK>", "<IRQ>", "</IRQ>"):
            continue
        if _TRACE_MARKER.match(line):
            section = access
            continue
        if _ALLOC_MARKER.match(line):
            alloc = []
            section = alloc
            continue
        if _FREE_MARKER.match(line):
            free = []
            section = free
            continue
        frame = _parse_frame(line)
        if frame is None:
            section = None
            continue
        if section is not None:
            section.append(frame)
        elif not seen_trace and alloc is None and free is None:
            # Reports trimmed of their "Call Trace:" marker: indented frame
            # lines before any alloc/free section count as the access stack.
            access.append(frame)

    if kasan is not None:
        top = next((f for f in access if not is_sanitizer_frame(f)), None)
        func = top.function if top is not None else _clean_symbol(kasan.group("func"))
        klass = kasan.group("klass")
        if access_dir:
            title = f"KASAN: {klass} {access_dir} in {func}"
        else:
            title = f"KASAN: {klass} in {func}"
        if not access:
            raise EmptyAccessStack(f"KASAN report with no access-stack frames: {title}")
        sanitizer = Sanitizer.KASAN
    else:
        title = other_title
        sanitizer = Sanitizer.OTHER

    return CrashReport(
        title=title,
        sanitizer=sanitizer,
        access_stack=access,
        alloc_stack=alloc,
        free_stack=free,
        raw=text,
    )


_TS_RE = re.compile(r"\[\s*\d+\.\d+\]\s*")
_HEXCONST_RE = re.compile(r"0x[0-9a-fA-F]+")
_HEXRUN_RE = re.compile(r"\b[0-9a-f]{8,16}\b")
_PID_RE = re.compile(r"/\d+\b")


def normalize_title(title: str) -> str:
    """Replace addresses, hex constants, pid suffixes, timestamps with placeholders."""
    out = _TS_RE.sub("", title)
    out = _HEXCONST_RE.sub("ADDR", out)
    out = _HEXRUN_RE.sub("ADDR", out)
    out = _PID_RE.sub("/PID", out)
    return out.strip()


def signature(report: CrashReport, k: int = 3) -> CrashSignature:
    """Crash signature: normalized title plus the top-k non-sanitizer access frames.

    k=0 degrades to title-only comparison.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    frames = [f.function for f in report.access_stack if not is_sanitizer_frame(f)]
    return CrashSignature(
        normalized_title=normalize_title(report.title),
        top_frames=tuple(frames[:k]),
    )


def same_crash(a: CrashSignature, b: CrashSignature) -> bool:
    return a.normalized_title == b.normalized_title and a.top_frames == b.top_frames
