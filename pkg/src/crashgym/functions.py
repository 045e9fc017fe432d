"""Function-wise patching: locate C function definitions, replace them, and
synthesize one clean unified diff.

Detection is lexical, not a C parse: kernel code full of unexpanded macros
defeats real parsers, so definitions are found by masking comments, string
and character literals, and preprocessor lines, then matching
``name(...)`` at brace depth zero whose parameter list is followed by ``{``.
Macro-generated definitions are therefore out of reach and report NotFound.
"""

from __future__ import annotations

import difflib
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path


class PatchingError(Exception):
    pass


class NotFound(PatchingError):
    def __init__(self, name: str):
        super().__init__(f"no definition of {name!r} found")
        self.name = name


class SpanMismatch(PatchingError):
    """The recorded span no longer matches the file (stale tree)."""


class OverlappingEdits(PatchingError):
    pass


@dataclass(frozen=True)
class FunctionDef:
    name: str
    file: str  # tree-relative path
    start_line: int  # 1-based, inclusive
    end_line: int  # 1-based, inclusive
    text: str  # exact definition bytes, signature through closing brace


@dataclass(frozen=True)
class FunctionEdit:
    target: FunctionDef
    replacement: str

    def __post_init__(self):
        if not self.replacement.strip():
            raise ValueError("replacement must be non-empty")
        if _brace_balance(self.replacement) != 0:
            raise ValueError("replacement braces do not balance")


@dataclass
class CandidatePatch:
    base_commit: str
    edits: list[FunctionEdit]
    diff: str


@dataclass(frozen=True)
class BadPatch:
    reason: str
    file: str | None = None
    hunk: int | None = None

    def __str__(self) -> str:
        where = f" ({self.file}, hunk #{self.hunk})" if self.file else ""
        return f"bad patch{where}: {self.reason}"


# ---------------------------------------------------------------------------
# lexical masking
# ---------------------------------------------------------------------------


def mask_source(text: str) -> str:
    """Copy of text with comment/string/char bodies and preprocessor lines
    blanked to spaces. Newlines survive, so masked offsets and line numbers
    map 1:1 onto the original."""
    out = list(text)
    n = len(text)
    i = 0
    line_start = True
    while i < n:
        c = text[i]
        if line_start and c in " \t":
            i += 1
            continue
        if line_start and c == "#":
            # preprocessor line, including backslash continuations
            while i < n:
                if text[i] == "\n":
                    if i > 0 and text[i - 1] == "\\":
                        out[i - 1] = " "
                        i += 1
                        continue
                    break
                out[i] = " "
                i += 1
            line_start = True
            i += 1
            continue
        line_start = c == "\n"
        if c == "/" and i + 1 < n and text[i + 1] == "/":
            while i < n and text[i] != "\n":
                out[i] = " "
                i += 1
            continue
        if c == "/" and i + 1 < n and text[i + 1] == "*":
            out[i] = out[i + 1] = " "
            i += 2
            while i < n and not (text[i] == "*" and i + 1 < n and text[i + 1] == "/"):
                if text[i] != "\n":
                    out[i] = " "
                i += 1
            if i < n:
                out[i] = " "
            if i + 1 < n:
                out[i + 1] = " "
            i += 2
            continue
        if c in "\"'":
            quote = c
            i += 1
            while i < n and text[i] != quote:
                if text[i] == "\\":
                    out[i] = " "
                    i += 1
                    if i < n and text[i] != "\n":
                        out[i] = " "
                        i += 1
                    continue
                if text[i] != "\n":
                    out[i] = " "
                i += 1
            i += 1
            continue
        i += 1
    return "".join(out)


def _brace_balance(text: str) -> int:
    mask = mask_source(text)
    return mask.count("{") - mask.count("}")


def _depth_array(mask: str) -> list[int]:
    """Brace depth at each character position (before consuming that char)."""
    depth = [0] * (len(mask) + 1)
    d = 0
    for i, c in enumerate(mask):
        depth[i] = d
        if c == "{":
            d += 1
        elif c == "}":
            d = max(0, d - 1)
    depth[len(mask)] = d
    return depth


_IDENT_RE = re.compile(r"[A-Za-z_]\w*")

# Reserved words and type keywords can precede a parenthesized group at file
# scope (e.g. function-pointer return types) but never name a definition.
_C_KEYWORDS = frozenset(
    """if for while switch return sizeof do else case goto typedef struct
    union enum int long short char void unsigned signed float double const
    volatile static extern inline register bool auto""".split()
)


def _match_paren(mask: str, open_pos: int) -> int:
    """Index of the ')' matching the '(' at open_pos, or -1."""
    depth = 0
    for i in range(open_pos, len(mask)):
        if mask[i] == "(":
            depth += 1
        elif mask[i] == ")":
            depth -= 1
            if depth == 0:
                return i
    return -1


def _match_brace(mask: str, open_pos: int) -> int:
    depth = 0
    for i in range(open_pos, len(mask)):
        if mask[i] == "{":
            depth += 1
        elif mask[i] == "}":
            depth -= 1
            if depth == 0:
                return i
    return -1


def _body_open(mask: str, after_paren: int) -> int:
    """Position of the '{' opening the body, skipping whitespace and
    attribute-ish tokens after the parameter list; -1 if a ';' (prototype)
    or anything else intervenes."""
    i = after_paren
    n = len(mask)
    while i < n:
        c = mask[i]
        if c.isspace():
            i += 1
        elif c == "{":
            return i
        elif c == ";":
            return -1
        elif c == "(":
            close = _match_paren(mask, i)
            if close < 0:
                return -1
            i = close + 1
        elif c.isalnum() or c == "_":
            i += 1
        else:
            return -1
    return -1


_SIGNATURE_LOOKBACK = 6


def _signature_start_line(mask_lines: list[str], name_line: int) -> int:
    """Extend the span upward over the contiguous lines forming the signature
    (return type, storage class, attribute stack split across lines)."""
    start = name_line
    for _ in range(_SIGNATURE_LOOKBACK):
        if start == 0:
            break
        prev = mask_lines[start - 1].strip()
        if not prev or prev.endswith((";", "}", "{", ",")):
            break
        start -= 1
    return start


def find_definitions(text: str, name: str | None = None) -> list[FunctionDef]:
    """All function definitions in a file's text; file field left empty.

    With name given, only definitions of that symbol are returned.
    """
    mask = mask_source(text)
    depth = _depth_array(mask)
    lines = text.splitlines(keepends=True)
    mask_lines = mask.splitlines()
    # char offset of each line start
    offsets = [0]
    for line in lines:
        offsets.append(offsets[-1] + len(line))

    found = []
    for m in _IDENT_RE.finditer(mask):
        ident = m.group(0)
        if name is not None and ident != name:
            continue
        if ident in _C_KEYWORDS:
            continue
        if depth[m.start()] != 0:
            continue
        i = m.end()
        while i < len(mask) and mask[i].isspace():
            i += 1
        if i >= len(mask) or mask[i] != "(":
            continue
        close = _match_paren(mask, i)
        if close < 0:
            continue
        body = _body_open(mask, close + 1)
        if body < 0:
            continue
        end_brace = _match_brace(mask, body)
        if end_brace < 0:
            continue
        name_line = _line_of(offsets, m.start())
        start_line = _signature_start_line(mask_lines, name_line) + 1
        end_line = _line_of(offsets, end_brace) + 1
        found.append(
            FunctionDef(
                name=ident,
                file="",
                start_line=start_line,
                end_line=end_line,
                text="".join(lines[start_line - 1 : end_line]),
            )
        )
    return found


def _line_of(offsets: list[int], pos: int) -> int:
    """0-based line index containing char position pos."""
    lo, hi = 0, len(offsets) - 2
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if offsets[mid] <= pos:
            lo = mid
        else:
            hi = mid - 1
    return lo


# ---------------------------------------------------------------------------
# source tree handle + identifier index
# ---------------------------------------------------------------------------


class SourceTree:
    """Read-only view of a checked-out tree with a lazy identifier index.

    The index maps symbol -> files defining it, built by one scan over every
    *.c/*.h so later queries never walk the whole tree. Safe to share across
    threads once constructed; the index build is single-writer.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"source tree root missing: {self.root}")
        self._index: dict[str, list[str]] | None = None
        self._lock = threading.Lock()

    def read(self, relpath: str) -> str:
        return (self.root / relpath).read_text()

    def exists(self, relpath: str) -> bool:
        return (self.root / relpath).is_file()

    def files(self) -> list[str]:
        out = []
        for path in self.root.rglob("*"):
            if path.suffix in (".c", ".h") and path.is_file():
                out.append(path.relative_to(self.root).as_posix())
        return sorted(out)

    def index(self) -> dict[str, list[str]]:
        if self._index is None:
            with self._lock:
                if self._index is None:
                    index: dict[str, list[str]] = {}
                    for rel in self.files():
                        for d in find_definitions(self.read(rel)):
                            files = index.setdefault(d.name, [])
                            if rel not in files:
                                files.append(rel)
                    self._index = index
        return self._index


def locate_function(
    tree: SourceTree, name: str, file_hint: str | None = None
) -> list[FunctionDef]:
    """All definitions of name in the tree, hinted file's matches first.

    Raises NotFound when no candidate file holds a real definition (e.g. the
    symbol only ever appears as a prototype, or is macro-generated).
    """
    candidates: list[str] = []
    if file_hint and tree.exists(file_hint):
        candidates.append(file_hint)
    for rel in tree.index().get(name, []):
        if rel not in candidates:
            candidates.append(rel)
    found = []
    for rel in candidates:
        for d in find_definitions(tree.read(rel), name):
            found.append(
                FunctionDef(d.name, rel, d.start_line, d.end_line, d.text)
            )
    if not found:
        raise NotFound(name)
    return found


# ---------------------------------------------------------------------------
# replacement and diff synthesis
# ---------------------------------------------------------------------------


def _ensure_trailing_newline(text: str) -> str:
    return text if text.endswith("\n") else text + "\n"


def replace_function(file_text: str, edit: FunctionEdit) -> str:
    """file_text with exactly the edit's recorded span replaced; every other
    byte identical."""
    lines = file_text.splitlines(keepends=True)
    target = edit.target
    if target.start_line < 1 or target.end_line > len(lines):
        raise SpanMismatch(
            f"{target.name}: span {target.start_line}..{target.end_line} outside file"
        )
    current = "".join(lines[target.start_line - 1 : target.end_line])
    if current != target.text:
        raise SpanMismatch(f"{target.name}: recorded span no longer matches the file")
    replacement = _ensure_trailing_newline(edit.replacement)
    return (
        "".join(lines[: target.start_line - 1])
        + replacement
        + "".join(lines[target.end_line :])
    )


def synthesize_patch(
    tree: SourceTree, base_commit: str, edits: list[FunctionEdit]
) -> CandidatePatch:
    """One unified diff over all edits: 3 context lines, a/ b/ prefixes,
    strip-level-1 application. Identity edits produce no hunks; an empty edit
    list yields an empty diff."""
    per_file: dict[str, list[FunctionEdit]] = {}
    for edit in edits:
        per_file.setdefault(edit.target.file, []).append(edit)

    pieces = []
    for rel in sorted(per_file):
        file_edits = sorted(per_file[rel], key=lambda e: e.target.start_line)
        for prev, nxt in zip(file_edits, file_edits[1:]):
            if nxt.target.start_line <= prev.target.end_line:
                raise OverlappingEdits(
                    f"{rel}: edits to {prev.target.name} and {nxt.target.name} overlap"
                )
        original = tree.read(rel)
        patched = original
        for edit in reversed(file_edits):
            patched = replace_function(patched, edit)
        if patched == original:
            continue
        diff = difflib.unified_diff(
            original.splitlines(keepends=True),
            patched.splitlines(keepends=True),
            fromfile=f"a/{rel}",
            tofile=f"b/{rel}",
            n=3,
        )
        pieces.append("".join(diff))

    patch = CandidatePatch(base_commit=base_commit, edits=list(edits), diff="".join(pieces))
    problem = check_applies(tree, patch.diff)
    if problem is not None:
        raise SpanMismatch(str(problem))
    return patch


# ---------------------------------------------------------------------------
# strict unified-diff parsing and application
# ---------------------------------------------------------------------------

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


@dataclass
class _Hunk:
    old_start: int
    old_count: int
    new_start: int
    new_count: int
    lines: list[str] = field(default_factory=list)


@dataclass
class _FilePatch:
    path: str
    hunks: list[_Hunk] = field(default_factory=list)


def _strip_level(path: str) -> str:
    path = path.split("\t")[0].strip()
    if path.startswith(("a/", "b/")):
        return path[2:]
    return path


def parse_unified_diff(diff: str) -> list[_FilePatch]:
    """Split a (possibly multi-file) unified diff into file sections.

    Tolerates git-style 'diff --git'/'index' preamble lines; raises
    ValueError on structurally broken input.
    """
    patches: list[_FilePatch] = []
    current: _FilePatch | None = None
    hunk: _Hunk | None = None
    remaining_old = remaining_new = 0
    lines = diff.splitlines(keepends=True)
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- "):
            if i + 1 >= len(lines) or not lines[i + 1].startswith("+++ "):
                raise ValueError("'---' header without '+++' counterpart")
            path = _strip_level(lines[i + 1][4:])
            current = _FilePatch(path=path)
            patches.append(current)
            hunk = None
            i += 2
            continue
        m = _HUNK_RE.match(line)
        if m:
            if current is None:
                raise ValueError("hunk before any file header")
            hunk = _Hunk(
                old_start=int(m.group(1)),
                old_count=int(m.group(2)) if m.group(2) is not None else 1,
                new_start=int(m.group(3)),
                new_count=int(m.group(4)) if m.group(4) is not None else 1,
            )
            remaining_old = hunk.old_count
            remaining_new = hunk.new_count
            current.hunks.append(hunk)
            i += 1
            continue
        if hunk is not None and (remaining_old > 0 or remaining_new > 0):
            if line.startswith("\\"):
                i += 1
                continue
            tag = line[:1]
            if tag == " " or line in ("\n", ""):
                remaining_old -= 1
                remaining_new -= 1
            elif tag == "-":
                remaining_old -= 1
            elif tag == "+":
                remaining_new -= 1
            else:
                raise ValueError(f"unexpected line inside hunk: {line!r}")
            hunk.lines.append(line if line.strip("\n") else " \n")
            i += 1
            continue
        i += 1
    for patch in patches:
        for h in patch.hunks:
            n_old = sum(1 for l in h.lines if l[:1] in (" ", "-"))
            n_new = sum(1 for l in h.lines if l[:1] in (" ", "+"))
            if n_old != h.old_count or n_new != h.new_count:
                raise ValueError(
                    f"{patch.path}: hunk @@ -{h.old_start} +{h.new_start} @@ counts disagree"
                )
    return patches


def _apply_file_patch(original: str, fp: _FilePatch) -> tuple[str | None, BadPatch | None]:
    """Strict application: context and deletion lines must match at their
    stated positions, no fuzz, no offset search."""
    src = original.splitlines(keepends=True)
    out: list[str] = []
    cursor = 0  # index into src of the next unconsumed line
    for idx, hunk in enumerate(fp.hunks, start=1):
        base = hunk.old_start - 1 if hunk.old_count > 0 else hunk.old_start
        if base < cursor or base > len(src):
            return None, BadPatch("hunk start out of order or beyond EOF", fp.path, idx)
        out.extend(src[cursor:base])
        cursor = base
        for line in hunk.lines:
            tag, body = line[:1], line[1:]
            if tag in (" ", "-"):
                if cursor >= len(src):
                    return None, BadPatch("hunk runs past end of file", fp.path, idx)
                if src[cursor].rstrip("\n") != body.rstrip("\n"):
                    return None, BadPatch(
                        f"context mismatch at line {cursor + 1}", fp.path, idx
                    )
                if tag == " ":
                    out.append(src[cursor])
                cursor += 1
            elif tag == "+":
                out.append(body if body.endswith("\n") else body + "\n")
    out.extend(src[cursor:])
    return "".join(out), None


def apply_patch_text(diff: str, read_file) -> tuple[dict[str, str], BadPatch | None]:
    """Apply a multi-file diff against file contents supplied by read_file.

    Returns ({path: new_text}, None) on success or ({}, BadPatch) on the
    first failure.
    """
    try:
        patches = parse_unified_diff(diff)
    except ValueError as exc:
        return {}, BadPatch(f"malformed diff: {exc}")
    result: dict[str, str] = {}
    for fp in patches:
        try:
            original = read_file(fp.path)
        except (FileNotFoundError, OSError):
            return {}, BadPatch("file does not exist in tree", fp.path, 1)
        new_text, problem = _apply_file_patch(original, fp)
        if problem is not None:
            return {}, problem
        result[fp.path] = new_text
    return result, None


def check_applies(tree: SourceTree, diff: str) -> BadPatch | None:
    """Dry-run the diff at strip level 1 against the pristine tree.

    None means the patch applies; a BadPatch names the first failing hunk.
    """
    if not diff.strip():
        return None
    _, problem = apply_patch_text(diff, tree.read)
    return problem
