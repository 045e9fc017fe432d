"""Bug corpus: load and validate records, classify titles, verify baselines.

Corpus layout on disk is one directory per bug:

    <root>/<bug_id>/manifest     key/value document (title, bug_type, commits, ...)
    <root>/<bug_id>/config       full kernel config text
    <root>/<bug_id>/repro.syz    syz-language reproducer (optional)
    <root>/<bug_id>/repro.c      C reproducer (optional)
    <root>/<bug_id>/report.txt   raw sanitizer crash report
    <root>/<bug_id>/bic.diff     unified diff of the bug-inducing commit (optional)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from crashgym.crash import CrashParseError, parse_report, signature
from crashgym.gym.jobs import (
    BuildJob,
    BuildOutcomeKind,
    ReproAggregate,
    Reproducer,
    ReproducerKind,
    ReproJob,
    encode_baseline_signature,
)


class DatasetError(Exception):
    pass


class UnreadablePath(DatasetError):
    pass


class MissingField(DatasetError):
    def __init__(self, bug_id: str, field_name: str):
        super().__init__(f"{bug_id}: missing required field {field_name!r}")
        self.bug_id = bug_id
        self.field_name = field_name


class InvalidRecord(DatasetError):
    def __init__(self, bug_id: str, violations: list[str]):
        super().__init__(f"{bug_id}: " + "; ".join(violations))
        self.bug_id = bug_id
        self.violations = violations


class BugType(str, Enum):
    OOB = "OOB"
    UAF = "UAF"
    NPD = "NPD"
    OTHER = "Other"


# First match wins; mirrors sanitizer title grammar. Unrecognized titles
# surface as OTHER for manual triage.
_TYPE_TABLE: tuple[tuple[str, BugType], ...] = (
    ("out-of-bounds", BugType.OOB),
    ("use-after-free", BugType.UAF),
    ("UAF", BugType.UAF),
    ("null-ptr-deref", BugType.NPD),
    ("NULL pointer dereference", BugType.NPD),
)


def classify_bug_type(title: str) -> BugType:
    for needle, bug_type in _TYPE_TABLE:
        if needle in title:
            return bug_type
    return BugType.OTHER


_HEX40 = re.compile(r"^[0-9a-f]{40}$")


@dataclass
class BugRecord:
    bug_id: str
    title: str
    bug_type: BugType
    fix_commit: str
    parent_commit: str
    kernel_config: str
    crash_report: str
    compiler_hint: str = ""
    bic: str | None = None
    bic_diff: str | None = None
    repro_syz: str | None = None
    repro_c: str | None = None
    nondeterministic: bool | None = None

    def reproducers(self) -> list[Reproducer]:
        out = []
        if self.repro_syz:
            out.append(Reproducer(ReproducerKind.SYZ, self.repro_syz))
        if self.repro_c:
            out.append(Reproducer(ReproducerKind.C, self.repro_c))
        return out


def validate(record: BugRecord) -> list[str]:
    """All invariant violations for a record; empty list means ok."""
    violations = []
    if not record.repro_syz and not record.repro_c:
        violations.append("no reproducer: at least one of repro.syz, repro.c required")
    if not _HEX40.match(record.fix_commit or ""):
        violations.append(f"fix_commit is not a 40-hex hash: {record.fix_commit!r}")
    if not _HEX40.match(record.parent_commit or ""):
        violations.append(f"parent_commit is not a 40-hex hash: {record.parent_commit!r}")
    if record.fix_commit == record.parent_commit:
        violations.append("fix_commit equals parent_commit")
    if record.bic is not None and not _HEX40.match(record.bic):
        violations.append(f"bic is not a 40-hex hash: {record.bic!r}")
    expected = classify_bug_type(record.title)
    if record.bug_type != expected:
        violations.append(
            f"bug_type {record.bug_type.value} does not match title "
            f"(classified {expected.value})"
        )
    if not record.crash_report.strip():
        violations.append("crash_report is empty")
    else:
        try:
            parse_report(record.crash_report)
        except CrashParseError as exc:
            violations.append(f"crash_report unparseable: {exc}")
    return violations


_REQUIRED_KEYS = ("title", "bug_type", "fix_commit", "parent_commit")


def _parse_manifest(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = line.rstrip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if sep:
            out[key.strip()] = value.strip()
    return out


def _read_optional(path: Path) -> str | None:
    return path.read_text() if path.is_file() else None


def load_record(bug_dir: Path) -> BugRecord:
    bug_id = bug_dir.name
    manifest_path = bug_dir / "manifest"
    if not manifest_path.is_file():
        raise MissingField(bug_id, "manifest")
    manifest = _parse_manifest(manifest_path.read_text())
    for key in _REQUIRED_KEYS:
        if not manifest.get(key):
            raise MissingField(bug_id, key)

    config_path = bug_dir / "config"
    if not config_path.is_file():
        raise MissingField(bug_id, "config")
    report_path = bug_dir / "report.txt"
    if not report_path.is_file():
        raise MissingField(bug_id, "report.txt")

    repro_syz = _read_optional(bug_dir / "repro.syz")
    repro_c = _read_optional(bug_dir / "repro.c")
    if repro_syz is None and repro_c is None:
        raise MissingField(bug_id, "repro.syz|repro.c")

    nondet_raw = manifest.get("nondeterministic")
    record = BugRecord(
        bug_id=bug_id,
        title=manifest["title"],
        bug_type=BugType(manifest["bug_type"]),
        fix_commit=manifest["fix_commit"],
        parent_commit=manifest["parent_commit"],
        bic=manifest.get("bic") or None,
        bic_diff=_read_optional(bug_dir / "bic.diff"),
        kernel_config=config_path.read_text(),
        compiler_hint=manifest.get("compiler_hint", ""),
        crash_report=report_path.read_text(),
        repro_syz=repro_syz,
        repro_c=repro_c,
        nondeterministic=None if nondet_raw is None else nondet_raw.lower() == "true",
    )
    violations = validate(record)
    if violations:
        raise InvalidRecord(bug_id, violations)
    return record


def load_dataset(path: str | Path, problems: list[DatasetError] | None = None) -> list[BugRecord]:
    """Load every record under path in bug_id-sorted order.

    With problems=None a malformed record raises immediately; passing a list
    collects the per-record errors there and keeps loading, so callers can
    report every problem instead of the first.
    """
    root = Path(path)
    if not root.is_dir():
        raise UnreadablePath(f"not a readable corpus directory: {root}")
    records = []
    for bug_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            records.append(load_record(bug_dir))
        except DatasetError as exc:
            if problems is None:
                raise
            problems.append(exc)
    return records


class BaselineStatus(Enum):
    REPRODUCIBLE = "reproducible"
    NOT_REPRODUCIBLE = "not_reproducible"
    INFRA_FAIL = "infra_fail"


def verify_baseline(
    record: BugRecord,
    gym,
    *,
    source: str = "kernel.git",
    vm_count: int = 26,
    repro_timeout: int = 600,
    build_timeout: int = 3600,
    cores: int = 8,
) -> BaselineStatus:
    """Check the bug still reproduces on the unpatched tree at parent_commit.

    Submits a baseline build then a reproducer job through the gym handle
    (anything with submit/wait). REPRODUCIBLE iff at least one VM observed
    the original crash signature; infrastructure failures (build, boot) are
    reported as INFRA_FAIL, and record.nondeterministic is refreshed from the
    reproducer outcome when the bug reproduced.
    """
    build = BuildJob(
        patch="",
        commit=record.parent_commit,
        source=source,
        config=record.kernel_config,
        compiler=record.compiler_hint,
        cores=cores,
        timeout=build_timeout,
        metadata={"bug_id": record.bug_id, "purpose": "baseline"},
    )
    job = gym.wait(gym.submit(build))
    outcome = job.result
    if outcome is None or outcome.kind is not BuildOutcomeKind.SUCCESS:
        return BaselineStatus.INFRA_FAIL

    baseline = signature(parse_report(record.crash_report), k=3)
    repro = ReproJob(
        image=outcome.image,
        reproducers=record.reproducers(),
        vm_count=vm_count,
        timeout=repro_timeout,
        metadata={
            "bug_id": record.bug_id,
            "purpose": "baseline",
            "baseline_signature": encode_baseline_signature(baseline),
        },
    )
    job = gym.wait(gym.submit(repro))
    result = job.result
    if result is None:
        return BaselineStatus.INFRA_FAIL
    if result.aggregate is ReproAggregate.TRIGGERED:
        record.nondeterministic = result.nondet
        return BaselineStatus.REPRODUCIBLE
    if result.aggregate in (ReproAggregate.PASS, ReproAggregate.DIFFERENT_CRASH):
        return BaselineStatus.NOT_REPRODUCIBLE
    return BaselineStatus.INFRA_FAIL
