"""Gym work units (build and reproducer jobs) and their classified outcomes.

Everything here is data plus pure classification logic; execution lives in
executors.py and the lifecycle in service.py.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum

from crashgym.crash import CrashSignature, same_crash, signature, parse_report, CrashParseError


class JobValidationError(Exception):
    pass


class BuildOutcomeKind(str, Enum):
    SUCCESS = "success"
    BAD_PATCH = "bad_patch"
    COMPILE_ERROR = "compile_error"
    TIMEOUT = "timeout"
    INFRA_ERROR = "infra_error"


@dataclass(frozen=True)
class BuildOutcome:
    kind: BuildOutcomeKind
    image: str | None = None  # retrievable artifact ref, SUCCESS only
    detail: str | None = None
    log_ref: str | None = None

    def __post_init__(self):
        if self.kind is BuildOutcomeKind.SUCCESS and not self.image:
            raise ValueError("successful build must carry an image ref")
        if self.kind is not BuildOutcomeKind.SUCCESS and self.image:
            raise ValueError("only successful builds carry an image ref")

    @classmethod
    def success(cls, image: str, log_ref: str | None = None) -> "BuildOutcome":
        return cls(BuildOutcomeKind.SUCCESS, image=image, log_ref=log_ref)

    @classmethod
    def bad_patch(cls, detail: str) -> "BuildOutcome":
        return cls(BuildOutcomeKind.BAD_PATCH, detail=detail)

    @classmethod
    def compile_error(cls, detail: str, log_ref: str | None = None) -> "BuildOutcome":
        return cls(BuildOutcomeKind.COMPILE_ERROR, detail=detail, log_ref=log_ref)

    @classmethod
    def timeout(cls) -> "BuildOutcome":
        return cls(BuildOutcomeKind.TIMEOUT)

    @classmethod
    def infra_error(cls, detail: str) -> "BuildOutcome":
        return cls(BuildOutcomeKind.INFRA_ERROR, detail=detail)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "image": self.image,
            "detail": self.detail,
            "log_ref": self.log_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BuildOutcome":
        return cls(BuildOutcomeKind(d["kind"]), d.get("image"), d.get("detail"), d.get("log_ref"))


@dataclass
class BuildJob:
    patch: str  # unified diff text, empty for baseline builds
    commit: str
    source: str  # repository locator
    config: str
    compiler: str = ""
    cores: int = 8
    timeout: int = 3600
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.timeout <= 0:
            raise JobValidationError("build timeout must be > 0")
        if self.cores < 1:
            raise JobValidationError("build cores must be >= 1")
        if not self.commit:
            raise JobValidationError("build commit is required")
        if not self.source:
            raise JobValidationError("build source locator is required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BuildJob":
        return cls(**d)


class ReproducerKind(str, Enum):
    SYZ = "syz"
    C = "c"


@dataclass(frozen=True)
class Reproducer:
    kind: ReproducerKind
    text: str


@dataclass(frozen=True)
class VmSpec:
    cores: int = 2
    ram_mb: int = 2048


@dataclass
class ReproJob:
    image: str
    reproducers: list[Reproducer]
    vm_count: int = 26
    per_vm: VmSpec = field(default_factory=VmSpec)
    timeout: int = 600
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.reproducers:
            raise JobValidationError("repro job needs at least one reproducer")
        if self.vm_count < 1:
            raise JobValidationError("vm_count must be >= 1")
        if self.timeout <= 0:
            raise JobValidationError("repro timeout must be > 0")
        if not self.image:
            raise JobValidationError("repro job needs a kernel image ref")

    def baseline_signature(self) -> CrashSignature | None:
        raw = self.metadata.get("baseline_signature")
        if not raw:
            return None
        d = json.loads(raw)
        return CrashSignature(d["title"], tuple(d["frames"]))

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "reproducers": [{"kind": r.kind.value, "text": r.text} for r in self.reproducers],
            "vm_count": self.vm_count,
            "per_vm": {"cores": self.per_vm.cores, "ram_mb": self.per_vm.ram_mb},
            "timeout": self.timeout,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReproJob":
        return cls(
            image=d["image"],
            reproducers=[Reproducer(ReproducerKind(r["kind"]), r["text"]) for r in d["reproducers"]],
            vm_count=d.get("vm_count", 26),
            per_vm=VmSpec(**d.get("per_vm", {})),
            timeout=d.get("timeout", 600),
            metadata=d.get("metadata", {}),
        )


def encode_baseline_signature(sig: CrashSignature) -> str:
    return json.dumps({"title": sig.normalized_title, "frames": list(sig.top_frames)})


def assign_reproducers(job: ReproJob) -> list[Reproducer]:
    """Reproducer per VM. With both kinds present the VM pool splits in half
    (syz first, rounded up on odd counts); otherwise every VM runs the one kind.
    """
    syz = next((r for r in job.reproducers if r.kind is ReproducerKind.SYZ), None)
    c = next((r for r in job.reproducers if r.kind is ReproducerKind.C), None)
    n = job.vm_count
    if syz and c:
        n_syz = n - n // 2
        return [syz] * n_syz + [c] * (n - n_syz)
    only = syz or c
    return [only] * n


class VmResultKind(str, Enum):
    NO_CRASH = "no_crash"
    CRASH = "crash"
    BOOT_FAIL = "boot_fail"
    EXEC_ERROR = "exec_error"


@dataclass(frozen=True)
class VmResult:
    vm: int
    kind: VmResultKind
    report: str | None = None  # raw crash report text, CRASH only


class ReproAggregate(str, Enum):
    PASS = "pass"
    TRIGGERED = "triggered"
    DIFFERENT_CRASH = "different_crash"
    BOOT_FAIL = "boot_fail"
    OTHER = "other"


@dataclass
class ReproOutcome:
    per_vm: list[VmResult]
    aggregate: ReproAggregate
    nondet: bool

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate.value,
            "nondet": self.nondet,
            "per_vm": [
                {"vm": r.vm, "result": r.kind.value, "report": r.report} for r in self.per_vm
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReproOutcome":
        return cls(
            per_vm=[
                VmResult(r["vm"], VmResultKind(r["result"]), r.get("report"))
                for r in d["per_vm"]
            ],
            aggregate=ReproAggregate(d["aggregate"]),
            nondet=d["nondet"],
        )


def _crash_matches(report_text: str, baseline: CrashSignature | None) -> bool:
    if baseline is None:
        return False
    try:
        sig = signature(parse_report(report_text), k=len(baseline.top_frames) or 3)
    except CrashParseError:
        return False
    return same_crash(sig, baseline)


def classify_repro(
    per_vm: list[VmResult], baseline: CrashSignature | None
) -> tuple[ReproAggregate, bool]:
    """Aggregate per-VM results.

    Precedence: any crash matching the baseline signature wins as TRIGGERED;
    any other crash means DIFFERENT_CRASH; BOOT_FAIL only when every VM failed
    to boot; any exec error otherwise is OTHER; else PASS. The nondet flag is
    set when a strict subset of VMs crashed.
    """
    if not per_vm:
        raise ValueError("per_vm must be non-empty")
    crashes = [r for r in per_vm if r.kind is VmResultKind.CRASH]
    nondet = 0 < len(crashes) < len(per_vm)
    if any(_crash_matches(r.report or "", baseline) for r in crashes):
        return ReproAggregate.TRIGGERED, nondet
    if crashes:
        return ReproAggregate.DIFFERENT_CRASH, nondet
    if all(r.kind is VmResultKind.BOOT_FAIL for r in per_vm):
        return ReproAggregate.BOOT_FAIL, False
    if any(r.kind is VmResultKind.EXEC_ERROR for r in per_vm):
        return ReproAggregate.OTHER, False
    return ReproAggregate.PASS, False


class JobKind(str, Enum):
    BUILD = "build"
    REPRO = "repro"


class JobState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    TIMED_OUT = "timed_out"
    CANCELLED = "cancelled"

    @property
    def terminal(self) -> bool:
        return self in (JobState.DONE, JobState.FAILED, JobState.TIMED_OUT, JobState.CANCELLED)


_STATE_ORDER = {
    JobState.QUEUED: 0,
    JobState.RUNNING: 1,
    JobState.DONE: 2,
    JobState.FAILED: 2,
    JobState.TIMED_OUT: 2,
    JobState.CANCELLED: 2,
}


def state_rank(state: JobState) -> int:
    return _STATE_ORDER[state]


@dataclass
class Job:
    id: str
    kind: JobKind
    state: JobState
    submitted_at: float | None = None
    started_at: float | None = None
    finished_at: float | None = None
    result: BuildOutcome | ReproOutcome | None = None
    log_ref: str | None = None

    def to_dict(self) -> dict:
        result = self.result.to_dict() if self.result is not None else None
        return {
            "id": self.id,
            "kind": self.kind.value,
            "state": self.state.value,
            "submitted_at": self.submitted_at,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "result": result,
            "log_ref": self.log_ref,
        }
