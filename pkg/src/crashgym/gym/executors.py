"""Executor bindings behind the build/repro boundary, plus the run pipelines.

The boundary is three phases per job kind:

    build:  prepare(job) -> compile(prepared, cores, timeout) -> collect(prepared)
    repro:  boot(image, spec, vm) -> inject(handle, reproducer) -> watch(handle, timeout)

Real bindings drive container toolchains and QEMU VMs; the simulated binding
replays a script table keyed on (bug id, patch digest) so the whole pipeline
runs on machines with neither virtualization nor kernel sources.
"""

from __future__ import annotations

import hashlib
import re
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from crashgym.gym.jobs import (
    BuildJob,
    BuildOutcome,
    Reproducer,
    ReproJob,
    ReproOutcome,
    VmResult,
    VmResultKind,
    VmSpec,
    assign_reproducers,
    classify_repro,
)
from crashgym.gym.toolchains import select_toolchain


class ExecutorError(Exception):
    pass


class PatchRejected(ExecutorError):
    """Patch failed its dry-run application; the compiler must not run."""


class InfraFailure(ExecutorError):
    pass


class BootFailure(ExecutorError):
    pass


class InjectFailure(ExecutorError):
    pass


@dataclass
class CompileResult:
    ok: bool
    log: str = ""
    timed_out: bool = False


def patch_digest(patch: str) -> str:
    """Stable short key for a patch body; '-' stands for the empty patch."""
    if not patch:
        return "-"
    return hashlib.sha256(patch.encode()).hexdigest()[:12]


class BuildExecutor(Protocol):
    def prepare(self, job: BuildJob) -> object: ...

    def compile(self, prepared: object, cores: int, timeout: int) -> CompileResult: ...

    def collect(self, prepared: object) -> str: ...


class ReproExecutor(Protocol):
    def boot(self, image: str, spec: VmSpec, vm: int, metadata: dict) -> object: ...

    def inject(self, handle: object, reproducer: Reproducer) -> None: ...

    def watch(self, handle: object, timeout: int) -> str | None: ...


def run_build(job: BuildJob, executor: BuildExecutor) -> tuple[BuildOutcome, str]:
    """Build pipeline: checkout + patch dry-run, then compile, then collect.

    Every failure mode maps to a classified BuildOutcome; the returned log
    covers all phases that ran.
    """
    job.validate()
    log_lines = [f"commit {job.commit}", f"source {job.source}"]
    try:
        prepared = executor.prepare(job)
    except PatchRejected as exc:
        log_lines.append(f"patch rejected: {exc}")
        return BuildOutcome.bad_patch(str(exc)), "\n".join(log_lines) + "\n"
    except InfraFailure as exc:
        log_lines.append(f"prepare failed: {exc}")
        return BuildOutcome.infra_error(str(exc)), "\n".join(log_lines) + "\n"
    log_lines.append("tree prepared, config written")

    try:
        result = executor.compile(prepared, job.cores, job.timeout)
    except InfraFailure as exc:
        log_lines.append(f"compile infra failure: {exc}")
        return BuildOutcome.infra_error(str(exc)), "\n".join(log_lines) + "\n"
    if result.log:
        log_lines.append(result.log)
    if result.timed_out:
        log_lines.append(f"compile timed out after {job.timeout}s")
        return BuildOutcome.timeout(), "\n".join(log_lines) + "\n"
    if not result.ok:
        detail = result.log.splitlines()[-1] if result.log else "compile failed"
        return BuildOutcome.compile_error(detail), "\n".join(log_lines) + "\n"

    try:
        image = executor.collect(prepared)
    except InfraFailure as exc:
        log_lines.append(f"collect failed: {exc}")
        return BuildOutcome.infra_error(str(exc)), "\n".join(log_lines) + "\n"
    log_lines.append(f"image {image}")
    return BuildOutcome.success(image), "\n".join(log_lines) + "\n"


def run_repro(job: ReproJob, executor: ReproExecutor) -> tuple[ReproOutcome, str]:
    """Boot vm_count VMs, assign reproducers per the split rule, loop until
    timeout, classify each VM, and aggregate."""
    job.validate()
    assignments = assign_reproducers(job)
    baseline = job.baseline_signature()
    per_vm: list[VmResult] = []
    log_lines = [f"image {job.image}", f"vms {job.vm_count}"]
    for vm, reproducer in enumerate(assignments):
        try:
            handle = executor.boot(job.image, job.per_vm, vm, job.metadata)
        except BootFailure as exc:
            log_lines.append(f"vm{vm}: boot failed: {exc}")
            per_vm.append(VmResult(vm, VmResultKind.BOOT_FAIL))
            continue
        try:
            executor.inject(handle, reproducer)
        except InjectFailure as exc:
            log_lines.append(f"vm{vm}: exec error: {exc}")
            per_vm.append(VmResult(vm, VmResultKind.EXEC_ERROR))
            continue
        crash = executor.watch(handle, job.timeout)
        if crash is None:
            log_lines.append(f"vm{vm}: survived {job.timeout}s")
            per_vm.append(VmResult(vm, VmResultKind.NO_CRASH))
        else:
            title = crash.splitlines()[0] if crash else "?"
            log_lines.append(f"vm{vm}: crashed: {title}")
            per_vm.append(VmResult(vm, VmResultKind.CRASH, report=crash))
    aggregate, nondet = classify_repro(per_vm, baseline)
    log_lines.append(f"aggregate {aggregate.value} nondet={nondet}")
    return ReproOutcome(per_vm, aggregate, nondet), "\n".join(log_lines) + "\n"


# ---------------------------------------------------------------------------
# Simulated binding
# ---------------------------------------------------------------------------

_DIFFERENT_CRASH_REPORT = """\
BUG: KASAN: use-after-free in unrelated_helper+0x21/0x80 lib/unrelated.c:44
Read of size 8 at addr ffff888011223344 by task syz-executor/4242

Call Trace:
 unrelated_helper+0x21/0x80 lib/unrelated.c:44
 other_caller+0x11/0x90 lib/unrelated.c:120
 do_entry+0x5/0x10 lib/entry.c:9
"""


@dataclass
class _ScriptRow:
    bug_id: str
    patch_key: str
    phase: str
    outcome: list[str]


def _parse_script(text: str) -> list[_ScriptRow]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 4:
            raise ValueError(f"script line {lineno}: want 'bug patch phase outcome...'")
        if parts[2] not in ("build", "repro"):
            raise ValueError(f"script line {lineno}: unknown phase {parts[2]!r}")
        rows.append(_ScriptRow(parts[0], parts[1], parts[2], parts[3:]))
    return rows


class SimulatedExecutor:
    """Script-driven executor implementing both build and repro boundaries.

    The script is a text table, one decision per line:

        {bug_id|*} {patch-digest|-|*} build  {ok|bad-patch|compile-error <msg>|timeout|infra <msg>}
        {bug_id|*} {patch-digest|-|*} repro  {pass|trigger K/N|different K/N|bootfail|exec-error}

    Rows with the same key are consumed top to bottom (the last one repeats),
    so a bug can be scripted to fail its first attempt and pass the second.
    Lookup order: (bug, key), (bug, *), (*, key), (*, *). The '-' digest is
    the empty (baseline) patch. `trigger` emits the bug's own crash report in
    K VMs; `different` emits an unrelated report instead.
    """

    def __init__(self, script: str | Path, reports: dict[str, str] | None = None):
        text = Path(script).read_text() if isinstance(script, (str, Path)) else ""
        self._rows: dict[tuple[str, str, str], list[list[str]]] = {}
        for row in _parse_script(text):
            self._rows.setdefault((row.bug_id, row.patch_key, row.phase), []).append(row.outcome)
        self._cursor: dict[tuple[str, str, str], int] = {}
        self._lock = threading.Lock()
        self.reports = reports or {}
        self.calls: list[tuple[str, str, str]] = []

    def _lookup(self, bug_id: str, digest: str, phase: str) -> list[str]:
        with self._lock:
            for key in (
                (bug_id, digest, phase),
                (bug_id, "*", phase),
                ("*", digest, phase),
                ("*", "*", phase),
            ):
                outcomes = self._rows.get(key)
                if outcomes:
                    i = self._cursor.get(key, 0)
                    self._cursor[key] = i + 1
                    return outcomes[min(i, len(outcomes) - 1)]
        raise InfraFailure(f"no script entry for bug={bug_id} patch={digest} phase={phase}")

    # -- build boundary

    def prepare(self, job: BuildJob) -> dict:
        bug_id = job.metadata.get("bug_id", "?")
        digest = patch_digest(job.patch)
        self.calls.append(("prepare", bug_id, digest))
        outcome = self._lookup(bug_id, digest, "build")
        if outcome[0] == "bad-patch":
            raise PatchRejected(" ".join(outcome[1:]) or "hunk #1 failed at dry run")
        if outcome[0] == "infra":
            raise InfraFailure(" ".join(outcome[1:]) or "executor infrastructure fault")
        return {"bug_id": bug_id, "digest": digest, "outcome": outcome}

    def compile(self, prepared: dict, cores: int, timeout: int) -> CompileResult:
        self.calls.append(("compile", prepared["bug_id"], prepared["digest"]))
        outcome = prepared["outcome"]
        if outcome[0] == "ok":
            return CompileResult(ok=True, log=f"make -j{cores} vmlinux: ok")
        if outcome[0] == "compile-error":
            detail = " ".join(outcome[1:]) or "error: something did not compile"
            return CompileResult(ok=False, log=f"make -j{cores} vmlinux\n{detail}")
        if outcome[0] == "timeout":
            return CompileResult(ok=False, timed_out=True)
        raise InfraFailure(f"unknown scripted build outcome {outcome[0]!r}")

    def collect(self, prepared: dict) -> str:
        self.calls.append(("collect", prepared["bug_id"], prepared["digest"]))
        return f"sim-image/{prepared['bug_id']}/{prepared['digest']}"

    # -- repro boundary (one scripted decision per job; VM i crashes iff i < K)

    def _job_decision(self, metadata: dict) -> dict:
        bug_id = metadata.get("bug_id", "?")
        digest = metadata.get("patch_digest", "-")
        outcome = self._lookup(bug_id, digest, "repro")
        kind = outcome[0]
        if kind not in ("pass", "bootfail", "exec-error", "trigger", "different"):
            raise InfraFailure(f"unknown scripted repro outcome {kind!r}")
        k = 0
        report = None
        if kind in ("trigger", "different"):
            k = int(outcome[1].split("/")[0]) if len(outcome) > 1 else 1 << 30
            report = (
                self.reports.get(bug_id, _DIFFERENT_CRASH_REPORT)
                if kind == "trigger"
                else _DIFFERENT_CRASH_REPORT
            )
        return {"kind": kind, "k": k, "report": report}

    def boot(self, image: str, spec: VmSpec, vm: int, metadata: dict) -> dict:
        self.calls.append(("boot", metadata.get("bug_id", "?"), image))
        if vm == 0:
            self._decision = self._job_decision(metadata)
        decision = self._decision
        if decision["kind"] == "bootfail":
            raise BootFailure(f"vm{vm} never reached login")
        return {"vm": vm, "decision": decision}

    def inject(self, handle: dict, reproducer: Reproducer) -> None:
        if handle["decision"]["kind"] == "exec-error":
            raise InjectFailure(f"reproducer exited abnormally on vm{handle['vm']}")

    def watch(self, handle: dict, timeout: int) -> str | None:
        decision = handle["decision"]
        if decision["kind"] in ("trigger", "different") and handle["vm"] < decision["k"]:
            return decision["report"]
        return None


# ---------------------------------------------------------------------------
# Real bindings (container toolchains + QEMU). These drive external tools and
# are not exercised by the simulated acceptance suite.
# ---------------------------------------------------------------------------


_CONSOLE_SPLAT_RE = re.compile(
    r"^(={10,}\n.*?\n={10,}|BUG: .*?(?:\n[ <].*?)*|general protection fault.*?(?:\n[ <].*?)*)\n",
    re.S | re.M,
)


def extract_crash_from_console(console: str) -> str | None:
    """First sanitizer splat in a console transcript, or None.

    KASAN frames a report between ==== ruler lines; other splats start at a
    BUG:/GPF header and run while lines stay indented.
    """
    m = _CONSOLE_SPLAT_RE.search(console)
    if not m:
        return None
    text = m.group(1)
    return text if text.endswith("\n") else text + "\n"


@dataclass
class DockerBuildExecutor:
    """Builds kernels inside pinned toolchain containers.

    prepare() checks the tree out into a scratch worktree, dry-runs the patch
    with patch(1) (rejection classifies as BadPatch before any compile), then
    applies it and writes the config.
    """

    work_dir: Path
    docker_bin: str = "docker"
    kernel_release: str = ""

    def prepare(self, job: BuildJob) -> dict:
        scratch = Path(self.work_dir) / f"build-{patch_digest(job.patch)}-{job.commit[:12]}"
        scratch.mkdir(parents=True, exist_ok=True)
        tree = scratch / "tree"
        self._run(["git", "clone", "--shared", "--no-checkout", job.source, str(tree)])
        self._run(["git", "-C", str(tree), "checkout", "--detach", job.commit])
        if job.patch:
            dry = subprocess.run(
                ["patch", "-p1", "--dry-run", "--force", "-d", str(tree)],
                input=job.patch,
                text=True,
                capture_output=True,
            )
            if dry.returncode != 0:
                raise PatchRejected(dry.stdout.strip() or dry.stderr.strip())
            self._run(["patch", "-p1", "--force", "-d", str(tree)], input_text=job.patch)
        (tree / ".config").write_text(job.config)
        image_tag = job.compiler or select_toolchain(job.config, self.kernel_release)
        return {"tree": tree, "toolchain": image_tag}

    def compile(self, prepared: dict, cores: int, timeout: int) -> CompileResult:
        argv = [
            self.docker_bin,
            "run",
            "--rm",
            "-v",
            f"{prepared['tree']}:/src",
            "-w",
            "/src",
            prepared["toolchain"],
            "sh",
            "-c",
            f"make olddefconfig && make -j{cores} bzImage",
        ]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            return CompileResult(ok=False, log=str(exc.stdout or ""), timed_out=True)
        log = (proc.stdout or "") + (proc.stderr or "")
        return CompileResult(ok=proc.returncode == 0, log=log)

    def collect(self, prepared: dict) -> str:
        image = prepared["tree"] / "arch" / "x86" / "boot" / "bzImage"
        if not image.is_file():
            raise InfraFailure("build reported success but no bzImage present")
        return str(image)

    def _run(self, argv: list[str], input_text: str | None = None) -> None:
        proc = subprocess.run(argv, input=input_text, capture_output=True, text=True)
        if proc.returncode != 0:
            raise InfraFailure(f"{shlex.join(argv)}: {proc.stderr.strip()}")


def qemu_argv(image: str, spec: VmSpec, rootfs: str, console_log: str) -> list[str]:
    return [
        "qemu-system-x86_64",
        "-m",
        f"{spec.ram_mb}M",
        "-smp",
        str(spec.cores),
        "-kernel",
        image,
        "-drive",
        f"file={rootfs},format=raw",
        "-append",
        "root=/dev/sda console=ttyS0 earlyprintk=serial oops=panic panic_on_warn=0",
        "-serial",
        f"file:{console_log}",
        "-display",
        "none",
        "-no-reboot",
        "-enable-kvm",
    ]


@dataclass
class QemuReproExecutor:
    """Boots hardware-virtualized VMs and watches the serial console for splats."""

    rootfs: str
    work_dir: Path
    boot_timeout: int = 120
    _procs: list[subprocess.Popen] = field(default_factory=list)

    def boot(self, image: str, spec: VmSpec, vm: int, metadata: dict) -> dict:
        console_log = Path(self.work_dir) / f"console-{vm}.log"
        console_log.write_text("")
        argv = qemu_argv(image, spec, self.rootfs, str(console_log))
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.DEVNULL)
        except OSError as exc:
            raise BootFailure(f"qemu failed to start: {exc}") from exc
        self._procs.append(proc)
        deadline = time.monotonic() + self.boot_timeout
        while time.monotonic() < deadline:
            if "login:" in console_log.read_text(errors="replace"):
                return {"proc": proc, "console": console_log, "vm": vm}
            if proc.poll() is not None:
                raise BootFailure(f"qemu exited with {proc.returncode} during boot")
            time.sleep(1.0)
        proc.kill()
        raise BootFailure(f"vm{vm} did not reach login within {self.boot_timeout}s")

    def inject(self, handle: dict, reproducer: Reproducer) -> None:
        payload = Path(self.work_dir) / f"repro-{handle['vm']}.{reproducer.kind.value}"
        payload.write_text(reproducer.text)
        # The rootfs ships a runner agent that picks payloads up from the
        # shared 9p mount and loops them until the VM dies or is torn down.
        if handle["proc"].poll() is not None:
            raise InjectFailure("vm exited before the reproducer started")

    def watch(self, handle: dict, timeout: int) -> str | None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            crash = extract_crash_from_console(
                handle["console"].read_text(errors="replace")
            )
            if crash:
                handle["proc"].kill()
                return crash
            if handle["proc"].poll() is not None:
                break
            time.sleep(1.0)
        if handle["proc"].poll() is None:
            handle["proc"].kill()
        return None
