"""Durable job persistence: an append-only journal plus one directory per job.

Layout:

    <root>/journal.jsonl          submitted/started/finished events
    <root>/jobs/<id>/meta         job payload as submitted
    <root>/jobs/<id>/log          full execution log
    <root>/jobs/<id>/result       terminal outcome (written once, atomically)
    <root>/jobs/<id>/artifacts/   image refs etc.

Every event is flushed and fsynced before submit/finish returns, so a killed
process loses at most the job it was mid-flight on, and that job replays on
restart.
"""

from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path

from crashgym.gym.jobs import (
    BuildJob,
    BuildOutcome,
    Job,
    JobKind,
    JobState,
    ReproJob,
    ReproOutcome,
)


class JobStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.jobs_dir = self.root / "jobs"
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.root / "journal.jsonl"
        self._lock = threading.Lock()
        self._jobs: dict[str, Job] = {}
        self._counters = {JobKind.BUILD: 0, JobKind.REPRO: 0}
        self._replay_journal()

    # -- journal

    def _replay_journal(self) -> None:
        if not self.journal_path.exists():
            return
        for line in self.journal_path.read_text().splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            self._apply(event)

    def _apply(self, event: dict) -> None:
        job_id = event["id"]
        kind = JobKind(event["kind"]) if "kind" in event else self._jobs[job_id].kind
        if event["event"] == "submitted":
            self._jobs[job_id] = Job(
                id=job_id, kind=kind, state=JobState.QUEUED, submitted_at=event["t"]
            )
            prefix, _, n = job_id.partition("-")
            if n.isdigit():
                counter_kind = JobKind.BUILD if prefix == "b" else JobKind.REPRO
                self._counters[counter_kind] = max(self._counters[counter_kind], int(n))
        elif event["event"] == "started":
            job = self._jobs[job_id]
            job.state = JobState.RUNNING
            job.started_at = event["t"]
        elif event["event"] == "finished":
            job = self._jobs[job_id]
            job.state = JobState(event["state"])
            job.finished_at = event["t"]
            job.result = self._read_result(job_id, job.kind)
            job.log_ref = str(self._job_dir(job_id) / "log")

    def _append(self, event: dict) -> None:
        line = json.dumps(event, sort_keys=True)
        with open(self.journal_path, "a") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # -- paths

    def _job_dir(self, job_id: str) -> Path:
        return self.jobs_dir / job_id

    # -- lifecycle

    def new_id(self, kind: JobKind) -> str:
        with self._lock:
            self._counters[kind] += 1
            prefix = "b" if kind is JobKind.BUILD else "r"
            return f"{prefix}-{self._counters[kind]:06d}"

    def record_submitted(self, job_id: str, kind: JobKind, payload: dict) -> Job:
        job_dir = self._job_dir(job_id)
        (job_dir / "artifacts").mkdir(parents=True, exist_ok=True)
        (job_dir / "meta").write_text(
            json.dumps({"kind": kind.value, "payload": payload}, sort_keys=True, indent=1)
        )
        with self._lock:
            self._append({"event": "submitted", "id": job_id, "kind": kind.value, "t": time.time()})
            job = Job(id=job_id, kind=kind, state=JobState.QUEUED, submitted_at=time.time())
            self._jobs[job_id] = job
        return job

    def record_started(self, job_id: str) -> None:
        with self._lock:
            self._append({"event": "started", "id": job_id, "t": time.time()})
            job = self._jobs[job_id]
            job.state = JobState.RUNNING
            job.started_at = time.time()

    def record_finished(
        self, job_id: str, state: JobState, result: BuildOutcome | ReproOutcome | None
    ) -> None:
        if not state.terminal:
            raise ValueError(f"{state} is not terminal")
        job_dir = self._job_dir(job_id)
        if result is not None:
            tmp = job_dir / "result.tmp"
            tmp.write_text(json.dumps(result.to_dict(), sort_keys=True))
            tmp.rename(job_dir / "result")
        with self._lock:
            self._append({"event": "finished", "id": job_id, "state": state.value, "t": time.time()})
            job = self._jobs[job_id]
            job.state = state
            job.finished_at = time.time()
            job.result = result
            job.log_ref = str(job_dir / "log")

    def write_log(self, job_id: str, text: str) -> None:
        (self._job_dir(job_id) / "log").write_text(text)

    def append_log(self, job_id: str, text: str) -> None:
        with open(self._job_dir(job_id) / "log", "a") as fh:
            fh.write(text)

    def read_log(self, job_id: str, offset: int = 0) -> bytes:
        path = self._job_dir(job_id) / "log"
        if not path.exists():
            return b""
        data = path.read_bytes()
        return data[offset:]

    # -- queries

    def exists(self, job_id: str) -> bool:
        return job_id in self._jobs

    def load(self, job_id: str) -> Job:
        with self._lock:
            job = self._jobs[job_id]
            return Job(**vars(job))

    def load_payload(self, job_id: str) -> BuildJob | ReproJob:
        meta = json.loads((self._job_dir(job_id) / "meta").read_text())
        if meta["kind"] == JobKind.BUILD.value:
            return BuildJob.from_dict(meta["payload"])
        return ReproJob.from_dict(meta["payload"])

    def _read_result(self, job_id: str, kind: JobKind) -> BuildOutcome | ReproOutcome | None:
        path = self._job_dir(job_id) / "result"
        if not path.exists():
            return None
        data = json.loads(path.read_text())
        if kind is JobKind.BUILD:
            return BuildOutcome.from_dict(data)
        return ReproOutcome.from_dict(data)

    def list_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._jobs)

    def unfinished(self) -> list[str]:
        """Ids of jobs with no terminal journal event, in submission order."""
        with self._lock:
            pending = [j for j in self._jobs.values() if not j.state.terminal]
            pending.sort(key=lambda j: (j.submitted_at or 0, j.id))
            return [j.id for j in pending]
