"""Job lifecycle: a bounded worker pool draining a durable queue.

Submission persists the job before it is queued, so a crash between submit
and execution loses nothing; recover() re-queues anything non-terminal from
the journal.
"""

from __future__ import annotations

import queue
import threading
import time
import traceback

from crashgym.gym.executors import BuildExecutor, ReproExecutor, run_build, run_repro
from crashgym.gym.jobs import (
    BuildJob,
    BuildOutcomeKind,
    Job,
    JobKind,
    JobState,
    ReproJob,
)
from crashgym.gym.store import JobStore


class UnknownJob(Exception):
    pass


class QueueSaturated(Exception):
    pass


_TERMINAL_FOR_BUILD = {
    BuildOutcomeKind.SUCCESS: JobState.DONE,
    BuildOutcomeKind.BAD_PATCH: JobState.DONE,
    BuildOutcomeKind.COMPILE_ERROR: JobState.DONE,
    BuildOutcomeKind.TIMEOUT: JobState.TIMED_OUT,
    BuildOutcomeKind.INFRA_ERROR: JobState.FAILED,
}


class GymService:
    """Submit/poll facade over the store plus a worker pool.

    With workers=0 nothing runs in the background and callers drain the queue
    explicitly via run_pending(); deterministic campaign runs use that mode.
    """

    def __init__(
        self,
        store: JobStore,
        build_executor: BuildExecutor | None = None,
        repro_executor: ReproExecutor | None = None,
        workers: int = 0,
        max_queue: int = 4096,
        inline: bool = False,
    ):
        self.store = store
        self.build_executor = build_executor
        self.repro_executor = repro_executor
        self._queue: queue.Queue[str | None] = queue.Queue(maxsize=max_queue)
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self.workers = workers
        self.inline = inline  # execute on submit; deterministic campaign mode

    # -- submission / inspection

    def submit(self, job: BuildJob | ReproJob) -> str:
        job.validate()
        kind = JobKind.BUILD if isinstance(job, BuildJob) else JobKind.REPRO
        job_id = self.store.new_id(kind)
        self.store.record_submitted(job_id, kind, job.to_dict())
        if self.inline:
            self._execute(job_id)
            return job_id
        try:
            self._queue.put_nowait(job_id)
        except queue.Full:
            raise QueueSaturated(f"queue full, cannot accept {job_id}") from None
        return job_id

    def poll(self, job_id: str) -> Job:
        if not self.store.exists(job_id):
            raise UnknownJob(job_id)
        return self.store.load(job_id)

    def wait(self, job_id: str, timeout: float | None = None, interval: float = 0.01) -> Job:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            job = self.poll(job_id)
            if job.state.terminal:
                return job
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError(f"job {job_id} still {job.state.value}")
            time.sleep(interval)

    def logs(self, job_id: str, offset: int = 0) -> bytes:
        if not self.store.exists(job_id):
            raise UnknownJob(job_id)
        return self.store.read_log(job_id, offset)

    # -- execution

    def _execute(self, job_id: str) -> None:
        self.store.record_started(job_id)
        payload = self.store.load_payload(job_id)
        try:
            if isinstance(payload, BuildJob):
                outcome, log = run_build(payload, self.build_executor)
                self.store.write_log(job_id, log)
                self.store.record_finished(job_id, _TERMINAL_FOR_BUILD[outcome.kind], outcome)
            else:
                result, log = run_repro(payload, self.repro_executor)
                self.store.write_log(job_id, log)
                self.store.record_finished(job_id, JobState.DONE, result)
        except Exception:
            self.store.write_log(job_id, traceback.format_exc())
            self.store.record_finished(job_id, JobState.FAILED, None)

    def run_pending(self) -> int:
        """Drain the queue synchronously on the calling thread."""
        n = 0
        while True:
            try:
                job_id = self._queue.get_nowait()
            except queue.Empty:
                return n
            if job_id is None:
                continue
            self._execute(job_id)
            n += 1

    def recover(self) -> list[str]:
        """Re-queue every job the journal shows as non-terminal."""
        pending = self.store.unfinished()
        for job_id in pending:
            self._queue.put(job_id)
        return pending

    # -- worker pool

    def start(self) -> None:
        self._stopping.clear()
        for i in range(self.workers):
            t = threading.Thread(target=self._worker, name=f"gym-worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)

    def _worker(self) -> None:
        while not self._stopping.is_set():
            try:
                job_id = self._queue.get(timeout=0.05)
            except queue.Empty:
                continue
            if job_id is None:
                break
            self._execute(job_id)
            self._queue.task_done()

    def stop(self, drain: bool = True) -> None:
        """Stop workers; with drain=True wait for queued work to finish first.

        Undrained jobs keep their non-terminal journal state and re-run after
        recover() on restart.
        """
        if drain:
            while not self._queue.empty():
                time.sleep(0.01)
        self._stopping.set()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()
