"""Background fine-tune jobs and the device gate.

One worker thread drains a FIFO of stage A+B jobs. Fine-tuning saturates the
device, so while a job holds the gate every render that would need compute is
refused (the HTTP layer turns that into 503 + Retry-After); cache hits are
served regardless. Renders themselves take the gate as readers and may run
in parallel with each other.
"""

from __future__ import annotations

import queue
import threading
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable


class DeviceGate:
    """Reader/writer gate: parallel short reads (renders), exclusive writes
    (fine-tune jobs). Readers never block; they either enter or report busy."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    def try_read(self) -> bool:
        with self._cond:
            if self._writer:
                return False
            self._readers += 1
            return True

    def end_read(self) -> None:
        with self._cond:
            self._readers -= 1
            self._cond.notify_all()

    @contextmanager
    def reader(self):
        if not self.try_read():
            raise DeviceBusy()
        try:
            yield
        finally:
            self.end_read()

    @contextmanager
    def writer(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._writer = True
            while self._readers > 0:
                self._cond.wait()
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()

    @property
    def busy(self) -> bool:
        with self._cond:
            return self._writer


class DeviceBusy(RuntimeError):
    pass


@dataclass
class JobRecord:
    session_id: str
    state: str = "queued"  # queued | running | done | failed
    error: str | None = None


@dataclass
class JobQueue:
    gate: DeviceGate
    records: dict[str, JobRecord] = field(default_factory=dict)

    def __post_init__(self):
        self._queue: "queue.Queue[tuple[str, Callable[[], None]] | None]" = queue.Queue()
        self._lock = threading.Lock()
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def submit(self, session_id: str, fn: Callable[[], None]) -> JobRecord:
        record = JobRecord(session_id=session_id)
        with self._lock:
            self.records[session_id] = record
        self._queue.put((session_id, fn))
        return record

    def state(self, session_id: str) -> JobRecord | None:
        with self._lock:
            return self.records.get(session_id)

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            session_id, fn = item
            record = self.state(session_id)
            record.state = "running"
            try:
                with self.gate.writer():
                    fn()
                record.state = "done"
            except Exception as exc:  # surfaced through the session status
                record.state = "failed"
                record.error = f"{exc.__class__.__name__}: {exc}"
                traceback.print_exc()

    def shutdown(self) -> None:
        self._queue.put(None)
        self._worker.join(timeout=5)

    def join(self, timeout: float | None = None) -> None:
        """Wait for queued work to drain (used by tests)."""
        import time

        deadline = None if timeout is None else time.time() + timeout
        while True:
            with self._lock:
                pending = [r for r in self.records.values() if r.state in ("queued", "running")]
            if not pending:
                return
            if deadline is not None and time.time() > deadline:
                raise TimeoutError("jobs did not drain in time")
            time.sleep(0.05)
