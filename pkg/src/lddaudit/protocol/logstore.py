"""Server-side log of executed requests, kept until an audit may arrive.

Entries live in memory. With a ``path`` the store also appends one JSON line
per event to ``<path>`` (puts and purge tombstones) and rewrites an index
sidecar ``<path>.idx`` mapping request ids to byte offsets. ``LogStore.load``
replays the log.
"""

from __future__ import annotations

import base64
import itertools
import json
import os
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

from ..commitment import Commitment, TraceOpening, deserialize_opening, serialize_opening
from ..errors import AuditUnavailable, DuplicateId
from ..model import ExecutionResult

DEFAULT_MAX_ENTRIES = 1_000_000
DEFAULT_MAX_AGE = 24 * 3600.0


class SimClock:
    """Manually advanced clock in simulated seconds."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        return self._t

    def advance(self, seconds: float) -> float:
        with self._lock:
            self._t += seconds
            return self._t


@dataclass
class LogEntry:
    request_id: str
    prompt: tuple[int, ...]
    result: ExecutionResult
    commitment: Commitment
    created_at: float
    retained: bool = True
    # simulation ground truth, never shown to the auditor
    label: str = field(default="", compare=False)

    @property
    def opening(self) -> TraceOpening:
        return TraceOpening(self.result.seed_r, self.result.trace)

    def to_json(self) -> str:
        return json.dumps({
            "request_id": self.request_id,
            "prompt": list(self.prompt),
            "y": list(self.result.output_tokens),
            "T": self.result.reported_token_count,
            "executed_steps": self.result.executed_steps,
            "commitment": self.commitment.hex,
            "scheme_id": self.commitment.scheme_id,
            "created_at": repr(self.created_at),
            "label": self.label,
            "opening": base64.b64encode(serialize_opening(self.opening)).decode(),
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "LogEntry":
        d = json.loads(line)
        _, op = deserialize_opening(base64.b64decode(d["opening"]))
        res = ExecutionResult(list(d["y"]), int(d["T"]), op.trace, op.seed_r, int(d.get("executed_steps", 0)))
        return cls(d["request_id"], tuple(d["prompt"]), res, Commitment.from_hex(d["commitment"], d["scheme_id"]),
                   float(d["created_at"]), True, d.get("label", ""))

    def per_token_bytes(self) -> float:
        """Serialized log bytes per reported token."""
        return len(self.to_json().encode()) / max(1, len(self.result.trace.token_decisions))


class LogStore:
    """Thread-safe request log with age and size retention.

    Purges skip entries pinned by an in-flight audit.
    """

    def __init__(self, max_entries: int = DEFAULT_MAX_ENTRIES, max_age: float = DEFAULT_MAX_AGE,
                 clock=None, path: str | os.PathLike | None = None):
        self.max_entries = max_entries
        self.max_age = max_age
        self.clock = clock if clock is not None else SimClock()
        self.path = os.fspath(path) if path is not None else None
        self._entries: OrderedDict[str, LogEntry] = OrderedDict()
        self._pins: dict[str, int] = {}
        self._seen: set[str] = set()
        self._offsets: dict[str, int] = {}
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, request_id: str) -> bool:
        return request_id in self._entries

    def seen(self, request_id: str) -> bool:
        """True if the id was ever logged, purged or not."""
        return request_id in self._seen

    def _append(self, line: str, request_id: str | None = None) -> None:
        if self.path is None:
            return
        with open(self.path, "ab") as f:
            off = f.tell()
            f.write(line.encode() + b"\n")
        if request_id is not None:
            self._offsets[request_id] = off

    def _write_index(self) -> None:
        if self.path is None:
            return
        tmp = self.path + ".idx.tmp"
        with open(tmp, "w") as f:
            json.dump({k: self._offsets[k] for k in self._entries if k in self._offsets}, f, sort_keys=True)
        os.replace(tmp, self.path + ".idx")

    def put(self, entry: LogEntry) -> None:
        with self._lock:
            if entry.request_id in self._seen:
                raise DuplicateId(f"request {entry.request_id} already logged")
            self._seen.add(entry.request_id)
            self._entries[entry.request_id] = entry
            if self.path is not None:
                self._append(entry.to_json(), entry.request_id)
            if len(self._entries) > self.max_entries:
                self._evict_oldest(len(self._entries) - self.max_entries)

    def put_many(self, entries: list[LogEntry]) -> None:
        with self._lock:
            for e in entries:
                self.put(e)
            self._write_index()

    def get(self, request_id: str) -> LogEntry | None:
        with self._lock:
            e = self._entries.get(request_id)
            return e if e is not None and e.retained else None

    def require(self, request_id: str) -> LogEntry:
        e = self.get(request_id)
        if e is None:
            raise AuditUnavailable(f"request {request_id} is unknown or purged")
        return e

    @contextmanager
    def pinned(self, request_id: str) -> Iterator[LogEntry]:
        """Hold an entry for the duration of an audit."""
        with self._lock:
            e = self.require(request_id)
            self._pins[request_id] = self._pins.get(request_id, 0) + 1
        try:
            yield e
        finally:
            with self._lock:
                self._pins[request_id] -= 1
                if not self._pins[request_id]:
                    del self._pins[request_id]

    @contextmanager
    def pinned_many(self, request_ids: list[str]) -> Iterator[list[LogEntry | None]]:
        """Pin every available entry; yields entries with None for missing ids."""
        with self._lock:
            found = [self.get(r) for r in request_ids]
            held = [e.request_id for e in found if e is not None]
            for r in held:
                self._pins[r] = self._pins.get(r, 0) + 1
        try:
            yield found
        finally:
            with self._lock:
                for r in held:
                    self._pins[r] -= 1
                    if not self._pins[r]:
                        del self._pins[r]

    def _drop(self, request_id: str) -> None:
        e = self._entries.pop(request_id)
        e.retained = False
        self._offsets.pop(request_id, None)
        if self.path is not None:
            self._append(json.dumps({"purged": request_id}, separators=(",", ":")))

    def _evict_oldest(self, count: int) -> None:
        victims = list(itertools.islice((k for k in self._entries if k not in self._pins), count))
        for k in victims:
            self._drop(k)

    def purge(self, age_threshold: float | None = None) -> int:
        """Drop unpinned entries at least ``age_threshold`` old; returns the count."""
        age = self.max_age if age_threshold is None else age_threshold
        now = self.clock()
        with self._lock:
            victims = [k for k, e in self._entries.items()
                       if now - e.created_at >= age and k not in self._pins]
            for k in victims:
                self._drop(k)
            if victims:
                self._write_index()
            return len(victims)

    def entries(self) -> list[LogEntry]:
        with self._lock:
            return list(self._entries.values())

    @classmethod
    def load(cls, path: str | os.PathLike, **kwargs) -> "LogStore":
        """Rebuild a store by replaying its JSONL log."""
        store = cls(**kwargs)
        with open(path, "rb") as f:
            while True:
                off = f.tell()
                raw = f.readline()
                if not raw:
                    break
                d = json.loads(raw)
                if "purged" in d:
                    store._entries.pop(d["purged"], None)
                    store._offsets.pop(d["purged"], None)
                    continue
                e = LogEntry.from_json(raw.decode())
                store._seen.add(e.request_id)
                store._entries[e.request_id] = e
                store._offsets[e.request_id] = off
        store.path = os.fspath(path)
        return store
