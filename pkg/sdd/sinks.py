"""
Detection sinks: where damage decisions are delivered.

`file:<path>` appends one JSON line per record; `http://` / `https://` POSTs the
record JSON. Sinks raise SinkError on failure; retrying is the pipeline's job.
"""
import logging
import threading
from pathlib import Path
from typing import Optional, Protocol, Union

import httpx

from sdd.exceptions import InvalidArgumentError, SinkError
from sdd.schemas import DetectionRecord, canonical_json

logger = logging.getLogger(__name__)


class Sink(Protocol):
    def send(self, record: DetectionRecord) -> None: ...

    def close(self) -> None: ...


def record_line(record: DetectionRecord) -> str:
    return canonical_json(record.model_dump()) + "\n"


class FileSink:
    """JSON-lines file; writes are serialized by a lock so worker threads may share it."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def send(self, record: DetectionRecord) -> None:
        line = record_line(record)
        with self._lock:
            try:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
            except OSError as e:
                raise SinkError(f"Cannot append to {self.path}: {e}") from e

    def close(self) -> None:
        pass

    def __repr__(self) -> str:
        return f"FileSink({str(self.path)!r})"


class HttpSink:
    """POSTs each record to a collector endpoint."""

    def __init__(self, url: str, timeout: float = 5.0, client: Optional[httpx.Client] = None):
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)
        self._owns_client = client is None
        self._lock = threading.Lock()

    def send(self, record: DetectionRecord) -> None:
        with self._lock:
            try:
                response = self._client.post(
                    self.url,
                    content=canonical_json(record.model_dump()),
                    headers={"Content-Type": "application/json"},
                )
                response.raise_for_status()
            except httpx.HTTPError as e:
                raise SinkError(f"POST {self.url} failed: {e}") from e

    def close(self) -> None:
        if self._owns_client:
            self._client.close()

    def __repr__(self) -> str:
        return f"HttpSink({self.url!r})"


def parse_sink(target: str, timeout: float = 5.0) -> Sink:
    """Build a sink from `file:<path>` or an http(s) URL."""
    if target.startswith("file:"):
        path = target[len("file:"):]
        if not path:
            raise InvalidArgumentError("file: sink needs a path, e.g. file:detections.jsonl")
        return FileSink(path)
    if target.startswith(("http://", "https://")):
        return HttpSink(target, timeout=timeout)
    raise InvalidArgumentError(f"Unknown sink '{target}'; use file:<path> or http(s)://<url>")
