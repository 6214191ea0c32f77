"""Crash-safe storage for the sealed key database."""

from __future__ import annotations

import logging
import os
import threading
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

CURRENT = "keydb.sealed"
PREVIOUS = "keydb.sealed.prev"


class BlobStore:
    """Holds the current sealed blob plus a one-deep backup.

    A write never leaves the current path missing or partial: the new blob is
    written and fsynced under a temporary name, the old one is hard-linked to
    the backup path, and only then is the new file renamed over the current
    one. The backup is kept for diagnosis and is never loaded automatically.
    """

    def __init__(self, data_dir: str | os.PathLike, fault_hook: Callable[[str], None] | None = None):
        self.dir = Path(data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.current_blob_path = self.dir / CURRENT
        self.previous_blob_path = self.dir / PREVIOUS
        self.fault_hook = fault_hook
        self.writes = 0
        self._lock = threading.Lock()

    def _fault(self, point: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(point)

    def load(self) -> bytes | None:
        try:
            return self.current_blob_path.read_bytes()
        except FileNotFoundError:
            return None

    def write(self, blob: bytes) -> None:
        with self._lock:
            tmp = self.dir / (CURRENT + ".tmp")
            with open(tmp, "wb") as fh:
                fh.write(blob[: len(blob) // 2])
                self._fault("partial_write")
                fh.write(blob[len(blob) // 2 :])
                fh.flush()
                os.fsync(fh.fileno())
            self._fault("tmp_synced")
            if self.current_blob_path.exists():
                backup_tmp = self.dir / (PREVIOUS + ".tmp")
                backup_tmp.unlink(missing_ok=True)
                os.link(self.current_blob_path, backup_tmp)
                os.replace(backup_tmp, self.previous_blob_path)
            self._fault("backup_linked")
            os.replace(tmp, self.current_blob_path)
            self._fault("renamed")
            dir_fd = os.open(self.dir, os.O_RDONLY)
            try:
                os.fsync(dir_fd)
            finally:
                os.close(dir_fd)
            self.writes += 1
            log.debug("sealed blob persisted (%d bytes)", len(blob))
