"""
runs.py — Run-directory helpers: default output root, lock file and atomic
writes. The run directory is the only state shared between commands.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from typing import Any, Optional

from lidnet.errors import DatasetIOError

logger = logging.getLogger(__name__)

RUN_DIR_ENV = "LIDNET_RUN_DIR"
LOCK_NAME = "run.lock"


def default_run_root() -> str:
    """Return $LIDNET_RUN_DIR, falling back to ~/.local/share/lidnet/runs."""
    root = os.environ.get(RUN_DIR_ENV)
    if root:
        return os.path.expanduser(root)
    data_home = os.environ.get("XDG_DATA_HOME") or os.path.join("~", ".local", "share")
    return os.path.expanduser(os.path.join(data_home, "lidnet", "runs"))


def resolve_dir(path: Optional[str], name: str) -> str:
    """Use ``path`` when given, else ``<default root>/<name>``."""
    return os.path.abspath(path) if path else os.path.join(default_run_root(), name)


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_json(path: str, data: Any) -> None:
    atomic_write_text(path, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetIOError("missing file", path) from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetIOError(f"corrupt JSON ({exc})", path) from exc


class RunLock:
    """Exclusive lock file guarding a run directory for the lifetime of a command."""

    def __init__(self, run_dir: str):
        self.path = os.path.join(run_dir, LOCK_NAME)
        self._held = False

    def __enter__(self) -> "RunLock":
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise DatasetIOError("run directory is locked by another command", self.path) from exc
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(str(os.getpid()))
        self._held = True
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._held:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                logger.warning("Lock file %s vanished before release", self.path)
            self._held = False
