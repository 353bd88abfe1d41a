"""Atomic file output: write to a temporary sibling, then rename."""

from __future__ import annotations

import contextlib
import os


@contextlib.contextmanager
def atomic_open(path, mode: str = "w"):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
    try:
        with open(tmp, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def atomic_write_text(path, text: str):
    with atomic_open(path) as fh:
        fh.write(text)
