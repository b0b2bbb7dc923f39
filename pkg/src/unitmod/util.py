"""Shared helpers: worker-thread policy and the key=value config format."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError


def worker_count() -> int:
    """Value of UNITMOD_THREADS; 0 (the default) means fully serial,
    deterministic execution."""
    raw = os.environ.get("UNITMOD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"UNITMOD_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError(f"UNITMOD_THREADS must be >= 0, got {n}")
    return n


def map_maybe_parallel(fn, items):
    """Run ``fn`` over items, in a thread pool when UNITMOD_THREADS > 0.

    Results keep input order either way, so derived-seed determinism holds.
    """
    workers = worker_count()
    items = list(items)
    if workers <= 0 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def read_config(path) -> dict[str, str]:
    """Parse a UTF-8 ``key = value`` file; ``#`` starts a comment."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values
