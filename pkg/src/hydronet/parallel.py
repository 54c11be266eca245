"""Process-wide parallelism bound."""

from __future__ import annotations

import os

ENV_THREADS = "HYDRONET_THREADS"


def worker_count() -> int:
    """Number of workers for internal thread pools, bounded by HYDRONET_THREADS."""
    available = os.cpu_count() or 1
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return available
    try:
        requested = int(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}") from exc
    return max(1, min(requested, available))
