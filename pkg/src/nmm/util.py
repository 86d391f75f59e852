"""Seeding, stream splitting, and small shared helpers."""

from __future__ import annotations

import os

import numpy as np

__all__ = ["rng_from_seed", "max_workers", "fmt6"]


def rng_from_seed(seed: int, *branch: int) -> np.random.Generator:
    """Deterministic generator for (seed, branch...) via SeedSequence splitting.

    Every stream in the library is derived from a single 64-bit seed plus an
    integer branch path (worker index, epoch, ...), so results never depend on
    scheduling or on how many workers a host would use.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, branch)]))


def max_workers() -> int:
    """Worker-count cap from NMM_THREADS (>=1). Execution is sequential either
    way; the cap exists so callers honoring it stay within the configured
    budget."""
    raw = os.environ.get("NMM_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def fmt6(x: float) -> str:
    """Fixed 6-decimal rendering used for all CLI metric output."""
    return f"{float(x):.6f}"
