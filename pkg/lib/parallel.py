"""
Work-unit runner — ordered results from a process pool.

Units are independent and keyed by position; results come back in unit
order whatever the worker count or completion order.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, List, Optional, Sequence

log = logging.getLogger("decomp.parallel")


def run_units(
    fn: Callable[[Any], Any],
    units: Sequence[Any],
    workers: int = 1,
    label: str = "units",
    progress_every: Optional[int] = None,
) -> List[Any]:
    """Apply a module-level `fn` to every unit; returns results in unit order."""
    total = len(units)
    results: List[Any] = [None] * total
    if total == 0:
        return results
    every = progress_every or max(1, total // 10)

    if workers <= 1 or total == 1:
        for i, unit in enumerate(units):
            results[i] = fn(unit)
            if (i + 1) % every == 0 or i + 1 == total:
                log.info(f"{label}: {i + 1}/{total} done")
        return results

    done = 0
    with ProcessPoolExecutor(max_workers=min(workers, total)) as executor:
        futures = {executor.submit(fn, unit): i for i, unit in enumerate(units)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
            done += 1
            if done % every == 0 or done == total:
                log.info(f"{label}: {done}/{total} done ({workers} workers)")
    return results
