"""Deterministic parallel map.

Workers only change wall time, never results: every unit of work derives its
own random stream from stable keys, and results are collected in input
order.  Exceptions are captured per item so callers can report partial
failures.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def run_indexed(fn, items, workers: int = 1) -> list:
    """Apply fn to each item; returns results (or the raised Exception) in order."""
    def safe(item):
        try:
            return fn(item)
        except Exception as exc:  # noqa: BLE001 - reported to the caller
            return exc

    if workers <= 1 or len(items) <= 1:
        return [safe(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(safe, items))
