"""Device-level accuracy summaries and systems budgets.

Quantile rule
-------------
Unweighted (``per_device``): sort the n accuracies and read position
``r = p/100 * (n - 1)``, linearly interpolating between the neighbouring
order statistics.

Weighted (``per_sample``, weights are per-device test counts): the result is
exactly the unweighted rule applied to the multiset in which each device's
accuracy is repeated ``n_k`` times. Item i then covers the positions
``[S_{i-1}, S_i - 1]`` (``S`` the cumulative weights), its value is flat on
that span, and the curve ramps linearly from item i to item i+1 between
positions ``S_i - 1`` and ``S_i``. Evaluating this piecewise function at
``p/100 * (W - 1)`` needs no expansion, so large counts stay cheap.

The ``per_sample`` mean is the sample-weighted mean, i.e. the pooled accuracy
over all test samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

PERCENTILES = (10, 25, 50, 75, 90)
WEIGHTINGS = ("per_device", "per_sample")


@dataclass(frozen=True)
class AccuracySummary:
    mean: float
    p10: float
    p25: float
    p50: float
    p75: float
    p90: float
    weighting: str
    n_devices: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SystemsBudget:
    threshold: float
    reached: bool
    round_reached: int | None
    total_flops: int
    total_bytes_up: int
    total_bytes_down: int

    def as_dict(self) -> dict:
        return asdict(self)


def quantile(values: Sequence[float], p: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    r = p / 100.0 * (len(v) - 1)
    lo = math.floor(r)
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (r - lo) * (v[hi] - v[lo]))


def weighted_quantile(values: Sequence[float], weights: Sequence[int], p: float) -> float:
    order = np.argsort(values, kind="stable")
    v = np.asarray(values, dtype=np.float64)[order]
    w = np.asarray(weights, dtype=np.int64)[order]
    if np.any(w < 1):
        raise ValueError("weights must be positive integers")
    cum = np.cumsum(w)
    r = p / 100.0 * (cum[-1] - 1)
    lo = math.floor(r)
    frac = r - lo
    # item holding expanded position j: first i with cum[i] > j
    i_lo = int(np.searchsorted(cum, lo, side="right"))
    i_hi = int(np.searchsorted(cum, min(lo + 1, cum[-1] - 1), side="right"))
    return float(v[i_lo] + frac * (v[i_hi] - v[i_lo]))


def _check_entries(entries):
    if not entries:
        raise ValueError("cannot summarize an empty list of devices")
    for uid, acc, n in entries:
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"device {uid!r}: accuracy {acc} outside [0, 1]")
        if n < 1:
            raise ValueError(f"device {uid!r}: sample count must be >= 1")


def summarize_accuracy(entries: Sequence[tuple[str, float, int]],
                       weighting: str = "per_sample") -> AccuracySummary:
    """Mean and 10/25/50/75/90th percentiles of device accuracy."""
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    entries = list(entries)
    _check_entries(entries)
    acc = [a for _, a, _ in entries]
    if weighting == "per_device":
        mean = float(np.mean(acc))
        qs = [quantile(acc, p) for p in PERCENTILES]
    else:
        counts = [n for _, _, n in entries]
        # normalize first so a single device (or equal counts) reproduces its value exactly
        mean = float(np.dot(acc, np.divide(counts, sum(counts))))
        qs = [weighted_quantile(acc, counts, p) for p in PERCENTILES]
    return AccuracySummary(mean, *qs, weighting=weighting, n_devices=len(entries))


def pooled_accuracy(entries, weighting: str = "per_sample") -> float:
    entries = list(entries)
    if weighting == "per_device":
        return float(np.mean([a for _, a, _ in entries]))
    return float(sum(a * n for _, a, n in entries) / sum(n for _, _, n in entries))


UNGROUPED = "ungrouped"


def stratified_accuracy(entries, hierarchy: dict[str, str] | None,
                        weighting: str = "per_sample") -> dict[str, AccuracySummary]:
    groups: dict[str, list] = {}
    hierarchy = hierarchy or {}
    for entry in entries:
        groups.setdefault(hierarchy.get(entry[0], UNGROUPED), []).append(entry)
    return {g: summarize_accuracy(groups[g], weighting) for g in sorted(groups)}


def systems_budget(logs: Iterable, threshold: float, weighting: str = "per_sample") -> SystemsBudget:
    """Cumulative cost at the first evaluated round reaching ``threshold``.

    ``logs`` are RoundLog objects (or their dict form) in round order. Only
    evaluated rounds are considered.
    """
    last = None
    evaluated = False
    for log in logs:
        log = log if isinstance(log, dict) else log.as_dict()
        last = log
        if log.get("eval") is None:
            continue
        evaluated = True
        if pooled_accuracy(log["eval"], weighting) >= threshold:
            return SystemsBudget(threshold, True, log["round"], log["cumulative_flops"],
                                 log["cumulative_bytes_up"], log["cumulative_bytes_down"])
    if not evaluated:
        raise ValueError("no evaluated rounds in the log")
    return SystemsBudget(threshold, False, None, last["cumulative_flops"],
                         last["cumulative_bytes_up"], last["cumulative_bytes_down"])


CSV_COLUMNS = ("group", "weighting", "mean", "p10", "p25", "p50", "p75", "p90")


def write_summary_csv(path, rows: Iterable[tuple[str, AccuracySummary]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for group, s in rows:
            writer.writerow([group, s.weighting, repr(s.mean), repr(s.p10), repr(s.p25),
                             repr(s.p50), repr(s.p75), repr(s.p90)])
