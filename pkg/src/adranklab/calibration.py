"""Isotonic calibration of predicted response rates.

Predictions are bucketed on a fixed grid, bucket outcome means are fit
with pool-adjacent-violators (weighted least squares under a monotone
non-decreasing constraint), and the fitted step function is looked up at
apply time.  Maps are fit per partition of the context (device type and
ad position by default), with a global fallback for sparse partitions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .replay import AdCandidate, SearchContext

__all__ = [
    "CalibrationMap",
    "PartitionedCalibrator",
    "IdentityCalibrator",
    "pav",
    "fit_isotonic",
    "fit_partitioned",
    "fit_from_responses",
    "default_partition_key",
    "save_calibrators",
    "load_calibrators",
]


def pav(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted least-squares fit of y under a non-decreasing constraint.

    Classic pool-adjacent-violators with a stack of blocks; O(n).
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if y.ndim != 1 or y.shape != w.shape:
        raise ValueError("y and w must be 1-d and the same length")
    if y.size == 0:
        raise ValueError("empty input")
    if np.any(w <= 0):
        raise ValueError("weights must be > 0")
    means: list[float] = []
    weights: list[float] = []
    counts: list[int] = []
    for yi, wi in zip(y, w):
        means.append(float(yi))
        weights.append(float(wi))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), weights.pop(), counts.pop()
            m1, w1, c1 = means.pop(), weights.pop(), counts.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            weights.append(wt)
            counts.append(c1 + c2)
    out = np.empty_like(y)
    i = 0
    for m, c in zip(means, counts):
        out[i:i + c] = m
        i += c
    return out


@dataclass(frozen=True)
class CalibrationMap:
    """Monotone step function from predicted to calibrated probability."""

    breakpoints: np.ndarray  # strictly ascending, in [0, 1]
    values: np.ndarray       # non-decreasing, in [0, 1]

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if bp.size == 0 or bp.shape != vals.shape:
            raise ValueError("breakpoints and values must be non-empty and aligned")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly ascending")
        if np.any(np.diff(vals) < -1e-12):
            raise ValueError("calibrated values must be non-decreasing")

    def apply(self, pred) -> np.ndarray | float:
        """Step lookup; predictions below the first breakpoint take the
        first value."""
        p = np.asarray(pred, dtype=np.float64)
        idx = np.clip(np.searchsorted(self.breakpoints, p, side="right") - 1, 0, None)
        out = np.clip(self.values[idx], 0.0, 1.0)
        return float(out) if np.isscalar(pred) else out


def fit_isotonic(preds: Sequence[float], outcomes: Sequence[float],
                 weights: Sequence[float] | None = None,
                 bin_width: float = 0.01) -> CalibrationMap:
    """Fit one calibration map from (prediction, 0/1 outcome, weight) triples.

    Observations are first bucketed by prediction on a fixed grid, then
    bucket means are projected onto the monotone cone with PAV.
    """
    p = np.asarray(preds, dtype=np.float64)
    o = np.asarray(outcomes, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be > 0")
    bins = np.floor(p / bin_width).astype(np.int64)
    uniq, inv = np.unique(bins, return_inverse=True)
    bw = np.bincount(inv, weights=w)
    bwy = np.bincount(inv, weights=w * o)
    bwp = np.bincount(inv, weights=w * p)
    bucket_pred = bwp / bw
    bucket_mean = bwy / bw
    fitted = pav(bucket_mean, bw)
    return CalibrationMap(breakpoints=bucket_pred, values=np.clip(fitted, 0.0, 1.0))


def default_partition_key(ctx: SearchContext) -> tuple:
    return (ctx.device_type, ctx.ad_position)


@dataclass
class PartitionedCalibrator:
    """Per-partition calibration maps with a global fallback."""

    maps: dict[tuple, CalibrationMap]
    global_map: CalibrationMap
    key_fn: Callable[[SearchContext], tuple] = default_partition_key

    def map_for(self, key: tuple) -> CalibrationMap:
        return self.maps.get(tuple(key), self.global_map)

    def apply(self, pred: float, ctx: SearchContext) -> float:
        return float(self.map_for(self.key_fn(ctx)).apply(float(pred)))

    def apply_array(self, preds: np.ndarray, devices: np.ndarray,
                    positions: np.ndarray) -> np.ndarray:
        """Vectorized lookup keyed by (device_type, ad_position) arrays."""
        preds = np.asarray(preds, dtype=np.float64)
        out = np.empty_like(preds)
        flat_p = preds.reshape(-1)
        flat_out = out.reshape(-1)
        dev = np.broadcast_to(devices.reshape(devices.shape + (1,) * (preds.ndim - 1)),
                              preds.shape).reshape(-1)
        pos = np.broadcast_to(positions.reshape(positions.shape + (1,) * (preds.ndim - 1)),
                              preds.shape).reshape(-1)
        combo = dev * 1_000_003 + pos
        for c in np.unique(combo):
            mask = combo == c
            d = int(dev[mask][0])
            p = int(pos[mask][0])
            flat_out[mask] = self.map_for((d, p)).apply(flat_p[mask])
        return out


class IdentityCalibrator:
    """Pass-through used when no calibration maps are available."""

    def apply(self, pred: float, ctx: SearchContext) -> float:
        return float(pred)

    def apply_array(self, preds, devices, positions) -> np.ndarray:
        return np.asarray(preds, dtype=np.float64)


def fit_partitioned(samples: Iterable[tuple[SearchContext, float, float]],
                    key_fn: Callable[[SearchContext], tuple] = default_partition_key,
                    min_samples: int = 1000,
                    bin_width: float = 0.01) -> PartitionedCalibrator:
    """Fit per-partition maps from (context, prediction, outcome) samples.

    Partitions with fewer than ``min_samples`` observations route to the
    global map fit on all samples.
    """
    by_key: dict[tuple, tuple[list, list]] = {}
    all_p: list[float] = []
    all_o: list[float] = []
    for ctx, pred, outcome in samples:
        key = key_fn(ctx)
        ps, os_ = by_key.setdefault(key, ([], []))
        ps.append(pred)
        os_.append(outcome)
        all_p.append(pred)
        all_o.append(outcome)
    if not all_p:
        raise ValueError("no samples to calibrate on")
    global_map = fit_isotonic(all_p, all_o, bin_width=bin_width)
    maps = {
        key: fit_isotonic(ps, os_, bin_width=bin_width)
        for key, (ps, os_) in by_key.items()
        if len(ps) >= min_samples
    }
    return PartitionedCalibrator(maps=maps, global_map=global_map, key_fn=key_fn)


def fit_from_responses(responses: Iterable[tuple[SearchContext, AdCandidate, bool, bool]],
                       min_samples: int = 1000, bin_width: float = 0.01
                       ) -> tuple[PartitionedCalibrator, PartitionedCalibrator]:
    """Fit (CTR, CVR) calibrators from simulated impression outcomes.

    CVR is fit on clicked impressions only.
    """
    ctr_samples = []
    cvr_samples = []
    for ctx, cand, clicked, purchased in responses:
        ctr_samples.append((ctx, cand.pred_ctr, 1.0 if clicked else 0.0))
        if clicked:
            cvr_samples.append((ctx, cand.pred_cvr, 1.0 if purchased else 0.0))
    ctr_cal = fit_partitioned(ctr_samples, min_samples=min_samples, bin_width=bin_width)
    if cvr_samples:
        cvr_cal = fit_partitioned(cvr_samples, min_samples=min_samples, bin_width=bin_width)
    else:
        cvr_cal = PartitionedCalibrator(maps={}, global_map=CalibrationMap(
            breakpoints=np.array([0.0]), values=np.array([0.0])))
    return ctr_cal, cvr_cal


# ---------------------------------------------------------------------------
# persistence: partition key -> breakpoints/values, JSON


def _map_to_dict(m: CalibrationMap) -> dict:
    return {"breakpoints": m.breakpoints.tolist(), "values": m.values.tolist()}


def _map_from_dict(d: dict) -> CalibrationMap:
    return CalibrationMap(breakpoints=np.array(d["breakpoints"]),
                          values=np.array(d["values"]))


def save_calibrators(path, ctr: PartitionedCalibrator, cvr: PartitionedCalibrator):
    doc = {}
    for name, cal in (("ctr", ctr), ("cvr", cvr)):
        doc[name] = {
            "global": _map_to_dict(cal.global_map),
            "partitions": [
                {"key": list(k), **_map_to_dict(m)} for k, m in sorted(cal.maps.items())
            ],
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_calibrators(path) -> tuple[PartitionedCalibrator, PartitionedCalibrator]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for name in ("ctr", "cvr"):
        section = doc[name]
        maps = {tuple(e["key"]): _map_from_dict(e) for e in section["partitions"]}
        out.append(PartitionedCalibrator(maps=maps,
                                         global_map=_map_from_dict(section["global"])))
    return out[0], out[1]
