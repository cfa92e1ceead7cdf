"""Baselines, summary metrics, accuracy curves and report files."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .ingest import ImageRecord, features_of, positions_of
from .localizer import LocalizationResult
from .map_builder import LandmarkMap, make_landmark_map

PERCENTILES = (50, 90, 95, 99)


class InvariantViolation(AssertionError):
    """An internal guarantee did not hold (e.g. a non-monotone accuracy curve)."""


# -- uniform baseline ---------------------------------------------------------

def _arc_length(positions: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def is_closed(positions: np.ndarray) -> bool:
    """A trajectory is closed when its end is no further from its start than its largest step."""
    pos = np.asarray(positions, float)
    if len(pos) < 3:
        return False
    step = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return float(np.linalg.norm(pos[-1] - pos[0])) <= 1.5 * float(step.max())


def uniform_indices(positions: np.ndarray, m: int, closed: bool | None = None) -> np.ndarray:
    """``m`` record indices evenly spaced in arc length, sorted.

    Closed trajectories are cut at ``k L / m`` starting from record 0; open ones at
    the centres ``(k + 1/2) L / m`` of ``m`` equal stretches, so ``m = 1`` picks the
    arc-length midpoint either way. Each cut takes the nearest record not yet taken.
    """
    pos = np.asarray(positions, float)
    n = len(pos)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got {m}")
    closed = is_closed(pos) if closed is None else closed
    arc = _arc_length(pos)
    if closed and m > 1:
        total = arc[-1] + float(np.linalg.norm(pos[-1] - pos[0]))
        cuts = np.arange(m) * (total / m)
        # distance around the loop, so a cut near the end may take record 0
        gap = np.abs(arc[None, :] - cuts[:, None])
        gap = np.minimum(gap, total - gap)
    else:
        cuts = (np.arange(m) + 0.5) * (arc[-1] / m)
        gap = np.abs(arc[None, :] - cuts[:, None])
    taken = np.zeros(n, dtype=bool)
    out = []
    for row in gap:
        row = np.where(taken, np.inf, row)
        i = int(np.argmin(row))
        taken[i] = True
        out.append(i)
    return np.sort(np.array(out, dtype=np.int64))


def uniform_summary(records: Sequence[ImageRecord], m: int, alpha: float = math.inf,
                    closed: bool | None = None) -> LandmarkMap:
    """Landmark map of ``m`` records sampled uniformly along the trajectory."""
    pos, feat = positions_of(records), features_of(records)
    return make_landmark_map(pos, feat, uniform_indices(pos, m, closed), alpha)


# -- raw retrieval ------------------------------------------------------------

def raw_topk(landmarks: LandmarkMap | np.ndarray, query_features: np.ndarray,
             k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per query, the ``k`` nearest landmarks by feature distance (ties: lower index).

    Returns local landmark indices and distances, both shaped (q, k).
    """
    feats = landmarks.features if isinstance(landmarks, LandmarkMap) else np.asarray(landmarks, float)
    if not 1 <= k <= len(feats):
        raise ValueError(f"need 1 <= k <= {len(feats)}, got {k}")
    d = cdist(np.asarray(query_features, float), feats)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d, order, axis=1)


# -- landmark summaries -------------------------------------------------------

@dataclass(frozen=True)
class SummaryDistributions:
    nearest: np.ndarray       # local index of the geometrically closest landmark
    geo_dist: np.ndarray      # meters
    feat_dist: np.ndarray     # normalized by the max pairwise record feature distance
    feat_scale: float
    percentiles: dict         # {"geo": {50: ..}, "feat": {50: ..}}

    def p(self, kind: str, q: int = 95) -> float:
        return self.percentiles[kind][q]


def summary_distributions(records: Sequence[ImageRecord], lm: LandmarkMap) -> SummaryDistributions:
    if len(lm) == 0:
        raise ValueError("landmark map is empty")
    pos, feat = positions_of(records), features_of(records)
    d = cdist(pos, lm.positions)
    near = np.argmin(d, axis=1)
    geo = d[np.arange(len(pos)), near]
    raw = np.linalg.norm(feat - lm.features[near], axis=1)
    scale = float(pdist(feat).max()) if len(feat) > 1 else 0.0
    fd = raw / scale if scale > 0 else raw
    pct = {kind: {q: float(np.percentile(v, q)) for q in PERCENTILES}
           for kind, v in (("geo", geo), ("feat", fd))}
    return SummaryDistributions(near, geo, fd, scale, pct)


def compare_summaries(records: Sequence[ImageRecord], maps: dict[str, LandmarkMap]
                      ) -> dict[str, SummaryDistributions]:
    """Summaries of maps that must all keep the same number of landmarks."""
    sizes = {name: len(lm) for name, lm in maps.items()}
    if len(set(sizes.values())) > 1:
        raise ValueError(f"maps compared at unequal sizes: {sizes}")
    return {name: summary_distributions(records, lm) for name, lm in maps.items()}


# -- accuracy curves ----------------------------------------------------------

@dataclass(frozen=True)
class AccuracyCurve:
    thresholds: np.ndarray
    accuracy: np.ndarray
    method: str

    def __post_init__(self):
        if len(self.thresholds) != len(self.accuracy):
            raise InvariantViolation("thresholds and accuracy lengths differ")
        if np.any(np.diff(self.thresholds) < 0):
            raise InvariantViolation("thresholds must be sorted")
        if np.any(np.diff(self.accuracy) < 0):
            raise InvariantViolation(f"accuracy curve {self.method!r} is not monotone")

    def at(self, threshold: float) -> float:
        hit = np.flatnonzero(np.isclose(self.thresholds, threshold))
        if hit.size == 0:
            raise KeyError(threshold)
        return float(self.accuracy[hit[0]])


def localization_errors(estimate, truth) -> np.ndarray:
    """Distance to truth of a (q, 2) estimate, or the closest of (q, k, 2) candidates."""
    if truth is None:
        raise ValueError("accuracy needs ground truth for every query")
    truth = np.asarray(truth, float)
    if np.any(~np.isfinite(truth)):
        raise ValueError("ground truth missing for some queries")
    if isinstance(estimate, LocalizationResult):
        estimate = estimate.locations
    est = np.asarray(estimate, float)
    if est.ndim == 2:
        est = est[:, None, :]
    if len(est) != len(truth):
        raise ValueError("estimate and truth lengths differ")
    return np.linalg.norm(est - truth[:, None, :], axis=-1).min(axis=1)


def accuracy_curve(estimate, truth, thresholds, method: str = "") -> AccuracyCurve:
    """Fraction of queries localized within each distance threshold."""
    err = localization_errors(estimate, truth)
    th = np.sort(np.asarray(thresholds, float))
    acc = (err[None, :] <= th[:, None]).mean(axis=1)
    return AccuracyCurve(th, acc, method)


def default_thresholds(stride: float, upto: float = 20.0, count: int = 40) -> np.ndarray:
    """``count`` thresholds from a quarter stride up to ``upto`` strides."""
    return np.linspace(0.25 * stride, upto * stride, count)


# -- report files -------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _svg_plot(series: list[tuple[str, np.ndarray, np.ndarray]], xlabel: str, ylabel: str,
              title: str, ymax: float | None = None) -> str:
    w, h, ml, mr, mt, mb = 640, 420, 60, 170, 30, 50
    xs = np.concatenate([s[1] for s in series]) if series else np.zeros(1)
    ys = np.concatenate([s[2] for s in series]) if series else np.zeros(1)
    x0, x1 = 0.0, float(xs.max()) if xs.size and xs.max() > 0 else 1.0
    y0, y1 = 0.0, ymax if ymax is not None else (float(ys.max()) if ys.max() > 0 else 1.0)

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (w - ml - mr)

    def py(y):
        return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="18" text-anchor="middle">{title}</text>',
           f'<line x1="{ml}" y1="{h - mb}" x2="{w - mr}" y2="{h - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h - mb}" stroke="black"/>']
    for k in range(6):
        xv, yv = x0 + k * (x1 - x0) / 5, y0 + k * (y1 - y0) / 5
        out.append(f'<text x="{_fmt(px(xv))}" y="{h - mb + 16}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{ml - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{(ml + w - mr) / 2}" y="{h - 12}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{(mt + h - mb) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {(mt + h - mb) / 2})">{ylabel}</text>')
    for k, (label, x, y) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = mt + 14 + 18 * k
        out.append(f'<line x1="{w - mr + 10}" y1="{ly - 4}" x2="{w - mr + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{w - mr + 36}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _cdf(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.sort(values)
    return v, np.arange(1, len(v) + 1) / len(v)


def emit_report(curves: Sequence[AccuracyCurve],
                distributions: dict[str, SummaryDistributions] | None,
                out_dir: str | Path) -> list[Path]:
    """Write ``accuracy.csv``/``accuracy.svg`` and, if given, one distribution CSV per map
    plus ``distributions.svg``. Returns the written paths."""
    if not curves:
        raise ValueError("emit_report needs at least one accuracy curve")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "accuracy.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold_m", "accuracy", "method"])
        for c in curves:
            if np.any(np.diff(c.accuracy) < 0):
                raise InvariantViolation(f"accuracy curve {c.method!r} is not monotone")
            for t, a in zip(c.thresholds, c.accuracy):
                w.writerow([repr(float(t)), repr(float(a)), c.method])
    written.append(path)
    path = out / "accuracy.svg"
    path.write_text(_svg_plot([(c.method, c.thresholds, c.accuracy) for c in curves],
                              "distance threshold (m)", "fraction localized",
                              "Localization accuracy", ymax=1.0))
    written.append(path)

    if distributions:
        series = []
        for name, dist in distributions.items():
            path = out / f"distribution_{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["record_id", "geo_dist", "feat_dist"])
                for i, (g, f) in enumerate(zip(dist.geo_dist, dist.feat_dist)):
                    w.writerow([i, repr(float(g)), repr(float(f))])
            written.append(path)
            # geometric distance on a shared axis is scaled by the largest one shown
            series.append((f"{name} feature", *_cdf(dist.feat_dist)))
        geo_max = max(float(d.geo_dist.max()) for d in distributions.values()) or 1.0
        for name, dist in distributions.items():
            x, y = _cdf(dist.geo_dist / geo_max)
            series.append((f"{name} geometric", x, y))
        path = out / "distributions.svg"
        path.write_text(_svg_plot(series, f"normalized distance (geometric / {geo_max:.3g} m)",
                                  "fraction of records", "Distance to nearest landmark",
                                  ymax=1.0))
        written.append(path)
    return written
