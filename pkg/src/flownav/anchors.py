"""Greedy farthest-point anchor selection (k-center 2-approximation)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class AnchorSet:
    indices: np.ndarray
    positions: np.ndarray
    anchor_radius: float
    neighborhoods: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def coverage_radius(self, points: np.ndarray) -> float:
        return float(_dist_to_set(np.asarray(points, float), self.positions).max())


def _dist_to_set(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)
    return d.min(axis=1)


def farthest_point_order(points: np.ndarray, k: int | None = None,
                         stop_radius: float | None = None) -> tuple[list[int], float]:
    """Gonzalez traversal from point 0; returns chosen indices and the final cover radius.

    Stops after ``k`` centers or once every point is within ``stop_radius``.
    Ties go to the lowest index (``np.argmax`` semantics).
    """
    points = np.asarray(points, dtype=float)
    chosen = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    while True:
        far = int(np.argmax(dist))
        radius = float(dist[far])
        if k is not None and len(chosen) >= k:
            break
        if stop_radius is not None and radius <= stop_radius:
            break
        if radius == 0.0:
            break
        chosen.append(far)
        dist = np.minimum(dist, np.linalg.norm(points - points[far], axis=1))
    return chosen, radius


def neighborhoods(anchor_positions: np.ndarray, points: np.ndarray,
                  anchor_radius: float) -> tuple[np.ndarray, ...]:
    points = np.asarray(points, dtype=float)
    out = []
    for a in np.asarray(anchor_positions, dtype=float).reshape(-1, 2):
        nb = np.flatnonzero(np.linalg.norm(points - a, axis=1) <= anchor_radius)
        assert nb.size > 0, "anchor neighborhood is empty; anchors must be input points"
        out.append(nb)
    return tuple(out)


def select_anchors(points: np.ndarray, anchor_radius: float) -> AnchorSet:
    """Anchors such that every point lies within ``anchor_radius / 2`` of one of them.

    The halved radius offsets the factor-2 slack of the greedy k-center bound.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        raise ValueError("need at least one point")
    if not anchor_radius > 0:
        raise ValueError("anchor_radius must be > 0")
    idx, _ = farthest_point_order(points, stop_radius=anchor_radius / 2)
    idx = np.array(idx, dtype=np.int64)
    pos = points[idx]
    return AnchorSet(idx, pos, float(anchor_radius), neighborhoods(pos, points, anchor_radius))


def dump_anchors(path: str | Path, anchors: AnchorSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["anchor_idx", "x", "y", "neighborhood_size"])
        for k, (i, p) in enumerate(zip(anchors.indices, anchors.positions)):
            w.writerow([int(i), repr(float(p[0])), repr(float(p[1])), len(anchors.neighborhoods[k])])
