"""Reference/query data: file formats and a seeded synthetic trajectory generator."""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"FNFV"
_HEADER = struct.Struct("<4sII")

SHAPES = ("loop", "figure-eight", "polyline")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class ImageRecord:
    id: int
    position: np.ndarray
    feature: np.ndarray


@dataclass(frozen=True)
class QuerySequence:
    features: np.ndarray
    positions: np.ndarray | None = None
    seq_id: int = 0

    def __post_init__(self):
        if self.positions is not None and len(self.positions) != len(self.features):
            raise DataError("ground truth must be given for every query or for none")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def has_truth(self) -> bool:
        return self.positions is not None


@dataclass(frozen=True)
class ObstacleSet:
    """Wall segments as an (m, 2, 2) array of endpoint pairs."""

    segments: np.ndarray

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=float).reshape(-1, 2, 2)
        if not np.all(np.isfinite(seg)):
            raise DataError("obstacle segments must be finite")
        if np.any(np.all(seg[:, 0] == seg[:, 1], axis=1)):
            raise DataError("obstacle segment with identical endpoints")
        object.__setattr__(self, "segments", seg)

    def __len__(self) -> int:
        return len(self.segments)


@dataclass(frozen=True)
class SynthConfig:
    shape: str = "loop"
    n_points: int = 200
    feature_dim: int = 8
    smoothness: float = 10.0
    aliasing_pairs: int = 0
    noise: float = 0.0
    seed: int = 0
    spacing: float = 1.0
    query_count: int = 0
    query_stride: int = 4

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not self.smoothness > 0:
            raise ValueError("smoothness must be > 0")
        if self.aliasing_pairs < 0 or 2 * self.aliasing_pairs > self.n_points:
            raise ValueError("aliasing_pairs out of range")
        if not self.noise >= 0:
            raise ValueError("noise must be >= 0")
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")
        if self.query_count < 0 or self.query_stride < 1:
            raise ValueError("query_count must be >= 0 and query_stride >= 1")


# -- stacking helpers -------------------------------------------------------

def positions_of(records: Sequence[ImageRecord]) -> np.ndarray:
    return np.array([r.position for r in records], dtype=float).reshape(-1, 2)


def features_of(records: Sequence[ImageRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 0))
    return np.vstack([r.feature for r in records]).astype(float)


def make_records(positions: np.ndarray, features: np.ndarray) -> list[ImageRecord]:
    positions = np.asarray(positions, dtype=float)
    features = np.asarray(features, dtype=float)
    if len(positions) != len(features):
        raise DataError(f"count mismatch: {len(positions)} positions, {len(features)} features")
    return [ImageRecord(i, positions[i].copy(), features[i].copy()) for i in range(len(positions))]


# -- binary feature file ----------------------------------------------------

def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    if arr.ndim != 2:
        raise DataError("features must be a 2-D array")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, count, dim = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    body = data[_HEADER.size:]
    if len(body) != 4 * count * dim:
        raise DataError(f"{path}: expected {count}x{dim} float32 values, got {len(body)} bytes")
    arr = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(float)
    bad = np.flatnonzero(~np.all(np.isfinite(arr), axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite feature value at row {bad[0]}")
    return arr


# -- pose CSV ---------------------------------------------------------------

def write_poses(path: str | Path, positions: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(np.asarray(positions, dtype=float)):
            w.writerow([i, repr(float(x)), repr(float(y))])


def read_poses(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x", "y"]:
            raise DataError(f"{path}: expected header 'id,x,y', got {header}")
        for row_idx, row in enumerate(reader):
            if not row:
                continue
            try:
                rid, x, y = int(row[0]), float(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: unparsable row {row_idx}: {row}") from exc
            if rid != row_idx:
                raise DataError(f"{path}: row {row_idx} has id {rid}; ids must be dense from 0")
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path}: non-finite position at row {row_idx}")
            rows.append((x, y))
    return np.array(rows, dtype=float).reshape(-1, 2)


def load_records(pose_path: str | Path, feature_path: str | Path) -> list[ImageRecord]:
    positions = read_poses(pose_path)
    features = read_features(feature_path)
    if len(positions) != len(features):
        raise DataError(
            f"count mismatch: {len(positions)} pose rows vs {len(features)} feature records"
        )
    return make_records(positions, features)


def write_records(pose_path: str | Path, feature_path: str | Path,
                  records: Sequence[ImageRecord]) -> None:
    write_poses(pose_path, positions_of(records))
    write_features(feature_path, features_of(records))


# -- query manifest ---------------------------------------------------------

def query_feature_path(manifest_path: str | Path, seq_id: int) -> Path:
    manifest_path = Path(manifest_path)
    return manifest_path.with_name(f"{manifest_path.stem}_{seq_id}.fnfv")


def write_queries(manifest_path: str | Path, sequences: Sequence[QuerySequence]) -> None:
    with open(manifest_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "order", "x", "y"])
        for seq in sequences:
            for order in range(len(seq)):
                if seq.positions is None:
                    w.writerow([seq.seq_id, order, "", ""])
                else:
                    x, y = seq.positions[order]
                    w.writerow([seq.seq_id, order, repr(float(x)), repr(float(y))])
    for seq in sequences:
        write_features(query_feature_path(manifest_path, seq.seq_id), seq.features)


def load_queries(manifest_path: str | Path) -> list[QuerySequence]:
    entries: dict[int, list[tuple[int, float | None, float | None]]] = {}
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["seq_id", "order", "x", "y"]:
            raise DataError(f"{manifest_path}: expected header 'seq_id,order,x,y'")
        for row_idx, row in enumerate(reader):
            if not row:
                continue
            try:
                sid, order = int(row[0]), int(row[1])
                x = float(row[2]) if row[2].strip() else None
                y = float(row[3]) if row[3].strip() else None
            except (ValueError, IndexError) as exc:
                raise DataError(f"{manifest_path}: unparsable row {row_idx}: {row}") from exc
            entries.setdefault(sid, []).append((order, x, y))
    sequences = []
    for sid in sorted(entries):
        rows = sorted(entries[sid])
        if [r[0] for r in rows] != list(range(len(rows))):
            raise DataError(f"{manifest_path}: sequence {sid} orders are not 0..{len(rows) - 1}")
        has = [r[1] is not None and r[2] is not None for r in rows]
        if any(has) and not all(has):
            raise DataError(f"{manifest_path}: sequence {sid} has partial ground truth")
        positions = np.array([[r[1], r[2]] for r in rows], dtype=float) if all(has) else None
        feats = read_features(query_feature_path(manifest_path, sid))
        if len(feats) != len(rows):
            raise DataError(
                f"count mismatch: sequence {sid} has {len(rows)} manifest rows, "
                f"{len(feats)} feature records"
            )
        sequences.append(QuerySequence(feats, positions, sid))
    return sequences


# -- synthetic config file --------------------------------------------------

def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_synth_config(path: str | Path) -> SynthConfig:
    raw = parse_keyvalue(Path(path).read_text())
    defaults = SynthConfig()
    known = {f.name for f in fields(SynthConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown synth config keys: {unknown}")
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in raw.items()}
    return SynthConfig(**kwargs)


def write_synth_config(path: str | Path, cfg: SynthConfig) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(SynthConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


# -- synthetic generation ---------------------------------------------------

def _densify(pts: np.ndarray, step: float | None = None) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    step = step or arc[-1] / 8000
    s = np.linspace(0.0, arc[-1], max(2, int(arc[-1] / step) + 1))
    return np.column_stack([np.interp(s, arc, pts[:, 0]), np.interp(s, arc, pts[:, 1])])


def _round_corners(corners: np.ndarray, radius: float, closed: bool) -> np.ndarray:
    """Replace each corner by a quadratic Bezier fillet of tangent length ``radius``.

    The fillet never eats more than 45% of either adjacent side.
    """
    pts = np.asarray(corners, dtype=float)
    k = len(pts)
    out = [] if closed else [pts[:1]]
    for i in range(k) if closed else range(1, k - 1):
        prev, here, nxt = pts[i - 1], pts[i], pts[(i + 1) % k]
        a_len, b_len = np.linalg.norm(here - prev), np.linalg.norm(nxt - here)
        t = min(radius, 0.45 * a_len, 0.45 * b_len)
        a = here + (prev - here) * (t / a_len)
        b = here + (nxt - here) * (t / b_len)
        w = np.linspace(0.0, 1.0, 64)[:, None]
        out.append((1 - w) ** 2 * a + 2 * w * (1 - w) * here + w ** 2 * b)
    if not closed:
        out.append(pts[-1:])
    else:
        out.append(out[0][:1])
    return np.vstack(out)


def _shape_polyline(shape: str, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Dense unit-scale outline of the trajectory and whether it is closed."""
    if shape == "loop":
        # a survey circuit from a depot: out along an approach road, around a block
        # and back along the other lane of the same road
        w, h, stem, lane = 1.0, 0.7, 0.6, 0.03
        corners = np.array([[lane / 2, -stem], [lane / 2, 0.0], [w / 2, 0.0], [w / 2, h],
                            [-w / 2, h], [-w / 2, 0.0], [-lane / 2, 0.0], [-lane / 2, -stem]])
        return _densify(_round_corners(corners, 0.12, closed=True))[:-1], True
    if shape == "figure-eight":
        t = np.linspace(0.0, 2 * np.pi, 4001)
        return _densify(np.column_stack([np.sin(t), np.sin(t) * np.cos(t)]))[:-1], True
    # polyline: seeded random walk of headings with rounded corners, open
    n_corners = 6
    headings = np.cumsum(rng.uniform(-1.2, 1.2, n_corners))
    lengths = rng.uniform(0.6, 1.4, n_corners)
    steps = np.column_stack([np.cos(headings), np.sin(headings)]) * lengths[:, None]
    corners = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    return _densify(_round_corners(corners, 0.2, closed=False)), False


def _resample(outline: np.ndarray, closed: bool, n: int, spacing: float) -> np.ndarray:
    """``n`` records equally spaced in arc length, ``spacing`` meters apart."""
    pts = np.vstack([outline, outline[:1]]) if closed else outline
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total_steps = n if closed else n - 1
    s = np.arange(n) * (arc[-1] / total_steps)
    x = np.interp(s, arc, pts[:, 0])
    y = np.interp(s, arc, pts[:, 1])
    return np.column_stack([x, y]) * (spacing * total_steps / arc[-1])


def _fourier_field(rng: np.random.Generator, dim: int, length_scale: float,
                   n_terms: int = 64):
    freqs = rng.normal(0.0, 1.0 / length_scale, size=(n_terms, 2))
    phases = rng.uniform(0.0, 2 * np.pi, size=n_terms)
    weights = rng.normal(0.0, 1.0, size=(dim, n_terms)) * math.sqrt(2.0 / n_terms)

    def field_at(points: np.ndarray) -> np.ndarray:
        return np.cos(points @ freqs.T + phases) @ weights.T

    return field_at


def trajectory_diameter(positions: np.ndarray) -> float:
    diff = positions[:, None, :] - positions[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def _pick_aliasing_pairs(positions: np.ndarray, count: int,
                         rng: np.random.Generator) -> list[tuple[int, int]]:
    if count == 0:
        return []
    n = len(positions)
    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    far = dist.max() / 4
    used: set[int] = set()
    pairs = []
    for i in rng.permutation(n):
        if len(pairs) == count:
            break
        if i in used:
            continue
        cand = [j for j in np.flatnonzero(dist[i] > far) if j not in used and j != i]
        if not cand:
            continue
        j = int(cand[rng.integers(len(cand))])
        pairs.append((int(i), j))
        used.update((int(i), j))
    if len(pairs) < count:
        raise ValueError(f"could only place {len(pairs)} of {count} aliasing pairs")
    return pairs


def generate_synthetic(cfg: SynthConfig) -> tuple[list[ImageRecord], list[QuerySequence]]:
    """Reference records along a trajectory plus one noisy query sequence.

    Features come from a random Fourier field over map position (so they vary smoothly
    with arc length); each aliasing pair copies the feature of one record onto another
    that is more than a quarter of the trajectory diameter away. Queries revisit
    reference positions every ``query_stride`` records and observe the reference
    feature plus isotropic Gaussian noise. All values are float32-exact so the binary
    feature format round-trips bit-for-bit.
    """
    rng = np.random.default_rng(cfg.seed)
    outline, closed = _shape_polyline(cfg.shape, rng)
    positions = _resample(outline, closed, cfg.n_points, cfg.spacing)
    field_at = _fourier_field(rng, cfg.feature_dim, cfg.smoothness)
    feats = field_at(positions).astype(np.float32).astype(float)

    for i, j in _pick_aliasing_pairs(positions, cfg.aliasing_pairs, rng):
        feats[j] = feats[i]

    records = make_records(positions, feats)
    queries: list[QuerySequence] = []
    if cfg.query_count:
        start = int(rng.integers(cfg.n_points))
        idx = start + cfg.query_stride * np.arange(cfg.query_count)
        if closed:
            idx %= cfg.n_points
        elif idx[-1] >= cfg.n_points:
            start = max(0, cfg.n_points - 1 - cfg.query_stride * (cfg.query_count - 1))
            idx = np.minimum(start + cfg.query_stride * np.arange(cfg.query_count),
                             cfg.n_points - 1)
        noise = rng.normal(0.0, cfg.noise, size=(cfg.query_count, cfg.feature_dim))
        qfeat = (feats[idx] + noise).astype(np.float32).astype(float)
        queries.append(QuerySequence(qfeat, positions[idx].copy(), 0))
    logger.debug("synthesized %d records, %d query sequences", len(records), len(queries))
    return records, queries
