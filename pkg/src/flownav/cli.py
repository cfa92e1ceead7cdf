"""Command line: synth, build-map, localize, plan, eval.

Every command reads one key-value config file (``--config``); command-line flags
override it. Exit codes: 0 success, 2 usage or configuration error, 3 infeasible
or solver failure, 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import conic
from .evaluation import (InvariantViolation, accuracy_curve, compare_summaries,
                         default_thresholds, emit_report, raw_topk, uniform_summary)
from .graph import GraphError
from .ingest import (DataError, SynthConfig, generate_synthetic, load_queries, load_records,
                     parse_keyvalue, positions_of, features_of, write_queries, write_records)
from .localizer import LocalizationError, localize, write_flows_json, write_results
from .map_builder import (T_G_MODES, MapBuildError, MapParams, build_map, read_landmarks,
                          write_landmarks, write_trace)
from .planner import plan_path, write_path

logger = logging.getLogger("flownav")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 2, 3, 4

POSES, FEATURES, QUERIES = "poses.csv", "features.fnfv", "queries.csv"
LANDMARKS, TRACE = "landmarks.csv", "trace.csv"
RESULTS, FLOWS, PATH = "localization.csv", "flows.json", "path.csv"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # synthetic data
    shape: str = "loop"
    n_points: int = 200
    feature_dim: int = 8
    smoothness: float = 10.0
    aliasing_pairs: int = 2
    noise: float = 0.5
    spacing: float = 1.0
    query_count: int = 50
    query_stride: int = 4
    # map building
    alpha: float = 10.0
    anchor_radius: float = 24.0
    lambda_x: float = 1.0
    lambda_f: float = 1.0
    lambda_g: float = 0.1
    t_g_mode: str = "relative"
    t_g: float = 0.5
    tau: float | None = None
    n_landmarks: int = 25
    sensitivity: bool = True
    anchors: bool = True
    # localization
    r_loc: float | None = None
    delta: float | None = None
    # planning, by reference-record id; default first and last landmark
    plan_source: int | None = None
    plan_target: int | None = None
    # shared
    tol: float = conic.DEFAULT_TOL
    seed: int = 0
    data: str = ""
    out: str = "."

    def __post_init__(self):
        try:
            self.synth_config()
            self.map_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.r_loc is not None and not self.r_loc > 0:
            raise ConfigError("r_loc must be > 0")
        if self.delta is not None and not self.delta > 0:
            raise ConfigError("delta must be > 0")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0")

    def synth_config(self) -> SynthConfig:
        return SynthConfig(shape=self.shape, n_points=self.n_points, feature_dim=self.feature_dim,
                           smoothness=self.smoothness, aliasing_pairs=self.aliasing_pairs,
                           noise=self.noise, seed=self.seed, spacing=self.spacing,
                           query_count=self.query_count, query_stride=self.query_stride)

    def map_params(self) -> MapParams:
        return MapParams(alpha=self.alpha, anchor_radius=self.anchor_radius,
                         lambda_x=self.lambda_x, lambda_f=self.lambda_f,
                         lambda_g=self.lambda_g, t_g_mode=self.t_g_mode, t_g=self.t_g,
                         tau=self.tau, n_landmarks=self.n_landmarks, tol=self.tol,
                         sensitivity=self.sensitivity, anchors=self.anchors)

    @property
    def data_dir(self) -> Path:
        return Path(self.data or self.out)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


_OPTIONAL = {"tau", "r_loc", "delta", "plan_source", "plan_target"}


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if name in _OPTIONAL:
            if raw.lower() in ("", "none", "auto"):
                return None
            return int(raw) if name.startswith("plan_") else float(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then ``overrides`` (already typed)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = parse_keyvalue(p.read_text())
        except ValueError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        defaults = RunConfig.__dataclass_fields__
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values = {k: _parse_value(k, v, defaults[k].default) for k, v in raw.items()}
    values.update(overrides or {})
    return RunConfig(**values)


def write_config(path: str | Path, cfg: RunConfig) -> None:
    lines = [f"{f.name} = {'auto' if getattr(cfg, f.name) is None else getattr(cfg, f.name)}"
             for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


# -- commands ----------------------------------------------------------------

def _load_dataset(cfg: RunConfig):
    d = cfg.data_dir
    for name in (POSES, FEATURES):
        if not (d / name).is_file():
            raise DataError(f"missing dataset file {d / name}; run 'synth' first or set data")
    return load_records(d / POSES, d / FEATURES)


def _load_queries(cfg: RunConfig):
    path = cfg.data_dir / QUERIES
    if not path.is_file():
        raise DataError(f"missing query manifest {path}")
    return load_queries(path)


def _load_map(cfg: RunConfig, records):
    path = cfg.out_dir / LANDMARKS
    if not path.is_file():
        raise DataError(f"missing landmark file {path}; run 'build-map' first")
    return read_landmarks(path, positions_of(records), features_of(records), cfg.alpha)


def cmd_synth(cfg: RunConfig) -> int:
    records, queries = generate_synthetic(cfg.synth_config())
    d = cfg.out_dir
    d.mkdir(parents=True, exist_ok=True)
    write_records(d / POSES, d / FEATURES, records)
    write_queries(d / QUERIES, queries)
    print(f"wrote {len(records)} records and {len(queries)} query sequence(s) to {d}")
    return EXIT_OK


def cmd_build_map(cfg: RunConfig) -> int:
    records = _load_dataset(cfg)
    lm = build_map(records, cfg.map_params())
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_landmarks(cfg.out_dir / LANDMARKS, lm)
    write_trace(cfg.out_dir / TRACE, lm.trace)
    print(f"{len(lm)} landmarks at Y_G={lm.y_total:.6g} -> {cfg.out_dir / LANDMARKS}")
    return EXIT_OK


def _localize_all(cfg: RunConfig, lm, queries):
    return [localize(lm, q, r_loc=cfg.r_loc, delta=cfg.delta, tol=cfg.tol) for q in queries]


def cmd_localize(cfg: RunConfig) -> int:
    records = _load_dataset(cfg)
    lm = _load_map(cfg, records)
    results = _localize_all(cfg, lm, _load_queries(cfg))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_results(cfg.out_dir / RESULTS, results)
    write_flows_json(cfg.out_dir / FLOWS, results)
    print(f"localized {sum(len(r.locations) for r in results)} queries -> {cfg.out_dir / RESULTS}")
    return EXIT_OK


def cmd_plan(cfg: RunConfig) -> int:
    records = _load_dataset(cfg)
    lm = _load_map(cfg, records)
    src_id = int(lm.indices[0]) if cfg.plan_source is None else cfg.plan_source
    dst_id = int(lm.indices[-1]) if cfg.plan_target is None else cfg.plan_target
    try:
        a, b = lm.local(src_id), lm.local(dst_id)
    except KeyError as exc:
        raise ConfigError(f"plan endpoint {exc} is not a landmark") from exc
    planned = plan_path(lm, a, b)
    if not planned.found:
        comps = [[int(lm.indices[v]) for v in c] for c in planned.components]
        print(f"no path from {src_id} to {dst_id}; landmark components: {comps}", file=sys.stderr)
        return EXIT_INFEASIBLE
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_path(cfg.out_dir / PATH, lm, planned)
    print(f"path of {len(planned.landmarks)} landmarks, length {planned.length:.6g} m "
          f"-> {cfg.out_dir / PATH}")
    return EXIT_OK


def _read_results(path: Path, queries):
    """Locations per sequence from the localization CSV, in manifest order."""
    rows: dict[int, list[tuple[int, float, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["seq_id"]), []).append(
                (int(row["order"]), float(row["x"]), float(row["y"])))
    out = []
    for q in queries:
        got = sorted(rows.get(q.seq_id, []))
        if len(got) != len(q):
            raise DataError(f"{path}: sequence {q.seq_id} has {len(got)} results, expected {len(q)}")
        out.append(np.array([[x, y] for _, x, y in got]))
    return out


def cmd_eval(cfg: RunConfig) -> int:
    records = _load_dataset(cfg)
    lm = _load_map(cfg, records)
    queries = _load_queries(cfg)
    if any(not q.has_truth for q in queries):
        raise DataError("evaluation needs ground truth for every query")
    results_path = cfg.out_dir / RESULTS
    if not results_path.is_file():
        raise DataError(f"missing {results_path}; run 'localize' first")
    flow_loc = np.vstack(_read_results(results_path, queries))
    truth = np.vstack([q.positions for q in queries])
    qfeat = np.vstack([q.features for q in queries])

    uni = uniform_summary(records, len(lm), alpha=cfg.alpha)
    uni_loc = np.vstack([r.locations for r in _localize_all(cfg, uni, queries)])
    top1, _ = raw_topk(lm, qfeat, 1)
    top10, _ = raw_topk(lm, qfeat, min(10, len(lm)))

    steps = np.concatenate([np.linalg.norm(np.diff(q.positions, axis=0), axis=1)
                            for q in queries if len(q) > 1] or [np.ones(1)])
    th = default_thresholds(float(np.median(steps)))
    curves = [accuracy_curve(lm.positions[top1[:, 0]], truth, th, "raw top-1"),
              accuracy_curve(lm.positions[top10], truth, th, "raw top-10"),
              accuracy_curve(uni_loc, truth, th, "uniform map + flow"),
              accuracy_curve(flow_loc, truth, th, "flow map + flow")]
    dists = compare_summaries(records, {"flow": lm, "uniform": uni})
    written = emit_report(curves, dists, cfg.out_dir)

    path = cfg.out_dir / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["map", "kind", "percentile", "value"])
        for name, d in dists.items():
            for kind, table in d.percentiles.items():
                for q, v in table.items():
                    w.writerow([name, kind, q, repr(v)])
    written.append(path)
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "build-map": cmd_build_map, "localize": cmd_localize,
            "plan": cmd_plan, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flownav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (also the dataset directory unless 'data' is set)")
        p.add_argument("--data", help="dataset directory written by 'synth'")
        if name in ("build-map",):
            p.add_argument("--no-anchors", action="store_true", help="drop the anchor floors")
            p.add_argument("--no-sensitivity", action="store_true",
                           help="drop the congestion term (plain min-cost flow)")
            p.add_argument("--t-g-mode", choices=T_G_MODES)
        if name == "plan":
            p.add_argument("--from", dest="plan_source", type=int, help="source landmark record id")
            p.add_argument("--to", dest="plan_target", type=int, help="target landmark record id")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in ("seed", "out", "data", "plan_source", "plan_target"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "t_g_mode", None):
        out["t_g_mode"] = args.t_g_mode
    if getattr(args, "no_anchors", False):
        out["anchors"] = False
    if getattr(args, "no_sensitivity", False):
        out["sensitivity"] = False
    return out


def _setup_logging() -> None:
    level = os.environ.get("FLOWNAV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"flownav: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"flownav: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MapBuildError, LocalizationError, GraphError) as exc:
        print(f"flownav: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InvariantViolation, AssertionError) as exc:
        print(f"flownav: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
