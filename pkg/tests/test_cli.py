import csv

import pytest

from flownav import cli
from flownav.cli import ConfigError, RunConfig, load_config, main

SMALL = """\
n_points = 60
query_count = 12
query_stride = 3
aliasing_pairs = 1
n_landmarks = 8
alpha = 8
anchor_radius = 16
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "cfg.txt").write_text(SMALL)
    for cmd in ("synth", "build-map", "localize", "plan", "eval"):
        assert main([cmd, "--config", str(d / "cfg.txt"), "--out", str(d / "out")]) == 0, cmd
    return d


def test_pipeline_outputs(run_dir):
    out = run_dir / "out"
    for name in ("poses.csv", "features.fnfv", "queries.csv", "landmarks.csv", "trace.csv",
                 "localization.csv", "flows.json", "path.csv", "accuracy.csv", "accuracy.svg",
                 "summary.csv", "distributions.svg"):
        assert (out / name).is_file(), name
    methods = {row["method"] for row in csv.DictReader(open(out / "accuracy.csv"))}
    assert methods == {"raw top-1", "raw top-10", "uniform map + flow", "flow map + flow"}


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.txt").write_text("n_pionts = 5\n")
    with pytest.raises(ConfigError, match="n_pionts"):
        load_config(tmp_path / "c.txt")
    assert main(["synth", "--config", str(tmp_path / "c.txt")]) == 2


def test_bad_values_rejected(tmp_path):
    for text in ("alpha = -1\n", "anchors = maybe\n", "n_points = ten\n", "t_g_mode = wild\n"):
        (tmp_path / "c.txt").write_text(text)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.txt")


def test_flags_override_config(tmp_path):
    (tmp_path / "c.txt").write_text("seed = 3\nout = a\ntau = auto\n")
    cfg = load_config(tmp_path / "c.txt", cli._overrides(cli.build_parser().parse_args(
        ["build-map", "--config", "x", "--seed", "7", "--no-anchors", "--no-sensitivity"])))
    assert (cfg.seed, cfg.out, cfg.tau, cfg.anchors, cfg.sensitivity) == (7, "a", None, False, False)


def test_write_config_roundtrip(tmp_path):
    cfg = RunConfig(seed=4, tau=0.2, anchors=False)
    cli.write_config(tmp_path / "c.txt", cfg)
    assert load_config(tmp_path / "c.txt") == cfg


def test_missing_dataset_exits_2(tmp_path):
    assert main(["build-map", "--out", str(tmp_path)]) == 2


def test_tau_too_high_exits_3(run_dir, tmp_path, capsys):
    code = main(["build-map", "--config", str(run_dir / "cfg.txt"), "--data",
                 str(run_dir / "out"), "--out", str(tmp_path)])
    assert code == 0
    (tmp_path / "hi.txt").write_text(SMALL + "tau = 5\n")
    capsys.readouterr()
    code = main(["build-map", "--config", str(tmp_path / "hi.txt"), "--data",
                 str(run_dir / "out"), "--out", str(tmp_path)])
    assert code == 3
    assert "tau" in capsys.readouterr().err.lower()


def test_plan_endpoints(run_dir, tmp_path, capsys):
    ids = [int(r["vertex_id"]) for r in csv.DictReader(open(run_dir / "out" / "landmarks.csv"))]
    base = ["plan", "--config", str(run_dir / "cfg.txt"), "--data", str(run_dir / "out")]
    # landmarks.csv is read from --out, so plan inside the run directory
    assert main(base + ["--out", str(run_dir / "out"), "--from", str(ids[0]),
                        "--to", str(ids[1])]) == 0
    assert main(base + ["--out", str(run_dir / "out"), "--from", "-5"]) == 2


def test_invariant_violation_exits_4(run_dir, monkeypatch):
    def broken(*a, **k):
        raise cli.InvariantViolation("accuracy curve is not monotone")
    monkeypatch.setattr(cli, "accuracy_curve", broken)
    assert main(["eval", "--config", str(run_dir / "cfg.txt"), "--out", str(run_dir / "out")]) == 4


def test_pipeline_is_deterministic(run_dir, tmp_path):
    for cmd in ("synth", "build-map", "localize", "eval"):
        assert main([cmd, "--config", str(run_dir / "cfg.txt"), "--out", str(tmp_path)]) == 0
    for p in sorted(tmp_path.iterdir()):
        assert p.read_bytes() == (run_dir / "out" / p.name).read_bytes(), p.name
