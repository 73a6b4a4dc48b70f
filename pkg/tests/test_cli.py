import csv
import json

import numpy as np
import pytest

from epivo import cli, diffusion, io
from epivo.diffusion import KeypointState, make_conditioning


def _yaml(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _yaml(root, "simulate: {n_frames: 8, n_points: 60, descriptor_dim: 16}\n")
    assert cli.main(["simulate", "--config", cfg, "--output", str(root / "fx"), "--seed", "4"]) == 0
    return root / "fx"


def test_simulate_writes_requested_frames(tmp_path):
    cfg = _yaml(tmp_path, "simulate: {n_frames: 100, n_points: 40, descriptor_dim: 8}\n")
    for name in ("a", "b"):
        assert cli.main(["simulate", "--config", cfg, "--output", str(tmp_path / name)]) == 0
    lines = (tmp_path / "a" / "poses.txt").read_text().splitlines()
    assert len(lines) == 100 and all(len(l.split()) == 12 for l in lines)
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == mb and ma["seeds"] == {"seed": 0} and len(ma["files"]) > 100
    # clean matches re-checked against the poses on load
    io.load_fixture(tmp_path / "a", verify=True)


def test_run_writes_outputs_and_both_sampson_columns(tmp_path, fixture_dir):
    for mode in ("on", "off"):
        out = tmp_path / mode
        assert cli.main(["run", "--dataset", str(fixture_dir), "--output", str(out),
                         "--toggle-refinement", mode]) == 0
        for f in ("trajectory.txt", "per_frame.csv", "refinement.csv", "report.txt",
                  "report.json", "trajectory_xz.svg", "trajectory_3d.svg", "manifest.json"):
            assert (out / f).is_file(), f
        assert len(io.load_poses(out / "trajectory.txt")) == 8
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["files"]) >= {"per_frame.csv", "report.txt"}
    rows = {m: list(csv.DictReader(open(tmp_path / m / "refinement.csv"))) for m in ("on", "off")}
    assert len(rows["on"]) == len(rows["off"]) == 7
    assert {"sampson_before", "sampson_after"} <= set(rows["on"][0])
    before = np.mean([float(r["sampson_before"]) for r in rows["on"]])
    after = np.mean([float(r["sampson_after"]) for r in rows["on"]])
    assert after < before
    off_after = [float(r["sampson_after"]) for r in rows["off"]]
    off_before = [float(r["sampson_before"]) for r in rows["off"]]
    assert off_after == off_before


def test_run_is_deterministic(tmp_path, fixture_dir):
    for name in ("a", "b"):
        assert cli.main(["run", "--dataset", str(fixture_dir), "--output", str(tmp_path / name),
                         "--solver", "ransac", "--scorer", "mp"]) == 0
    for f in ("per_frame.csv", "refinement.csv", "report.txt", "report.json", "trajectory.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_denoiser(tmp_path, fixture_dir):
    cfg = _yaml(tmp_path, "train: {epochs: 0}\n")
    assert cli.main(["train-denoiser", "--config", cfg, "--dataset", str(fixture_dir),
                     "--output", str(tmp_path / "zero")]) == 0
    assert (tmp_path / "zero" / "trace.csv").read_text() == "epoch,loss\n"
    assert (tmp_path / "zero" / "denoiser.weights").is_file()

    cfg = _yaml(tmp_path, "train: {epochs: 40, batch_size: 64}\n", "t.yaml")
    out = tmp_path / "trained"
    res, _ = cli.cmd_train_denoiser(cli._resolve(cli.build_parser().parse_args(
        ["train-denoiser", "--config", cfg, "--dataset", str(fixture_dir), "--output", str(out)])))
    trace = [float(r["loss"]) for r in csv.DictReader(open(out / "trace.csv"))]
    assert len(trace) == 40
    smooth = np.convolve(trace, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < smooth[0]

    back = diffusion.load_weights(out / "denoiser.weights")
    lp = io.labeled_pairs(io.load_fixture(fixture_dir))[0]
    cond = make_conditioning(lp.noisy, lp.cam, back.schedule, 0.01)
    s = KeypointState(np.random.default_rng(0).normal(size=(len(lp.noisy), 4)), 12)
    np.testing.assert_array_equal(back.predict(s, cond), res.denoiser.predict(s, cond))

    # a trained weight file drives the pipeline
    cfg = _yaml(tmp_path, f"pipeline: {{denoiser: '{out / 'denoiser.weights'}'}}\n", "r.yaml")
    assert cli.main(["run", "--config", cfg, "--dataset", str(fixture_dir),
                     "--output", str(tmp_path / "mlp")]) == 0


def test_exit_codes(tmp_path, fixture_dir, capsys):
    missing = tmp_path / "nowhere"
    assert cli.main(["run", "--dataset", str(missing), "--output", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()
    assert cli.main(["run", "--output", str(tmp_path / "o")]) == 2
    bad = _yaml(tmp_path, "pipeline: {colour: red}\n", "bad.yaml")
    assert cli.main(["run", "--config", bad, "--dataset", str(fixture_dir),
                     "--output", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--solver", "guess"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly"])
    assert exc.value.code == 2
    junk = tmp_path / "junk.txt"
    junk.write_text("1 2 3\n")
    assert cli.main(["evaluate", str(junk), "--truth", str(fixture_dir / "poses.txt"),
                     "--output", str(tmp_path / "e")]) == 1
    nomatch = _yaml(tmp_path, "pipeline: {tau: 1.0}\n", "nm.yaml")
    assert cli.main(["run", "--config", nomatch, "--dataset", str(fixture_dir),
                     "--output", str(tmp_path / "nm")]) == 3
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0 and "epivo" in capsys.readouterr().out


def test_evaluate_and_plot(tmp_path, fixture_dir, capsys):
    truth = fixture_dir / "poses.txt"
    assert cli.main(["evaluate", str(truth), "--dataset", str(fixture_dir),
                     "--output", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert rep["ate_m"] < 1e-12 and rep["ape_m"] < 1e-12
    tart = tmp_path / "est.txt"
    io.save_poses(tart, io.load_poses(truth), "tartanair")
    assert cli.main(["evaluate", str(tart), "--truth", str(truth),
                     "--output", str(tmp_path / "ev2")]) == 0
    assert cli.main(["plot", str(truth), str(tart), "--output", str(tmp_path / "pl")]) == 0
    svg = (tmp_path / "pl" / "trajectory_xz.svg").read_text()
    assert svg.count("<polyline") >= 2
