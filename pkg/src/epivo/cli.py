"""``epivo`` command line.

Verbs: ``simulate``, ``run``, ``train-denoiser``, ``evaluate``, ``plot``.
Exit codes: 0 success, 1 data error, 2 config error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, diffusion, io
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, EpivoError, TrainingDivergenceError
from .metrics import MetricsReport, absolute_metrics, cumulative_ate, relative_metrics
from .pipeline import run_sequence, evaluate as evaluate_run
from .sim import generate_scene

log = logging.getLogger("epivo")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_PIPELINE = 0, 1, 2, 3


class PipelineFailure(EpivoError):
    """A command could not produce its result (exit code 3)."""


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.output is not None:
        over["output"] = args.output
    if getattr(args, "dataset", None) is not None:
        over["dataset"] = args.dataset
    if getattr(args, "solver", None) is not None:
        over["pipeline.solver"] = args.solver
    if getattr(args, "scorer", None) is not None:
        over["pipeline.scorer"] = args.scorer
    tog = getattr(args, "toggle_refinement", None)
    if tog is not None:
        over["pipeline.refinement"] = (not cfg.pipeline.refinement) if tog == "flip" else tog == "on"
    if getattr(args, "epochs", None) is not None:
        over["train.epochs"] = args.epochs
    return cfg.with_overrides(**over) if over else cfg


def _dataset(cfg: RunConfig) -> Path:
    if cfg.dataset is None:
        raise ConfigError("no dataset given (set 'dataset' or pass --dataset)")
    p = Path(cfg.dataset)
    if not p.is_dir():
        raise ConfigError(f"dataset path {p} does not exist")
    return p


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    return out


def _seeds(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed}


def _denoiser(cfg: RunConfig):
    name = cfg.pipeline.denoiser
    if name == "none":
        return None
    if name == "oracle":
        return "oracle"
    p = Path(name)
    if not p.is_file():
        raise ConfigError(f"denoiser weight file {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    """Generate a scene and write it as a fixture under ``cfg.output``."""
    s = cfg.simulate
    out = _outdir(cfg)
    scene = generate_scene(s.n_points, s.n_frames, motion=s.motion, step=s.step,
                           rot_max=s.rot_max, seed=cfg.seed, descriptor_dim=s.descriptor_dim)
    files = io.write_fixture(out, scene, cfg.noise.build(), cfg.seed,
                             keypoint_budget=s.keypoint_budget)
    files.append(io.write_manifest(out, files, cfg.digest(), _seeds(cfg), "simulate"))
    return files


def cmd_run(cfg: RunConfig) -> tuple[MetricsReport, list[Path]]:
    """Run the pipeline over a fixture; write the trajectory, per-frame CSV,
    refinement CSV, summary report and plots."""
    root = _dataset(cfg)
    out = _outdir(cfg)
    den = _denoiser(cfg)
    fx = io.load_fixture(root)
    if isinstance(den, Path):
        try:
            den = diffusion.load_weights(den)
        except (ValueError, KeyError, OSError) as exc:
            raise DataError(f"cannot load denoiser weights {den}: {exc}") from None
    sigma = float(fx.info.get("sigma_px", cfg.noise.sigma_p))
    pcfg = replace(cfg.pipeline_config(sigma_px=sigma), denoiser=den)
    truths = fx.truth_relatives()
    if cfg.pipeline.input == "matches":
        from .pipeline import Frame

        frames = [Frame(fx.cam, index=k) for k in range(fx.n_frames)]
        pairs = []
        for k in range(fx.n_frames - 1):
            rec = fx.pair(k)
            pairs.append((rec.noisy, rec.depths))
    else:
        frames, pairs = fx.frames(), None
    result = run_sequence(frames, pcfg, truths, pairs)
    if len(result.failed) == len(truths):
        raise PipelineFailure("every frame pair failed; see the log for the stage errors")
    report = evaluate_run(result, fx.truth, truths, cfg.evaluate.alignment)

    out.mkdir(parents=True, exist_ok=True)
    files = [out / n for n in ("trajectory.txt", "per_frame.csv", "refinement.csv",
                               "report.txt", "report.json", "diagnostics.jsonl",
                               "trajectory_xz.svg", "trajectory_3d.svg")]
    io.save_poses(files[0], result.trajectory)
    files[1].write_text(report.csv_rows())
    files[2].write_text(report.refinement_rows())
    files[3].write_text(report.to_text())
    files[4].write_text(report.to_json())
    io.write_diagnostics(files[5], result.diagnostics)
    trajs = {"ground truth": fx.truth, "estimate": result.trajectory}
    files[6].write_text(io.plot_xz(trajs))
    files[7].write_text(io.plot_3d(trajs))
    files.append(io.write_manifest(out, files, cfg.digest(), _seeds(cfg), "run"))
    return report, files


def cmd_train_denoiser(cfg: RunConfig) -> tuple[diffusion.TrainResult | None, list[Path]]:
    """Train the keypoint denoiser on a fixture's labeled pairs; write the
    weight file and the per-epoch loss trace."""
    root = _dataset(cfg)
    out = _outdir(cfg)
    fx = io.load_fixture(root)
    pairs = io.labeled_pairs(fx)
    t = cfg.train
    tcfg = diffusion.TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                                 weights=cfg.loss_weights.build(), start_t=t.start_t,
                                 seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    wpath, tpath = out / "denoiser.weights", out / "trace.csv"
    try:
        res = diffusion.train_denoiser(pairs, cfg.schedule.build(), tcfg)
    except TrainingDivergenceError as exc:
        io.write_trace(tpath, exc.trace)
        io.write_manifest(out, [tpath], cfg.digest(), _seeds(cfg), "train-denoiser")
        raise
    res.denoiser.save(wpath)
    io.write_trace(tpath, res.trace)
    files = [wpath, tpath]
    files.append(io.write_manifest(out, files, cfg.digest(), _seeds(cfg), "train-denoiser"))
    return res, files


def cmd_evaluate(cfg: RunConfig, estimate, truth=None) -> tuple[MetricsReport, list[Path]]:
    """Compare an estimated pose file with ground truth (default: the
    dataset's ``poses.txt``)."""
    fmt = cfg.evaluate.format
    if truth is None:
        truth = _dataset(cfg) / "poses.txt"
    out = _outdir(cfg)
    est = io.load_poses(estimate, fmt)
    tru = io.load_poses(truth, fmt)
    if len(est) != len(tru):
        raise DataError(f"{estimate} has {len(est)} poses, {truth} has {len(tru)}")
    alignment = cfg.evaluate.alignment or "rigid"
    ab = absolute_metrics(est, tru, alignment)
    cum = cumulative_ate(est, tru, alignment)
    rows = []
    for k, (a, b) in enumerate(zip(est.relatives(), tru.relatives())):
        r = relative_metrics(a.inverse(), b.inverse())
        rows.append({"frame": k + 1, "rre_deg": r.rre, "rte_m": r.rte,
                     "rte_angle_deg": r.rte_angle, "sampson": 0.0, "cum_ate_m": float(cum[k + 1])})
    mean = (lambda key: float(np.mean([r[key] for r in rows])) if rows else 0.0)
    report = MetricsReport(mean("rre_deg"), mean("rte_m"), mean("rte_angle_deg"), 0.0,
                           ab.ate, ab.ape, ab.ape_r, alignment, rows)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "evaluation.txt", out / "evaluation.json", out / "evaluation.csv"]
    files[0].write_text(report.to_text())
    files[1].write_text(report.to_json())
    files[2].write_text(report.csv_rows())
    files.append(io.write_manifest(out, files, cfg.digest(), _seeds(cfg), "evaluate"))
    return report, files


def cmd_plot(cfg: RunConfig, paths) -> list[Path]:
    """X-Z and 3-D SVG plots of one or more pose files."""
    out = _outdir(cfg)
    trajs = {Path(p).stem: io.load_poses(p, cfg.evaluate.format) for p in paths}
    if len(trajs) != len(paths):
        raise ConfigError("pose files must have distinct names")
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "trajectory_xz.svg", out / "trajectory_3d.svg"]
    files[0].write_text(io.plot_xz(trajs))
    files[1].write_text(io.plot_3d(trajs))
    files.append(io.write_manifest(out, files, cfg.digest(), _seeds(cfg), "plot"))
    return files


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--output", help="output directory")
    common.add_argument("--dataset", help="fixture directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    pipe = argparse.ArgumentParser(add_help=False)
    pipe.add_argument("--toggle-refinement", nargs="?", const="flip", choices=("on", "off", "flip"),
                      help="switch diffusion refinement on or off (no value: invert the config)")
    pipe.add_argument("--solver", choices=("ransac", "weighted-svd", "multi", "eight_point"))
    pipe.add_argument("--scorer", choices=("residual", "mp"))

    p = _Parser(prog="epivo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"epivo {__version__}")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="write a simulated fixture")
    sub.add_parser("run", parents=[common, pipe], help="run the pipeline on a fixture")
    t = sub.add_parser("train-denoiser", parents=[common], help="train the keypoint denoiser")
    t.add_argument("--epochs", type=int)
    e = sub.add_parser("evaluate", parents=[common], help="score a pose file against truth")
    e.add_argument("estimate")
    e.add_argument("--truth", help="ground-truth pose file (default: <dataset>/poses.txt)")
    pl = sub.add_parser("plot", parents=[common], help="plot pose files as SVG")
    pl.add_argument("poses", nargs="+")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.verb == "simulate":
            files = cmd_simulate(cfg)
            print(f"wrote {len(files)} files to {cfg.output}")
        elif args.verb == "run":
            report, _ = cmd_run(cfg)
            sys.stdout.write(report.to_text())
        elif args.verb == "train-denoiser":
            res, _ = cmd_train_denoiser(cfg)
            if len(res.trace):
                print(f"trained {len(res.trace)} epochs; loss {res.trace[0]:.6g} -> {res.trace[-1]:.6g}")
            else:
                print("wrote initial weights (0 epochs)")
        elif args.verb == "evaluate":
            report, _ = cmd_evaluate(cfg, args.estimate, args.truth)
            sys.stdout.write(report.to_text())
        else:
            cmd_plot(cfg, args.poses)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except EpivoError as exc:
        log.error("pipeline failure: %s", exc)
        return EXIT_PIPELINE
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.error("pipeline failure: %s", exc)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
