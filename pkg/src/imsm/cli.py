"""Command-line interface: ``imsm <command> --config run.yaml``.

Exit codes: 0 success, 2 configuration, 3 data, 4 compatibility, 5 numeric or
training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import PRESETS, RunConfig, load_config
from .dynamics import PointCloud, generate_dataset
from .errors import CompatibilityError, ConfigError, ImsmError
from .evaluation import evaluate_samples, histograms, self_distance, simulate_samples
from .rng import stream
from .score import ScoreModel, annealed_langevin_sample, build_schedule, train_score
from .velocity import LOG_COLUMNS, VelocityModel, train_pinn, train_velocity

log = logging.getLogger("imsm")

STAGES = ("simulate", "train-score", "train-velocity", "evaluate")


class Run:
    """A loaded config plus the output directory and artifact helpers."""

    def __init__(self, config: RunConfig, out: Path | None = None):
        self.config = config
        self.out = Path(config.paths.out) if out is None else Path(out)
        # output locations do not change results, so they stay out of the digest
        self.digest = io.digest({k: v for k, v in config.to_dict().items() if k != "paths"})

    def path(self, name: str, suffix: str = "") -> Path:
        p = self.config.path(name, self.out)
        return p.with_name(p.stem + suffix + p.suffix) if suffix else p

    def dataset_path(self) -> Path:
        p = self.path("dataset")
        want = ".csv" if self.config.sim.format == "csv" else ".bin"
        return p if p.suffix == want else p.with_suffix(want)

    def meta(self, **extra) -> dict:
        return io.artifact_metadata(self.digest, seed=self.config.seed, **extra)


# --------------------------------------------------------------------------
# stages


def cmd_simulate(run: Run) -> Path:
    cfg = run.config
    system = cfg.system_spec()
    cloud = generate_dataset(system, cfg.sim_config())
    path = io.write_dataset(run.dataset_path(), cloud, cfg.sim.format, run.meta())
    log.info("simulate: wrote %d points in d=%d to %s", cloud.N, cloud.d, path)
    return path


def _load_points(run: Run) -> PointCloud:
    return io.read_dataset(run.dataset_path())


def cmd_schedule(run: Run) -> dict:
    cloud = _load_points(run)
    sc = run.config.score
    pts = cloud.points
    if sc.standardize:
        std = pts.std(axis=0)
        pts = (pts - pts.mean(axis=0)) / np.where(std > 0, std, 1.0)
    schedule = build_schedule(pts, sc.sigma_min, sc.gamma, sc.gamma_fallback)
    summary = {"sigma_1": schedule.sigma_1, "gamma": schedule.gamma, "gamma_source": schedule.gamma_source,
               "L": schedule.L, "sigma_L": schedule.sigma_L}
    print(json.dumps(summary))
    return summary


def cmd_train_score(run: Run) -> Path:
    cloud = _load_points(run)
    rows = []
    result = train_score(cloud.points, run.config.score_config(),
                         on_epoch=lambda e, loss: rows.append({"epoch": e, "loss": loss}))
    sch = result.model.schedule
    log.info("train-score: sigma_1=%.6g gamma=%.6g (%s) L=%d final loss %.6g",
             sch.sigma_1, sch.gamma, sch.gamma_source, sch.L, result.losses[-1])
    io.write_table(run.path("score_log"), ("epoch", "loss"), rows)
    path = io.save_checkpoint(run.path("score"), "score", result.model.to_dict(),
                              run.meta(schedule=sch.to_dict(), D=run.config.system.D,
                                       dataset_sha256=io.file_digest(run.dataset_path())))
    return path


def load_score(path) -> ScoreModel:
    model, _ = io.load_checkpoint(path, "score")
    return ScoreModel.from_dict(model)


def load_velocity(path) -> VelocityModel:
    model, _ = io.load_checkpoint(path, "velocity")
    return VelocityModel.from_dict(model)


def cmd_sample_score(run: Run) -> Path:
    score = load_score(run.path("score"))
    sc = run.config.score
    samples = annealed_langevin_sample(score, sc.sample_count, sc.sample_steps_per_level,
                                       rng=stream(run.config.seed, 30, 0))
    path = run.path("dataset", "_langevin").with_suffix(".csv")
    io.write_dataset(path, PointCloud(samples, {}), "csv", run.meta(source="annealed-langevin"))
    log.info("sample-score: wrote %d samples to %s", samples.shape[0], path)
    return path


def cmd_train_velocity(run: Run, baseline_pinn: bool = False) -> Path:
    cfg = run.config
    cloud = _load_points(run)
    score = load_score(run.path("score"))
    if score.d != cloud.d:
        raise CompatibilityError(f"score checkpoint has d={score.d}, dataset has d={cloud.d}")
    system = cfg.system_spec()
    if system.dim != cloud.d:
        raise CompatibilityError(f"system {system.kind} has d={system.dim}, dataset has d={cloud.d}")
    trainer = train_pinn if baseline_pinn else train_velocity
    result = trainer(cloud.points, score, system.D, cfg.velocity_config(), cfg.velocity.known_mask, system,
                     on_outer=lambda r: log.info("train-velocity: shuffle %d outer %d residual_rms %.6g mu %g",
                                                 r["shuffle"], r["outer_k"], r["residual_rms"], r["mu"]))
    suffix = "_pinn" if baseline_pinn else ""
    io.write_table(run.path("velocity_log", suffix), LOG_COLUMNS, result.rows)
    model = result.model.to_dict()
    model["lambda_stats"] = result.lambda_stats()
    model["termination"] = result.termination
    path = io.save_checkpoint(run.path("velocity", suffix), "velocity", model,
                              run.meta(D=system.D, method="pinn" if baseline_pinn else "augmented-lagrangian",
                                       termination=result.termination))
    log.info("train-velocity: termination %s, final residual_rms %.6g", result.termination, result.final_rms)
    return path


def cmd_evaluate(run: Run) -> Path:
    cfg = run.config
    truth = cfg.system_spec()
    vel = load_velocity(run.path("velocity"))
    score = load_score(run.path("score"))
    ecfg = cfg.eval_config()
    reference, _ = simulate_samples(truth, ecfg.sim, ecfg.seed)
    learned, diverged = simulate_samples(truth, ecfg.sim, ecfg.seed, drift_fn=vel)
    report = evaluate_samples(vel, score, truth, ecfg, reference, learned, diverged)
    doc = report.to_dict()
    baselines = []
    for b in range(cfg.eval.baseline_seeds):
        baselines.append(self_distance(truth, ecfg, ecfg.seed, ecfg.seed + 1 + b))
    doc["self_distance"] = baselines
    doc["config"] = cfg.to_dict()
    doc["artifact"] = run.meta()
    hist_dir = run.path("histograms")
    ref_h = histograms(reference, ecfg)
    bounds = {k: h.bounds for k, h in ref_h.items()}
    for key, h in ref_h.items():
        io.write_histogram(hist_dir / f"reference_{key}.csv", h)
    if learned.shape[0]:
        try:
            for key, h in histograms(learned, ecfg, bounds).items():
                io.write_histogram(hist_dir / f"learned_{key}.csv", h)
        except ImsmError as exc:
            log.warning("evaluate: learned histogram unavailable (%s)", exc)
    path = io.write_yaml(run.path("report"), json.loads(json.dumps(doc)))
    log.info("evaluate: tv %s velocity_error %.4g divergence_fraction %.3g",
             {k: round(v, 4) for k, v in report.tv.items()}, report.velocity_error, report.divergence_fraction)
    return path


def _stage_output(run: Run, stage: str) -> Path:
    return {"simulate": run.dataset_path(), "train-score": run.path("score"),
            "train-velocity": run.path("velocity"), "evaluate": run.path("report")}[stage]


def cmd_pipeline(run: Run, dry_run: bool = False) -> list[str]:
    """Run the stages in order, skipping any whose output already exists."""
    plan = []
    for stage in STAGES:
        done = _stage_output(run, stage).exists()
        plan.append(f"{stage}: {'skip (exists)' if done else 'run'} -> {_stage_output(run, stage)}")
    if dry_run:
        for line in plan:
            print(line)
        return plan
    actions = {"simulate": cmd_simulate, "train-score": cmd_train_score,
               "train-velocity": cmd_train_velocity, "evaluate": cmd_evaluate}
    for stage in STAGES:
        if _stage_output(run, stage).exists():
            log.info("pipeline: %s already complete", stage)
            continue
        actions[stage](run)
    return plan


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imsm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=("simulate", "schedule", "train-score", "sample-score",
                                            "train-velocity", "evaluate", "pipeline"))
    parser.add_argument("--config", type=Path, help="YAML run configuration (overlays --preset)")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="built-in benchmark configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", type=Path, help="output directory (overrides paths.out)")
    parser.add_argument("--baseline-pinn", action="store_true",
                        help="train-velocity: minimise the mean squared residual instead")
    parser.add_argument("--dry-run", action="store_true", help="validate the config and print the plan")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_command(args: argparse.Namespace) -> int:
    if args.config is None and args.preset is None:
        raise ConfigError("--config is required (or --preset to start from a built-in configuration)")
    run = Run(load_config(args.config, args.preset, args.seed), args.out)
    if args.dry_run and args.command != "pipeline":
        print(f"config ok ({run.digest[:12]}); {args.command} would write under {run.out}")
        return 0
    cmd = args.command
    if cmd == "simulate":
        cmd_simulate(run)
    elif cmd == "schedule":
        cmd_schedule(run)
    elif cmd == "train-score":
        cmd_train_score(run)
    elif cmd == "sample-score":
        cmd_sample_score(run)
    elif cmd == "train-velocity":
        cmd_train_velocity(run, args.baseline_pinn)
    elif cmd == "evaluate":
        cmd_evaluate(run)
    else:
        cmd_pipeline(run, args.dry_run)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run_command(args)
    except ImsmError as exc:
        print(f"imsm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("imsm: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
