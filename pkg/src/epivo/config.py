"""Run configuration: one YAML file, strictly validated, overridable from flags.

Unknown keys anywhere in the tree are rejected.  Every section has defaults,
so an empty file is a valid configuration.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import diffusion, matcher, pipeline, solvers
from .errors import ConfigError
from .metrics import ALIGNMENTS, LossWeights
from .sim import MOTIONS, NoiseConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SimulateSection(_Section):
    n_frames: int = Field(50, ge=2)
    n_points: int = Field(100, ge=8)
    motion: str = "forward"
    step: float = Field(1.0, gt=0)
    rot_max: float = Field(0.02, ge=0)
    descriptor_dim: int = Field(256, ge=2)
    # keypoints per frame; None pads every frame to the largest tracked set
    keypoint_budget: Optional[int] = Field(None, ge=1)

    @field_validator("motion")
    @classmethod
    def _motion(cls, v):
        if v not in MOTIONS:
            raise ValueError(f"must be one of {MOTIONS}")
        return v


class NoiseSection(_Section):
    sigma_p: float = Field(1.0, ge=0)
    delta_theta_max: float = Field(0.0, ge=0)
    delta_t_max: float = Field(0.0, ge=0)
    alpha: float = Field(0.0, ge=0)
    beta: float = Field(0.0, ge=0)
    k1_err: float = 0.0
    k2_err: float = 0.0

    def build(self) -> NoiseConfig:
        return NoiseConfig(**self.model_dump())


class ScheduleSection(_Section):
    T: int = Field(100, ge=1)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)

    def build(self) -> diffusion.NoiseSchedule:
        return diffusion.NoiseSchedule.linear(self.T, self.beta_start, self.beta_end)


class RansacSection(_Section):
    iterations: int = Field(1000, ge=1)
    # None derives the threshold from the keypoint noise level
    inlier_threshold: Optional[float] = Field(None, gt=0)
    sample_size: Literal[5, 8] = 8
    refine_rounds: int = Field(5, ge=0)
    lo_fraction: float = Field(0.5, gt=0, le=1)


class LossSection(_Section):
    w1: float = Field(1.0, ge=0)
    w2: float = Field(1.0, ge=0)
    w3: float = Field(1.0, ge=0)

    def build(self) -> LossWeights:
        return LossWeights(self.w1, self.w2, self.w3)


class PipelineSection(_Section):
    refinement: bool = True
    # "oracle", "none" or a path to a trained weight file
    denoiser: str = "oracle"
    solver: Literal["multi", "weighted-svd", "ransac", "eight_point"] = "multi"
    scorer: Literal["residual", "mp"] = "residual"
    # "descriptors" matches keypoints; "matches" reads the stored correspondences
    input: Literal["descriptors", "matches"] = "descriptors"
    start_t: int = Field(25, ge=1)
    stochastic: bool = False
    k: int = Field(4, ge=1)
    m: int = Field(5, ge=1)
    tau: float = Field(matcher.DEFAULT_TAU, gt=0, le=1)
    sinkhorn_iterations: int = Field(matcher.DEFAULT_ITERATIONS, ge=1)
    temperature: float = Field(matcher.DEFAULT_TEMPERATURE, gt=0)
    top_k: Optional[int] = Field(None, ge=1)
    init_iterations: int = Field(200, ge=1)
    scale: bool = True


class TrainSection(_Section):
    epochs: int = Field(60, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(2e-3, gt=0)
    start_t: int = Field(25, ge=1)


class EvaluateSection(_Section):
    alignment: Optional[str] = None
    format: Literal["kitti", "tartanair", "auto"] = "auto"

    @field_validator("alignment")
    @classmethod
    def _alignment(cls, v):
        if v is not None and v not in ALIGNMENTS:
            raise ValueError(f"must be one of {ALIGNMENTS}")
        return v


class RunConfig(_Section):
    seed: int = Field(0, ge=0)
    dataset: Optional[str] = None
    output: str = "out"
    simulate: SimulateSection = SimulateSection()
    noise: NoiseSection = NoiseSection()
    schedule: ScheduleSection = ScheduleSection()
    ransac: RansacSection = RansacSection()
    loss_weights: LossSection = LossSection()
    pipeline: PipelineSection = PipelineSection()
    train: TrainSection = TrainSection()
    evaluate: EvaluateSection = EvaluateSection()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """Hash of every setting that can change results (all but ``output``)."""
        tree = self.model_dump(mode="json")
        del tree["output"]
        return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **changes) -> "RunConfig":
        """Apply dotted-key overrides (``{"pipeline.solver": "ransac"}``)."""
        tree = self.model_dump()
        for key, value in changes.items():
            node = tree
            *head, last = key.split(".")
            for part in head:
                node = node[part]
            node[last] = value
        return parse_config(tree)

    def pipeline_config(self, sigma_px: float | None = None) -> pipeline.PipelineConfig:
        """The pipeline settings.  A weight-file denoiser is left as its path;
        the caller loads it."""
        p = self.pipeline
        sigma = self.noise.sigma_p if sigma_px is None else sigma_px
        ransac = None
        if self.ransac.inlier_threshold is not None:
            r = self.ransac
            ransac = solvers.RansacConfig(r.iterations, r.inlier_threshold, r.sample_size,
                                          self.seed, r.refine_rounds, r.lo_fraction)
        return pipeline.PipelineConfig(
            tau=p.tau, sinkhorn_iterations=p.sinkhorn_iterations, temperature=p.temperature,
            top_k=p.top_k, refinement=p.refinement,
            denoiser=None if p.denoiser == "none" else p.denoiser,
            schedule=self.schedule.build(), start_t=p.start_t, stochastic=p.stochastic,
            sigma_px=max(sigma, 1e-3), solver=p.solver, scorer=p.scorer, k=p.k, m=p.m,
            ransac=ransac, init_iterations=p.init_iterations, scale=p.scale, seed=self.seed)


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(tree) -> RunConfig:
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        cfg = RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_describe(exc)}") from None
    if cfg.schedule.beta_end < cfg.schedule.beta_start:
        raise ConfigError("schedule.beta_end must be >= schedule.beta_start")
    for section in ("pipeline", "train"):
        if getattr(cfg, section).start_t > cfg.schedule.T:
            raise ConfigError(f"{section}.start_t exceeds schedule.T")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from None
    return parse_config(tree)
