"""Run configuration: schema, YAML loading with line-referenced errors, presets."""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dynamics import DEFAULT_DT, SYSTEM_KINDS, SimConfig, SystemSpec
from .errors import ConfigError
from .evaluation import EvalConfig
from .score import ScoreTrainConfig
from .velocity import VelocityTrainConfig


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemBlock(_Block):
    kind: str
    params: dict[str, float] = Field(default_factory=dict)
    D: float = Field(ge=0)

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v):
        if v not in SYSTEM_KINDS:
            raise ValueError(f"unknown kind {v!r}; must be one of {', '.join(SYSTEM_KINDS)}")
        return v

    @model_validator(mode="after")
    def _valid_system(self):
        try:
            self.spec()
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        return self

    def spec(self) -> SystemSpec:
        params = {k: (int(v) if k in ("N", "dim") else v) for k, v in self.params.items()}
        return SystemSpec(self.kind, params, float(self.D))


class SimBlock(_Block):
    dt: Optional[float] = Field(default=None, gt=0)
    n_steps: int = Field(default=100_000, ge=0)
    burn_in_steps: Optional[int] = Field(default=None, ge=0)
    stride: int = Field(default=100, ge=1)
    n_trajectories: int = Field(default=100, ge=1)
    init: Literal["fixed", "random-box"] = "fixed"
    x0: Optional[list[float]] = None
    init_box: Optional[list[Union[float, list[float]]]] = None
    target_n: Optional[int] = Field(default=None, ge=1)
    format: Literal["binary", "csv"] = "binary"

    def build(self, kind: str, seed: int) -> SimConfig:
        burn = self.burn_in_steps if self.burn_in_steps is not None else self.n_steps // 10
        box = None if self.init_box is None else tuple(self.init_box)
        return SimConfig(self.dt or DEFAULT_DT[kind], self.n_steps, burn, self.stride, self.n_trajectories,
                         self.init, self.x0, box, seed, self.target_n)


class ScoreBlock(_Block):
    sigma_min: float = Field(default=0.01, gt=0)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    hidden: list[int] = Field(default_factory=lambda: [64] * 5)
    init_scale: float = Field(default=1.0, gt=0)
    conditioning: Literal["log-sigma", "none"] = "log-sigma"
    standardize: bool = False
    gamma: Optional[float] = Field(default=None, gt=1)
    gamma_fallback: float = Field(default=1.5, gt=1)
    ema_decay: float = Field(default=0.999, ge=0, lt=1)
    antithetic: bool = True
    sample_count: int = Field(default=10_000, ge=1)
    sample_steps_per_level: int = Field(default=100, ge=1)

    def build(self, seed: int) -> ScoreTrainConfig:
        return ScoreTrainConfig(self.epochs, self.batch_size, self.lr, self.sigma_min, seed, tuple(self.hidden),
                                self.init_scale, self.conditioning, self.standardize, self.gamma,
                                self.gamma_fallback, self.ema_decay, self.antithetic)


class VelocityBlock(_Block):
    batch_size: int = Field(default=256, ge=1)
    n_shuffle: int = Field(default=20, ge=1)
    n_aug: int = Field(default=5, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    eta: float = Field(default=0.75, gt=0, lt=1)
    a: float = Field(default=2.0, gt=1)
    mu_init: float = Field(default=1.0, gt=0)
    mu_max: float = Field(default=1e4, gt=0)
    epsilon: float = Field(default=1e-6, ge=0)
    known_mask: Optional[list[bool]] = None
    collocation: Literal["uniform-box", "data"] = "uniform-box"
    hidden: list[int] = Field(default_factory=lambda: [128] * 5)
    init_scale: float = Field(default=1.0, gt=0)
    normalize_inputs: bool = True
    reset_adam: bool = True
    constraint_scaling: Literal["sum", "mean"] = "sum"
    log_wall_time: bool = True

    @model_validator(mode="after")
    def _mu_order(self):
        if self.mu_init > self.mu_max:
            raise ValueError("mu_init must not exceed mu_max")
        return self

    def build(self, seed: int) -> VelocityTrainConfig:
        return VelocityTrainConfig(self.batch_size, self.n_shuffle, self.n_aug, self.lr, self.eta, self.a,
                                   self.mu_init, self.mu_max, self.epsilon, self.collocation, 0.05, seed,
                                   tuple(self.hidden), self.init_scale, self.normalize_inputs,
                                   self.log_wall_time, self.reset_adam, self.constraint_scaling)


class EvalBlock(_Block):
    projections: list[tuple[int, int]] = Field(default_factory=lambda: [(0, 1)])
    mode: Literal["rect", "hex"] = "rect"
    resolution: Union[list[int], float] = Field(default_factory=lambda: [64, 64])
    velocity_points: int = Field(default=20_000, ge=1)
    baseline_seeds: int = Field(default=1, ge=0)
    sim: Optional[SimBlock] = None

    @model_validator(mode="after")
    def _resolution_matches_mode(self):
        if self.mode == "rect" and not (isinstance(self.resolution, list) and len(self.resolution) == 2):
            raise ValueError("rect histograms need resolution [nx, ny]")
        if self.mode == "hex" and not isinstance(self.resolution, float):
            raise ValueError("hex histograms need a scalar hex radius")
        return self

    def build(self, sim: SimConfig, seed: int) -> EvalConfig:
        res = tuple(self.resolution) if isinstance(self.resolution, list) else self.resolution
        return EvalConfig(sim, [tuple(p) for p in self.projections], self.mode, res, self.velocity_points, seed)


class PathsBlock(_Block):
    out: str = "run"
    dataset: str = "dataset.bin"
    score: str = "score.json"
    velocity: str = "velocity.json"
    score_log: str = "score_log.csv"
    velocity_log: str = "velocity_log.csv"
    report: str = "report.yaml"
    histograms: str = "histograms"


class RunConfig(_Block):
    seed: int = Field(default=0, ge=0)
    system: SystemBlock
    sim: SimBlock = Field(default_factory=SimBlock)
    score: ScoreBlock = Field(default_factory=ScoreBlock)
    velocity: VelocityBlock = Field(default_factory=VelocityBlock)
    eval: EvalBlock = Field(default_factory=EvalBlock)
    paths: PathsBlock = Field(default_factory=PathsBlock)

    @model_validator(mode="after")
    def _cross_checks(self):
        d = self.system.spec().dim
        if self.velocity.known_mask is not None and len(self.velocity.known_mask) != d:
            raise ValueError(f"velocity.known_mask needs {d} entries for {self.system.kind}")
        for p in self.eval.projections:
            if not all(0 <= k < d for k in p):
                raise ValueError(f"eval projection {list(p)} is out of range for d={d}")
        return self

    # derived stage configs
    def system_spec(self) -> SystemSpec:
        return self.system.spec()

    def sim_config(self) -> SimConfig:
        return self.sim.build(self.system.kind, self.seed)

    def score_config(self) -> ScoreTrainConfig:
        return self.score.build(self.seed)

    def velocity_config(self) -> VelocityTrainConfig:
        return self.velocity.build(self.seed)

    def eval_config(self) -> EvalConfig:
        block = self.eval.sim or self.sim
        return self.eval.build(block.build(self.system.kind, self.seed), self.seed)

    def path(self, name: str, out: Path | None = None) -> Path:
        base = Path(self.paths.out) if out is None else Path(out)
        return base / getattr(self.paths, name)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


PRESETS = {
    "vanderpol": {
        "system": {"kind": "vanderpol", "params": {"c": 0.5}, "D": 0.05},
        "sim": {"dt": 1e-3, "n_steps": 100_000, "burn_in_steps": 10_000, "stride": 100, "n_trajectories": 100},
        "eval": {"projections": [[0, 1]], "resolution": [64, 64]},
    },
    "swimmer": {
        "system": {"kind": "swimmer", "params": {"gamma": 0.1}, "D": 1.0},
        "sim": {"dt": 1e-3, "n_steps": 100_000, "burn_in_steps": 10_000, "stride": 100, "n_trajectories": 100},
        "eval": {"projections": [[0, 1]], "resolution": [64, 64]},
    },
    "lorenz63": {
        "system": {"kind": "lorenz63", "params": {"c1": 10.0, "c2": 28.0, "c3": 8.0 / 3.0}, "D": 10.0},
        "sim": {"dt": 1e-4, "n_steps": 1_000_000, "burn_in_steps": 100_000, "stride": 1000,
                "n_trajectories": 100},
        "score": {"standardize": True},
        "velocity": {"known_mask": [False, True, True]},
        "eval": {"projections": [[0, 2]], "resolution": [64, 64]},
    },
    "lorenz96": {
        "system": {"kind": "lorenz96", "params": {"N": 5, "F": 8.0}, "D": 0.05},
        "sim": {"dt": 1e-3, "n_steps": 100_000, "burn_in_steps": 10_000, "stride": 100, "n_trajectories": 100},
        "score": {"standardize": True},
        "eval": {"projections": [[0, 1], [0, 2], [0, 3], [0, 4]], "resolution": [64, 64]},
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins, lists are replaced whole."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_index(node, prefix=(), table=None) -> dict:
    """Map key paths to 1-based source lines of a composed YAML node."""
    table = {} if table is None else table
    table.setdefault(prefix, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (key.value,)
            table[path] = key.start_mark.line + 1
            _line_index(value, path, table)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, prefix + (i,), table)
    return table


def _describe(exc: ValidationError, lines: dict, source: str) -> str:
    msgs = []
    for err in exc.errors():
        loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
        path = ".".join(str(p) for p in loc) or "<root>"
        line = None
        probe = loc
        while probe and line is None:
            line = lines.get(tuple(str(p) if isinstance(p, str) else p for p in probe))
            probe = probe[:-1]
        if line is None:
            line = lines.get(())
        where = f"{source}:{line}: " if line else f"{source}: "
        msgs.append(f"{where}{path}: {err['msg']}")
    return "\n".join(msgs)


def parse_config(text: str, source: str = "<config>", base: dict | None = None,
                 seed: int | None = None) -> RunConfig:
    """Validate YAML ``text`` (overlaid on ``base`` when given) into a RunConfig."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    lines = _line_index(node) if node is not None else {}
    merged = merge(base, data) if base else data
    if seed is not None:
        merged["seed"] = seed
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_describe(exc, lines, source)) from None


def load_config(path: str | Path | None = None, preset_name: str | None = None,
                seed: int | None = None) -> RunConfig:
    """Load a config file, optionally overlaying it on a named preset."""
    base = preset(preset_name) if preset_name else None
    if path is None:
        if base is None:
            raise ConfigError("either a config file or a preset is required")
        return parse_config("{}", f"preset:{preset_name}", base, seed)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{p}: config file not found") from None
    return parse_config(text, str(p), base, seed)
