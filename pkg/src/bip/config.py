"""Experiment configuration: flat ``section.key = value`` text files.

Blank lines and ``#`` comments are ignored.  Values are coerced to the type
of the field they set; lists are comma separated.  Unset problem-dependent
fields (widths, resolution, noise level, chain length) stay ``None`` and are
filled in by :meth:`ExperimentConfig.resolved`.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields

PROBLEMS = ("deconv1d", "deblur2d")
PRIORS = ("gaussian", "cauchy_gaussian", "cauchy")
METHODS = ("prior_samples", "map", "ensemble", "last_layer", "pcn", "gpr_baseline", "tails")


class ConfigError(ValueError):
    pass


@dataclass
class ProblemSection:
    name: str = "deconv1d"
    resolution: int | None = None
    noise_std: float | None = None
    kernel_std: float = 0.03
    obs_count: int = 50
    kappa: float = 0.01
    obs_per_axis: int = 14
    data_seed: int = 12345


@dataclass
class PriorSection:
    kind: str = "cauchy"
    widths: list[int] | None = None
    activation: str = "tanh"
    normalized: bool = False
    n_draws: int = 5


@dataclass
class OptimizerSection:
    adam_steps: int | None = None
    adam_lr: float = 0.01
    lbfgs_steps: int = 1500
    lbfgs_memory: int = 10
    init: str = "uniform"
    init_seed: int = 0
    n_restarts: int = 10
    n_jobs: int = 1
    checkpoint: str = ""


@dataclass
class PcnSection:
    n_samples: int | None = None
    beta0: float = 0.01
    target_accept: float = 0.3
    adapt_rate: float = 1.0
    adapt_window: int = 100
    thin: int = 100
    burn_in: int | None = None
    burn_in_fraction: float = 0.5  # used when burn_in is unset
    init: str = "from_checkpoint"
    chain_seed: int = 1
    n_chains: int = 1
    dump: bool = True


@dataclass
class LastLayerSection:
    prior_consistent_precision: bool = False
    n_draws: int = 100


@dataclass
class GprSection:
    amplitude: float = 0.25
    length: float = 10.0
    n_draws: int = 100


@dataclass
class TailsSection:
    priors: list[str] = field(default_factory=lambda: list(PRIORS))
    widths: list[int] = field(default_factory=lambda: [20, 20, 20])
    activation: str = "tanh"
    point: list[float] = field(default_factory=lambda: [0.3])
    axis: int = 0
    n_samples: int = 100_000
    k_fraction: float = 0.05
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "bip-out"
    image_lo: float | None = None
    image_hi: float | None = None


SECTIONS = {
    "problem": ProblemSection,
    "prior": PriorSection,
    "optimizer": OptimizerSection,
    "pcn": PcnSection,
    "last_layer": LastLayerSection,
    "gpr": GprSection,
    "tails": TailsSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    prior: PriorSection = field(default_factory=PriorSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    pcn: PcnSection = field(default_factory=PcnSection)
    last_layer: LastLayerSection = field(default_factory=LastLayerSection)
    gpr: GprSection = field(default_factory=GprSection)
    tails: TailsSection = field(default_factory=TailsSection)
    output: OutputSection = field(default_factory=OutputSection)
    paper_scale: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.problem.name not in PROBLEMS:
            raise ConfigError(f"problem.name must be one of {PROBLEMS}")
        if self.prior.kind not in PRIORS:
            raise ConfigError(f"prior.kind must be one of {PRIORS}")
        for p in self.tails.priors:
            if p not in PRIORS:
                raise ConfigError(f"tails.priors: unknown prior {p!r}")
        if self.optimizer.n_restarts < 2:
            raise ConfigError("optimizer.n_restarts must be >= 2")
        if not (0.0 <= self.pcn.burn_in_fraction < 1.0):
            raise ConfigError("pcn.burn_in_fraction must lie in [0, 1)")
        if self.pcn.n_chains < 1 or self.optimizer.n_jobs < 1:
            raise ConfigError("pcn.n_chains and optimizer.n_jobs must be >= 1")
        return self

    def resolved(self) -> "ExperimentConfig":
        """Copy with problem-dependent defaults filled in."""
        cfg = dataclasses.replace(
            self,
            problem=dataclasses.replace(self.problem),
            prior=dataclasses.replace(self.prior),
            optimizer=dataclasses.replace(self.optimizer),
            pcn=dataclasses.replace(self.pcn),
        )
        one_d = cfg.problem.name == "deconv1d"
        if cfg.problem.resolution is None:
            cfg.problem.resolution = 128 if one_d else (100 if cfg.paper_scale else 50)
        if cfg.problem.noise_std is None:
            cfg.problem.noise_std = 0.05 if one_d else 0.01
        if cfg.prior.widths is None:
            cfg.prior.widths = [50, 50, 100] if one_d else [80, 80, 1000]
        if cfg.optimizer.adam_steps is None:
            cfg.optimizer.adam_steps = 500 if one_d else 200
        if cfg.pcn.n_samples is None:
            if cfg.paper_scale:
                cfg.pcn.n_samples = 5_000_000 if one_d else 1_000_000
            else:
                cfg.pcn.n_samples = 200_000 if one_d else 100_000
        if cfg.pcn.burn_in is None:
            cfg.pcn.burn_in = int(cfg.pcn.n_samples * cfg.pcn.burn_in_fraction)
        return cfg.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            for f in fields(getattr(self, name)):
                value = getattr(getattr(self, name), f.name)
                if value is None:
                    continue
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f"{name}.{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(text: str, annotation, key: str):
    origin = str(annotation)
    optional = "None" in origin
    text = text.strip()
    if optional and text.lower() in ("", "none", "auto"):
        return None
    try:
        if "list[int]" in origin:
            return [int(v) for v in text.split(",") if v.strip()]
        if "list[float]" in origin:
            return [float(v) for v in text.split(",") if v.strip()]
        if "list[str]" in origin:
            return [v.strip() for v in text.split(",") if v.strip()]
        if "bool" in origin:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in origin:
            return int(float(text)) if "e" in text.lower() else int(text)
        if "float" in origin:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {origin}") from exc
    return text


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        set_value(cfg, key, value)
    return cfg.validate()


def set_value(cfg: ExperimentConfig, key: str, value: str) -> None:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown key {key!r}")
    target = getattr(cfg, section)
    hints = typing.get_type_hints(type(target))
    if name not in hints:
        raise ConfigError(f"unknown key {key!r}")
    setattr(target, name, _coerce(value, hints[name], key))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
