"""
Experiment configuration.

A configuration file is flat ``key = value`` text split into ``[section]`` blocks, with ``#``
comments::

    [run]
    benchmark = mw54
    seed = 7

    [train]
    lr_u = 1e-5
    a_max = none

The effective configuration is assembled from layers, later layers winning:

    dataclass defaults <- benchmark preset <- desk profile <- file <- environment <- overrides

Environment variables are named ``NAAS_<SECTION>_<KEY>`` (``NAAS_TRAIN_LR_U=1e-4``). Every
value read from text keeps its source and line, so a bad value is reported as
``<source>:<line>: <message>``. ``ExperimentConfig.dumps`` writes the canonical resolved text;
loading that text again reproduces the same configuration.
"""

import logging
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from mergedeep import merge

from NAAS.energy import AnnealedPotential, EnergyModel, IsotropicGaussian, build_energy
from NAAS.exceptions import ConfigError, InputError
from NAAS.trainer import TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "NAAS_"


@dataclass
class RunSection:
    benchmark: Optional[str] = None
    name: str = "run"
    seed: int = 0
    out: str = "out"
    profile: str = "full"


@dataclass
class EnergySection:
    variant: Optional[str] = None
    dim: Optional[int] = None
    sigma_bar: Optional[float] = None
    variance: Optional[float] = None
    center_range: Optional[float] = None
    n_modes: Optional[int] = None
    separation: Optional[float] = None
    weight: Optional[float] = None
    n_wells: Optional[int] = None
    delta: Optional[float] = None
    dof: Optional[float] = None


@dataclass
class ScheduleSection:
    kind: str = "geometric"
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    sigma_bar: float = 1.0


@dataclass
class NetSection:
    hidden: str = "auto"
    time_embedding: int = 64


@dataclass
class TrainSection:
    stages: int = 3
    epochs_u: int = 100
    epochs_v: int = 100
    steps_u: int = 400
    steps_v: int = 400
    batch_size: int = 512
    n_paths: int = 2048
    buffer_capacity: int = 10000
    lr_u: float = 1e-5
    lr_v: float = 1e-8
    e_max: Optional[float] = 100.0
    a_max: Optional[float] = None
    grad_clip: Optional[float] = 1.0
    beta1: float = 0.0
    beta2: float = 0.9
    n_prior: int = 100
    n_anneal: int = 100
    stride: int = 1
    mode: str = "naas"
    hvp: str = "fd"


@dataclass
class MetricsSection:
    eval_samples: int = 2000
    n_samples: int = 2000
    sinkhorn_epsilon: float = 1e-3
    sinkhorn_iters: int = 10000
    sinkhorn_tol: float = 1e-6
    mmd_bandwidth: str = "median"
    resample: str = "none"


SECTIONS = {
    "run": RunSection,
    "energy": EnergySection,
    "schedule": ScheduleSection,
    "net": NetSection,
    "train": TrainSection,
    "metrics": MetricsSection,
}

_SHARED = {"stages": 3, "epochs_u": 100, "epochs_v": 100, "steps_u": 400, "steps_v": 400}

BENCHMARKS = {
    "mw54": {
        "energy": {"variant": "many-well", "dim": 5, "n_wells": 5, "delta": 4.0},
        "schedule": {"sigma_min": 0.01, "sigma_max": 1.0, "sigma_bar": 1.0},
        "train": {
            **_SHARED,
            "n_paths": 2048,
            "e_max": 100.0,
            "a_max": None,
            "lr_u": 1e-5,
            "lr_v": 1e-8,
        },
    },
    "funnel": {
        "energy": {"variant": "funnel", "dim": 10, "variance": 9.0},
        "schedule": {"sigma_min": 0.01, "sigma_max": 9.0, "sigma_bar": 1.0},
        "train": {
            **_SHARED,
            "stages": 10,
            "n_paths": 512,
            "e_max": 1000.0,
            "a_max": 100.0,
            "lr_u": 1e-4,
            "lr_v": 1e-4,
        },
    },
    "gmm40": {
        "energy": {"variant": "gmm40", "dim": 50, "n_modes": 40, "center_range": 40.0},
        "schedule": {"sigma_min": 0.01, "sigma_max": 50.0, "sigma_bar": 50.0},
        "train": {
            **_SHARED,
            "stages": 5,
            "n_paths": 512,
            "e_max": 1000.0,
            "a_max": 100.0,
            "lr_u": 1e-6,
            "lr_v": 1e-8,
        },
    },
    "mos": {
        "energy": {"variant": "mos", "dim": 50, "n_modes": 10, "center_range": 10.0, "dof": 2.0},
        "schedule": {"sigma_min": 0.01, "sigma_max": 1000.0, "sigma_bar": 15.0},
        "train": {
            **_SHARED,
            "stages": 5,
            "n_paths": 512,
            "e_max": 1000.0,
            "a_max": 100.0,
            "lr_u": 1e-4,
            "lr_v": 1e-6,
        },
    },
    "gmm-grid": {
        "energy": {"variant": "gmm-grid", "dim": 2, "variance": 0.3},
        "schedule": {"sigma_min": 0.01, "sigma_max": 5.0, "sigma_bar": 5.0},
        "train": {
            **_SHARED,
            "n_paths": 2048,
            "e_max": 100.0,
            "a_max": None,
            "lr_u": 1e-4,
            "lr_v": 1e-4,
        },
    },
    "bimodal": {
        "energy": {
            "variant": "bimodal",
            "dim": 4,
            "separation": 2.0,
            "weight": 2 / 3,
            "variance": 1.0,
        },
        "schedule": {"sigma_min": 0.01, "sigma_max": 3.0, "sigma_bar": 3.0},
        "train": {
            **_SHARED,
            "n_paths": 1024,
            "e_max": 100.0,
            "a_max": 100.0,
            "lr_u": 1e-4,
            "lr_v": 1e-4,
        },
    },
    "gaussian": {
        "energy": {"variant": "gaussian", "dim": 2},
        "schedule": {"kind": "constant", "sigma_bar": 1.0},
        "train": {
            "stages": 1,
            "epochs_u": 5,
            "epochs_v": 5,
            "steps_u": 50,
            "steps_v": 50,
            "n_paths": 256,
            "e_max": None,
            "a_max": None,
            "lr_u": 1e-3,
            "lr_v": 1e-3,
        },
    },
    "custom": {},
}


# CPU-sized budgets; schedules, clip bounds and learning rates are left alone
DESK_PROFILE = {
    "train": {
        "stages": 2,
        "epochs_u": 4,
        "epochs_v": 4,
        "steps_u": 50,
        "steps_v": 50,
        "batch_size": 256,
        "n_paths": 256,
        "buffer_capacity": 5000,
        "n_prior": 50,
        "n_anneal": 50,
    },
    "metrics": {"eval_samples": 500, "n_samples": 2000, "sinkhorn_iters": 2000},
}
PROFILES = ("full", "desk")


def _field_types(section: str) -> dict:
    return typing.get_type_hints(SECTIONS[section])


def _coerce(value, annotation, source=None, line=None, key=None):
    optional = typing.get_origin(annotation) is typing.Union
    if optional:
        annotation = next(arg for arg in typing.get_args(annotation) if arg is not type(None))
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} may not be none", source, line, key)
    if isinstance(value, str):
        text = value.strip()
        if optional and text.lower() in ("none", ""):
            return None
        try:
            if annotation is bool:
                if text.lower() in ("true", "yes", "1"):
                    return True
                if text.lower() in ("false", "no", "0"):
                    return False
                raise ValueError(text)
            return annotation(text)
        except ValueError:
            message = f"invalid value {text!r} for {key}: expected {annotation.__name__}"
            raise ConfigError(message, source, line, key) from None
    if annotation is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, annotation):
        raise ConfigError(f"invalid value {value!r} for {key}", source, line, key)
    return value


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    energy: EnergySection = field(default_factory=EnergySection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        """Canonical text of the fully resolved configuration, sections in fixed order."""
        blocks = []
        for section, values in self.to_dict().items():
            lines = [f"[{section}]"] + [
                f"{key} = {_format(values[key])}" for key in sorted(values)
            ]
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @property
    def seed(self) -> int:
        return self.run.seed

    def hidden(self) -> Optional[tuple]:
        if self.net.hidden.strip().lower() == "auto":
            return None
        return tuple(int(width) for width in self.net.hidden.split(",") if width.strip())

    def train_config(self, progress: bool = False) -> TrainConfig:
        t, s, m = self.train, self.schedule, self.metrics
        try:
            bandwidth = float(m.mmd_bandwidth)
        except ValueError:
            bandwidth = m.mmd_bandwidth
        return TrainConfig(
            n_stages=t.stages,
            n_epochs_u=t.epochs_u,
            n_epochs_v=t.epochs_v,
            n_steps_u=t.steps_u,
            n_steps_v=t.steps_v,
            batch_size=t.batch_size,
            n_paths=t.n_paths,
            buffer_capacity=t.buffer_capacity,
            lr_u=t.lr_u,
            lr_v=t.lr_v,
            e_max=t.e_max,
            a_max=t.a_max,
            grad_clip=t.grad_clip,
            beta1=t.beta1,
            beta2=t.beta2,
            sigma_min=s.sigma_min,
            sigma_max=s.sigma_max,
            sigma_bar=s.sigma_bar,
            schedule=s.kind,
            n_prior=t.n_prior,
            n_anneal=t.n_anneal,
            stride=t.stride,
            mode=t.mode,
            hvp=t.hvp,
            hidden=self.hidden(),
            time_embedding=self.net.time_embedding,
            eval_samples=m.eval_samples,
            sinkhorn_epsilon=m.sinkhorn_epsilon,
            sinkhorn_iters=m.sinkhorn_iters,
            sinkhorn_tol=m.sinkhorn_tol,
            mmd_bandwidth=bandwidth,
            progress=progress,
        )

    def build_target(self) -> EnergyModel:
        e = self.energy
        params = {
            key: value
            for key, value in asdict(e).items()
            if key not in ("variant", "dim") and value is not None
        }
        params.setdefault("sigma_bar", self.schedule.sigma_bar)
        return build_energy(e.variant, e.dim, self.run.seed, **params)

    def build_potential(self) -> AnnealedPotential:
        target = self.build_target()
        prior = IsotropicGaussian(target.dim, self.schedule.sigma_bar)
        return AnnealedPotential(prior, target, self.train.e_max, self.train.a_max, self.train.hvp)

    def validate(self) -> "ExperimentConfig":
        """
        Check cross-field constraints by building the objects the run needs.

        Raises
        ------
        ConfigError
            Naming the offending key where it can be identified.
        """
        if not self.run.benchmark:
            raise ConfigError("missing required key run.benchmark", key="run.benchmark")
        if self.run.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.run.profile!r}", key="run.profile")
        if self.run.seed < 0:
            raise ConfigError(f"run.seed must be non-negative, got {self.run.seed}", key="run.seed")
        if not self.energy.variant:
            raise ConfigError("missing required key energy.variant", key="energy.variant")
        if self.energy.dim is None and self.energy.variant != "gmm-grid":
            raise ConfigError("missing required key energy.dim", key="energy.dim")
        try:
            self.train_config()
            self.build_potential()
        except ConfigError:
            raise
        except InputError as err:
            raise ConfigError(err.message) from err
        return self


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """
    Parse configuration text into raw string values.

    Returns
    -------
    tuple
        ``{section: {key: value}}`` and ``{(section, key): line}``.

    Raises
    ------
    ConfigError
        On malformed lines, unknown sections or keys and repeated keys.
    """
    values, lines = {}, {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", source, number)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", source, number, section)
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", source, number)
        if section is None:
            raise ConfigError("key outside of any [section]", source, number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _field_types(section):
            raise ConfigError(
                f"unknown key {key!r} in [{section}]", source, number, f"{section}.{key}"
            )
        if (section, key) in lines:
            raise ConfigError(
                f"{section}.{key} repeated (first set on line {lines[section, key]})",
                source,
                number,
                f"{section}.{key}",
            )
        values[section][key] = value
        lines[section, key] = number
    return values, lines


def _environment_layer(environ) -> tuple[dict, dict]:
    values, origins = {}, {}
    for section in SECTIONS:
        for key in _field_types(section):
            name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if name in environ:
                values.setdefault(section, {})[key] = environ[name]
                origins[section, key] = (f"env:{name}", None)
    return values, origins


def parse_overrides(items) -> dict:
    """Turn ``section.key=value`` strings into a nested layer."""
    layer = {}
    for item in items or ():
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"expected section.key=value, got {item!r}", "<override>")
        if section not in SECTIONS or key not in _field_types(section):
            raise ConfigError(f"unknown key {target.strip()!r}", "<override>", key=target.strip())
        layer.setdefault(section, {})[key] = value.strip()
    return layer


def load_config(
    path=None, overrides: dict = None, environ=None, text: str = None
) -> ExperimentConfig:
    """
    Assemble and validate the effective configuration.

    Parameters
    ----------
    path : str or Path, optional
        Configuration file.
    overrides : dict, optional
        Highest-priority layer ``{section: {key: value}}``, typically from CLI flags.
    environ : mapping, optional
        Environment to read ``NAAS_<SECTION>_<KEY>`` variables from; defaults to ``os.environ``.
    text : str, optional
        Configuration text used instead of reading ``path``.

    Raises
    ------
    ConfigError
        If the file cannot be read or any value is invalid.
    """
    environ = os.environ if environ is None else environ
    origins = {}
    file_layer = {}
    if path is not None or text is not None:
        source = str(path) if path is not None else "<text>"
        if text is None:
            try:
                text = Path(path).read_text()
            except OSError as err:
                raise ConfigError(f"cannot read configuration: {err.strerror}", source) from None
        file_layer, lines = parse_config_text(text, source)
        origins.update({key: (source, line) for key, line in lines.items()})
    env_layer, env_origins = _environment_layer(environ)
    origins.update(env_origins)
    overrides = overrides or {}
    for section, values in overrides.items():
        for key in values:
            origins[section, key] = ("<override>", None)

    upper = merge({}, file_layer, env_layer, overrides)
    run = upper.get("run", {})
    benchmark = run.get("benchmark")
    if benchmark is not None and benchmark not in BENCHMARKS:
        source, line = origins.get(("run", "benchmark"), (None, None))
        raise ConfigError(
            f"unknown benchmark {benchmark!r}; expected one of {', '.join(BENCHMARKS)}",
            source,
            line,
            "run.benchmark",
        )
    layers = [asdict(ExperimentConfig())]
    if benchmark is not None:
        layers.append(BENCHMARKS[benchmark])
    if str(run.get("profile", "full")).strip() == "desk":
        layers.append(DESK_PROFILE)
    layers.append(upper)
    merged = merge({}, *layers)

    sections = {}
    for section, cls in SECTIONS.items():
        types = _field_types(section)
        kwargs = {}
        for key, value in merged.get(section, {}).items():
            source, line = origins.get((section, key), (None, None))
            kwargs[key] = _coerce(value, types[key], source, line, f"{section}.{key}")
        sections[section] = cls(**kwargs)
    config = ExperimentConfig(**sections)
    logger.debug("resolved configuration:\n%s", config.dumps())
    return config.validate()
