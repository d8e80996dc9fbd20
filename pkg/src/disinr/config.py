"""Experiment configuration: strict YAML parsing, presets and builders.

One file describes a whole experiment: the phantom population, the
forward model, the network and both training stages.  Unknown keys are
rejected so that typos fail loudly, and every run directory receives the
fully resolved configuration, which parses back to an equal object.

All randomness flows from the top-level ``seed`` through named sub-seeds
(``phantom``, ``mask``, ``coils``, ``noise``, ``split``, ``init`` and so on).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .data import PhantomFamilyConfig, add_phase, gen_family, simulate_measurements, split
from .encoders import HASH_PRESETS
from .errors import ConfigError
from .models import BACKBONES, KINDS, ModelConfig
from .physics import (
    FanBeamGeometry, FanBeamOperator, FourierOperator, IdentityOperator, SamplingMaskConfig,
    make_coil_maps, make_mask, view_angles,
)
from .seeding import subseed
from .training import TrainConfig

TASKS = ("volume_fit", "mri", "ct")
TASK_OPERATORS = {"volume_fit": "identity", "mri": "fourier", "ct": "fanbeam"}


@dataclass(frozen=True)
class ModelSection:
    kind: str = "disinr"
    backbone: str = "ngp"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"model.kind must be one of {KINDS}, got {self.kind!r}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"model.backbone must be one of {BACKBONES}, got {self.backbone!r}")


@dataclass(frozen=True)
class OperatorSection:
    """Forward-model settings; which fields matter depends on ``kind``."""

    kind: str = "identity"
    views: int = 60
    pattern: str = "cartesian"
    acceleration: float = 6.0
    acs: int = 24
    coils: int = 1
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "fanbeam", "fourier"):
            raise ConfigError(f"unknown operator kind {self.kind!r}")
        if self.views < 1 or self.coils < 1:
            raise ConfigError("operator.views and operator.coils must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("operator.noise_sigma must be non-negative")
        SamplingMaskConfig(self.pattern, self.acceleration, self.acs)


@dataclass(frozen=True)
class SplitSection:
    fractions: tuple = (0.6, 0.2, 0.2)
    # optional overrides turning the test_out split into another phantom family
    out_of_domain: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or min(self.fractions) < 0 or sum(self.fractions) <= 0:
            raise ConfigError("split.fractions must be three non-negative numbers")
        if self.out_of_domain is not None:
            _check_keys(self.out_of_domain, _phantom_keys(), "split.out_of_domain")


def _phantom_keys() -> set:
    return {f.name for f in fields(PhantomFamilyConfig)} - {"seed"}


def _train_keys() -> set:
    return {f.name for f in fields(TrainConfig)} - {"seed"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "volume_fit"
    seed: int = 0
    preset: str = "desk"
    model: ModelSection = field(default_factory=ModelSection)
    phantom: dict = field(default_factory=dict)
    operator: OperatorSection = field(default_factory=OperatorSection)
    split: SplitSection = field(default_factory=SplitSection)
    pretrain: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)
    out: str = "runs/default"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.preset not in HASH_PRESETS:
            raise ConfigError(f"preset must be one of {tuple(HASH_PRESETS)}, got {self.preset!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if TASK_OPERATORS[self.task] != self.operator.kind:
            raise ConfigError(f"task {self.task!r} needs operator kind "
                              f"{TASK_OPERATORS[self.task]!r}, got {self.operator.kind!r}")
        _check_keys(self.phantom, _phantom_keys(), "phantom")
        _check_keys(self.pretrain, _train_keys(), "pretrain")
        _check_keys(self.adapt, _train_keys(), "adapt")
        # build once so that bad values surface at parse time
        self.phantom_config()
        self.train_config("pretrain")
        self.train_config("adapt")
        if self.operator.kind == "fanbeam":
            self.geometry()

    # -- resolved sub-configs -------------------------------------------------

    def phantom_config(self, out_of_domain: bool = False) -> PhantomFamilyConfig:
        shape = FanBeamGeometry.preset(self.preset).image_shape if self.task == "ct" else (64, 64)
        base = {"shape": shape, "n": 10,
                "family": "shepp_logan" if self.task == "ct" else "ellipse"}
        base.update(self.phantom)
        name = "phantom"
        if out_of_domain:
            base.update(self.split.out_of_domain or {})
            name = "phantom_ood"
        try:
            return PhantomFamilyConfig(**base, seed=subseed(self.seed, name))
        except TypeError as exc:
            raise ConfigError(f"bad phantom section: {exc}") from None

    def train_config(self, stage: str) -> TrainConfig:
        values = {"pretrain": self.pretrain, "adapt": self.adapt}[stage]
        try:
            return TrainConfig(**values, seed=subseed(self.seed, stage))
        except TypeError as exc:
            raise ConfigError(f"bad {stage} section: {exc}") from None

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset(self.preset, kind=self.model.kind,
                                  backbone=self.model.backbone,
                                  channels=2 if self.task == "mri" else 1)

    def geometry(self) -> FanBeamGeometry:
        shape = self.phantom_config().shape
        geom = FanBeamGeometry.preset(self.preset, self.operator.views)
        try:
            return replace(geom, image_shape=shape, angles=view_angles(self.operator.views))
        except ConfigError as exc:
            raise ConfigError(f"fan-beam geometry: {exc}") from None

    def mask_config(self) -> SamplingMaskConfig:
        op = self.operator
        return SamplingMaskConfig(op.pattern, op.acceleration, op.acs, subseed(self.seed, "mask"))

    def build_operator(self):
        kind = self.operator.kind
        shape = self.phantom_config().shape
        if kind == "identity":
            return IdentityOperator(shape)
        if kind == "fanbeam":
            return FanBeamOperator(self.geometry())
        mask = make_mask(self.mask_config(), shape)
        coils = None
        if self.operator.coils > 1:
            coils = make_coil_maps(shape, self.operator.coils, subseed(self.seed, "coils"))
        return FourierOperator(mask, coils)

    # -- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        return _listify(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        if d is None:
            d = {}
        _check_keys(d, {f.name for f in fields(cls)}, "config")
        d = dict(d)
        sections = {"model": ModelSection, "operator": OperatorSection, "split": SplitSection}
        for name, section in sections.items():
            if name in d:
                _check_keys(d[name], {f.name for f in fields(section)}, name)
                d[name] = section(**d[name])
        for name in ("phantom", "pretrain", "adapt"):
            if d.get(name) is None:
                d[name] = {}
            _check_keys(d[name], _phantom_keys() if name == "phantom" else _train_keys(), name)
            d[name] = _plain(d[name])
        return cls(**d)

    def resolved(self) -> "ExperimentConfig":
        """Same experiment with every phantom and training default spelled out."""
        def strip(d):
            return _plain({k: v for k, v in d.items() if k != "seed"})

        return replace(self, phantom=strip(asdict(self.phantom_config())),
                       pretrain=strip(self.train_config("pretrain").to_dict()),
                       adapt=strip(self.train_config("adapt").to_dict()))

    def with_overrides(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes) if changes else self


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def _plain(d: dict) -> dict:
    # lists from YAML become tuples so configs compare equal after a round trip
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_config(path=None) -> ExperimentConfig:
    """Parse a YAML experiment file; ``None`` gives the default desk config."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(yaml.safe_load(text))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None


def simulate_dataset(cfg: ExperimentConfig):
    """Phantoms, measurements and the pretrain / test_in / test_out split.

    Returns ``(splits, operator)``.  With ``split.out_of_domain`` set, the
    test_out records come from the overridden phantom family instead.
    """
    op = cfg.build_operator()
    fam = cfg.phantom_config()
    images = gen_family(fam)
    if cfg.task == "mri":
        images = add_phase(images, subseed(cfg.seed, "phase"))
    ids = [f"s{i:03d}" for i in range(len(images))]
    noise_seed = subseed(cfg.seed, "noise")
    records = simulate_measurements(images, op, cfg.operator.noise_sigma, noise_seed, ids)
    splits = split(records, cfg.split.fractions, subseed(cfg.seed, "split"))
    if cfg.split.out_of_domain is not None:
        n_out = len(splits["test_out"])
        if n_out:
            ood = cfg.phantom_config(out_of_domain=True)
            ood = replace(ood, n=n_out)
            if ood.shape != fam.shape:
                raise ConfigError("out-of-domain phantoms must keep the image shape")
            images = gen_family(ood)
            if cfg.task == "mri":
                images = add_phase(images, subseed(cfg.seed, "phase_ood"))
            ids = [f"o{i:03d}" for i in range(n_out)]
            splits["test_out"] = simulate_measurements(
                images, op, cfg.operator.noise_sigma, subseed(cfg.seed, "noise_ood"), ids)
    return splits, op


def dataset_summary(cfg: ExperimentConfig, splits, op) -> dict:
    """Counts, shapes and (for MRI) realised acceleration of a simulated dataset."""
    from .physics import realized_acceleration

    first = next(r for part in splits.values() for r in part)
    summary = {"n": sum(len(v) for v in splits.values()),
               "split": {k: len(v) for k, v in splits.items()},
               "image_shape": list(first.ground_truth.shape),
               "measurement_shape": list(first.measurement.shape)}
    if isinstance(op, FourierOperator):
        summary["acceleration"] = float(realized_acceleration(np.asarray(op.mask),
                                                              cfg.operator.pattern))
    return summary
