"""Experiment configuration: enums, dataclasses, defaults, validation, JSON I/O.

A config file is a single JSON object with the top-level keys listed in
``TOP_LEVEL_KEYS``.  ``hyper`` may be partial; missing entries are filled
from :func:`default_hyperparams` for the chosen IPM and critic formulation.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any


class IpmKind(str, Enum):
    WGAN_CLIP = "wgan_clip"
    WGAN_GP = "wgan_gp"
    FISHER = "fisher"
    SOBOLEV = "sobolev"
    FISHER_SOBOLEV = "fisher_sobolev"


class CriticFormulation(str, Enum):
    PLAIN = "plain"
    K_PLUS_ONE = "k_plus_one"
    K_PLUS_ONE_ENTROPY = "k_plus_one_entropy"


class ConstraintTarget(str, Enum):
    FULL = "f"
    REAL = "f_plus"
    FAKE = "f_minus"


class ConstraintKind(str, Enum):
    FISHER = "fisher"
    SOBOLEV = "sobolev"
    GP = "gp"


# constraint kinds each IPM requires, exactly one placement per kind
IPM_CONSTRAINTS: dict[IpmKind, tuple[ConstraintKind, ...]] = {
    IpmKind.WGAN_CLIP: (),
    IpmKind.WGAN_GP: (ConstraintKind.GP,),
    IpmKind.FISHER: (ConstraintKind.FISHER,),
    IpmKind.SOBOLEV: (ConstraintKind.SOBOLEV,),
    IpmKind.FISHER_SOBOLEV: (ConstraintKind.FISHER, ConstraintKind.SOBOLEV),
}

GRADIENT_CONSTRAINTS = (ConstraintKind.SOBOLEV, ConstraintKind.GP)


@dataclass(frozen=True)
class Placement:
    constraint: ConstraintKind
    target: ConstraintTarget

    @classmethod
    def parse(cls, obj: Any) -> "Placement":
        if isinstance(obj, Placement):
            return obj
        if isinstance(obj, dict):
            _reject_unknown(obj, {"constraint", "target"}, "placement")
            return cls(ConstraintKind(obj["constraint"]), ConstraintTarget(obj["target"]))
        constraint, target = obj
        return cls(ConstraintKind(constraint), ConstraintTarget(target))

    def to_dict(self) -> dict:
        return {"constraint": self.constraint.value, "target": self.target.value}

    def __str__(self) -> str:
        return f"{self.constraint.value}({self.target.value})"


@dataclass(frozen=True)
class NormSpec:
    """Critic normalization.

    kind is "batch", "layer" or "none".  For "layer", ``stats`` picks where
    mean/variance are pooled ("singleton" over C*H*W, or "channel" per feature
    map) and ``params`` the shape of the scale/bias ("channel" -> (C,1,1),
    "pixel" -> (1,H,W)).
    """

    kind: str = "none"
    stats: str | None = None
    params: str | None = None

    def __post_init__(self):
        if self.kind not in ("batch", "layer", "none"):
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.kind == "layer":
            if self.stats not in ("singleton", "channel"):
                raise ValueError(f"layer norm stats scope must be singleton|channel, got {self.stats!r}")
            if self.params not in ("channel", "pixel"):
                raise ValueError(f"layer norm param scope must be channel|pixel, got {self.params!r}")
        elif self.stats is not None or self.params is not None:
            raise ValueError(f"{self.kind} normalization takes no stats/params scope")

    @classmethod
    def parse(cls, obj: Any) -> "NormSpec":
        if isinstance(obj, NormSpec):
            return obj
        if isinstance(obj, str):
            return cls(obj)
        _reject_unknown(obj, {"kind", "stats", "params"}, "norm")
        return cls(obj.get("kind", "none"), obj.get("stats"), obj.get("params"))

    def to_dict(self) -> dict:
        if self.kind == "layer":
            return {"kind": "layer", "stats": self.stats, "params": self.params}
        return {"kind": self.kind}

    def __str__(self) -> str:
        if self.kind == "layer":
            return f"ln[{self.stats}/{self.params}]"
        return self.kind


LAYER_NORM_VARIANTS = tuple(
    NormSpec("layer", s, p) for s in ("singleton", "channel") for p in ("channel", "pixel")
)


@dataclass(frozen=True)
class HyperParams:
    lr_critic: float = 2e-4
    lr_gen: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_ce: float = 1.5
    lambda_ce_plain: float = 0.1
    rho_f: float = 1e-7
    rho_s: float = 1e-8
    lambda_gp: float = 10.0
    n_critic: int = 2
    wd_backbone: float = 1e-6
    wd_v: float = 1e-3
    clip_c: float = 0.01
    epochs: int = 10
    batch_size: int = 64


def default_hyperparams(ipm: IpmKind | None, formulation: CriticFormulation) -> HyperParams:
    """Adam(2e-4, 0.5, 0.999), rho_F=1e-7, rho_S=1e-8, n_c=2; WGAN-GP: lambda_GP=10, n_c=5, lr=1e-4.

    ``lambda_ce`` is the CE weight used in training; it is set from
    ``lambda_ce_plain`` (0.1) for the plain critic and stays 1.5 for K+1.
    """
    hp = HyperParams()
    if formulation == CriticFormulation.PLAIN:
        hp = dataclasses.replace(hp, lambda_ce=hp.lambda_ce_plain)
    if ipm == IpmKind.WGAN_GP:
        hp = dataclasses.replace(hp, lambda_gp=10.0, n_critic=5, lr_critic=1e-4, lr_gen=1e-4)
    return hp


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    n_classes: int = 4
    n_per_class: int = 500
    input_dim: int = 2
    radius: float = 4.0
    std: float = 0.5
    path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class ArchSpec:
    """Network shapes.  ``kind`` "mlp" uses ``hidden`` widths; "conv" uses
    ``channels`` for 3x3 conv layers (stride 2 after the first) then a dense
    layer to ``feature_dim``."""

    kind: str = "mlp"
    hidden: tuple[int, ...] = (128, 128)
    channels: tuple[int, ...] = (16, 32)
    feature_dim: int = 64
    leaky_slope: float = 0.2
    noise_dim: int = 16
    gen_hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self):
        if self.kind not in ("mlp", "conv"):
            raise ValueError(f"unknown arch kind {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "gen_hidden", tuple(int(h) for h in self.gen_hidden))


TOP_LEVEL_KEYS = ("mode", "ipm", "formulation", "placements", "norm", "hyper",
                  "dataset", "n_labeled", "arch", "seed")


@dataclass(frozen=True)
class ExperimentConfig:
    ipm: IpmKind | None = IpmKind.FISHER
    formulation: CriticFormulation = CriticFormulation.K_PLUS_ONE
    placements: tuple[Placement, ...] = (Placement(ConstraintKind.FISHER, ConstraintTarget.FULL),)
    norm: NormSpec = field(default_factory=NormSpec)
    hyper: HyperParams = field(default_factory=HyperParams)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_labeled: int = 40
    arch: ArchSpec = field(default_factory=ArchSpec)
    seed: int = 0
    mode: str = "ssl"

    @property
    def n_classes(self) -> int:
        return 10 if self.dataset.kind == "cifar10" else self.dataset.n_classes

    @property
    def lambda_ce(self) -> float:
        return self.hyper.lambda_ce

    def placement(self, kind: ConstraintKind) -> Placement | None:
        for p in self.placements:
            if p.constraint == kind:
                return p
        return None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ipm": None if self.ipm is None else self.ipm.value,
            "formulation": self.formulation.value,
            "placements": [p.to_dict() for p in self.placements],
            "norm": self.norm.to_dict(),
            "hyper": dataclasses.asdict(self.hyper),
            "dataset": dataclasses.asdict(self.dataset),
            "n_labeled": self.n_labeled,
            "arch": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in dataclasses.asdict(self.arch).items()},
            "seed": self.seed,
        }


class ConfigError(ValueError):
    pass


def _reject_unknown(obj: dict, allowed, where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(cls, obj: dict | None, where: str, base=None):
    obj = obj or {}
    names = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(obj, names, where)
    if base is None:
        return cls(**obj)
    return dataclasses.replace(base, **obj)


def infer_ipm(placements) -> IpmKind:
    """The IPM implied by a set of placements, e.g. {fisher, sobolev} -> fisher_sobolev."""
    kinds = tuple(sorted({Placement.parse(p).constraint for p in placements}, key=lambda k: k.value))
    for ipm, needed in IPM_CONSTRAINTS.items():
        if tuple(sorted(needed, key=lambda k: k.value)) == kinds:
            return ipm
    raise ConfigError(f"no IPM uses constraint set {[k.value for k in kinds]}")


def parse_config(obj: dict) -> ExperimentConfig:
    """Build a config from a decoded JSON object.  Unknown keys raise ConfigError."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(obj, TOP_LEVEL_KEYS, "config")
    try:
        mode = obj.get("mode", "ssl")
        if mode not in ("ssl", "supervised"):
            raise ConfigError(f"mode must be ssl|supervised, got {mode!r}")
        ipm = obj.get("ipm", IpmKind.FISHER.value)
        ipm = None if ipm is None else IpmKind(ipm)
        if ipm is None and mode == "ssl":
            raise ConfigError("ipm is required unless mode is supervised")
        formulation = CriticFormulation(obj.get("formulation", CriticFormulation.K_PLUS_ONE.value))
        if "placements" in obj:
            placements = tuple(Placement.parse(p) for p in obj["placements"])
        elif ipm is not None:
            placements = tuple(Placement(k, ConstraintTarget.FULL) for k in IPM_CONSTRAINTS[ipm])
        else:
            placements = ()
        hyper = _build(HyperParams, obj.get("hyper"), "hyper", default_hyperparams(ipm, formulation))
        arch = _build(ArchSpec, obj.get("arch"), "arch")
        return ExperimentConfig(
            ipm=ipm,
            formulation=formulation,
            placements=placements,
            norm=NormSpec.parse(obj.get("norm", "none")),
            hyper=hyper,
            dataset=_build(DatasetSpec, obj.get("dataset"), "dataset"),
            n_labeled=int(obj.get("n_labeled", 40)),
            arch=arch,
            seed=int(obj.get("seed", 0)),
            mode=mode,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(json.load(fh))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def apply_overrides(obj: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings to a raw config dict (values parsed as JSON when possible)."""
    obj = json.loads(json.dumps(obj))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = obj
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return obj


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __str__(self) -> str:
        lines = [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) if lines else "ok"


def validate_config(cfg: ExperimentConfig) -> ValidationReport:
    report = ValidationReport()
    err, warn = report.errors.append, report.warnings.append

    if cfg.mode == "ssl":
        needed = IPM_CONSTRAINTS[cfg.ipm]
        kinds = [p.constraint for p in cfg.placements]
        if sorted(k.value for k in kinds) != sorted(k.value for k in needed):
            err(f"placements {[str(p) for p in cfg.placements]} do not match ipm {cfg.ipm.value} "
                f"(needs one placement each for {[k.value for k in needed]})")

    if cfg.formulation == CriticFormulation.PLAIN:
        for p in cfg.placements:
            if p.target != ConstraintTarget.FULL:
                err(f"placement {p} targets {p.target.value} but the plain critic has no f_plus/f_minus")

    if cfg.norm.kind == "batch":
        grad = [str(p) for p in cfg.placements if p.constraint in GRADIENT_CONSTRAINTS]
        if grad:
            err(f"BN incompatible with gradient-norm constraint: {', '.join(grad)} "
                "(batch norm couples samples, so per-sample input gradients are ill-defined)")
    if cfg.norm.kind == "layer" and cfg.norm.stats == "channel" and cfg.arch.kind != "conv":
        err("per-channel layer norm statistics need a conv critic (dense layers have one value per channel)")
    if cfg.arch.kind == "conv" and cfg.dataset.kind != "cifar10":
        err("conv critic needs image data (dataset kind cifar10)")

    if cfg.placements and cfg.formulation != CriticFormulation.PLAIN:
        targets = {p.target for p in cfg.placements}
        if targets == {ConstraintTarget.FAKE}:
            warn("all constraints on f_minus only: f_plus is bounded by the CE term alone, "
                 "which is expected to fail")
        elif ConstraintTarget.FULL not in targets and ConstraintTarget.FAKE not in targets:
            warn("no constraint acts on f_minus (directly or through f): the critic is unbounded")

    hp = cfg.hyper
    for name in ("lr_critic", "lr_gen", "clip_c"):
        if not getattr(hp, name) > 0:
            err(f"hyper.{name} must be positive")
    for name in ("adam_beta1", "adam_beta2"):
        if not 0 < getattr(hp, name) < 1:
            err(f"hyper.{name} must lie in (0, 1)")
    for name in ("lambda_ce", "lambda_ce_plain", "rho_f", "rho_s", "lambda_gp", "wd_backbone", "wd_v"):
        if getattr(hp, name) < 0:
            err(f"hyper.{name} must be nonnegative")
    for name in ("n_critic", "batch_size"):
        if getattr(hp, name) < 1:
            err(f"hyper.{name} must be a positive integer")
    if hp.epochs < 0:
        err("hyper.epochs must be nonnegative")

    if cfg.n_classes < 2:
        err("need at least 2 classes")
    if cfg.n_labeled < cfg.n_classes:
        err(f"n_labeled={cfg.n_labeled} is below the class count {cfg.n_classes}")
    if cfg.dataset.kind == "synthetic" and cfg.dataset.input_dim < 2:
        err("synthetic dataset needs input_dim >= 2")
    return report
