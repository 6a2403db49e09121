"""Model hyperparameters and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("full", "no_od_split", "no_global", "no_local", "no_mpi", "single")

# command-line shorthands and the variant names used in reports
ABLATION_ALIASES = {
    "full": "full",
    "od": "no_od_split",
    "g": "no_global",
    "l": "no_local",
    "m": "no_mpi",
    "single": "single",
}
VARIANT_NAMES = {
    "full": "FusionTransNet",
    "no_od_split": "FusionTransNet-OD",
    "no_global": "FusionTransNet-G",
    "no_local": "FusionTransNet-L",
    "no_mpi": "FusionTransNet-M",
    "single": "FusionTransNet-Single",
}
GLOBAL_CANDIDATES = ("mode_restricted", "all_nodes")


def resolve_ablation(tag: str) -> str:
    if tag in ABLATIONS:
        return tag
    if tag in ABLATION_ALIASES:
        return ABLATION_ALIASES[tag]
    raise ConfigError(f"unknown ablation tag {tag!r}; expected one of {sorted(ABLATION_ALIASES)}")


@dataclass
class ModelConfig:
    window: int = 3
    d_c: int = 8
    d_e: int = 8
    depth: int = 1
    leaky_slope: float = 0.01
    learning_rate: float = 0.02
    weight_decay: float = 1e-4
    epochs: int = 15
    batch_size: int = 32
    eta: dict[str, float] = field(default_factory=dict)
    ablation: str = "full"
    seed: int = 0
    global_candidates: str = "mode_restricted"
    max_candidates: int | None = None
    zero_target: str = "skip"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_c", "d_e"):
            value = getattr(self, name)
            if value <= 0 or value % 2:
                raise ConfigError(f"{name} must be even and positive, got {value}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.depth != 1:
            raise ConfigError("only one spatiotemporal block (depth=1) is supported")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        self.ablation = resolve_ablation(self.ablation)
        if self.global_candidates not in GLOBAL_CANDIDATES:
            raise ConfigError(f"global_candidates must be one of {GLOBAL_CANDIDATES}")
        if self.zero_target not in ("skip", "error"):
            raise ConfigError("zero_target must be 'skip' or 'error'")
        if any(v <= 0 for v in self.eta.values()):
            raise ConfigError(f"eta weights must be positive, got {self.eta}")

    @property
    def d_p(self) -> int:
        return self.window * self.d_e

    def eta_for(self, mode: str) -> float:
        return float(self.eta.get(mode, 1.0))

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _parse_value(kind, raw: str):
    if raw.lower() in ("none", ""):
        return None
    if kind is bool:
        return raw.lower() in ("1", "true", "yes")
    return kind(raw)


def model_config_from_kv(values: dict[str, str], **overrides) -> ModelConfig:
    """Build a :class:`ModelConfig` from string values; keys of other sections are ignored."""
    kinds = {
        "window": int, "d_c": int, "d_e": int, "depth": int, "leaky_slope": float,
        "learning_rate": float, "weight_decay": float, "epochs": int, "batch_size": int,
        "ablation": str, "seed": int, "global_candidates": str, "max_candidates": int,
        "zero_target": str,
    }
    kwargs = {}
    try:
        for key, kind in kinds.items():
            if key in values:
                kwargs[key] = _parse_value(kind, values[key])
        if "eta" in values and values["eta"]:
            # eta = taxi:1.0,bus:2.0
            kwargs["eta"] = {
                k.strip(): float(v) for k, v in (p.split(":") for p in values["eta"].split(","))
            }
    except ValueError as exc:
        raise ConfigError(f"bad model config value: {exc}") from None
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**kwargs)
