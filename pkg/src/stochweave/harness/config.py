"""Serializable experiment configuration and the named presets."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from stochweave.diffcore import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DOMAINS = ("toy", "grid-uncorrelated", "grid-onpolicy")
VARIANTS = ("mlp-det", "mlp-noise", "vae-gauss", "vae-flow", "vae-discrete")
VAE_VARIANTS = ("vae-gauss", "vae-flow", "vae-discrete")


@dataclass(frozen=True)
class ExperimentConfig:
    domain: str = "toy"
    variant: str = "vae-discrete"
    # latent layer (continuous variants use n_latent; discrete adds n_categories)
    n_latent: int = 3
    n_categories: int = 3
    n_flow: int = 5
    tau_start: float = 2.0
    tau_end: float = 0.001
    tau_fraction: float = 0.7
    # objective
    n_importance: int = 3
    alpha: float = 0.5
    free_bits: float = 0.07
    # data and optimisation
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 2000
    batch_size: int = 64
    n_steps: int = 30000
    lr_start: float = 0.005
    lr_end: float = 0.0005
    lr_fraction: float = 0.9
    generative_hidden: tuple[int, ...] = (50, 50, 50)
    inference_hidden: tuple[int, ...] = (30, 30)
    eval_every: int = 1000
    # evaluation
    seeds: tuple[int, ...] = tuple(range(10))
    eval_samples: int = 500
    n_probes: int = 200
    probe_samples: int = 10000
    # gridworld (None means the shipped default layout)
    layout: dict | None = None
    dqn: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("generative_hidden", "inference_hidden", "seeds"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant.startswith("mlp") and self.domain != "toy":
            raise ConfigError("MLP baselines are defined for the toy domain only")
        if min(self.n_train, self.n_val, self.n_test, self.batch_size, self.n_steps) < 1:
            raise ConfigError("dataset sizes, batch size and step count must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.eval_samples < 1 or self.n_probes < 1 or self.probe_samples < 1:
            raise ConfigError("evaluation sample counts must be positive")

    @property
    def latent_family(self) -> str:
        return {"vae-gauss": "gaussian", "vae-flow": "gaussian-flow",
                "vae-discrete": "discrete"}.get(self.variant, "gaussian")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        base = d.pop("preset", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = preset(base) if base else cls()
        return cfg.replace(**d)


def _grid(**kw) -> ExperimentConfig:
    base = dict(domain="grid-uncorrelated", variant="vae-discrete", n_latent=8, n_categories=4,
                n_flow=6, n_train=0, n_val=750, n_test=1500, batch_size=32, n_steps=75000,
                lr_start=0.0005, lr_end=0.0001, lr_fraction=0.7,
                generative_hidden=(250, 250, 250), inference_hidden=(100, 100),
                seeds=(0,))
    base.update(kw)
    # n_train is unused on the grid: every block of steps draws fresh transitions.
    base["n_train"] = max(base["n_train"], 1)
    return ExperimentConfig(**base)


PRESETS = {
    "toy": lambda: ExperimentConfig(),
    "grid": lambda: _grid(),
    "grid-onpolicy": lambda: _grid(domain="grid-onpolicy", variant="vae-gauss",
                                   n_steps=50000, dqn={"total_steps": 50000}),
}

# Latent sizes per variant and domain when a preset is re-targeted with --variant.
VARIANT_LATENTS = {
    ("toy", "vae-gauss"): {"n_latent": 3},
    ("toy", "vae-flow"): {"n_latent": 3, "n_flow": 5},
    ("toy", "vae-discrete"): {"n_latent": 3, "n_categories": 3},
    ("grid", "vae-gauss"): {"n_latent": 8},
    ("grid", "vae-flow"): {"n_latent": 8, "n_flow": 6},
    ("grid", "vae-discrete"): {"n_latent": 8, "n_categories": 4},
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def with_variant(config: ExperimentConfig, variant: str) -> ExperimentConfig:
    domain = "toy" if config.domain == "toy" else "grid"
    return config.replace(variant=variant, **VARIANT_LATENTS.get((domain, variant), {}))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a table/object at the top level")
    return ExperimentConfig.from_dict(data)
