"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossConfig

ABLATION_COMPONENTS = ("PIG", "PSGA", "IORM", "APA")


@dataclass
class RunConfig:
    # model dims
    channels: int = 512
    n_points: int = 2048
    n_large: int = 64
    n_small: int = 128
    max_len: int = 40
    k_large: int = 8
    k_small: int = 16
    heads: int = 8
    k_group: int = 16
    # losses
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    loss_eps: float = 1e-6
    tau: float = 0.07
    beta_align: float = 0.2
    beta_proto: float = 0.6
    # optimizer / schedule
    lr: float = 6e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 42
    # ablation switches
    pig: bool = True
    psga: bool = True
    iorm: bool = True
    apa: bool = True
    cmfm_on_enhanced: bool = True
    # data
    data_dir: str = "data"
    samples_per_pair: int = 6
    test_per_pair: int = 1
    n_classes: int = 14
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if not self.pig:
            # the part token and the prototype targets both come from the structured instruction
            self.psga = False
            self.apa = False

    def loss_config(self) -> LossConfig:
        beta_align = self.beta_align if self.psga else 0.0
        beta_proto = self.beta_proto if self.apa else 0.0
        return LossConfig(self.focal_alpha, self.focal_gamma, self.loss_eps, self.tau, beta_align, beta_proto)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in d.items():
            kind = types[key]
            if not isinstance(raw, str):
                kwargs[key] = raw
            elif kind == "bool":
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw.strip()
        return cls(**kwargs)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        parser.read_string("[run]\n" + text)
        return cls.from_dict(dict(parser["run"]))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def ablated(config: RunConfig, component: str) -> RunConfig:
    """Config with one component switched off (removing PIG also removes PSGA and APA)."""
    key = component.upper()
    if key not in ABLATION_COMPONENTS:
        raise ValueError(f"unknown ablation component {component!r}; expected one of {ABLATION_COMPONENTS}")
    return config.replace(**{key.lower(): False})


def tiny_config(**overrides) -> RunConfig:
    """Dimensions used for gradient checks."""
    base = dict(channels=16, n_points=64, n_large=8, n_small=16, max_len=8, k_large=3, k_small=4,
                heads=2, k_group=8)
    base.update(overrides)
    return RunConfig(**base)


def desk_config(**overrides) -> RunConfig:
    """Small dimensions that train in about a minute on one core."""
    base = dict(channels=32, n_points=256, n_large=16, n_small=32, max_len=20, k_large=4, k_small=6,
                heads=4, k_group=12, lr=3e-3)
    base.update(overrides)
    return RunConfig(**base)
