from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

ABLATIONS = ("no_gate", "no_gana", "no_mtransh")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters of a meta-training run.

    ``hid1``/``hid2`` are per-direction Bi-LSTM hidden sizes; ``None`` means
    ``2*d`` and ``d``. ``query_size=None`` means ``K`` queries per episode.
    """

    d: int = 100
    K: int = 5
    hid1: int | None = None
    hid2: int | None = None
    batch_tasks: int = 64
    l_r: float = 0.001
    l_p: float = 0.001
    outer_lr: float = 0.001
    gamma: float = 1.0
    max_neighbors: int = 50
    norm: str = "L2"
    activation: str = "relu"
    eval_every: int = 1000
    patience: int = 10
    max_steps: int = 100_000
    seed: int = 0
    ablation: tuple[str, ...] = ()
    finetune_embeddings: bool = False
    second_order: bool = False
    shuffle_support: bool = False
    query_size: int | None = None
    negatives_per_positive: int = 1
    inner_steps: int = 1
    unit_norm: bool = True
    optimizer: str = "sgd"
    clip_grad_norm: float | None = None
    eval_seed: int = 1234
    category_threshold: float = 1.5

    def __post_init__(self):
        self.ablation = tuple(sorted(set(self.ablation)))
        self.validate()

    def validate(self) -> None:
        for name in ("l_r", "l_p", "outer_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        for name in ("d", "K", "batch_tasks", "max_neighbors", "eval_every", "patience",
                     "negatives_per_positive", "inner_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.query_size is not None and self.query_size < 1:
            raise ConfigError("query_size must be >= 1")
        if self.norm not in ("L1", "L2"):
            raise ConfigError(f"norm must be L1 or L2, got {self.norm!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.activation not in ("relu", "tanh", "identity", "leaky_relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        if {"no_gana", "no_gate"} <= set(self.ablation):
            raise ConfigError("no_gate is meaningless once the aggregator is removed (no_gana)")

    @property
    def hidden_sizes(self) -> tuple[int, int]:
        return (self.hid1 or 2 * self.d, self.hid2 or self.d)

    @property
    def queries_per_episode(self) -> int:
        return self.query_size or self.K

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ablation"] = list(self.ablation)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "ablation" in data:
            data["ablation"] = tuple(data["ablation"])
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)
