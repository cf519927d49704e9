"""Run configuration: validation, defaults, JSON round-trip.

Every run writes its fully resolved configuration next to its outputs;
re-running from that file reproduces the results exactly.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .data import DataConfig, SyntheticSpec
from .errors import ConfigError
from .expert import ModelConfig

MODES = ("fmoe", "local_only", "fedavg", "no_gate", "no_freeze",
         "drop_expert", "two_phase")

SYNTHETIC_PRESETS = {
    "default": SyntheticSpec(num_domains=3, items_per_domain=200,
                             users_per_domain=500, min_len=10, max_len=16,
                             num_clusters=8, correlation=1.0),
}


@dataclasses.dataclass
class RunConfig:
    # scenario source (exactly one unless a ScenarioSpec is passed directly)
    scenario_manifest: str | None = None
    synthetic: dict | None = None

    mode: str = "fmoe"
    rounds: int = 60
    local_epochs: int = 3
    patience: int = 10
    batch_size: int = 256
    learning_rate: float = 0.001
    dropout: float = 0.3

    width: int = 64
    blocks: int = 2
    heads: int = 1
    ff_mult: int = 4
    gnn_depth: int = 2
    t_max: int = 16
    temperature: float = 1.0
    shuffle_ratio: float = 0.6

    rec_weight: float = 1.0
    con_weight: float = 1.0
    moe_weight: float = 1.0

    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    seed: int = 0
    precision: str = "float32"
    parallel_clients: bool = False
    gate_hidden_dim: int = 0
    moe_grad_to_experts: bool = False
    exclude_seen: bool = False
    eval_batch: int = 512

    drop_domain: str | None = None   # drop_expert mode
    pretrain_epochs: int = 0         # two_phase mode

    min_interactions: int = 10
    min_len: int = 4
    max_len: int = 16
    apply_filters: bool = True
    eval_ratio: float = 0.2

    out_dir: str | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "drop_expert" and not self.drop_domain:
            raise ConfigError("drop_expert mode needs drop_domain")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        for name, lo in (("rounds", 1), ("local_epochs", 1), ("batch_size", 1),
                         ("width", 1), ("blocks", 1), ("heads", 1), ("ff_mult", 1),
                         ("t_max", 1), ("eval_batch", 1)):
            if getattr(self, name) < lo:
                raise ConfigError(f"{name} must be >= {lo}")
        if self.patience < 0 or self.gnn_depth < 0 or self.pretrain_epochs < 0:
            raise ConfigError("patience, gnn_depth, pretrain_epochs must be >= 0")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if not 0.0 < self.learning_rate:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.shuffle_ratio <= 1.0:
            raise ConfigError("shuffle_ratio must lie in [0, 1]")
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be positive")
        if not 0.0 < self.eval_ratio < 1.0:
            raise ConfigError("eval_ratio must lie in (0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(width=self.width, blocks=self.blocks, heads=self.heads,
                           ff_mult=self.ff_mult, gnn_depth=self.gnn_depth,
                           t_max=self.t_max, dropout=self.dropout,
                           temperature=self.temperature)

    def data_config(self) -> DataConfig:
        return DataConfig(min_interactions=self.min_interactions,
                          min_len=self.min_len, max_len=self.max_len,
                          eval_ratio=self.eval_ratio, t_max=self.t_max,
                          apply_filters=self.apply_filters)

    def synthetic_spec(self) -> SyntheticSpec:
        if self.synthetic is None:
            raise ConfigError("no synthetic spec configured")
        spec = dict(self.synthetic)
        spec.setdefault("seed", self.seed)
        try:
            return SyntheticSpec(**spec)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
