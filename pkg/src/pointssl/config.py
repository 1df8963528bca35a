"""Training configuration and per-step metrics records."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


@dataclass
class TrainConfig:
    """Desk-scale defaults; the full-scale reference values are noted inline."""

    points_per_cloud: int = 1024   # full scale: 1024
    patches: int = 64
    k_patch: int = 32
    k_graph: int = 4
    embed_dim: int = 96            # full scale: 384
    encoder_depth: int = 3         # full scale: 12
    decoder_depth: int = 2         # full scale: 4
    heads: int = 6
    clusters: int = 8              # headline run: 24
    temperature: float = 1.0
    mask_ratio: float = 0.6
    epsilon: float = 5e-4
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 8            # full scale: 128
    epochs: int = 1
    steps: int = 500               # full scale: 300 epochs
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        for name in ("points_per_cloud", "patches", "k_patch", "k_graph",
                     "embed_dim", "encoder_depth", "decoder_depth", "heads",
                     "clusters", "batch_size", "epochs", "steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class MetricsRecord:
    step: int
    l_ass: float
    l_cts: float
    l_contras: float
    l_total: float
    sinkhorn_iters: int
    sinkhorn_marginal_err: float
    grad_norm: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    CSV_HEADER = ("step,l_ass,l_cts,l_contras,l_total,"
                  "sinkhorn_iters,sinkhorn_marginal_err,grad_norm,wall_ms")

    def to_csv_row(self) -> str:
        return (f"{self.step},{self.l_ass:.17g},{self.l_cts:.17g},"
                f"{self.l_contras:.17g},{self.l_total:.17g},"
                f"{self.sinkhorn_iters},{self.sinkhorn_marginal_err:.17g},"
                f"{self.grad_norm:.17g},{self.wall_ms:.3f}")
