"""Model hyperparameters with paper-scale defaults and a desk-scale profile."""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    d: int = 768
    n_enc: int = 3
    n_dec: int = 3
    ffn: int = 2048
    heads: int = 8
    dropout: float = 0.1
    d_roi: int = 2048
    max_len: int = 20
    embed_seed: int = 1234  # frozen word/positional embedding draw

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.max_len < 2 or self.d_roi < 1:
            raise ValueError("max_len must be >= 2 and d_roi >= 1")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @staticmethod
    def desk(**overrides) -> "ModelConfig":
        """Small profile sized for CPU tests and the ablation ladder."""
        base = ModelConfig(d=64, n_enc=1, n_dec=1, ffn=128, heads=4, d_roi=32, max_len=20)
        return replace(base, **overrides) if overrides else base
