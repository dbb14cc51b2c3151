"""Architecture hyperparameters shared by the model and graph modules."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab_size: int
    max_seq_len: int = 32
    layernorm_enabled: bool = True
    ln_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads * d_head "
                f"({self.n_heads} * {self.d_head})"
            )
        if not self.ln_epsilon > 0:
            raise ValueError("ln_epsilon must be positive")

    @classmethod
    def from_shape(cls, n_layers: int, n_heads: int, d_head: int = 1, **kwargs) -> "ModelConfig":
        """Config for graph enumeration where only (layers, heads) matter."""
        kwargs.setdefault("d_mlp", 1)
        kwargs.setdefault("vocab_size", 1)
        return cls(n_layers=n_layers, n_heads=n_heads, d_model=n_heads * d_head, d_head=d_head, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)
