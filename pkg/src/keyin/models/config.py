from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    N: int = 6
    J: int = 10
    T: int = 30
    C: int = 5
    embed_dim: int = 128
    hidden_dim: int = 256
    lstm_layers: int = 2
    latent_dim: int = 32
    inpaint_latent_dim: int = 8
    base_channels: int = 32
    enc_layers: int | None = None
    beta: float = 5e-2
    beta_I: float = 1.0
    beta_kappa: float = 1.0
    beta_K: float = 0.0
    beta_inpaint: float = 1e-3
    inpaint_mean_weight: float = 1.0
    recon: str = "bce"
    embed_recon: str = "l2"
    fixed_offset: int | None = None
    # the inference network also reads e_t - e_{t-1}, so it sees motion without learning to difference
    inference_differences: bool = True
    offset_decoding: str = "argmax"

    def __post_init__(self):
        if self.enc_layers is None:
            self.enc_layers = self.default_depth(self.image_size)
        self.validate()

    @staticmethod
    def default_depth(size: int) -> int:
        # 16 -> 2, 32 -> 3, 64 -> 4 stride-2 layers down to 4x4
        depth = int(round(math.log2(size))) - 2
        if depth < 1 or 2 ** (depth + 2) != size:
            raise ValueError(f"image size must be a power of two >= 8, got {size}")
        return depth

    def validate(self) -> None:
        for name in ("image_size", "channels", "N", "J", "T", "C", "embed_dim", "hidden_dim", "lstm_layers",
                     "latent_dim", "inpaint_latent_dim", "base_channels", "enc_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.N * self.J < self.T:
            raise ValueError(f"N*J = {self.N * self.J} must cover the horizon T = {self.T}")
        if 2 ** (self.enc_layers + 2) != self.image_size:
            raise ValueError(f"{self.enc_layers} encoder layers do not reduce {self.image_size} px to 4x4")
        if self.fixed_offset is not None and not 1 <= self.fixed_offset <= self.J:
            raise ValueError(f"fixed_offset must lie in [1, J={self.J}]")
        if self.inpaint_mean_weight < 0:
            raise ValueError("inpaint_mean_weight must be >= 0")
        if self.offset_decoding not in ("argmax", "sample"):
            raise ValueError("offset_decoding must be 'argmax' or 'sample'")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS: dict[str, dict[str, Any]] = {
    # CPU-scale SBM run
    "sbm-desk": dict(image_size=16, channels=1, N=4, J=7, T=20, C=5, embed_dim=64, hidden_dim=128,
                     latent_dim=16, base_channels=16),
    "sbm-paper": dict(image_size=32, channels=1, N=6, J=10, T=30, C=5),
    "push-desk": dict(image_size=32, channels=3, N=6, J=6, T=30, C=1, embed_dim=64, hidden_dim=128,
                      latent_dim=16, base_channels=16),
    "push-paper": dict(image_size=64, channels=3, N=6, J=6, T=30, C=1),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})
