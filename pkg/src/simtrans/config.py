"""Training hyperparameters shared by the SimNet and classifier phases."""

from __future__ import annotations

from dataclasses import dataclass, fields

MODES = ("weakshot", "generalized")


@dataclass(frozen=True)
class TrainConfig:
    # full objective / adversarial trade-offs
    alpha: float = 0.1
    beta: float = 0.1
    # SimNet phase
    C_m: int = 10
    M: int = 100
    simnet_lr: float = 0.1
    simnet_epochs: int = 50
    pretrain_backbone: bool = True
    pretrain_epochs: int = 20
    eval_batches: int = 50
    # classifier phase
    lr: float = 0.005
    batch_size: int = 128
    epochs: int = 50
    # shared optimizer settings
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # architecture
    hidden_dim: int = 64
    embed_dim: int = 32
    relation_dim: int = 64
    disc_hidden: int = 32
    seed: int = 0
    mode: str = "weakshot"
    use_weights: bool = True
    use_reg: bool = True
    use_adversarial: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.C_m < 1 or self.M < 1 or self.M % self.C_m:
            raise ValueError("C_m must divide M")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]
