from __future__ import annotations

from dataclasses import asdict, dataclass

from ..exceptions import InvalidParameterError


@dataclass(frozen=True)
class LmConfig:
    """Shape constants of the toy decoder-only transformer.

    ``context`` is the maximum input length (d_in), ``width`` the model
    width (d_mid), ``n_heads`` the head count (kappa).
    """

    n_layers: int = 8
    context: int = 64
    width: int = 64
    n_heads: int = 4
    ff_width: int = 256
    vocab_size: int = 100

    def __post_init__(self):
        for name in ("n_layers", "context", "width", "n_heads", "ff_width", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise InvalidParameterError(f"{name} must be positive")
        if self.n_layers < 2:
            raise InvalidParameterError("need at least 2 layers to split")
        if self.width % self.n_heads:
            raise InvalidParameterError(f"width {self.width} is not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        return cls(**d)
