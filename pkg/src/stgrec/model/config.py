from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from ..geo import Mapping, SpatialEncodingConfig


class Variant(enum.Enum):
    FULL = "full"
    NO_SE = "no-se"
    NO_SE_RADIUS = "no-se-radius"
    PE = "pe"


@dataclass(frozen=True)
class ModelConfig:
    c: int = 128
    c_t: int = 128
    layers: int = 2
    neighbors: int = 20
    tau: float = 1.0
    mapping: Mapping = Mapping.IDENTITY
    use_residual: bool = False
    variant: Variant = Variant.FULL
    radius_km: float = 5.0
    time_unit_s: float = 3600.0      # time differences enter the encoder in this unit

    def __post_init__(self):
        for name in ("c", "c_t", "layers", "neighbors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.time_unit_s > 0:
            raise ValueError("time_unit_s must be > 0")
        if self.variant is Variant.NO_SE_RADIUS and not self.radius_km > 0:
            raise ValueError("radius_km must be > 0")

    @property
    def spatial(self) -> SpatialEncodingConfig:
        return SpatialEncodingConfig(self.tau, self.mapping)

    @property
    def uses_spatial_encoding(self) -> bool:
        return self.variant in (Variant.FULL, Variant.PE)

    @property
    def uses_position_encoding(self) -> bool:
        return self.variant is Variant.PE

    @property
    def recall_radius_km(self):
        """Candidate recall radius applied at ranking time, or None."""
        return self.radius_km if self.variant is Variant.NO_SE_RADIUS else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mapping"] = self.mapping.value
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mapping"] = Mapping(d["mapping"])
        d["variant"] = Variant(d["variant"])
        return cls(**d)
