"""
Pydantic models for the two-branch fusion network.

This module defines:
1. Route and FusionStrategy enums
2. BranchConfig, one convolutional branch (three blocks, eight conv layers)
3. ModelConfig, the architecture (`model.` keys)
"""

from enum import Enum
from typing import List, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class Route(str, Enum):
    """Inference route; which head(s) answer"""
    VISION = "vision"
    ACOUSTIC = "acoustic"
    FUSION = "fusion"

    @classmethod
    def parse(cls, value: str) -> "Route":
        """Accept the full name or its first letter (v, a, f)."""
        shorthand = {"v": cls.VISION, "a": cls.ACOUSTIC, "f": cls.FUSION}
        key = value.strip().lower()
        if key in shorthand:
            return shorthand[key]
        return cls(key)


class FusionStrategy(str, Enum):
    """How an HCAM merges the two modalities"""
    CAT = "cat"
    AVG = "avg"
    RES = "res"
    WBLN = "wbln"
    CA = "ca"


class BranchConfig(BaseModel):
    """One modality branch: three conv blocks, each ending in a 2x2 max pool."""
    input_shape: Tuple[int, int, int] = Field(..., description="(channels, height, width)")
    block_layer_counts: Tuple[int, int, int] = (3, 3, 2)
    channels: Tuple[int, int, int] = (16, 32, 64)

    @field_validator("block_layer_counts")
    @classmethod
    def check_layers(cls, v):
        if any(n < 1 for n in v):
            raise ValueError("every block needs at least one conv layer")
        if sum(v) != 8:
            raise ValueError(f"block layer counts must total 8, got {sum(v)}")
        return v

    def block_output_sizes(self) -> List[Tuple[int, int]]:
        """Spatial size after each block."""
        _, h, w = self.input_shape
        sizes = []
        for _ in range(3):
            h, w = h // 2, w // 2
            sizes.append((h, w))
        return sizes


class ModelConfig(BaseModel):
    """
    Architecture hyperparameters.

    Input resolutions, the per-block layer split, channel widths, the
    attention dimension and the HCAM grids are implementation defaults.
    """
    image_size: int = Field(32, ge=8, description="Vision input is 3 x image_size x image_size")
    acoustic_shape: Tuple[int, int] = Field((33, 30), description="Spectrogram (freq bins, frames)")
    block_layers: Tuple[int, int, int] = (3, 3, 2)
    vision_channels: Tuple[int, int, int] = (16, 32, 64)
    acoustic_channels: Tuple[int, int, int] = (16, 32, 64)
    attention_dim: int = Field(32, ge=1)
    hcam_grids: Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]] = ((4, 4), (4, 4), (2, 2))
    hcam_stages: Tuple[int, ...] = (1, 2, 3)
    fusion: FusionStrategy = FusionStrategy.CA
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)

    @field_validator("hcam_stages")
    @classmethod
    def check_stages(cls, v):
        if tuple(v) not in {(3,), (2, 3), (1, 2, 3)}:
            raise ValueError(f"hcam_stages must be one of (3), (2, 3), (1, 2, 3); got {tuple(v)}")
        return tuple(v)

    @model_validator(mode="after")
    def check_grids(self):
        vision, acoustic = self.vision_branch(), self.acoustic_branch()
        for k, (v_size, a_size, grid) in enumerate(
            zip(vision.block_output_sizes(), acoustic.block_output_sizes(), self.hcam_grids), start=1
        ):
            if min(v_size + a_size) < 1:
                raise ValueError(f"block {k} output is empty (vision {v_size}, acoustic {a_size})")
            if k in self.hcam_stages and (
                grid[0] > min(v_size[0], a_size[0]) or grid[1] > min(v_size[1], a_size[1])
            ):
                raise ValueError(
                    f"HCAM {k} grid {grid} exceeds block outputs (vision {v_size}, acoustic {a_size})"
                )
        return self

    def vision_branch(self) -> BranchConfig:
        return BranchConfig(
            input_shape=(3, self.image_size, self.image_size),
            block_layer_counts=self.block_layers,
            channels=self.vision_channels,
        )

    def acoustic_branch(self) -> BranchConfig:
        return BranchConfig(
            input_shape=(1, *self.acoustic_shape),
            block_layer_counts=self.block_layers,
            channels=self.acoustic_channels,
        )
