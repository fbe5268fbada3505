"""Semantic label-map conditions shared by the dataset, networks and samplers.

A condition is the one-hot encoding of the end-diastole segmentation map
over the four classes {background, epicardium, myocardium, left atrium}.
The null condition (used for classifier-free training and guidance) is the
all-zero map, which is distinguishable from "all background" because
background is the channel-0 one-hot vector.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractViolation, DatasetError

NUM_CLASSES = 4
CLASS_NAMES = ("background", "epicardium", "myocardium", "left_atrium")


@dataclass
class SemanticCondition:
    """One-hot condition map, shape (num_classes, H, W), plus a null flag."""

    onehot: torch.Tensor
    is_null: bool = False

    @property
    def height(self) -> int:
        return int(self.onehot.shape[-2])

    @property
    def width(self) -> int:
        return int(self.onehot.shape[-1])

    @property
    def channels(self) -> int:
        return int(self.onehot.shape[0])

    def validate(self) -> None:
        if self.onehot.dim() != 3:
            raise ContractViolation(f"condition must be (C, H, W), got {tuple(self.onehot.shape)}")
        sums = self.onehot.sum(dim=0)
        if self.is_null:
            if not torch.all(self.onehot == 0):
                raise ContractViolation("null condition must be all-zero")
        elif not torch.allclose(sums, torch.ones_like(sums)):
            raise ContractViolation("one-hot condition must sum to 1 per pixel")


def one_hot_labels(label_map: torch.Tensor) -> SemanticCondition:
    """Encode an integer class map (H, W) with ids in {0..3} as a one-hot condition."""
    m = torch.as_tensor(label_map)
    if m.dim() != 2:
        raise DatasetError(f"label map must be 2-D, got shape {tuple(m.shape)}")
    m = m.long()
    if m.numel() and (m.min().item() < 0 or m.max().item() >= NUM_CLASSES):
        bad = sorted(set(m.unique().tolist()) - set(range(NUM_CLASSES)))
        raise DatasetError(f"label map contains out-of-range class ids {bad}; expected 0..{NUM_CLASSES - 1}")
    onehot = F.one_hot(m, NUM_CLASSES).permute(2, 0, 1).float()
    return SemanticCondition(onehot=onehot, is_null=False)


def null_condition(height: int, width: int, channels: int = NUM_CLASSES) -> SemanticCondition:
    """The all-zero condition standing in for 'no semantic map'."""
    return SemanticCondition(onehot=torch.zeros(channels, height, width), is_null=True)


def null_like(x: SemanticCondition) -> SemanticCondition:
    return SemanticCondition(onehot=torch.zeros_like(x.onehot), is_null=True)


def replicate_condition(x: SemanticCondition, num_frames: int) -> torch.Tensor:
    """Duplicate the condition along a new leading temporal axis -> (K, C, H, W)."""
    if num_frames < 1:
        raise ContractViolation(f"frame count must be >= 1, got {num_frames}")
    return x.onehot.unsqueeze(0).expand(num_frames, -1, -1, -1).clone()


def resize_condition(x: SemanticCondition, height: int, width: int) -> SemanticCondition:
    """Nearest-neighbor resize of the one-hot map, preserving hard class boundaries."""
    resized = F.interpolate(x.onehot.unsqueeze(0), size=(height, width), mode="nearest").squeeze(0)
    return SemanticCondition(onehot=resized, is_null=x.is_null)


def condition_batch(conditions: list[SemanticCondition]) -> torch.Tensor:
    """Stack conditions into a (B, C, H, W) tensor; shapes must agree."""
    shapes = {tuple(c.onehot.shape) for c in conditions}
    if len(shapes) != 1:
        raise ContractViolation(f"conditions disagree on shape: {sorted(shapes)}")
    return torch.stack([c.onehot for c in conditions], dim=0)
