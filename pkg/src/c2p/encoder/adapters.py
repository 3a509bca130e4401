"""Low-rank adapters on attention projections, with exact weight merging.

An adapter wraps a frozen ``nn.Linear`` and adds ``(alpha/rank) * B @ A`` to
its weight implicitly: the down-projection ``A`` is randomly initialized,
the up-projection ``B`` starts at zero, so a freshly attached adapter is an
exact no-op. After training, :func:`merge_adapters` folds the delta into the
base weight and returns a plain module with the backbone's parameter count.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import AlreadyMergedError, InvalidInputError

DEFAULT_TARGETS = ("q_proj", "k_proj", "v_proj")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 6
    alpha: float = 6.0
    dropout: float = 0.8
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise InvalidInputError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidInputError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.targets:
            raise InvalidInputError("targets must be non-empty")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "targets": list(self.targets),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdapterConfig":
        return cls(
            rank=int(data["rank"]),
            alpha=float(data["alpha"]),
            dropout=float(data["dropout"]),
            targets=tuple(data["targets"]),
        )


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank residual."""

    def __init__(self, base: nn.Linear, config: AdapterConfig):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        dtype = base.weight.dtype
        self.lora_a = nn.Parameter(torch.empty(config.rank, base.in_features, dtype=dtype))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, config.rank, dtype=dtype))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.scaling = config.scaling
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        result = F.linear(x, self.base.weight, self.base.bias)
        delta = F.linear(F.linear(self.dropout(x), self.lora_a), self.lora_b)
        return result + delta * self.scaling

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_b @ self.lora_a)

    def to_merged_linear(self) -> nn.Linear:
        linear = nn.Linear(
            self.base.in_features,
            self.base.out_features,
            bias=self.base.bias is not None,
            dtype=self.base.weight.dtype,
        )
        with torch.no_grad():
            linear.weight.copy_(self.merged_weight())
            if self.base.bias is not None:
                linear.bias.copy_(self.base.bias)
        linear.weight.requires_grad_(False)
        if linear.bias is not None:
            linear.bias.requires_grad_(False)
        return linear


def attach_adapters(encoder: nn.Module, config: AdapterConfig) -> int:
    """Wrap every target projection in ``encoder`` with an adapter.

    All non-adapter parameters are frozen; only the adapters train. Returns
    the number of wrapped projections.
    """
    for p in encoder.parameters():
        p.requires_grad_(False)
    wrapped = 0
    for module in list(encoder.modules()):
        for child_name, child in list(module.named_children()):
            if child_name in config.targets:
                if isinstance(child, LoraLinear):
                    raise InvalidInputError(f"projection {child_name!r} already has an adapter")
                if isinstance(child, nn.Linear):
                    setattr(module, child_name, LoraLinear(child, config))
                    wrapped += 1
    if wrapped == 0:
        raise InvalidInputError(
            f"no projections named {config.targets} found in {type(encoder).__name__}"
        )
    return wrapped


def has_adapters(encoder: nn.Module) -> bool:
    return any(isinstance(m, LoraLinear) for m in encoder.modules())


def merge_adapters(encoder: nn.Module) -> nn.Module:
    """Fold adapter deltas into the base weights and drop the adapters.

    The input encoder is left untouched; the returned copy has exactly the
    backbone's parameter count and agrees with the adapted forward pass up
    to floating-point reassociation.
    """
    if not has_adapters(encoder):
        raise AlreadyMergedError("encoder carries no adapters to merge")
    merged = copy.deepcopy(encoder)
    for module in list(merged.modules()):
        for child_name, child in list(module.named_children()):
            if isinstance(child, LoraLinear):
                setattr(module, child_name, child.to_merged_linear())
    return merged


def adapter_parameters(encoder: nn.Module):
    for module in encoder.modules():
        if isinstance(module, LoraLinear):
            yield module.lora_a
            yield module.lora_b


def adapter_state_dict(encoder: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: tensor
        for name, tensor in encoder.state_dict().items()
        if name.endswith("lora_a") or name.endswith("lora_b")
    }


def load_adapter_state_dict(encoder: nn.Module, state: dict[str, torch.Tensor]) -> None:
    expected = set(adapter_state_dict(encoder).keys())
    provided = set(state.keys())
    if expected != provided:
        raise InvalidInputError(
            f"adapter state mismatch: missing {sorted(expected - provided)}, "
            f"unexpected {sorted(provided - expected)}"
        )
    encoder.load_state_dict(state, strict=False)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
