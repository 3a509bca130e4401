"""Embedding batch container and the text/image encoding entry points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from ..errors import InvalidInputError


@dataclass
class EmbeddingBatch:
    """An NxD matrix of features plus whether rows are unit-normalized."""

    vectors: torch.Tensor
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.vectors.dim() != 2:
            raise InvalidInputError(f"expected an NxD matrix, got shape {tuple(self.vectors.shape)}")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def numpy(self):
        return self.vectors.detach().cpu().numpy()

    def check_finite(self) -> None:
        if len(self) and not torch.isfinite(self.vectors).all():
            raise InvalidInputError("embedding batch contains non-finite values")


def l2_normalize(batch: EmbeddingBatch) -> EmbeddingBatch:
    """Row-normalize; idempotent (normalizing twice changes nothing)."""
    if batch.normalized:
        return batch
    vectors = torch.nn.functional.normalize(batch.vectors, dim=-1)
    return EmbeddingBatch(vectors=vectors, normalized=True)


def encode_text(texts: Sequence, backend, normalize: bool = True) -> EmbeddingBatch:
    """Embed texts (strings or enhanced captions) with the frozen text tower."""
    raw = [t if isinstance(t, str) else t.text for t in texts]
    vectors = backend.encode_text(raw)
    batch = EmbeddingBatch(vectors=vectors, normalized=False)
    batch.check_finite()
    return l2_normalize(batch) if normalize else batch


def encode_image(
    images: torch.Tensor,
    backend,
    training: bool = False,
    normalize: bool = False,
) -> EmbeddingBatch:
    """Embed a preprocessed Nx3xSxS batch with the (possibly adapted) image tower."""
    vectors = backend.encode_image(images, training=training)
    batch = EmbeddingBatch(vectors=vectors, normalized=False)
    if not training:
        batch.check_finite()
    return l2_normalize(batch) if normalize else batch
