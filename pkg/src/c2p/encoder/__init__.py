"""Joint image-text embedding backbones with mergeable low-rank adapters."""

from .adapters import (
    AdapterConfig,
    LoraLinear,
    adapter_parameters,
    adapter_state_dict,
    attach_adapters,
    count_parameters,
    has_adapters,
    load_adapter_state_dict,
    merge_adapters,
)
from .base import EmbeddingBatch, encode_image, encode_text, l2_normalize
from .toy import ToyBackend

__all__ = [
    "AdapterConfig",
    "LoraLinear",
    "EmbeddingBatch",
    "ToyBackend",
    "adapter_parameters",
    "adapter_state_dict",
    "attach_adapters",
    "count_parameters",
    "encode_image",
    "encode_text",
    "has_adapters",
    "l2_normalize",
    "load_adapter_state_dict",
    "merge_adapters",
]


def build_backend(name: str, seed: int = 123, **kwargs):
    """Instantiate a backend by its CLI name (``toy`` or ``pretrained``)."""
    if name == "toy":
        return ToyBackend(seed=seed, **kwargs)
    if name == "pretrained":
        from .pretrained import PretrainedClipBackend

        return PretrainedClipBackend(**kwargs)
    from ..errors import InvalidInputError

    raise InvalidInputError(f"unknown backend: {name!r} (expected 'toy' or 'pretrained')")
