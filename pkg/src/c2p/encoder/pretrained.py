"""Integration backend wrapping a pretrained ViT-L/14 joint encoder.

Requires the ``transformers`` package and locally available weights (set
``C2P_CACHE_DIR`` to a directory that already holds the model, or allow a
download). Nothing in the offline test suite depends on this module; it
exists so benchmark-scale runs use the same pipeline as the toy backend.
The vision tower names its attention projections ``q_proj``/``k_proj``/
``v_proj``, matching the default adapter targets.
"""

from __future__ import annotations

import os

import torch
import torch.nn as nn

from ..errors import C2PError, InvalidInputError

DEFAULT_MODEL = "openai/clip-vit-large-patch14"


class ClipImageTower(nn.Module):
    """Vision transformer plus the projection into the joint space."""

    def __init__(self, vision_model: nn.Module, visual_projection: nn.Module):
        super().__init__()
        self.vision_model = vision_model
        self.visual_projection = visual_projection

    def forward(self, pixel_values: torch.Tensor) -> torch.Tensor:
        outputs = self.vision_model(pixel_values=pixel_values)
        return self.visual_projection(outputs.pooler_output)


class PretrainedClipBackend:
    name = "pretrained"
    mode = "pretrained_vitL14"

    def __init__(
        self,
        model_name: str = DEFAULT_MODEL,
        cache_dir: str | None = None,
        with_text: bool = True,
        device: str = "cpu",
    ):
        cache_dir = cache_dir or os.environ.get("C2P_CACHE_DIR")
        try:
            from transformers import CLIPModel, CLIPTokenizerFast
        except ImportError as exc:
            raise C2PError(
                "the pretrained backend needs the 'transformers' package "
                "(pip install c2p[pretrained])"
            ) from exc
        try:
            model = CLIPModel.from_pretrained(model_name, cache_dir=cache_dir)
        except Exception as exc:
            raise C2PError(
                f"could not load pretrained weights for {model_name!r}; set "
                "C2P_CACHE_DIR to a directory containing the model or enable "
                f"network access ({exc})"
            ) from exc
        self.model_name = model_name
        self.device = device
        self.embed_dim = model.config.projection_dim
        self.max_text_tokens = model.config.text_config.max_position_embeddings
        self.image_encoder = ClipImageTower(model.vision_model, model.visual_projection).to(device)
        if with_text:
            self.text_model = model.text_model.to(device)
            self.text_projection = model.text_projection.to(device)
            self.tokenizer = CLIPTokenizerFast.from_pretrained(model_name, cache_dir=cache_dir)
        else:
            self.text_model = None
            self.text_projection = None
            self.tokenizer = None
        for p in self.image_encoder.parameters():
            p.requires_grad_(False)
        if self.text_model is not None:
            for p in self.text_model.parameters():
                p.requires_grad_(False)
            for p in self.text_projection.parameters():
                p.requires_grad_(False)

    @property
    def has_text_encoder(self) -> bool:
        return self.text_model is not None

    @property
    def text_encoder(self) -> nn.Module | None:
        return self.text_model

    def encode_text(self, texts: list[str]) -> torch.Tensor:
        if self.text_model is None:
            raise InvalidInputError("this backend was loaded without its text tower")
        # Tokenizer truncation drops the caption tail, never the prompt prefix.
        tokens = self.tokenizer(
            list(texts),
            padding=True,
            truncation=True,
            max_length=self.max_text_tokens,
            return_tensors="pt",
        ).to(self.device)
        with torch.no_grad():
            outputs = self.text_model(**tokens)
            return self.text_projection(outputs.pooler_output)

    def encode_image(self, images: torch.Tensor, training: bool = False) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise InvalidInputError(f"expected Nx3xSxS images, got shape {tuple(images.shape)}")
        images = images.to(self.device)
        self.image_encoder.train(training)
        if training:
            return self.image_encoder(images)
        with torch.no_grad():
            return self.image_encoder(images)

    def spec(self) -> dict:
        return {"name": self.name, "model_name": self.model_name}

    @classmethod
    def from_spec(cls, spec: dict, with_text: bool = True) -> "PretrainedClipBackend":
        return cls(model_name=spec.get("model_name", DEFAULT_MODEL), with_text=with_text)
