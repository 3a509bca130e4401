"""A miniature seeded joint embedding backbone for offline runs.

The image tower is a real (tiny) pre-norm transformer so adapter attachment,
training, and merging exercise the same code paths as the pretrained
backbone. Two closed forms are part of its contract and are relied on by
tests:

* Zero-image fixed point: every internal projection is bias-free and layer
  norms keep zero activations at zero, so an all-zero image embeds to
  exactly ``image_encoder.head.bias`` (patch tokens, attention output, and
  MLP output all stay zero; only the output head's bias survives). This
  holds with adapters attached at any training state, because the adapter
  path is linear in its input.

* Hash-to-vector text encoding: for seed ``s`` and dimension ``D``,

  - ``tokens(text)`` = first ``max_text_tokens`` matches of ``[a-z0-9]+``
    on the lowercased text, or ``[""]`` when there are none;
  - ``token_vector(t)`` = ``standard_normal(D)`` drawn from
    ``numpy.random.default_rng(u64)`` where ``u64`` is the first 8 bytes,
    little-endian, of ``sha256(utf8(t))``;
  - ``embed(text)`` = ``mean(token_vector(t) for t in tokens(text)) @ P``
    with ``P = standard_normal((D, D)) / sqrt(D)`` drawn from
    ``numpy.random.default_rng(s)``.

  The text tower has no other state, so it is frozen by construction.
"""

from __future__ import annotations

import hashlib
import math
import re

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidInputError

_TOKEN_PATTERN = re.compile(r"[a-z0-9]+")


def hash_token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def tokenize(text: str, max_tokens: int) -> list[str]:
    tokens = _TOKEN_PATTERN.findall(text.lower())[:max_tokens]
    return tokens if tokens else [""]


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise InvalidInputError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.out_proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, d = x.shape
        head_dim = d // self.num_heads
        q = self.q_proj(x).view(n, t, self.num_heads, head_dim).transpose(1, 2)
        k = self.k_proj(x).view(n, t, self.num_heads, head_dim).transpose(1, 2)
        v = self.v_proj(x).view(n, t, self.num_heads, head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
        context = torch.softmax(scores, dim=-1) @ v
        context = context.transpose(1, 2).reshape(n, t, d)
        return self.out_proj(context)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim, bias=False),
            nn.GELU(),
            nn.Linear(2 * dim, dim, bias=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyImageEncoder(nn.Module):
    """Patch embedding -> transformer blocks -> mean pool -> output head.

    No positional encoding: patch order does not matter for the toy's job
    (mapping visually distinct inputs to distinct features). The output head
    carries the only bias in the network, giving the zero-image fixed point
    documented in the module docstring.
    """

    def __init__(self, dim: int = 32, patch_size: int = 8, depth: int = 2, num_heads: int = 4):
        super().__init__()
        self.patch_size = patch_size
        self.patch_embed = nn.Linear(3 * patch_size * patch_size, dim, bias=False)
        self.blocks = nn.ModuleList(TransformerBlock(dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, dim, bias=True)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        n, c, h, w = images.shape
        p = self.patch_size
        gh, gw = h // p, w // p
        patches = images.reshape(n, c, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5)
        return patches.reshape(n, gh * gw, c * p * p)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(self.patchify(images))
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return self.head(x.mean(dim=1))


class ToyTextEncoder(nn.Module):
    """The frozen hash-to-vector text tower (see module docstring)."""

    def __init__(self, seed: int, dim: int, max_tokens: int = 77):
        super().__init__()
        self.dim = dim
        self.max_tokens = max_tokens
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((dim, dim)) / math.sqrt(dim)
        self.projection = nn.Parameter(
            torch.from_numpy(projection).to(torch.float32), requires_grad=False
        )

    def forward(self, texts: list[str]) -> torch.Tensor:
        rows = np.stack(
            [
                np.mean([hash_token_vector(t, self.dim) for t in tokenize(text, self.max_tokens)], axis=0)
                for text in texts
            ]
        ) if texts else np.zeros((0, self.dim))
        pooled = torch.from_numpy(rows).to(self.projection.dtype)
        return pooled @ self.projection


class ToyBackend:
    """Seeded deterministic stand-in for the pretrained joint encoder."""

    name = "toy"
    mode = "toy_deterministic"

    def __init__(
        self,
        seed: int = 123,
        embed_dim: int = 32,
        patch_size: int = 8,
        depth: int = 2,
        num_heads: int = 4,
        max_text_tokens: int = 77,
        with_text: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        self.seed = seed
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.depth = depth
        self.num_heads = num_heads
        self.max_text_tokens = max_text_tokens
        # Hermetic construction: the image tower's initialization depends on
        # `seed` only, never on the caller's global RNG state.
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.image_encoder = ToyImageEncoder(embed_dim, patch_size, depth, num_heads)
        self.text_encoder = ToyTextEncoder(seed, embed_dim, max_text_tokens) if with_text else None
        if dtype != torch.float32:
            self.to(dtype)

    def to(self, dtype: torch.dtype) -> "ToyBackend":
        self.image_encoder.to(dtype)
        if self.text_encoder is not None:
            self.text_encoder.to(dtype)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return next(self.image_encoder.parameters()).dtype

    @property
    def has_text_encoder(self) -> bool:
        return self.text_encoder is not None

    def encode_text(self, texts: list[str]) -> torch.Tensor:
        if self.text_encoder is None:
            raise InvalidInputError("this backend was loaded without its text tower")
        with torch.no_grad():
            return self.text_encoder(list(texts))

    def encode_image(self, images: torch.Tensor, training: bool = False) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise InvalidInputError(f"expected Nx3xSxS images, got shape {tuple(images.shape)}")
        if images.shape[2] != images.shape[3] or images.shape[2] % self.patch_size != 0:
            raise InvalidInputError(
                f"image side must be square and divisible by {self.patch_size}, "
                f"got {tuple(images.shape[2:])}"
            )
        images = images.to(self.dtype)
        self.image_encoder.train(training)
        if training:
            return self.image_encoder(images)
        with torch.no_grad():
            return self.image_encoder(images)

    def spec(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "patch_size": self.patch_size,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "max_text_tokens": self.max_text_tokens,
        }

    @classmethod
    def from_spec(cls, spec: dict, with_text: bool = True) -> "ToyBackend":
        return cls(
            seed=int(spec["seed"]),
            embed_dim=int(spec["embed_dim"]),
            patch_size=int(spec["patch_size"]),
            depth=int(spec["depth"]),
            num_heads=int(spec["num_heads"]),
            max_text_tokens=int(spec["max_text_tokens"]),
            with_text=with_text,
        )
