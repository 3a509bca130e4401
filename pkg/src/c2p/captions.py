"""Caption generation and category-common-prompt enhancement.

Captions come from a pluggable provider so the pipeline runs offline: the
shipped :class:`StubCaptionProvider` is deterministic, while
:class:`FeatureDecoderCaptionProvider` wires a real decode-from-image-feature
captioner (ClipCap-style) for integration runs. Enhancement prefixes each
caption with the class's common prompt, e.g. label 0 -> ``"Camera, <caption>"``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import torch

from .data import DatasetManifest, PreprocessPolicy, load_image_tensor
from .errors import InvalidInputError

logger = logging.getLogger(__name__)

PROMPT_SEPARATOR = ", "


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    caption: str
    label: int
    subset: str
    flagged: bool = False


@dataclass(frozen=True)
class PromptPair:
    """The two class-concept words prepended to captions."""

    p_real: str
    p_fake: str

    def __post_init__(self) -> None:
        if not self.p_real or not self.p_fake:
            raise InvalidInputError("prompts must be non-empty")
        if self.p_real == self.p_fake:
            raise InvalidInputError("real and fake prompts must differ")

    def for_label(self, label: int) -> str:
        return self.p_fake if label == 1 else self.p_real


@dataclass(frozen=True)
class EnhancedCaption:
    image_id: str
    text: str
    label: int


class CaptionProvider(Protocol):
    def caption(self, image: torch.Tensor) -> str:
        """Produce one caption for a preprocessed 3xSxS image tensor."""
        ...


class StubCaptionProvider:
    """Deterministic provider for offline runs and tests."""

    def __init__(self, text: str = "a test image"):
        self.text = text

    def caption(self, image: torch.Tensor) -> str:
        return self.text


class FeatureDecoderCaptionProvider:
    """Caption by decoding the backbone's image feature with a text decoder.

    ``decoder`` must expose ``decode(vector: np.ndarray) -> str``; any
    ClipCap-style model wrapped that way plugs in here.
    """

    def __init__(self, backend, decoder):
        self.backend = backend
        self.decoder = decoder

    def caption(self, image: torch.Tensor) -> str:
        feature = self.backend.encode_image(image.unsqueeze(0), training=False)[0]
        return self.decoder.decode(feature.detach().cpu().numpy())


def enhance_caption(caption: str, label: int, pair: PromptPair, image_id: str = "") -> EnhancedCaption:
    """Prefix ``caption`` with the common prompt for its class.

    An empty caption degrades to the prompt alone (no dangling separator).
    """
    if label not in (0, 1):
        raise InvalidInputError(f"label must be 0 or 1, got {label}")
    prompt = pair.for_label(label)
    text = prompt + PROMPT_SEPARATOR + caption if caption else prompt
    return EnhancedCaption(image_id=image_id, text=text, label=label)


def enhance_cache(
    cache: dict[str, CaptionRecord],
    pair: PromptPair,
) -> dict[str, EnhancedCaption]:
    return {
        image_id: enhance_caption(rec.caption, rec.label, pair, image_id=image_id)
        for image_id, rec in cache.items()
    }


def load_caption_cache(path: str | Path) -> dict[str, CaptionRecord]:
    path = Path(path)
    cache: dict[str, CaptionRecord] = {}
    if not path.is_file():
        return cache
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            cache[row["image_id"]] = CaptionRecord(
                image_id=row["image_id"],
                caption=row["caption"],
                label=int(row["label"]),
                subset=row["subset"],
                flagged=bool(row.get("flagged", False)),
            )
    return cache


def _caption_line(record: CaptionRecord) -> str:
    return json.dumps(
        {
            "image_id": record.image_id,
            "caption": record.caption,
            "label": record.label,
            "subset": record.subset,
            "flagged": record.flagged,
        }
    )


def generate_captions(
    manifest: DatasetManifest,
    provider: CaptionProvider,
    cache_path: str | Path,
    policy: PreprocessPolicy | None = None,
) -> dict[str, CaptionRecord]:
    """Caption every manifest record, appending to a JSONL cache.

    Idempotent: image ids already present in the cache are skipped, so a
    rerun over the same manifest leaves the file untouched. A provider
    failure flags the record and the run continues; cache write failures
    propagate (they would silently lose work otherwise).
    """
    policy = policy or PreprocessPolicy()
    cache_path = Path(cache_path)
    cache = load_caption_cache(cache_path)

    cache_path.parent.mkdir(parents=True, exist_ok=True)
    new_records: list[CaptionRecord] = []
    for record in manifest.records:
        if record.image_id in cache:
            continue
        try:
            image = load_image_tensor(record, policy)
            text = provider.caption(image).strip()
            flagged = not text
        except Exception as exc:
            logger.warning("caption provider failed on %s: %s", record.image_id, exc)
            text = ""
            flagged = True
        caption_record = CaptionRecord(
            image_id=record.image_id,
            caption=text,
            label=record.label,
            subset=record.subset,
            flagged=flagged,
        )
        cache[record.image_id] = caption_record
        new_records.append(caption_record)

    if new_records:
        with cache_path.open("a", encoding="utf-8") as handle:
            for rec in new_records:
                handle.write(_caption_line(rec) + "\n")
    return cache
