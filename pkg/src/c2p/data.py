"""Dataset discovery, manifests, and image preprocessing.

Directory conventions (mirroring the public benchmark releases):

* ``universal_fake_detect``: ``<root>/<subset>/<class>/<0_real|1_fake>/*``
* ``genimage``:              ``<root>/<subset>/<split>/<ai|nature>/*``
* ``flat``:                  ``<root>/<real|fake>/*``

A manifest is an ordered list of records, sorted lexicographically by
relative path, so two scans of the same tree always agree byte for byte.
Unreadable files are collected in a skip list instead of aborting the scan.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import EmptyDatasetError, InvalidImageError, InvalidInputError, NotFoundError

logger = logging.getLogger(__name__)

LAYOUTS = ("universal_fake_detect", "genimage", "flat")
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}

# Per-channel statistics of the pretrained joint encoder's image pipeline.
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

REAL_LABEL = 0
FAKE_LABEL = 1


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image with its generator provenance."""

    image_id: str
    path: Path
    label: int
    subset: str
    object_class: str | None = None

    def __post_init__(self) -> None:
        if self.label not in (REAL_LABEL, FAKE_LABEL):
            raise InvalidInputError(f"label must be 0 or 1, got {self.label}")


@dataclass
class DatasetManifest:
    """Ordered image records plus the scan parameters that produced them."""

    records: list[ImageRecord]
    layout: str
    split: str
    class_filter: tuple[str, ...] | None = None
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for r in self.records:
            if r.image_id in seen:
                raise InvalidInputError(f"duplicate image_id in manifest: {r.image_id!r}")
            seen.add(r.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def subsets(self) -> list[str]:
        return sorted({r.subset for r in self.records})

    def label_counts(self) -> dict[str, dict[int, int]]:
        counts: dict[str, dict[int, int]] = {}
        for r in self.records:
            per = counts.setdefault(r.subset, {REAL_LABEL: 0, FAKE_LABEL: 0})
            per[r.label] += 1
        return counts


@dataclass(frozen=True)
class PreprocessPolicy:
    """How raw rasters become fixed-size normalized tensors.

    ``small_image_rule`` applies when a side is shorter than ``target_size``:
    ``tile_then_crop`` repeats the image until both sides reach the target,
    ``resize`` upscales the short side instead. Larger images are cropped
    directly without resizing.
    """

    target_size: int = 224
    small_image_rule: str = "tile_then_crop"
    crop: str = "center"
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD

    def __post_init__(self) -> None:
        if self.target_size <= 0:
            raise InvalidInputError("target_size must be positive")
        if self.small_image_rule not in ("tile_then_crop", "resize"):
            raise InvalidInputError(f"unknown small_image_rule: {self.small_image_rule}")
        if self.crop not in ("center", "random"):
            raise InvalidInputError(f"unknown crop: {self.crop}")


def _iter_image_files(directory: Path) -> Iterable[Path]:
    for path in sorted(directory.rglob("*")):
        if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS:
            yield path


def _decodable(path: Path) -> str | None:
    """Return None if the file decodes as an image, else the failure reason."""
    try:
        with Image.open(path) as img:
            img.verify()
        return None
    except Exception as exc:  # PIL raises a zoo of types for bad files
        return f"{type(exc).__name__}: {exc}"


def _classify_path(rel_parts: tuple[str, ...], layout: str, split: str) -> tuple[int, str, str | None] | None:
    """Map a file's relative path onto (label, subset, object_class).

    Returns None when the path does not match the layout convention (or
    belongs to a different split for the genimage layout).
    """
    if layout == "flat":
        if len(rel_parts) < 2:
            return None
        head = rel_parts[0].lower()
        if head == "real":
            return REAL_LABEL, "", None
        if head == "fake":
            return FAKE_LABEL, "", None
        return None
    if layout == "universal_fake_detect":
        if len(rel_parts) < 4:
            return None
        subset, object_class, label_dir = rel_parts[0], rel_parts[1], rel_parts[2]
        if label_dir == "0_real":
            return REAL_LABEL, subset, object_class
        if label_dir == "1_fake":
            return FAKE_LABEL, subset, object_class
        return None
    if layout == "genimage":
        if len(rel_parts) < 4:
            return None
        subset, split_dir, label_dir = rel_parts[0], rel_parts[1], rel_parts[2]
        if split_dir != split:
            return None
        if label_dir == "nature":
            return REAL_LABEL, subset, None
        if label_dir == "ai":
            return FAKE_LABEL, subset, None
        return None
    raise InvalidInputError(f"unknown layout: {layout}")


def scan_dataset(
    root: str | Path,
    layout: str,
    split: str = "train",
    class_filter: Sequence[str] | None = None,
) -> DatasetManifest:
    """Walk ``root`` following the layout convention and build a manifest.

    Records are ordered lexicographically by relative path. Files that do
    not decode are appended to the manifest's skip list with a reason.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise InvalidInputError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    if split not in SPLITS:
        raise InvalidInputError(f"split must be one of {SPLITS}, got {split!r}")
    if not root.is_dir():
        raise NotFoundError(f"dataset root does not exist: {root}")

    wanted = tuple(class_filter) if class_filter else None
    records: list[ImageRecord] = []
    skipped: list[tuple[str, str]] = []
    for path in _iter_image_files(root):
        rel = path.relative_to(root)
        classified = _classify_path(rel.parts, layout, split)
        if classified is None:
            continue
        label, subset, object_class = classified
        if not subset:
            subset = root.name
        if wanted is not None and object_class not in wanted:
            continue
        reason = _decodable(path)
        if reason is not None:
            logger.warning("skipping unreadable image %s (%s)", path, reason)
            skipped.append((rel.as_posix(), reason))
            continue
        records.append(
            ImageRecord(
                image_id=rel.as_posix(),
                path=path,
                label=label,
                subset=subset,
                object_class=object_class,
            )
        )

    if not records:
        raise EmptyDatasetError(
            f"no decodable images matching layout {layout!r} (split {split!r}) under {root}"
        )
    return DatasetManifest(
        records=records,
        layout=layout,
        split=split,
        class_filter=wanted,
        skipped=skipped,
    )


def _tile_to_minimum(array: np.ndarray, size: int) -> np.ndarray:
    h, w = array.shape[:2]
    reps_h = -(-size // h)
    reps_w = -(-size // w)
    if reps_h > 1 or reps_w > 1:
        array = np.tile(array, (reps_h, reps_w, 1))
    return array


def preprocess_image(
    image: Image.Image | np.ndarray,
    policy: PreprocessPolicy,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Convert one decoded RGB raster into a normalized 3xSxS tensor.

    Random cropping requires ``rng`` so callers own the randomness; center
    cropping ignores it.
    """
    if isinstance(image, Image.Image):
        array = np.asarray(image.convert("RGB"), dtype=np.uint8)
    else:
        array = np.asarray(image, dtype=np.uint8)
        if array.ndim == 2:
            array = np.stack([array] * 3, axis=-1)
    if array.ndim != 3 or array.shape[2] != 3:
        raise InvalidImageError(f"expected an RGB raster, got shape {array.shape}")
    if array.shape[0] == 0 or array.shape[1] == 0:
        raise InvalidImageError("zero-area image")

    size = policy.target_size
    if array.shape[0] < size or array.shape[1] < size:
        if policy.small_image_rule == "tile_then_crop":
            array = _tile_to_minimum(array, size)
        else:
            scale = max(size / array.shape[0], size / array.shape[1])
            new_h = max(size, int(round(array.shape[0] * scale)))
            new_w = max(size, int(round(array.shape[1] * scale)))
            resized = Image.fromarray(array).resize((new_w, new_h), Image.BICUBIC)
            array = np.asarray(resized, dtype=np.uint8)

    h, w = array.shape[:2]
    if policy.crop == "random":
        if rng is None:
            raise InvalidInputError("random crop requires an rng")
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
    else:
        top = (h - size) // 2
        left = (w - size) // 2
    window = array[top : top + size, left : left + size]

    tensor = torch.from_numpy(window.astype(np.float32) / 255.0).permute(2, 0, 1)
    mean = torch.tensor(policy.mean, dtype=torch.float32).view(3, 1, 1)
    std = torch.tensor(policy.std, dtype=torch.float32).view(3, 1, 1)
    return (tensor - mean) / std


def load_image_tensor(
    record: ImageRecord,
    policy: PreprocessPolicy,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    with Image.open(record.path) as img:
        return preprocess_image(img, policy, rng=rng)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Persist a manifest as JSON Lines, one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for r in manifest.records:
            line = {
                "image_id": r.image_id,
                "path": str(r.path),
                "label": r.label,
                "subset": r.subset,
                "object_class": r.object_class,
            }
            handle.write(json.dumps(line) + "\n")
    return path


def read_manifest(
    path: str | Path,
    layout: str = "flat",
    split: str = "test",
) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"manifest not found: {path}")
    records: list[ImageRecord] = []
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            records.append(
                ImageRecord(
                    image_id=row["image_id"],
                    path=Path(row["path"]),
                    label=int(row["label"]),
                    subset=row["subset"],
                    object_class=row.get("object_class"),
                )
            )
    return DatasetManifest(records=records, layout=layout, split=split)
