"""Interpretability of detection features.

The detection feature of an image is its embedding transformed elementwise
by the linear classifier, ``f = v * w + b`` with the scalar bias broadcast;
summing its components recovers the classifier logit up to the (D-1)
duplicated bias terms. Detection features can be decoded back to text
through a caption decoder, aggregated into word-frequency tables, clustered
with k-means, and projected to 2-D for plotting.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

import numpy as np
import torch

from .data import DatasetManifest, PreprocessPolicy
from .errors import DecodeError, InvalidInputError

_TOKEN_PATTERN = re.compile(r"[a-z0-9]+")

STOPWORDS_VERSION = "en-base-1"

# Fixed, versioned English stop-word list; word-frequency outputs are only
# comparable across runs that used the same version.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are aren as at be
    because been before being below between both but by can cannot could
    couldn did didn do does doesn doing don down during each few for from
    further had hadn has hasn have haven having he her here hers herself him
    himself his how i if in into is isn it its itself just ll me mightn more
    most mustn my myself needn no nor not now o of off on once only or other
    our ours ourselves out over own re s same shan she should shouldn so some
    such t than that the their theirs them themselves then there these they
    this those through to too under until up ve very was wasn we were weren
    what when where which while who whom why will with won would wouldn y you
    your yours yourself yourselves
    """.split()
)


@dataclass(frozen=True)
class DetectionFeature:
    image_id: str
    vector: np.ndarray
    label: int


@dataclass(frozen=True)
class WordFrequencyTable:
    entries: list[tuple[str, int]]
    corpus_size: int
    top_k: int
    total_tokens: int


class CaptionDecoder(Protocol):
    def decode(self, vector: np.ndarray) -> str:
        """Decode one embedding-space vector into text."""
        ...


_STUB_VOCABULARY = (
    "arch bridge canyon cloud coast desert dune field forest garden glacier "
    "harbor hill island lagoon lake meadow mountain ocean orchard plain "
    "plateau pond prairie reef ridge river road ruins savanna shore sky "
    "spring station stone storm stream summit sunset swamp temple terrace "
    "tower trail tundra valley village wall waterfall wave window"
).split()


class StubCaptionDecoder:
    """Deterministic feature-to-text decoder for offline runs.

    Produces ``words_per_text`` vocabulary words indexed by consecutive
    2-byte little-endian chunks of ``sha256(round(vector, 2).tobytes())``.
    The 2-decimal rounding makes the output sensitive to the feature's
    scale: rescaling a vector almost surely decodes to different words.
    """

    def __init__(self, words_per_text: int = 4):
        self.words_per_text = words_per_text

    def decode(self, vector: np.ndarray) -> str:
        rounded = np.round(np.asarray(vector, dtype=np.float64), 2)
        digest = hashlib.sha256(rounded.tobytes()).digest()
        words = [
            _STUB_VOCABULARY[int.from_bytes(digest[2 * i : 2 * i + 2], "little") % len(_STUB_VOCABULARY)]
            for i in range(self.words_per_text)
        ]
        return " ".join(words)


def detection_feature(
    v: np.ndarray | torch.Tensor,
    classifier,
    image_id: str = "",
    label: int = 0,
) -> DetectionFeature:
    """Elementwise product of the embedding with the classifier weight, plus bias."""
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    v = np.asarray(v, dtype=np.float64)
    weight = classifier.weight_vector.detach().cpu().numpy().astype(np.float64)
    bias = float(classifier.bias_value.detach())
    if v.shape != weight.shape:
        raise InvalidInputError(
            f"feature dimension {v.shape} does not match classifier weight {weight.shape}"
        )
    return DetectionFeature(image_id=image_id, vector=v * weight + bias, label=label)


def feature_logit(feature: DetectionFeature, bias: float) -> float:
    """The classifier logit implied by a detection feature."""
    d = feature.vector.shape[0]
    return float(feature.vector.sum() - (d - 1) * bias)


def compute_detection_features(
    manifest: DatasetManifest,
    backend,
    classifier,
    policy: PreprocessPolicy | None = None,
    batch_size: int = 32,
) -> list[DetectionFeature]:
    """Detection features for every readable manifest record, in order."""
    from .evaluation import iter_image_batches

    policy = policy or PreprocessPolicy()
    features: list[DetectionFeature] = []
    for records, images in iter_image_batches(manifest, policy, batch_size):
        vectors = backend.encode_image(images, training=False)
        for record, v in zip(records, vectors):
            features.append(detection_feature(v, classifier, image_id=record.image_id, label=record.label))
    return features


def decode_feature_to_text(feature: np.ndarray | DetectionFeature, decoder: CaptionDecoder) -> str:
    """Pass a feature vector through the caption decoder."""
    vector = feature.vector if isinstance(feature, DetectionFeature) else np.asarray(feature)
    try:
        return decoder.decode(vector)
    except Exception as exc:
        raise DecodeError(f"caption decoder failed: {exc}") from exc


def word_frequency(
    texts: Iterable[str],
    top_k: int = 15,
    stop_words: frozenset[str] | set[str] = STOPWORDS,
) -> WordFrequencyTable:
    """Top-k lowercase word counts, stop words removed.

    Tokens split on non-alphanumeric boundaries; ranking is by count
    descending then word ascending.
    """
    if top_k < 1:
        raise InvalidInputError(f"top_k must be >= 1, got {top_k}")
    texts = list(texts)
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(t for t in _TOKEN_PATTERN.findall(text.lower()) if t not in stop_words)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return WordFrequencyTable(
        entries=ranked[:top_k],
        corpus_size=len(texts),
        top_k=top_k,
        total_tokens=sum(counts.values()),
    )


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    objective: list[float]
    n_iter: int


def cluster_features(
    features: np.ndarray,
    k: int = 3,
    seed: int = 0,
    max_iter: int = 300,
) -> KMeansResult:
    """Seeded Lloyd k-means; converges when assignments stabilize.

    Initial centers are k distinct input points chosen by the seeded rng.
    The recorded objective (sum of squared distances to assigned centers)
    is non-increasing across iterations.
    """
    data = np.asarray(features, dtype=np.float64)
    if data.ndim != 2:
        raise InvalidInputError(f"expected an NxD matrix, got shape {data.shape}")
    n = data.shape[0]
    if n < k:
        raise InvalidInputError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = data[rng.choice(n, size=k, replace=False)].copy()

    assignments = None
    objective: list[float] = []
    iteration = 0
    for iteration in range(1, max_iter + 1):
        distances = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assignments = distances.argmin(axis=1)
        objective.append(float(distances[np.arange(n), new_assignments].sum()))
        if assignments is not None and np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = data[assignments == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(centers=centers, assignments=assignments, objective=objective, n_iter=iteration)


def _pca_2d(data: np.ndarray) -> np.ndarray:
    centered = data - data.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # Deterministic sign: largest-magnitude loading of each component is positive.
    for i in range(components.shape[0]):
        pivot = np.argmax(np.abs(components[i]))
        if components[i, pivot] < 0:
            components[i] = -components[i]
    return centered @ components.T


def _tsne_2d(data: np.ndarray, seed: int) -> np.ndarray:
    try:
        from sklearn.manifold import TSNE
    except ImportError as exc:
        raise InvalidInputError(
            "the 'tsne' projection needs scikit-learn (pip install c2p[tsne])"
        ) from exc
    perplexity = min(30.0, max(1.0, (data.shape[0] - 1) / 3))
    projector = TSNE(n_components=2, random_state=seed, init="pca", perplexity=perplexity)
    return projector.fit_transform(data).astype(np.float64)


def project_2d(
    features: np.ndarray,
    method: str | Callable[[np.ndarray, int], np.ndarray] = "pca",
    seed: int = 0,
) -> np.ndarray:
    """Project NxD features to Nx2 coordinates for plotting.

    PCA (the default) is deterministic; any callable ``(data, seed) -> Nx2``
    plugs in behind the same interface.
    """
    data = np.asarray(features, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise InvalidInputError(f"need at least 2 feature rows, got shape {data.shape}")
    if callable(method):
        coords = np.asarray(method(data, seed), dtype=np.float64)
    elif method == "pca":
        coords = _pca_2d(data)
    elif method == "tsne":
        coords = _tsne_2d(data, seed)
    else:
        raise InvalidInputError(f"unknown projection method: {method!r}")
    if coords.shape != (data.shape[0], 2):
        raise InvalidInputError(f"projection produced shape {coords.shape}, expected ({data.shape[0]}, 2)")
    return coords
