"""Concept injection: adapter + classifier optimization.

The total objective is the symmetric in-batch contrastive loss between
prompt-enhanced text features and adapted image features, plus ``alpha``
times a single-logit binary cross-entropy. Both losses are computed in
numerically stable form (log-sum-exp / softplus). Only adapter and
classifier parameters receive gradients; the text tower and the rest of the
image tower stay frozen.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .captions import CaptionRecord, PromptPair, enhance_caption
from .data import DatasetManifest, PreprocessPolicy, load_image_tensor
from .encoder import (
    AdapterConfig,
    EmbeddingBatch,
    adapter_parameters,
    adapter_state_dict,
    attach_adapters,
    encode_image,
    encode_text,
    l2_normalize,
    load_adapter_state_dict,
    merge_adapters,
)
from .errors import InvalidInputError, NotFoundError, TrainingDivergedError, VersionError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-4
    batch_size: int = 128
    epochs: int = 1
    alpha: float = 8.0
    seed: int = 123
    optimizer: str = "adam"
    temperature: float = 1.0
    normalize_embeddings: bool = True

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise InvalidInputError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be >= 2 for in-batch contrastive terms")
        if self.epochs < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")
        if self.temperature <= 0:
            raise InvalidInputError(f"temperature must be positive, got {self.temperature}")
        if self.optimizer != "adam":
            raise InvalidInputError(f"unsupported optimizer: {self.optimizer!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


class LinearClassifier(nn.Module):
    """Single-logit linear head. Weight and bias initialize to exactly zero."""

    def __init__(self, dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.linear = nn.Linear(dim, 1, dtype=dtype)
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features).squeeze(-1)

    @property
    def weight_vector(self) -> torch.Tensor:
        return self.linear.weight[0]

    @property
    def bias_value(self) -> torch.Tensor:
        return self.linear.bias[0]


def _as_matrix(batch) -> torch.Tensor:
    return batch.vectors if isinstance(batch, EmbeddingBatch) else batch


def contrastive_loss(u, v, temperature: float = 1.0) -> torch.Tensor:
    """Symmetric in-batch contrastive loss between matched text/image rows.

    Average of the image-to-text and text-to-image softmax cross-entropies
    over the batch similarity matrix, computed via log-sum-exp.
    """
    u = _as_matrix(u)
    v = _as_matrix(v)
    if u.dim() != 2 or v.dim() != 2 or u.shape != v.shape:
        raise InvalidInputError(
            f"u and v must be NxD matrices of equal shape, got {tuple(u.shape)} and {tuple(v.shape)}"
        )
    if u.shape[0] == 0:
        raise InvalidInputError("contrastive loss is undefined for an empty batch")
    similarity = (v @ u.T) / temperature
    diagonal = similarity.diagonal()
    image_to_text = (torch.logsumexp(similarity, dim=1) - diagonal).mean()
    text_to_image = (torch.logsumexp(similarity, dim=0) - diagonal).mean()
    return (image_to_text + text_to_image) / 2


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on a single logit per sample (softplus form)."""
    logits = logits.reshape(-1)
    labels = labels.reshape(-1)
    if logits.shape[0] != labels.shape[0]:
        raise InvalidInputError(
            f"logits and labels differ in length: {logits.shape[0]} vs {labels.shape[0]}"
        )
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def total_loss(u, v, logits, labels, config: TrainConfig) -> torch.Tensor:
    loss = contrastive_loss(u, v, temperature=config.temperature)
    return loss + config.alpha * classification_loss(logits, labels)


@dataclass
class Checkpoint:
    """Everything needed to rebuild the trained model and rerun the config."""

    backend_spec: dict
    adapter_config: AdapterConfig
    train_config: TrainConfig
    prompt_pair: PromptPair
    policy: PreprocessPolicy
    adapter_state: dict[str, torch.Tensor]
    classifier_state: dict[str, torch.Tensor]
    log: list[dict] = field(default_factory=list)
    merged_state: dict[str, torch.Tensor] | None = None


def _policy_to_dict(policy: PreprocessPolicy) -> dict:
    data = dataclasses.asdict(policy)
    data["mean"] = list(policy.mean)
    data["std"] = list(policy.std)
    return data


def _policy_from_dict(data: dict) -> PreprocessPolicy:
    return PreprocessPolicy(
        target_size=int(data["target_size"]),
        small_image_rule=data["small_image_rule"],
        crop=data["crop"],
        mean=tuple(data["mean"]),
        std=tuple(data["std"]),
    )


def save_checkpoint(checkpoint: Checkpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint.adapter_state, directory / "adapters.pt")
    torch.save(checkpoint.classifier_state, directory / "classifier.pt")
    if checkpoint.merged_state is not None:
        torch.save(checkpoint.merged_state, directory / "merged.pt")
    config = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "backend": checkpoint.backend_spec,
        "adapter": checkpoint.adapter_config.to_dict(),
        "train": checkpoint.train_config.to_dict(),
        "prompt_pair": {"p_real": checkpoint.prompt_pair.p_real, "p_fake": checkpoint.prompt_pair.p_fake},
        "policy": _policy_to_dict(checkpoint.policy),
    }
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    with (directory / "training_log.jsonl").open("w", encoding="utf-8") as handle:
        for entry in checkpoint.log:
            handle.write(json.dumps(entry) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    config_path = directory / "config.json"
    if not config_path.is_file():
        raise NotFoundError(f"no checkpoint at {directory}")
    config = json.loads(config_path.read_text())
    version = config.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION}); "
            "re-train with this tool version or migrate the checkpoint directory"
        )
    log: list[dict] = []
    log_path = directory / "training_log.jsonl"
    if log_path.is_file():
        with log_path.open("r", encoding="utf-8") as handle:
            log = [json.loads(line) for line in handle if line.strip()]
    merged_path = directory / "merged.pt"
    return Checkpoint(
        backend_spec=config["backend"],
        adapter_config=AdapterConfig.from_dict(config["adapter"]),
        train_config=TrainConfig.from_dict(config["train"]),
        prompt_pair=PromptPair(**config["prompt_pair"]),
        policy=_policy_from_dict(config["policy"]),
        adapter_state=torch.load(directory / "adapters.pt", weights_only=True),
        classifier_state=torch.load(directory / "classifier.pt", weights_only=True),
        log=log,
        merged_state=torch.load(merged_path, weights_only=True) if merged_path.is_file() else None,
    )


def _build_backend_from_spec(spec: dict, with_text: bool = True):
    name = spec.get("name")
    if name == "toy":
        from .encoder.toy import ToyBackend

        return ToyBackend.from_spec(spec, with_text=with_text)
    if name == "pretrained":
        from .encoder.pretrained import PretrainedClipBackend

        return PretrainedClipBackend.from_spec(spec, with_text=with_text)
    raise VersionError(f"checkpoint references unknown backend {name!r}")


def build_model_from_checkpoint(
    checkpoint: Checkpoint,
    with_text: bool = False,
    merged: bool = False,
):
    """Rebuild (backend, classifier) from a checkpoint.

    With ``merged=True`` the backend gets the folded-in weights and carries
    no adapter modules; otherwise adapters are re-attached and their trained
    state loaded.
    """
    backend = _build_backend_from_spec(checkpoint.backend_spec, with_text=with_text)
    if merged:
        if checkpoint.merged_state is None:
            raise NotFoundError("checkpoint has no merged export; run the merge stage first")
        backend.image_encoder.load_state_dict(checkpoint.merged_state)
        for p in backend.image_encoder.parameters():
            p.requires_grad_(False)
    else:
        attach_adapters(backend.image_encoder, checkpoint.adapter_config)
        load_adapter_state_dict(backend.image_encoder, checkpoint.adapter_state)
    classifier = LinearClassifier(backend.embed_dim)
    classifier.load_state_dict(checkpoint.classifier_state)
    classifier.eval()
    return backend, classifier


def merge_checkpoint(checkpoint: Checkpoint) -> Checkpoint:
    """Produce the merged-weights export for testing-stage inference."""
    backend, _ = build_model_from_checkpoint(checkpoint, with_text=False, merged=False)
    merged = merge_adapters(backend.image_encoder)
    checkpoint.merged_state = merged.state_dict()
    return checkpoint


def fit(
    manifest: DatasetManifest,
    caption_cache: dict[str, CaptionRecord],
    prompt_pair: PromptPair,
    backend,
    adapter_config: AdapterConfig | None = None,
    train_config: TrainConfig | None = None,
    policy: PreprocessPolicy | None = None,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Train adapters and the classifier; return (and optionally save) a checkpoint.

    Deterministic given the seed: adapter initialization, batch order,
    random crops, and dropout all derive from ``train_config.seed``. Partial
    trailing batches are dropped so every contrastive partition has the full
    in-batch negative count. A non-finite loss aborts with a diagnostic
    snapshot.
    """
    adapter_config = adapter_config or AdapterConfig()
    train_config = train_config or TrainConfig()
    policy = policy or PreprocessPolicy()

    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)

    wrapped = attach_adapters(backend.image_encoder, adapter_config)
    logger.info("attached adapters to %d projections", wrapped)
    classifier = LinearClassifier(backend.embed_dim, dtype=backend.dtype if hasattr(backend, "dtype") else torch.float32)

    items = []
    for record in manifest.records:
        cached = caption_cache.get(record.image_id)
        if cached is None:
            logger.warning("no cached caption for %s; skipping", record.image_id)
            continue
        enhanced = enhance_caption(cached.caption, record.label, prompt_pair, image_id=record.image_id)
        items.append((record, enhanced.text))

    parameters = list(itertools.chain(adapter_parameters(backend.image_encoder), classifier.parameters()))
    optimizer = torch.optim.Adam(parameters, lr=train_config.learning_rate)

    log: list[dict] = []
    step = 0
    batch_size = train_config.batch_size
    for _ in range(train_config.epochs):
        order = rng.permutation(len(items))
        for start in range(0, len(items) - batch_size + 1, batch_size):
            batch = [items[i] for i in order[start : start + batch_size]]
            images = torch.stack([load_image_tensor(rec, policy, rng) for rec, _ in batch])
            labels = torch.tensor([rec.label for rec, _ in batch])
            texts = [text for _, text in batch]

            u = encode_text(texts, backend, normalize=train_config.normalize_embeddings)
            v = encode_image(images, backend, training=True)
            v_contrastive = l2_normalize(v) if train_config.normalize_embeddings else v
            logits = classifier(v.vectors)

            loss_contrastive = contrastive_loss(u, v_contrastive, temperature=train_config.temperature)
            loss_classification = classification_loss(logits, labels)
            loss = loss_contrastive + train_config.alpha * loss_classification

            if not torch.isfinite(loss):
                snapshot = Checkpoint(
                    backend_spec=backend.spec(),
                    adapter_config=adapter_config,
                    train_config=train_config,
                    prompt_pair=prompt_pair,
                    policy=policy,
                    adapter_state=adapter_state_dict(backend.image_encoder),
                    classifier_state=classifier.state_dict(),
                    log=log,
                )
                where = None
                if out_dir is not None:
                    where = save_checkpoint(snapshot, Path(out_dir) / "diagnostic")
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}"
                    + (f"; diagnostic snapshot written to {where}" if where else "")
                )

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.append(
                {
                    "step": step,
                    "contrastive": float(loss_contrastive.detach()),
                    "classification": float(loss_classification.detach()),
                    "total": float(loss.detach()),
                }
            )
            step += 1

    backend.image_encoder.eval()
    checkpoint = Checkpoint(
        backend_spec=backend.spec(),
        adapter_config=adapter_config,
        train_config=train_config,
        prompt_pair=prompt_pair,
        policy=policy,
        adapter_state=adapter_state_dict(backend.image_encoder),
        classifier_state=classifier.state_dict(),
        log=log,
    )
    if out_dir is not None:
        save_checkpoint(checkpoint, out_dir)
    return checkpoint
