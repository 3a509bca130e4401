"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; every tolerance is pinned here, not configurable.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

from c2p.analysis import cluster_features, compute_detection_features, feature_logit, word_frequency
from c2p.captions import PromptPair, StubCaptionProvider, enhance_cache, generate_captions
from c2p.cli import main
from c2p.data import PreprocessPolicy, read_manifest, scan_dataset
from c2p.encoder import (
    AdapterConfig,
    LoraLinear,
    ToyBackend,
    adapter_parameters,
    attach_adapters,
    count_parameters,
    encode_text,
    l2_normalize,
    merge_adapters,
)
from c2p.evaluation import average_precision, predict
from c2p.training import (
    LinearClassifier,
    TrainConfig,
    build_model_from_checkpoint,
    contrastive_loss,
    fit,
    load_checkpoint,
)

from conftest import make_separable_tree
from test_evaluation import brute_force_ap
from test_losses import brute_force_contrastive
from test_training import state_checksum

POLICY = PreprocessPolicy(target_size=32)
TRAIN_CONFIG = TrainConfig(learning_rate=1e-2, batch_size=16, epochs=1, alpha=8.0, seed=123)


def _cli(argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Criterion 7's artifact: the full synthetic pipeline, run twice."""
    base = tmp_path_factory.mktemp("acceptance")
    train_root = make_separable_tree(base / "train", n_per_class=48, seed=11)
    holdout_root = make_separable_tree(base / "holdout", n_per_class=24, seed=97)

    started = time.monotonic()
    for run_name in ("run_a", "run_b"):
        run_dir = base / run_name
        assert _cli(["scan", "--root", train_root, "--layout", "flat", "--out", run_dir / "scan"]) == 0
        assert _cli(["scan", "--root", holdout_root, "--layout", "flat", "--out", run_dir / "scan_holdout"]) == 0
        assert (
            _cli(
                [
                    "caption", "--manifest", run_dir / "scan" / "manifest.jsonl",
                    "--provider", "stub", "--target-size", 32, "--out", run_dir / "captions",
                ]
            )
            == 0
        )
        assert (
            _cli(
                [
                    "train",
                    "--manifest", run_dir / "scan" / "manifest.jsonl",
                    "--captions", run_dir / "captions" / "captions.jsonl",
                    "--backend", "toy", "--seed", 123, "--epochs", 1,
                    "--batch-size", 16, "--lr", 1e-2, "--target-size", 32,
                    "--out", run_dir / "ckpt",
                ]
            )
            == 0
        )
        assert _cli(["merge", "--checkpoint", run_dir / "ckpt"]) == 0
        assert (
            _cli(
                [
                    "eval", "--checkpoint", run_dir / "ckpt",
                    "--manifest", run_dir / "scan_holdout" / "manifest.jsonl",
                    "--out", run_dir / "eval",
                ]
            )
            == 0
        )
    elapsed = time.monotonic() - started
    return base, elapsed


class TestAcceptance:
    def test_01_contrastive_loss_oracle(self):
        """Implementation vs brute-force double-loop softmax, 100 random batches."""
        started = time.monotonic()
        rng = np.random.default_rng(100)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 17))
            d = int(rng.integers(2, 33))
            u = rng.standard_normal((n, d))
            v = rng.standard_normal((n, d))
            got = float(contrastive_loss(torch.from_numpy(u), torch.from_numpy(v)))
            expected = brute_force_contrastive(u, v)
            worst = max(worst, abs(got - expected))
        assert worst < 1e-6, f"worst abs err {worst:.3e}"

        orthonormal = torch.eye(2, dtype=torch.float64)
        closed_form = math.log(1 + math.exp(-1))
        got = float(contrastive_loss(orthonormal, orthonormal))
        assert abs(got - closed_form) < 1e-6

        elapsed = time.monotonic() - started
        assert elapsed < 5.0, f"oracle took {elapsed:.2f}s"
        print(f"\nACCEPTANCE 1 PASS: contrastive oracle (worst err {worst:.2e}, {elapsed:.2f}s)")

    def test_02_gradient_check_finite_differences(self):
        """Analytic grads of the total loss vs central differences, float64 toy."""
        started = time.monotonic()
        worst_overall = 0.0
        for alpha in (0.0, 1.0, 8.0):
            backend = ToyBackend(seed=5, dtype=torch.float64)
            attach_adapters(
                backend.image_encoder, AdapterConfig(rank=2, alpha=2.0, dropout=0.0)
            )
            generator = torch.Generator().manual_seed(int(alpha) + 1)
            with torch.no_grad():
                for module in backend.image_encoder.modules():
                    if isinstance(module, LoraLinear):
                        module.lora_b.copy_(
                            torch.randn(module.lora_b.shape, generator=generator, dtype=torch.float64) * 0.05
                        )
            classifier = LinearClassifier(backend.embed_dim, dtype=torch.float64)
            with torch.no_grad():
                classifier.linear.weight.copy_(
                    torch.randn(1, backend.embed_dim, generator=generator, dtype=torch.float64) * 0.2
                )
                classifier.linear.bias.copy_(torch.randn(1, generator=generator, dtype=torch.float64) * 0.1)

            images = torch.randn(4, 3, 16, 16, generator=generator, dtype=torch.float64)
            labels = torch.tensor([0.0, 1.0, 0.0, 1.0], dtype=torch.float64)
            texts = [
                "Camera, a test image",
                "Deepfake, a test image",
                "Camera, another view",
                "Deepfake, another view",
            ]
            u = l2_normalize(encode_text(texts, backend, normalize=False)).vectors

            config = TrainConfig(alpha=alpha) if alpha > 0 else TrainConfig(alpha=0.0)

            def compute_loss() -> torch.Tensor:
                v = backend.image_encoder(images)
                v_n = torch.nn.functional.normalize(v, dim=-1)
                logits = classifier(v)
                loss = contrastive_loss(u, v_n, temperature=config.temperature)
                if config.alpha > 0:
                    loss = loss + config.alpha * torch.nn.functional.binary_cross_entropy_with_logits(
                        logits, labels
                    )
                return loss

            parameters = list(adapter_parameters(backend.image_encoder)) + list(classifier.parameters())
            loss = compute_loss()
            # With alpha=0 the classifier is absent from the graph: its true
            # gradient is zero, which the finite differences confirm.
            grads = torch.autograd.grad(loss, parameters, allow_unused=True)
            grads = [
                g if g is not None else torch.zeros_like(p) for g, p in zip(grads, parameters)
            ]

            h = 1e-6
            for param, grad in zip(parameters, grads):
                flat = param.data.view(-1)
                fd = torch.zeros_like(flat)
                with torch.no_grad():
                    for i in range(flat.numel()):
                        original = float(flat[i])
                        flat[i] = original + h
                        upper = float(compute_loss())
                        flat[i] = original - h
                        lower = float(compute_loss())
                        flat[i] = original
                        fd[i] = (upper - lower) / (2 * h)
                analytic = grad.reshape(-1)
                scale = max(float(analytic.abs().max()), float(fd.abs().max()), 1e-10)
                rel_err = float((analytic - fd).abs().max()) / scale
                worst_overall = max(worst_overall, rel_err)
                assert rel_err < 1e-4, f"alpha={alpha}: rel err {rel_err:.3e} on {tuple(param.shape)}"

        elapsed = time.monotonic() - started
        assert elapsed < 60.0, f"gradient check took {elapsed:.2f}s"
        print(f"ACCEPTANCE 2 PASS: gradient check (worst rel err {worst_overall:.2e}, {elapsed:.1f}s)")

    def test_03_merge_equivalence_after_training(self, e2e):
        base, _ = e2e
        checkpoint = load_checkpoint(base / "run_a" / "ckpt")
        adapter_backend, _ = build_model_from_checkpoint(checkpoint, merged=False)
        merged = merge_adapters(adapter_backend.image_encoder)
        merged.eval()

        plain_count = count_parameters(ToyBackend.from_spec(checkpoint.backend_spec).image_encoder)
        assert count_parameters(merged) == plain_count

        generator = torch.Generator().manual_seed(200)
        worst = 0.0
        for _ in range(100):
            x = torch.randn(1, 3, 32, 32, generator=generator)
            with torch.no_grad():
                delta = float((adapter_backend.encode_image(x) - merged(x)).abs().max())
            worst = max(worst, delta)
        assert worst < 1e-5, f"worst deviation {worst:.3e}"
        print(f"ACCEPTANCE 3 PASS: merge equivalence (worst dev {worst:.2e}, params {plain_count})")

    def test_04_frozen_weight_guarantee(self, tmp_path):
        root = make_separable_tree(tmp_path / "data", n_per_class=16, seed=3)
        manifest = scan_dataset(root, "flat", "train")
        cache = generate_captions(manifest, StubCaptionProvider(), tmp_path / "c.jsonl", POLICY)
        backend = ToyBackend(seed=123)
        text_before = state_checksum(backend.text_encoder)
        image_before = state_checksum(backend.image_encoder)
        fit(
            manifest,
            cache,
            PromptPair("Camera", "Deepfake"),
            backend,
            train_config=TrainConfig(learning_rate=1e-2, batch_size=8, epochs=2, seed=123),
            policy=POLICY,
        )
        assert state_checksum(backend.text_encoder) == text_before
        assert state_checksum(backend.image_encoder, skip_adapters=True) == image_before
        print("ACCEPTANCE 4 PASS: text encoder and non-adapter image weights unchanged by fit")

    def test_05_zero_init_identity(self):
        plain = ToyBackend(seed=123)
        adapted = ToyBackend(seed=123)
        attach_adapters(adapted.image_encoder, AdapterConfig())
        generator = torch.Generator().manual_seed(300)
        for _ in range(10):
            x = torch.randn(2, 3, 32, 32, generator=generator)
            assert torch.equal(plain.encode_image(x), adapted.encode_image(x))
        print("ACCEPTANCE 5 PASS: freshly attached adapters leave embeddings bit-identical")

    def test_06_average_precision_oracle(self):
        rng = np.random.default_rng(400)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            scores = rng.choice([0.0, 0.2, 0.5, 0.8, 1.0], size=n) + rng.standard_normal(n) * (
                rng.random() < 0.5
            )
            labels = rng.integers(0, 2, size=n)
            if not labels.any():
                labels[int(rng.integers(0, n))] = 1
            got = average_precision(scores, labels)
            expected = brute_force_ap(list(scores), list(labels))
            worst = max(worst, abs(got - expected))
        assert worst < 1e-9, f"worst abs err {worst:.3e}"
        assert average_precision([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)
        print(f"ACCEPTANCE 6 PASS: AP oracle over 1000 random sets (worst err {worst:.2e})")

    def test_07_end_to_end_synthetic_run(self, e2e):
        base, elapsed = e2e
        report = json.loads((base / "run_a" / "eval" / "report.json").read_text())
        assert report["macc_mean"] >= 0.95, f"held-out mAcc {report['macc_mean']:.4f}"

        comparisons = [
            ("ckpt/adapters.pt", "checkpoint adapters"),
            ("ckpt/classifier.pt", "checkpoint classifier"),
            ("ckpt/merged.pt", "merged export"),
            ("ckpt/training_log.jsonl", "loss curve"),
            ("eval/report.json", "metrics report"),
            ("eval/results.jsonl", "per-image results"),
        ]
        for rel_path, label in comparisons:
            a = (base / "run_a" / rel_path).read_bytes()
            b = (base / "run_b" / rel_path).read_bytes()
            assert a == b, f"{label} differs between identical runs"
        assert elapsed < 60.0, f"pipeline took {elapsed:.1f}s"
        print(
            f"ACCEPTANCE 7 PASS: e2e synthetic run (mAcc {report['macc_mean']:.3f}, "
            f"bit-identical reruns, {elapsed:.1f}s for both)"
        )

    def test_08_analysis_suite(self, e2e):
        base, _ = e2e
        checkpoint = load_checkpoint(base / "run_a" / "ckpt")
        backend, classifier = build_model_from_checkpoint(checkpoint, merged=True)
        manifest = read_manifest(base / "run_a" / "scan_holdout" / "manifest.jsonl")

        # Detection-feature logit identity on every evaluated record.
        features = compute_detection_features(manifest, backend, classifier, POLICY)
        assert len(features) == len(manifest)
        weight = classifier.weight_vector.detach().numpy().astype(np.float64)
        bias = float(classifier.bias_value.detach())
        results, _ = predict(manifest, backend, classifier, POLICY)
        logit_by_id = {r.image_id: r.logit for r in results}
        worst = 0.0
        for feature in features:
            direct = feature_logit(feature, bias)
            recomputed = float((feature.vector - bias) @ np.ones_like(weight) + bias)
            assert abs(direct - recomputed) < 1e-12
            worst = max(worst, abs(direct - logit_by_id[feature.image_id]))
        assert worst < 1e-6, f"worst logit identity error {worst:.3e}"

        # Word frequency matches hand counts on a 10-sentence corpus.
        corpus = [
            "A cat laying on top of a wooden table",
            "a picture of a street with a lot of different things",
            "the cat watches a bird",
            "a dog runs across the field",
            "an old street lamp in the fog",
            "a bird above the harbor",
            "the wooden table near a window",
            "a field of flowers at sunset",
            "a street musician with a guitar",
            "the dog sleeps under the table",
        ]
        table = word_frequency(corpus, top_k=15)
        from c2p.analysis import STOPWORDS

        hand = Counter()
        for sentence in corpus:
            for token in sentence.lower().replace(",", " ").split():
                if token not in STOPWORDS:
                    hand[token] += 1
        expected = sorted(hand.items(), key=lambda item: (-item[1], item[0]))[:15]
        assert table.entries == expected, f"{table.entries} != {expected}"

        # K-means recovers three separated blobs; objective is monotone.
        rng = np.random.default_rng(500)
        sigma = 0.05
        means = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
        blob_points = np.concatenate([m + sigma * rng.standard_normal((50, 2)) for m in means])
        clustering = cluster_features(blob_points, k=3, seed=7)
        for mean in means:
            assert np.min(np.linalg.norm(clustering.centers - mean, axis=1)) < sigma
        assert np.all(np.diff(clustering.objective) <= 1e-9)
        print(
            f"ACCEPTANCE 8 PASS: analysis suite (logit identity {worst:.2e}, "
            f"word counts exact, blobs within sigma, objective monotone)"
        )

    def test_09_prompt_consistency_property(self, e2e):
        base, _ = e2e
        manifest = read_manifest(base / "run_a" / "scan" / "manifest.jsonl")
        cache = generate_captions(
            manifest, StubCaptionProvider(), base / "run_a" / "captions" / "captions.jsonl", POLICY
        )
        for pair in (PromptPair("Camera", "Deepfake"), PromptPair("Biden", "Trump")):
            enhanced = enhance_cache(cache, pair)
            assert enhanced
            for item in enhanced.values():
                expected_prefix = pair.p_fake if item.label == 1 else pair.p_real
                other_prefix = pair.p_real if item.label == 1 else pair.p_fake
                assert item.text.startswith(expected_prefix)
                assert not item.text.startswith(other_prefix)
        print("ACCEPTANCE 9 PASS: prompt consistency for (Camera, Deepfake) and (Biden, Trump)")
